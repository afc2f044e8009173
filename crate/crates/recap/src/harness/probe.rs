//! Word-substitution probe: swap one attribute word in a caption, generate
//! with identical noise, and check through the oracle whether the image
//! attributes follow the text.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::error::{input_err, Result};
use crate::model::Model;
use crate::synthdata::{classify_image, parse_caption, Color, DetectedScene, Position, SceneSpec, Shape, Size};
use crate::tensor::{no_grad, Tensor};
use crate::text::{tokenize, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Shape,
    Color,
    BgColor,
    Size,
    Position,
}

impl Field {
    pub fn parse(name: &str) -> Result<Field> {
        match name {
            "shape" => Ok(Field::Shape),
            "color" => Ok(Field::Color),
            "bg_color" | "background" => Ok(Field::BgColor),
            "size" => Ok(Field::Size),
            "position" => Ok(Field::Position),
            _ => input_err(format!("unknown field '{name}' (shape|color|bg_color|size|position)")),
        }
    }
}

fn field_word(spec: &SceneSpec, field: Field) -> &'static str {
    match field {
        Field::Shape => spec.shape.word(),
        Field::Color => spec.color.word(),
        Field::BgColor => spec.bg_color.word(),
        Field::Size => spec.size.word(),
        Field::Position => spec.position.word(),
    }
}

/// Rewrites one attribute word in a grammar caption. Colors are
/// disambiguated by position: the background color word is the one the
/// parser attributes to the background.
pub fn swap_field(caption: &str, field: Field, value: &str) -> Result<(String, SceneSpec)> {
    let spec = parse_caption(caption)?;
    let old_word = field_word(&spec, field);
    // validate the target value and build the expected spec
    let mut want = spec;
    match field {
        Field::Shape => want.shape = Shape::from_word(value).ok_or_else(|| bad_value("shape", value))?,
        Field::Color => want.color = Color::from_word(value).ok_or_else(|| bad_value("color", value))?,
        Field::BgColor => want.bg_color = Color::from_word(value).ok_or_else(|| bad_value("color", value))?,
        Field::Size => want.size = Size::from_word(value).ok_or_else(|| bad_value("size", value))?,
        Field::Position => want.position = Position::from_word(value).ok_or_else(|| bad_value("position", value))?,
    }
    if want.color == want.bg_color {
        return input_err("swap would make foreground and background colors collide".to_string());
    }
    // locate the occurrence to rewrite; for colors pick the one the parser
    // assigns to this field (fg vs bg can share no word, so position counts)
    let words: Vec<&str> = caption.split_whitespace().collect();
    let target_idx = match field {
        Field::Color | Field::BgColor => {
            let hits: Vec<usize> = words.iter().enumerate().filter(|(_, w)| **w == old_word).map(|(i, _)| i).collect();
            match hits.len() {
                0 => return input_err(format!("word '{old_word}' not found in caption")),
                1 => hits[0],
                _ => {
                    // try each occurrence; keep the one whose rewrite parses
                    // to the intended spec
                    let mut chosen = None;
                    for &h in &hits {
                        let mut trial: Vec<&str> = words.clone();
                        trial[h] = value;
                        if parse_caption(&trial.join(" ")).ok() == Some(want) {
                            chosen = Some(h);
                            break;
                        }
                    }
                    chosen.ok_or_else(|| {
                        crate::error::Error::Input("no occurrence yields the intended caption".to_string())
                    })?
                }
            }
        }
        _ => words
            .iter()
            .position(|w| *w == old_word)
            .ok_or_else(|| crate::error::Error::Input(format!("word '{old_word}' not found in caption")))?,
    };
    let mut out = words;
    out[target_idx] = value;
    let swapped = out.join(" ");
    let parsed = parse_caption(&swapped)?;
    if parsed != want {
        return input_err(format!("swapped caption '{swapped}' parses to a different scene"));
    }
    Ok((swapped, want))
}

fn bad_value(kind: &str, value: &str) -> crate::error::Error {
    crate::error::Error::Input(format!("'{value}' is not a valid {kind}"))
}

/// Per-field detection before/after one swap.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeTrial {
    pub caption: String,
    pub swapped: String,
    pub field: Field,
    pub new_value: String,
    pub before: DetectedSummary,
    pub after: DetectedSummary,
    /// Did the swapped field take its new value in the output image?
    pub followed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectedSummary {
    pub shape: Option<String>,
    pub color: Option<String>,
    pub bg_color: Option<String>,
    pub size: Option<String>,
    pub position: Option<String>,
}

fn summarize(d: &DetectedScene) -> DetectedSummary {
    DetectedSummary {
        shape: d.shape.map(|v| v.word().to_string()),
        color: d.color.map(|v| v.word().to_string()),
        bg_color: d.bg_color.map(|v| v.word().to_string()),
        size: d.size.map(|v| v.word().to_string()),
        position: d.position.map(|v| v.word().to_string()),
    }
}

fn detected_field(d: &DetectedScene, field: Field) -> Option<String> {
    match field {
        Field::Shape => d.shape.map(|v| v.word().to_string()),
        Field::Color => d.color.map(|v| v.word().to_string()),
        Field::BgColor => d.bg_color.map(|v| v.word().to_string()),
        Field::Size => d.size.map(|v| v.word().to_string()),
        Field::Position => d.position.map(|v| v.word().to_string()),
    }
}

/// One probe: generate from the caption and its swapped variant with the
/// same noise, classify both, report the per-field oracle readout.
pub fn word_swap_probe(
    model: &Model,
    vocab: &Vocab,
    cfg: &Config,
    caption: &str,
    field: Field,
    value: &str,
    seed: u64,
) -> Result<ProbeTrial> {
    let (swapped, _want) = swap_field(caption, field, value)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&mut rng, &[cfg.z_dim], 1.0);
    let e = Tensor::randn(&mut rng, &[cfg.aug_dim], 1.0);
    let gen_img = |text: &str| -> Result<Tensor> {
        let toks = tokenize(text, vocab, cfg.sentence_len)?;
        no_grad(|| Ok(model.generate(&toks, &z, &e)?.images.last().unwrap().clone()))
    };
    let before = classify_image(&gen_img(caption)?);
    let after = classify_image(&gen_img(&swapped)?);
    let followed = detected_field(&after, field).as_deref() == Some(value);
    Ok(ProbeTrial {
        caption: caption.to_string(),
        swapped,
        field,
        new_value: value.to_string(),
        before: summarize(&before),
        after: summarize(&after),
        followed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub trials: Vec<ProbeTrial>,
    /// Fraction of trials where the swapped field followed the text.
    pub follow_rate: f64,
}

/// Batch probe over random captions and random foreground-color swaps.
pub fn color_swap_rate(
    model: &Model,
    vocab: &Vocab,
    cfg: &Config,
    captions: &[String],
    trials: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if captions.is_empty() || trials == 0 {
        return input_err("color_swap_rate: nothing to probe".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    let mut follows = 0;
    for t in 0..trials {
        let caption = &captions[rng.gen_range(0..captions.len())];
        let spec = parse_caption(caption)?;
        let choices: Vec<Color> =
            Color::ALL.iter().copied().filter(|c| *c != spec.color && *c != spec.bg_color).collect();
        let to = choices[rng.gen_range(0..choices.len())];
        let trial = word_swap_probe(model, vocab, cfg, caption, Field::Color, to.word(), seed ^ (t as u64) << 17)?;
        follows += trial.followed as usize;
        out.push(trial);
    }
    Ok(ProbeReport { follow_rate: follows as f64 / trials as f64, trials: out })
}
