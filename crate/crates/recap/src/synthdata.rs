//! Procedural image/caption corpus: a single colored shape on a solid
//! background, captions from a fixed invertible template grammar, and an
//! exact semantic oracle that classifies rendered (or generated) images back
//! into scene attributes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const GRAMMAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Left,
    Center,
    Right,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
    pub fn from_word(w: &str) -> Option<Shape> {
        Shape::ALL.iter().copied().find(|s| s.word() == w)
    }
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White, Color::Black];
    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
        }
    }
    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.iter().copied().find(|c| c.word() == w)
    }
    /// RGB in [-1, 1].
    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [-1.0, -1.0, -1.0],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
    pub fn word(&self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
    pub fn from_word(w: &str) -> Option<Size> {
        Size::ALL.iter().copied().find(|s| s.word() == w)
    }
    /// Target canvas area fraction.
    pub fn area(&self) -> f64 {
        match self {
            Size::Small => 0.15,
            Size::Large => 0.40,
        }
    }
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Left, Position::Center, Position::Right];
    pub fn word(&self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Center => "center",
            Position::Right => "right",
        }
    }
    pub fn from_word(w: &str) -> Option<Position> {
        Position::ALL.iter().copied().find(|p| p.word() == w)
    }
    /// Shape center x in unit coordinates.
    pub fn cx(&self) -> f64 {
        match self {
            Position::Left => 0.28,
            Position::Center => 0.5,
            Position::Right => 0.72,
        }
    }
}

/// Ground-truth attributes shared by the renderer, the caption grammar and
/// the semantic oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub bg_color: Color,
    pub size: Size,
    pub position: Position,
}

/// All 540 valid attribute combinations, in a fixed deterministic order.
pub fn enumerate_specs() -> Vec<SceneSpec> {
    let mut out = Vec::with_capacity(540);
    for shape in Shape::ALL {
        for color in Color::ALL {
            for bg_color in Color::ALL {
                if bg_color == color {
                    continue;
                }
                for size in Size::ALL {
                    for position in Position::ALL {
                        out.push(SceneSpec { shape, color, bg_color, size, position });
                    }
                }
            }
        }
    }
    out
}

// ── rendering ────────────────────────────────────────────────────────

fn inside(spec: &SceneSpec, x: f64, y: f64) -> bool {
    let cx = spec.position.cx();
    let cy = 0.5;
    let area = spec.size.area();
    match spec.shape {
        Shape::Circle => {
            let r = (area / std::f64::consts::PI).sqrt();
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        }
        Shape::Square => {
            let half = area.sqrt() / 2.0;
            (x - cx).abs() <= half && (y - cy).abs() <= half
        }
        Shape::Triangle => {
            // isoceles, apex up, base = height = sqrt(2*area)
            let b = (2.0 * area).sqrt();
            let top = cy - b / 2.0;
            if y < top || y > cy + b / 2.0 {
                return false;
            }
            let frac = (y - top) / b;
            (x - cx).abs() <= frac * b / 2.0
        }
    }
}

/// Deterministic rasterization of a spec at side q, values in [-1, 1].
///
/// Pixels are averaged over a fixed 256-wide virtual sample grid whenever q
/// divides 256, so lower pyramid levels equal exact area downsamples of
/// higher ones by construction.
pub fn render_scene(spec: &SceneSpec, q: usize) -> Result<Tensor> {
    if q < 8 {
        return input_err(format!("render_scene: side {} below minimum 8", q));
    }
    let s = if 256 % q == 0 { 256 / q } else { 4 };
    let fg = spec.color.rgb();
    let bg = spec.bg_color.rgb();
    let mut data = vec![0.0; 3 * q * q];
    let inv = 1.0 / (q * s) as f64;
    for py in 0..q {
        for px in 0..q {
            let mut cov = 0.0;
            for sy in 0..s {
                for sx in 0..s {
                    let x = ((px * s + sx) as f64 + 0.5) * inv;
                    let y = ((py * s + sy) as f64 + 0.5) * inv;
                    if inside(spec, x, y) {
                        cov += 1.0;
                    }
                }
            }
            cov /= (s * s) as f64;
            for c in 0..3 {
                data[c * q * q + py * q + px] = bg[c] + cov * (fg[c] - bg[c]);
            }
        }
    }
    Tensor::from_vec(&[3, q, q], data)
}

/// 2x area downsample of a [3, q, q] image.
pub fn downsample2x(image: &Tensor) -> Tensor {
    let q = image.shape()[1];
    let h = q / 2;
    let src = image.data_vec();
    let mut out = vec![0.0; 3 * h * h];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..h {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += src[c * q * q + (2 * y + dy) * q + 2 * x + dx];
                    }
                }
                out[c * h * h + y * h + x] = s / 4.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, h], out).unwrap()
}

// ── caption grammar ──────────────────────────────────────────────────

pub const TEMPLATE_COUNT: usize = 5;

/// Deterministic caption from template `k`.
pub fn caption_template(spec: &SceneSpec, k: usize) -> String {
    let (sz, co, sh, pos, bg) = (
        spec.size.word(),
        spec.color.word(),
        spec.shape.word(),
        spec.position.word(),
        spec.bg_color.word(),
    );
    match k % TEMPLATE_COUNT {
        0 => format!("a {sz} {co} {sh} on the {pos} of a {bg} background"),
        1 => format!("a {sz} {co} {sh} at the {pos} on a {bg} background"),
        2 => format!("on the {pos} a {sz} {co} {sh} against a {bg} background"),
        3 => format!("a {bg} background with a {sz} {co} {sh} at the {pos}"),
        _ => format!("a {bg} backdrop holding a {sz} {co} {sh} at the {pos}"),
    }
}

/// One caption drawn uniformly over the template set.
pub fn sample_caption(spec: &SceneSpec, rng: &mut impl Rng) -> String {
    caption_template(spec, rng.gen_range(0..TEMPLATE_COUNT))
}

/// Attribute fields recovered from free text; `None` marks a field the
/// best-effort parser could not find.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartialSpec {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub bg_color: Option<Color>,
    pub size: Option<Size>,
    pub position: Option<Position>,
}

impl PartialSpec {
    pub fn complete(&self) -> Option<SceneSpec> {
        Some(SceneSpec {
            shape: self.shape?,
            color: self.color?,
            bg_color: self.bg_color?,
            size: self.size?,
            position: self.position?,
        })
    }
}

/// Best-effort field extraction: colors are disambiguated by adjacency to a
/// background marker word; fields not found stay absent rather than guessed.
pub fn parse_caption_partial(caption: &str) -> PartialSpec {
    let norm = crate::text::normalize(caption);
    let words: Vec<&str> = norm.split_whitespace().collect();
    let mut out = PartialSpec::default();
    let mut colors: Vec<(usize, Color)> = Vec::new();
    let mut marker: Option<usize> = None;
    for (i, w) in words.iter().enumerate() {
        if let Some(s) = Shape::from_word(w) {
            out.shape.get_or_insert(s);
        }
        if let Some(s) = Size::from_word(w) {
            out.size.get_or_insert(s);
        }
        if let Some(p) = Position::from_word(w) {
            out.position.get_or_insert(p);
        }
        if let Some(c) = Color::from_word(w) {
            colors.push((i, c));
        }
        if *w == "background" || *w == "backdrop" || *w == "scene" {
            marker.get_or_insert(i);
        }
    }
    match (colors.len(), marker) {
        (1, _) => out.color = Some(colors[0].1),
        (n, Some(m)) if n >= 2 => {
            // the color nearest the marker is the background
            let (bi, _) = colors
                .iter()
                .enumerate()
                .min_by_key(|(_, (i, _))| m.abs_diff(*i))
                .map(|(idx, (i, _))| (idx, *i))
                .unwrap();
            out.bg_color = Some(colors[bi].1);
            out.color = colors.iter().enumerate().find(|(idx, _)| *idx != bi).map(|(_, (_, c))| *c);
        }
        (n, None) if n >= 2 => {
            // no marker: assume foreground first, background second
            out.color = Some(colors[0].1);
            out.bg_color = Some(colors[1].1);
        }
        _ => {}
    }
    out
}

/// Strict inverse of the grammar: errors if any field is missing or colors
/// collide.
pub fn parse_caption(caption: &str) -> Result<SceneSpec> {
    let p = parse_caption_partial(caption);
    let missing = |field: &str, pos: usize| Error::Parse { pos, msg: format!("missing {}", field) };
    let spec = SceneSpec {
        shape: p.shape.ok_or_else(|| missing("shape", 0))?,
        color: p.color.ok_or_else(|| missing("color", 0))?,
        bg_color: p.bg_color.ok_or_else(|| missing("background color", 0))?,
        size: p.size.ok_or_else(|| missing("size", 0))?,
        position: p.position.ok_or_else(|| missing("position", 0))?,
    };
    if spec.color == spec.bg_color {
        return Err(Error::Parse { pos: 0, msg: "foreground and background colors collide".to_string() });
    }
    Ok(spec)
}

/// Every word the grammar can emit, in a fixed order.
pub fn grammar_vocab() -> Vocab {
    let mut words: Vec<String> = ["a", "on", "the", "of", "at", "against", "with", "background", "backdrop", "holding"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for s in Shape::ALL {
        words.push(s.word().to_string());
    }
    for c in Color::ALL {
        words.push(c.word().to_string());
    }
    for s in Size::ALL {
        words.push(s.word().to_string());
    }
    for p in Position::ALL {
        words.push(p.word().to_string());
    }
    Vocab::from_tokens(words)
}

// ── semantic oracle ──────────────────────────────────────────────────

/// Field-by-field verdict of the oracle classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchReport {
    pub color_ok: bool,
    pub bg_ok: bool,
    pub shape_ok: bool,
    pub size_ok: bool,
    pub position_ok: bool,
    pub detected: DetectedScene,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectedScene {
    pub color: Option<Color>,
    pub bg_color: Option<Color>,
    pub shape: Option<Shape>,
    pub size: Option<Size>,
    pub position: Option<Position>,
}

impl MatchReport {
    pub fn all_ok(&self) -> bool {
        self.color_ok && self.bg_ok && self.shape_ok && self.size_ok && self.position_ok
    }
}

fn nearest_color(rgb: [f64; 3]) -> Color {
    let mut best = Color::Red;
    let mut best_d = f64::INFINITY;
    for c in Color::ALL {
        let p = c.rgb();
        let d: f64 = (0..3).map(|i| (rgb[i] - p[i]).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Classifies an image's dominant scene attributes. Background is the
/// majority palette color on the border ring; foreground is the majority
/// color over non-background pixels.
pub fn classify_image(image: &Tensor) -> DetectedScene {
    let q = image.shape()[1];
    let d = image.data_vec();
    let px = |x: usize, y: usize| -> [f64; 3] { [d[y * q + x], d[q * q + y * q + x], d[2 * q * q + y * q + x]] };
    let labels: Vec<Color> = (0..q * q).map(|i| nearest_color(px(i % q, i / q))).collect();
    // background from the border ring
    let ring = (q / 16).max(1);
    let mut border_counts: BTreeMap<Color, usize> = BTreeMap::new();
    for y in 0..q {
        for x in 0..q {
            if x < ring || y < ring || x >= q - ring || y >= q - ring {
                *border_counts.entry(labels[y * q + x]).or_default() += 1;
            }
        }
    }
    let bg = border_counts.iter().max_by_key(|(_, n)| **n).map(|(c, _)| *c);
    let Some(bg) = bg else {
        return DetectedScene { color: None, bg_color: None, shape: None, size: None, position: None };
    };
    // foreground mask
    let mut fg_counts: BTreeMap<Color, usize> = BTreeMap::new();
    let mut mask = vec![false; q * q];
    for i in 0..q * q {
        if labels[i] != bg {
            mask[i] = true;
            *fg_counts.entry(labels[i]).or_default() += 1;
        }
    }
    let fg_total: usize = fg_counts.values().sum();
    if fg_total < q * q / 100 {
        return DetectedScene { color: None, bg_color: Some(bg), shape: None, size: None, position: None };
    }
    let fg = fg_counts.iter().max_by_key(|(_, n)| **n).map(|(c, _)| *c).unwrap();
    // restrict geometry to the dominant foreground color
    let mut n_fg = 0usize;
    let mut sx = 0.0f64;
    let (mut x0, mut x1, mut y0, mut y1) = (q, 0usize, q, 0usize);
    for y in 0..q {
        for x in 0..q {
            if mask[y * q + x] && labels[y * q + x] == fg {
                n_fg += 1;
                sx += x as f64 + 0.5;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    let occupancy = n_fg as f64 / (q * q) as f64;
    let size = if occupancy >= 0.26 { Size::Large } else { Size::Small };
    let cx = sx / n_fg as f64 / q as f64;
    let position = if cx < 0.39 {
        Position::Left
    } else if cx > 0.61 {
        Position::Right
    } else {
        Position::Center
    };
    let bbox = ((x1 + 1 - x0) * (y1 + 1 - y0)) as f64;
    let fill = n_fg as f64 / bbox;
    let shape = if fill >= 0.89 {
        Shape::Square
    } else if fill <= 0.64 {
        Shape::Triangle
    } else {
        Shape::Circle
    };
    DetectedScene { color: Some(fg), bg_color: Some(bg), shape: Some(shape), size: Some(size), position: Some(position) }
}

/// True iff the image realizes every attribute of the spec, with a
/// per-field report.
pub fn semantic_match(image: &Tensor, spec: &SceneSpec) -> MatchReport {
    let det = classify_image(image);
    MatchReport {
        color_ok: det.color == Some(spec.color),
        bg_ok: det.bg_color == Some(spec.bg_color),
        shape_ok: det.shape == Some(spec.shape),
        size_ok: det.size == Some(spec.size),
        position_ok: det.position == Some(spec.position),
        detected: det,
    }
}

// ── corpus on disk ───────────────────────────────────────────────────

/// One record: spec, ground-truth image pyramid, and K paraphrase captions.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub spec: SceneSpec,
    /// Images from coarse to fine (q_0 .. q_{m-1}).
    pub images: Vec<Tensor>,
    pub captions: Vec<String>,
}

pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    seed: u64,
    grammar_version: u32,
    paraphrases: usize,
    sides: Vec<usize>,
    train: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    caption: String,
    spec: SceneSpec,
}

fn record_dir_name(i: usize) -> String {
    format!("spec_{i:03}")
}

pub fn image_to_png(image: &Tensor, path: &Path) -> Result<()> {
    let q = image.shape()[1];
    let d = image.data_vec();
    let mut img = image::RgbImage::new(q as u32, q as u32);
    for y in 0..q {
        for x in 0..q {
            let p = [0, 1, 2].map(|c| {
                let v = (d[c * q * q + y * q + x] + 1.0) / 2.0;
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(p));
        }
    }
    img.save(path).map_err(|e| Error::Input(format!("png write {}: {e}", path.display())))?;
    Ok(())
}

pub fn png_to_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Input(format!("png read {}: {e}", path.display())))?.to_rgb8();
    let q = img.width() as usize;
    let mut data = vec![0.0; 3 * q * q];
    for y in 0..q {
        for x in 0..q {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * q * q + y * q + x] = p[c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Tensor::from_vec(&[3, q, q], data)
}

/// Generates the full 540-spec corpus: images rendered at the top side with
/// area-downsampled pyramid levels, K captions per record, and a train/test
/// split by spec.
pub fn generate_dataset(sides: &[usize], paraphrases: usize, seed: u64) -> Dataset {
    let specs = enumerate_specs();
    let top = *sides.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(specs.len());
    for spec in &specs {
        let top_img = render_scene(spec, top).expect("side >= 8");
        let mut images = vec![top_img];
        for _ in 1..sides.len() {
            let next = downsample2x(images.last().unwrap());
            images.push(next);
        }
        images.reverse(); // coarse to fine
        // first caption cycles templates deterministically, the rest sample
        let mut captions = Vec::with_capacity(paraphrases);
        for k in 0..paraphrases {
            if k < TEMPLATE_COUNT {
                captions.push(caption_template(spec, k));
            } else {
                captions.push(sample_caption(spec, &mut rng));
            }
        }
        records.push(DatasetRecord { spec: *spec, images, captions });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_test = records.len() / 5 - 8; // 100 of 540
    let test_idx: Vec<usize> = order[..n_test].to_vec();
    let train_idx: Vec<usize> = order[n_test..].to_vec();
    Dataset { records, train_idx, test_idx, seed }
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let sides: Vec<usize> = self.records[0].images.iter().map(|t| t.shape()[1]).collect();
        for (i, rec) in self.records.iter().enumerate() {
            let rdir = dir.join(record_dir_name(i));
            std::fs::create_dir_all(&rdir)?;
            for img in &rec.images {
                let q = img.shape()[1];
                image_to_png(img, &rdir.join(format!("image_{q}.png")))?;
            }
            let mut lines = String::new();
            for c in &rec.captions {
                let line = CaptionLine { caption: c.clone(), spec: rec.spec };
                lines.push_str(&serde_json::to_string(&line).unwrap());
                lines.push('\n');
            }
            std::fs::write(rdir.join("captions.jsonl"), lines)?;
        }
        let manifest = CorpusManifest {
            seed: self.seed,
            grammar_version: GRAMMAR_VERSION,
            paraphrases: self.records[0].captions.len(),
            sides,
            train: self.train_idx.iter().map(|i| record_dir_name(*i)).collect(),
            test: self.test_idx.iter().map(|i| record_dir_name(*i)).collect(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Input(format!("corpus manifest: {e}")))?;
        let mut names: Vec<String> = manifest.train.iter().chain(manifest.test.iter()).cloned().collect();
        names.sort();
        let mut records = Vec::with_capacity(names.len());
        let mut name_to_idx = BTreeMap::new();
        for name in &names {
            let rdir = dir.join(name);
            let mut images = Vec::new();
            for q in &manifest.sides {
                images.push(png_to_image(&rdir.join(format!("image_{q}.png")))?);
            }
            let text = std::fs::read_to_string(rdir.join("captions.jsonl"))?;
            let mut captions = Vec::new();
            let mut spec = None;
            for line in text.lines() {
                let cl: CaptionLine = serde_json::from_str(line).map_err(|e| Error::Input(format!("caption line: {e}")))?;
                captions.push(cl.caption);
                spec = Some(cl.spec);
            }
            let spec = spec.ok_or_else(|| Error::Input(format!("{name}: no captions")))?;
            name_to_idx.insert(name.clone(), records.len());
            records.push(DatasetRecord { spec, images, captions });
        }
        let train_idx = manifest.train.iter().map(|n| name_to_idx[n]).collect();
        let test_idx = manifest.test.iter().map(|n| name_to_idx[n]).collect();
        Ok(Dataset { records, train_idx, test_idx, seed: manifest.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_deterministic_and_pure_colors() {
        let spec = SceneSpec {
            shape: Shape::Circle,
            color: Color::Red,
            bg_color: Color::Blue,
            size: Size::Large,
            position: Position::Center,
        };
        let a = render_scene(&spec, 32).unwrap();
        let b = render_scene(&spec, 32).unwrap();
        assert_eq!(a.data_vec(), b.data_vec());
        let d = a.data_vec();
        let q = 32;
        // center pixel pure red, corner pure blue
        let center = 16 * q + 16;
        assert_eq!([d[center], d[q * q + center], d[2 * q * q + center]], [1.0, -1.0, -1.0]);
        assert_eq!([d[0], d[q * q], d[2 * q * q]], [-1.0, -1.0, 1.0]);
        assert!(render_scene(&spec, 4).is_err());
    }

    #[test]
    fn pyramid_is_exact_area_downsample() {
        let spec = SceneSpec {
            shape: Shape::Triangle,
            color: Color::Yellow,
            bg_color: Color::Black,
            size: Size::Small,
            position: Position::Left,
        };
        let hi = render_scene(&spec, 64).unwrap();
        let down = downsample2x(&downsample2x(&hi));
        let direct = render_scene(&spec, 16).unwrap();
        for (a, b) in down.data_vec().iter().zip(direct.data_vec()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn grammar_roundtrip_exhaustive() {
        for spec in enumerate_specs() {
            for k in 0..TEMPLATE_COUNT {
                let c = caption_template(&spec, k);
                let parsed = parse_caption(&c).unwrap_or_else(|e| panic!("template {k} '{c}': {e}"));
                assert_eq!(parsed, spec, "template {k}: '{c}'");
            }
        }
    }

    #[test]
    fn caption_sampling_covers_all_templates() {
        use rand::SeedableRng;
        let spec = enumerate_specs()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            seen.insert(sample_caption(&spec, &mut rng));
        }
        assert_eq!(seen.len(), TEMPLATE_COUNT);
        // fixed seed -> fixed caption
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(sample_caption(&spec, &mut r1), sample_caption(&spec, &mut r2));
    }

    #[test]
    fn parse_direct_and_best_effort() {
        let s = parse_caption("a small red circle on the left of a blue background").unwrap();
        assert_eq!(s.shape, Shape::Circle);
        assert_eq!(s.color, Color::Red);
        assert_eq!(s.size, Size::Small);
        // best-effort: missing position reported absent
        let p = parse_caption_partial("a small red circle on a blue background");
        assert_eq!(p.position, None);
        assert_eq!(p.color, Some(Color::Red));
        assert!(parse_caption("a small red circle on a blue background").is_err());
    }

    #[test]
    fn oracle_self_consistent_exhaustive() {
        let mut failures = Vec::new();
        for spec in enumerate_specs() {
            let img = render_scene(&spec, 64).unwrap();
            let rep = semantic_match(&img, &spec);
            if !rep.all_ok() {
                failures.push((spec, rep));
            }
        }
        assert!(failures.is_empty(), "oracle failures: {:?}", &failures[..failures.len().min(5)]);
    }

    #[test]
    fn oracle_flags_color_flip() {
        let spec = SceneSpec {
            shape: Shape::Square,
            color: Color::Red,
            bg_color: Color::Blue,
            size: Size::Large,
            position: Position::Center,
        };
        let img = render_scene(&spec, 64).unwrap();
        let mut wrong = spec;
        wrong.color = Color::Green;
        let rep = semantic_match(&img, &wrong);
        assert!(!rep.color_ok);
        assert!(rep.bg_ok && rep.shape_ok);
    }

    #[test]
    fn oracle_rejects_noise_images() {
        use rand::SeedableRng;
        let spec = enumerate_specs()[0];
        let mut fails = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::randn(&mut rng, &[3, 64, 64], 0.7).clamp(-1.0, 1.0);
            if !semantic_match(&img, &spec).all_ok() {
                fails += 1;
            }
        }
        assert!(fails >= 99, "only {fails}/100 noise images rejected");
    }

    #[test]
    fn dataset_deterministic_and_roundtrips() {
        let d1 = generate_dataset(&[16, 32], 3, 42);
        let d2 = generate_dataset(&[16, 32], 3, 42);
        assert_eq!(d1.train_idx, d2.train_idx);
        assert_eq!(d1.records.len(), 540);
        assert_eq!(d1.test_idx.len(), 100);
        for (a, b) in d1.records.iter().zip(&d2.records) {
            assert_eq!(a.captions, b.captions);
            assert_eq!(a.images[0].data_vec(), b.images[0].data_vec());
        }
        // every caption parses back to its spec
        for rec in d1.records.iter().step_by(97) {
            for c in &rec.captions {
                assert_eq!(parse_caption(c).unwrap(), rec.spec);
            }
        }
    }
}
