//! Attention-map export: per-word and global spatial maps written as
//! grayscale PNGs, max-normalized per map; constant maps render mid-gray.

use std::path::Path;

use crate::config::Config;
use crate::error::Result;
use crate::model::{Generation, Model};
use crate::tensor::{no_grad, Tensor};
use crate::text::{tokenize, TokenSeq, Vocab};

/// Writes one grayscale PNG of a length-N region map at side q.
fn write_map(values: &[f64], q: usize, path: &Path) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut img = image::GrayImage::new(q as u32, q as u32);
    for y in 0..q {
        for x in 0..q {
            let v = values[y * q + x];
            let byte = if hi - lo < 1e-12 { 128 } else { ((v - lo) / (hi - lo) * 255.0).round() as u8 };
            img.put_pixel(x as u32, y as u32, image::Luma([byte]));
        }
    }
    img.save(path).map_err(|e| crate::error::Error::Input(format!("png write {}: {e}", path.display())))?;
    Ok(())
}

/// Exports the generated stage images plus word and global attention maps
/// for one caption. Files:
///   stage{i}.png                  generated image
///   stage{i}_word{token}.png      word map (refinement stages only)
///   stage{i}_global.png           sentence map, if global attention is on
pub fn export_attention(
    model: &Model,
    vocab: &Vocab,
    cfg: &Config,
    caption: &str,
    seed: u64,
    dir: &Path,
) -> Result<Vec<String>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let toks = tokenize(caption, vocab, cfg.sentence_len)?;
    let gen = no_grad(|| {
        let z = Tensor::randn(&mut rng, &[cfg.z_dim], 1.0);
        let e = Tensor::randn(&mut rng, &[cfg.aug_dim], 1.0);
        model.generate(&toks, &z, &e)
    })?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, img) in gen.images.iter().enumerate() {
        let name = format!("stage{i}.png");
        crate::synthdata::image_to_png(img, &dir.join(&name))?;
        written.push(name);
    }
    written.extend(export_maps(&gen, &toks, vocab, cfg, dir)?);
    Ok(written)
}

fn export_maps(gen: &Generation, toks: &TokenSeq, vocab: &Vocab, cfg: &Config, dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    for (k, score_w) in gen.word_scores.iter().enumerate() {
        let stage = k + 1;
        let n = score_w.shape()[1];
        let q = (n as f64).sqrt().round() as usize;
        let rows = score_w.data_vec();
        for t in 0..toks.true_length {
            let word = vocab.token(toks.ids[t]).unwrap_or("unk").to_string();
            let name = format!("stage{stage}_word{word}.png");
            write_map(&rows[t * n..(t + 1) * n], q, &dir.join(&name))?;
            written.push(name);
        }
        if let Some(score_s) = &gen.global_scores[k] {
            // average the per-channel maps into one spatial field
            let m = score_s.shape()[0];
            let d = score_s.data_vec();
            let mut avg = vec![0.0; n];
            for c in 0..m {
                for r in 0..n {
                    avg[r] += d[c * n + r] / m as f64;
                }
            }
            let name = format!("stage{stage}_global.png");
            write_map(&avg, q, &dir.join(&name))?;
            written.push(name);
        }
    }
    let _ = cfg;
    Ok(written)
}
