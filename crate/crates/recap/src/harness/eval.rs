//! Quantitative evaluation: caption-image retrieval through a linear
//! alignment head fitted in closed form, oracle-based semantic scoring with
//! per-field breakdown, and sample diversity.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::captioner::Captioner;
use crate::config::Config;
use crate::error::{contract_err, input_err, Result};
use crate::model::Model;
use crate::synthdata::{classify_image, semantic_match, Dataset};
use crate::tensor::{no_grad, Tensor};
use crate::text::tokenize;
use crate::text::Vocab;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return input_err(format!("cosine_similarity: lengths {} vs {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Solves A x = b for symmetric positive-definite A (n x n, row major) by
/// Gaussian elimination with partial pivoting.
fn solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-12 {
            return contract_err("alignment solve: singular system".to_string());
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = b[col];
        for c in col + 1..n {
            v -= a[col * n + c] * b[c];
        }
        b[col] = v / a[col * n + col];
    }
    Ok(())
}

/// Linear map from captioner image features to the text-embedding space,
/// fitted by ridge regression over real training pairs.
pub struct AlignmentHead {
    /// [D, E] row major.
    pub w: Vec<f64>,
    pub d: usize,
    pub e: usize,
}

impl AlignmentHead {
    /// Fits W minimizing sum ||W x_i - s_i||^2 + alpha ||W||^2 over pairs of
    /// image features x (length E) and sentence embeddings s (length D).
    pub fn fit(xs: &[Vec<f64>], ss: &[Vec<f64>], alpha: f64) -> Result<AlignmentHead> {
        if xs.is_empty() || xs.len() != ss.len() {
            return input_err(format!("alignment fit: {} features vs {} embeddings", xs.len(), ss.len()));
        }
        let e = xs[0].len();
        let d = ss[0].len();
        // G = X Xᵀ + alpha I  (E x E),  C = S Xᵀ  (D x E)
        let mut g = vec![0.0; e * e];
        for x in xs {
            for i in 0..e {
                for j in 0..e {
                    g[i * e + j] += x[i] * x[j];
                }
            }
        }
        for i in 0..e {
            g[i * e + i] += alpha;
        }
        let mut c = vec![0.0; d * e];
        for (x, s) in xs.iter().zip(ss) {
            for i in 0..d {
                for j in 0..e {
                    c[i * e + j] += s[i] * x[j];
                }
            }
        }
        // each row of W solves G wᵀ = cᵀ
        let mut w = vec![0.0; d * e];
        for row in 0..d {
            let mut a = g.clone();
            let mut b = c[row * e..(row + 1) * e].to_vec();
            solve(&mut a, &mut b, e)?;
            w[row * e..(row + 1) * e].copy_from_slice(&b);
        }
        Ok(AlignmentHead { w, d, e })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for i in 0..self.d {
            for j in 0..self.e {
                out[i] += self.w[i * self.e + j] * x[j];
            }
        }
        out
    }
}

fn sentence_vec(model: &Model, vocab: &Vocab, cfg: &Config, caption: &str) -> Result<Vec<f64>> {
    let toks = tokenize(caption, vocab, cfg.sentence_len)?;
    no_grad(|| Ok(model.encoder.encode(&toks)?.s.data_vec()))
}

fn image_feature(cap: &Captioner, image: &Tensor) -> Result<Vec<f64>> {
    no_grad(|| Ok(cap.encode_image(image)?.data_vec()))
}

/// Fits the alignment head from real rendered images and their captions.
pub fn fit_alignment(
    model: &Model,
    cap: &Captioner,
    data: &Dataset,
    vocab: &Vocab,
    cfg: &Config,
    alpha: f64,
) -> Result<AlignmentHead> {
    let fine = data.records[0].images.len() - 1;
    let mut xs = Vec::new();
    let mut ss = Vec::new();
    for &ri in &data.train_idx {
        let rec = &data.records[ri];
        xs.push(image_feature(cap, &rec.images[fine])?);
        ss.push(sentence_vec(model, vocab, cfg, &rec.captions[0])?);
    }
    AlignmentHead::fit(&xs, &ss, alpha)
}

/// Retrieval accuracy at ranks 1..=max_rank: each test caption's generated
/// image is matched against a pool of `pool` candidate captions (the true
/// one plus distractors); r[k-1] is the fraction where the true caption is
/// within the top k by cosine similarity in the aligned space.
pub fn r_precision(
    model: &Model,
    cap: &Captioner,
    head: &AlignmentHead,
    data: &Dataset,
    vocab: &Vocab,
    cfg: &Config,
    pool: usize,
    max_rank: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if pool < 2 || data.test_idx.len() < pool {
        return input_err(format!("r_precision: pool {} with {} test records", pool, data.test_idx.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; max_rank];
    let n_query = data.test_idx.len();
    for qi in 0..n_query {
        let ri = data.test_idx[qi];
        let rec = &data.records[ri];
        let caption = &rec.captions[0];
        let toks = tokenize(caption, vocab, cfg.sentence_len)?;
        let img = no_grad(|| {
            let z = Tensor::randn(&mut rng, &[cfg.z_dim], 1.0);
            let e = Tensor::randn(&mut rng, &[cfg.aug_dim], 1.0);
            Ok::<_, crate::error::Error>(model.generate(&toks, &z, &e)?.images.last().unwrap().clone())
        })?;
        let q = head.apply(&image_feature(cap, &img)?);
        // candidate pool: the true caption plus pool-1 distinct distractors
        let mut cands = vec![caption.clone()];
        let mut seen = vec![ri];
        while cands.len() < pool {
            let other = data.test_idx[rng.gen_range(0..data.test_idx.len())];
            if seen.contains(&other) {
                continue;
            }
            seen.push(other);
            cands.push(data.records[other].captions[0].clone());
        }
        let mut sims = Vec::with_capacity(pool);
        for (idx, c) in cands.iter().enumerate() {
            let s = sentence_vec(model, vocab, cfg, c)?;
            sims.push((cosine_similarity(&q, &s)?, idx));
        }
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let rank = sims.iter().position(|(_, idx)| *idx == 0).unwrap();
        for k in 0..max_rank {
            if rank <= k {
                hits[k] += 1;
            }
        }
    }
    Ok(hits.iter().map(|h| *h as f64 / n_query as f64).collect())
}

/// Per-field and overall oracle agreement over generated test images.
#[derive(Debug, Clone, Serialize)]
pub struct SemanticReport {
    pub overall: f64,
    pub color: f64,
    pub bg_color: f64,
    pub shape: f64,
    pub size: f64,
    pub position: f64,
    /// Distinct detected attribute tuples / samples.
    pub diversity: f64,
    pub samples: usize,
}

/// Generates one image per selected record and scores it with the exact
/// oracle.
pub fn semantic_score(
    model: &Model,
    data: &Dataset,
    vocab: &Vocab,
    cfg: &Config,
    idx: &[usize],
    seed: u64,
) -> Result<SemanticReport> {
    if idx.is_empty() {
        return input_err("semantic_score: no records selected".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 6];
    let mut distinct = std::collections::HashSet::new();
    for &ri in idx {
        let rec = &data.records[ri];
        let caption = &rec.captions[0];
        let toks = tokenize(caption, vocab, cfg.sentence_len)?;
        let img = no_grad(|| {
            let z = Tensor::randn(&mut rng, &[cfg.z_dim], 1.0);
            let e = Tensor::randn(&mut rng, &[cfg.aug_dim], 1.0);
            Ok::<_, crate::error::Error>(model.generate(&toks, &z, &e)?.images.last().unwrap().clone())
        })?;
        let rep = semantic_match(&img, &rec.spec);
        counts[0] += rep.all_ok() as usize;
        counts[1] += rep.color_ok as usize;
        counts[2] += rep.bg_ok as usize;
        counts[3] += rep.shape_ok as usize;
        counts[4] += rep.size_ok as usize;
        counts[5] += rep.position_ok as usize;
        let det = classify_image(&img);
        distinct.insert(format!("{:?}", (det.color, det.bg_color, det.shape, det.size, det.position)));
    }
    let n = idx.len() as f64;
    Ok(SemanticReport {
        overall: counts[0] as f64 / n,
        color: counts[1] as f64 / n,
        bg_color: counts[2] as f64 / n,
        shape: counts[3] as f64 / n,
        size: counts[4] as f64 / n,
        position: counts[5] as f64 / n,
        diversity: distinct.len() as f64 / n,
        samples: idx.len(),
    })
}

/// Aggregate evaluation output serialized by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub r_at: Vec<f64>,
    pub pool: usize,
    pub semantic: SemanticReport,
}

pub fn evaluate(
    model: &Model,
    cap: &Captioner,
    data: &Dataset,
    vocab: &Vocab,
    cfg: &Config,
    pool: usize,
    seed: u64,
) -> Result<EvalReport> {
    let head = fit_alignment(model, cap, data, vocab, cfg, 1e-3)?;
    let r_at = r_precision(model, cap, &head, data, vocab, cfg, pool, 3, seed)?;
    let semantic = semantic_score(model, data, vocab, cfg, &data.test_idx, seed)?;
    Ok(EvalReport { r_at, pool, semantic })
}
