//! Word-level and sentence-level attention over visual feature regions, and
//! their fusion into the next cascade stage's input.

use crate::error::{dim_err, input_err, Result};
use crate::tensor::Tensor;

/// Per-stage projections into the visual feature space.
pub struct AttnProjection {
    pub u: Tensor, // [M, D]
    pub v: Tensor, // [M, D']
}

impl AttnProjection {
    pub fn new(rng: &mut impl rand::Rng, m: usize, d: usize, dp: usize) -> AttnProjection {
        AttnProjection {
            u: Tensor::param_randn(rng, &[m, d], 1.0 / (d as f64).sqrt()),
            v: Tensor::param_randn(rng, &[m, dp], 1.0 / (dp as f64).sqrt()),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.u"), self.u.clone()), (format!("{prefix}.v"), self.v.clone())]
    }
}

/// att_w = sum_l (U w^l) softmax(f^T (U w^l))^T over non-PAD words.
///
/// Default normalization is over the N region axis per word, as the formula
/// reads; `softmax_over_words` switches to normalizing across words per
/// region for the ablation variant. Returns the attended feature [M, N] and
/// the retained region scores [L, N] (PAD rows zero).
pub fn word_attention(
    f: &Tensor,
    w: &Tensor,
    u: &Tensor,
    mask: usize,
    softmax_over_words: bool,
) -> Result<(Tensor, Tensor)> {
    if f.shape().len() != 2 || w.shape().len() != 2 || u.shape().len() != 2 {
        return dim_err("word_attention: f, w, U must be matrices".to_string());
    }
    let (m, n) = (f.shape()[0], f.shape()[1]);
    let (d, l) = (w.shape()[0], w.shape()[1]);
    if u.shape() != [m, d] {
        return dim_err(format!("word_attention: U {:?} vs f {:?} and w {:?}", u.shape(), f.shape(), w.shape()));
    }
    if mask == 0 {
        return input_err("word_attention: mask must cover at least one word");
    }
    if mask > l {
        return dim_err(format!("word_attention: mask {} exceeds L={}", mask, l));
    }
    let uw = u.matmul(w)?; // [M, L]
    let ft = f.t(); // [N, M]
    let mut per_word: Vec<Tensor> = Vec::with_capacity(mask); // projected word features, [M]
    let mut raw_scores: Vec<Tensor> = Vec::with_capacity(mask); // [1, N]
    for word in 0..mask {
        let a = uw.col(word); // [M]
        let scores = ft.matmul(&a)?; // [N]
        per_word.push(a);
        raw_scores.push(scores.reshape(&[1, n])?);
    }
    let score_rows: Vec<Tensor> = if softmax_over_words {
        let refs: Vec<&Tensor> = raw_scores.iter().collect();
        let sm = Tensor::concat_rows(&refs)?.softmax_axis(0)?; // [mask, N], per-region over words
        (0..mask).map(|i| sm.slice_rows(i, i + 1)).collect()
    } else {
        raw_scores
            .iter()
            .map(|r| r.softmax_axis(1))
            .collect::<Result<Vec<_>>>()?
    };
    let mut att: Option<Tensor> = None;
    for (a, sm) in per_word.iter().zip(&score_rows) {
        let contrib = a.reshape(&[m, 1])?.matmul(sm)?; // [M, N]
        att = Some(match att {
            Some(acc) => acc.add(&contrib),
            None => contrib,
        });
    }
    let att = att.unwrap();
    let mut viz_rows: Vec<Tensor> = score_rows;
    for _ in mask..l {
        viz_rows.push(Tensor::zeros(&[1, n]));
    }
    let refs: Vec<&Tensor> = viz_rows.iter().collect();
    let score_w = Tensor::concat_rows(&refs)?; // [L, N]
    Ok((att, score_w))
}

/// att_s = (V s_ca) ∘ softmax(f ∘ (V s_ca)), the projected sentence vector
/// broadcast across the N region columns, normalized along regions per row.
pub fn sentence_attention(f: &Tensor, s_ca: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if f.shape().len() != 2 {
        return dim_err("sentence_attention: f must be a matrix".to_string());
    }
    let m = f.shape()[0];
    if v.shape().len() != 2 || v.shape()[0] != m || v.shape()[1] != s_ca.numel() {
        return dim_err(format!("sentence_attention: V {:?} vs f {:?} and s_ca {:?}", v.shape(), f.shape(), s_ca.shape()));
    }
    let vs = v.matmul(s_ca)?; // [M]
    let score_s = f.colvec_mul(&vs)?.softmax_axis(1)?; // [M, N]
    let att_s = score_s.colvec_mul(&vs)?;
    Ok((att_s, score_s))
}

/// Channel-axis concatenation [f; att_w; att_s] (att_s optional when global
/// attention is disabled).
pub fn glam_fuse(f: &Tensor, att_w: &Tensor, att_s: Option<&Tensor>) -> Result<Tensor> {
    let n = f.shape()[1];
    if att_w.shape() != f.shape() {
        return dim_err(format!("glam_fuse: att_w {:?} vs f {:?}", att_w.shape(), f.shape()));
    }
    if let Some(a) = att_s {
        if a.shape()[1] != n {
            return dim_err(format!("glam_fuse: att_s has {} columns, f has {}", a.shape()[1], n));
        }
        Tensor::concat_rows(&[f, att_w, a])
    } else {
        Tensor::concat_rows(&[f, att_w])
    }
}
