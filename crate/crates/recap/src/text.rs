//! Caption tokenization, the recurrent text encoder producing word and
//! sentence features, and conditioning augmentation of the sentence vector.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::config::Config;
use crate::error::{dim_err, input_err, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

/// Dense token <-> id map with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    map: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut tokens: Vec<String> = ["<pad>", "<start>", "<end>", "<unk>"].iter().map(|s| s.to_string()).collect();
        let mut map: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for w in words {
            if !map.contains_key(&w) {
                map.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocab { tokens, map }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.map.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|s| s.to_string()).collect();
        if tokens.get(PAD).map(String::as_str) != Some("<pad>") {
            return input_err("vocab file does not start with reserved tokens");
        }
        let map = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Vocab { tokens, map })
    }
}

/// Fixed-length padded token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

pub fn normalize(caption: &str) -> String {
    caption
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect()
}

/// Truncates or PAD-pads to exactly `len` tokens; unknown words map to UNK.
pub fn tokenize(caption: &str, vocab: &Vocab, len: usize) -> Result<TokenSeq> {
    let norm = normalize(caption);
    let words: Vec<&str> = norm.split_whitespace().collect();
    if words.is_empty() {
        return input_err("empty caption");
    }
    let mut ids: Vec<usize> = words.iter().take(len).map(|w| vocab.id(w).unwrap_or(UNK)).collect();
    let true_length = ids.len();
    ids.resize(len, PAD);
    Ok(TokenSeq { ids, true_length })
}

/// Like `tokenize` but appends END inside the window; used by the captioner
/// so greedy decoding has a learnable stop symbol.
pub fn tokenize_with_end(caption: &str, vocab: &Vocab, len: usize) -> Result<TokenSeq> {
    let norm = normalize(caption);
    let words: Vec<&str> = norm.split_whitespace().collect();
    if words.is_empty() {
        return input_err("empty caption");
    }
    let mut ids: Vec<usize> = words.iter().take(len - 1).map(|w| vocab.id(w).unwrap_or(UNK)).collect();
    ids.push(END);
    let true_length = ids.len();
    ids.resize(len, PAD);
    Ok(TokenSeq { ids, true_length })
}

/// Word feature matrix w (D x L) and sentence vector s (D).
pub struct TextEmbedding {
    pub w: Tensor,
    pub s: Tensor,
    pub true_length: usize,
}

/// Reparameterized Gaussian sample around the sentence embedding.
pub struct AugmentedSentence {
    pub s_ca: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

pub struct LstmCell {
    pub w: Tensor, // [4H, in + H]
    pub b: Tensor, // [4H]
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize) -> LstmCell {
        let std = 1.0 / ((input + hidden) as f64).sqrt();
        let w = Tensor::param_randn(rng, &[4 * hidden, input + hidden], std);
        // forget-gate bias starts at 1
        let mut b = vec![0.0; 4 * hidden];
        for v in b.iter_mut().skip(hidden).take(hidden) {
            *v = 1.0;
        }
        LstmCell { w, b: Tensor::param(&[4 * hidden], b), hidden }
    }

    /// One step: x [in], h [H], c [H] -> (h', c').
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let hn = self.hidden;
        let xin = Tensor::concat_rows(&[x, h])?;
        let gates = self.w.matmul(&xin)?.reshape(&[4 * hn])?.add(&self.b).reshape(&[4 * hn, 1])?;
        let i = gates.slice_rows(0, hn).sigmoid();
        let f = gates.slice_rows(hn, 2 * hn).sigmoid();
        let g = gates.slice_rows(2 * hn, 3 * hn).tanh();
        let o = gates.slice_rows(3 * hn, 4 * hn).sigmoid();
        let c2 = f.mul(&c.reshape(&[hn, 1])?).add(&i.mul(&g));
        let h2 = o.mul(&c2.tanh());
        Ok((h2.reshape(&[hn])?, c2.reshape(&[hn])?))
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.w"), self.w.clone()), (format!("{prefix}.b"), self.b.clone())]
    }
}

/// Recurrent caption encoder. In bidirectional mode each direction carries
/// half of D and per-step states are concatenated; s concatenates the two
/// final states.
pub struct TextEncoder {
    pub embed: Tensor, // [V, token_embed_dim]
    pub fwd: LstmCell,
    pub bwd: Option<LstmCell>,
    pub text_dim: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(rng: &mut impl Rng, cfg: &Config, vocab_size: usize) -> TextEncoder {
        let emb = cfg.token_embed_dim;
        let d = cfg.text_dim;
        let embed = Tensor::param_randn(rng, &[vocab_size, emb], 0.1);
        if cfg.bidirectional {
            assert!(d % 2 == 0, "text_dim must be even in bidirectional mode");
            TextEncoder {
                embed,
                fwd: LstmCell::new(rng, emb, d / 2),
                bwd: Some(LstmCell::new(rng, emb, d / 2)),
                text_dim: d,
                vocab_size,
            }
        } else {
            TextEncoder { embed, fwd: LstmCell::new(rng, emb, d), bwd: None, text_dim: d, vocab_size }
        }
    }

    /// Encodes a padded sequence into w (D x L) and s (D). Columns beyond
    /// `true_length` are zero so attention never sees PAD content.
    pub fn encode(&self, t: &TokenSeq) -> Result<TextEmbedding> {
        for &id in &t.ids {
            if id >= self.vocab_size {
                return input_err(format!("token id {} outside vocabulary of {}", id, self.vocab_size));
            }
        }
        let l = t.ids.len();
        let tl = t.true_length;
        if tl == 0 || tl > l {
            return input_err(format!("true_length {} invalid for L={}", tl, l));
        }
        let xs = self.embed.gather_rows(&t.ids[..tl])?; // [tl, emb]
        let emb = xs.shape()[1];
        let step_in = |row: usize| xs.slice_rows(row, row + 1).reshape(&[emb]);

        let run = |cell: &LstmCell, order: &[usize]| -> Result<Vec<Tensor>> {
            let mut h = Tensor::zeros(&[cell.hidden]);
            let mut c = Tensor::zeros(&[cell.hidden]);
            let mut states = vec![Tensor::zeros(&[cell.hidden]); tl];
            for &pos in order {
                let (h2, c2) = cell.step(&step_in(pos)?, &h, &c)?;
                states[pos] = h2.clone();
                h = h2;
                c = c2;
            }
            Ok(states)
        };

        let fwd_order: Vec<usize> = (0..tl).collect();
        let fwd_states = run(&self.fwd, &fwd_order)?;
        let (cols, s): (Vec<Tensor>, Tensor) = match &self.bwd {
            Some(bwd) => {
                let bwd_order: Vec<usize> = (0..tl).rev().collect();
                let bwd_states = run(bwd, &bwd_order)?;
                let cols = (0..tl)
                    .map(|i| Tensor::concat_rows(&[&fwd_states[i], &bwd_states[i]]))
                    .collect::<Result<Vec<_>>>()?;
                let s = Tensor::concat_rows(&[&fwd_states[tl - 1], &bwd_states[0]])?.reshape(&[self.text_dim])?;
                (cols, s)
            }
            None => (fwd_states.clone(), fwd_states[tl - 1].clone()),
        };
        // Unit-normalize the sentence vector: raw LSTM states come out with
        // norm ~0.2, which leaves downstream conditioning drowned by the
        // augmentation noise and the discriminator's visual features.
        let s = {
            let inv = s.mul(&s).sum().add_scalar(1e-8).ln().scale(-0.5).exp();
            s.reshape(&[1, self.text_dim])?.colvec_mul(&inv)?.reshape(&[self.text_dim])?
        };
        // Assemble D x L with zero PAD columns by concatenating [tl, D] rows
        // then transposing; PAD columns appended as zeros.
        let mut rows: Vec<Tensor> = Vec::with_capacity(l);
        for col in cols {
            rows.push(col.reshape(&[1, self.text_dim])?);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        let stacked = Tensor::concat_rows(&refs)?; // [tl, D]
        let mut w = stacked.t(); // [D, tl]
        if tl < l {
            let padcols = Tensor::zeros(&[self.text_dim, l - tl]);
            w = concat_cols(&w, &padcols)?;
        }
        Ok(TextEmbedding { w, s, true_length: tl })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut p = vec![("stem.embed".to_string(), self.embed.clone())];
        p.extend(self.fwd.params("stem.fwd"));
        if let Some(b) = &self.bwd {
            p.extend(b.params("stem.bwd"));
        }
        p
    }
}

/// [D, a] ++ [D, b] -> [D, a+b] along columns.
fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::concat_rows(&[&a.t(), &b.t()]).map(|t| t.t())
}

/// Affine map from s to (mu, logvar) with a reparameterized sample.
pub struct CondAugment {
    pub w: Tensor, // [2D', D]
    pub b: Tensor, // [2D']
    pub aug_dim: usize,
}

impl CondAugment {
    pub fn new(rng: &mut impl Rng, cfg: &Config) -> CondAugment {
        // Larger mean head and a negative log-variance bias keep the
        // caption signal above the reparameterization noise early on.
        let std = 2.0 / (cfg.text_dim as f64).sqrt();
        let mut b = vec![0.0; 2 * cfg.aug_dim];
        b[cfg.aug_dim..].fill(-2.0);
        CondAugment {
            w: Tensor::param_randn(rng, &[2 * cfg.aug_dim, cfg.text_dim], std),
            b: Tensor::param(&[2 * cfg.aug_dim], b),
            aug_dim: cfg.aug_dim,
        }
    }

    pub fn forward(&self, s: &Tensor, noise: &Tensor) -> Result<AugmentedSentence> {
        let dp = self.aug_dim;
        if noise.numel() != dp {
            return dim_err(format!("noise shape {:?} vs augmented dim {}", noise.shape(), dp));
        }
        let h = self.w.matmul(s)?.add(&self.b).reshape(&[2 * dp, 1])?;
        let mu = h.slice_rows(0, dp).reshape(&[dp])?;
        let logvar = h.slice_rows(dp, 2 * dp).reshape(&[dp])?;
        let s_ca = mu.add(&logvar.scale(0.5).exp().mul(noise));
        Ok(AugmentedSentence { s_ca, mu, logvar })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![("ca.w".to_string(), self.w.clone()), ("ca.b".to_string(), self.b.clone())]
    }
}

/// 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar), the Gaussian KL to N(0, I).
pub fn kl_term(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() {
        return dim_err(format!("kl_term: mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()));
    }
    Ok(logvar.exp().add(&mu.mul(mu)).add_scalar(-1.0).sub(logvar).sum().scale(0.5))
}
