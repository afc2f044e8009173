//! Image captioner: a small conv encoder feeds one visual feature into a
//! recurrent decoder which predicts the caption under teacher forcing. It is
//! pretrained on real image/caption pairs and frozen afterwards; its
//! cross-entropy provides the text reconstruction loss for the generator.

use rand::Rng;

use crate::config::Config;
use crate::error::{dim_err, input_err, Result};
use crate::tensor::{no_grad, Tensor};
use crate::text::{LstmCell, TokenSeq, END, PAD};

/// Row t is the predicted distribution over token t, conditioned on the
/// image feature and tokens before t.
pub struct CaptionDistribution {
    pub probs: Tensor, // [L, V], rows sum to 1
    pub logp: Tensor,  // [L, V], log of probs (kept for the loss graph)
}

pub struct Captioner {
    enc_convs: Vec<(Tensor, Tensor)>,
    enc_w: Tensor, // [E, top_ch*16]
    enc_b: Tensor,
    pub we: Tensor, // [V, E] word embedding into the visual feature space
    lstm: LstmCell,
    out_w: Tensor, // [V, H]
    out_b: Tensor,
    side: usize,
    feat_dim: usize,
    vocab_size: usize,
}

impl Captioner {
    pub fn new(rng: &mut impl Rng, cfg: &Config, vocab_size: usize) -> Captioner {
        let side = cfg.final_side();
        let mut convs = Vec::new();
        let mut ch = 3;
        let mut s = side;
        let mut next = 16;
        // 4-layer stride-2 stack: 64 -> 4
        while s > 4 {
            let std = (2.0 / (ch * 9) as f64).sqrt();
            convs.push((Tensor::param_randn(rng, &[next, ch, 3, 3], std), Tensor::param(&[next], vec![0.0; next])));
            ch = next;
            next = (next * 2).min(64);
            s /= 2;
        }
        let e = cfg.img_feat_dim;
        let h = cfg.dec_hidden;
        Captioner {
            enc_convs: convs,
            enc_w: Tensor::param_randn(rng, &[e, ch * 16], 1.0 / ((ch * 16) as f64).sqrt()),
            enc_b: Tensor::param(&[e], vec![0.0; e]),
            we: Tensor::param_randn(rng, &[vocab_size, e], 0.1),
            lstm: LstmCell::new(rng, e, h),
            out_w: Tensor::param_randn(rng, &[vocab_size, h], 1.0 / (h as f64).sqrt()),
            out_b: Tensor::param(&[vocab_size], vec![0.0; vocab_size]),
            side,
            feat_dim: e,
            vocab_size,
        }
    }

    /// Visual feature x_{-1} from the final-stage image.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != [3, self.side, self.side] {
            return dim_err(format!("encode_image: image {:?} vs final resolution {}", image.shape(), self.side));
        }
        let mut h = image.clone();
        for (k, b) in &self.enc_convs {
            h = h.conv2d(k, Some(b), 2, 1)?.leaky_relu(0.2);
        }
        let flat = h.reshape(&[h.numel()])?;
        Ok(self.enc_w.matmul(&flat)?.add(&self.enc_b))
    }

    /// Teacher-forced per-step distributions for a caption.
    pub fn caption_logprobs(&self, image: &Tensor, tokens: &TokenSeq) -> Result<CaptionDistribution> {
        let feat = self.encode_image(image)?;
        self.decode_teacher_forced(&feat, tokens)
    }

    pub fn decode_teacher_forced(&self, feat: &Tensor, tokens: &TokenSeq) -> Result<CaptionDistribution> {
        for &id in &tokens.ids {
            if id >= self.vocab_size {
                return input_err(format!("token id {} outside vocabulary of {}", id, self.vocab_size));
            }
        }
        let l = tokens.ids.len();
        let hdim = self.lstm.hidden;
        let mut h = Tensor::zeros(&[hdim]);
        let mut c = Tensor::zeros(&[hdim]);
        let mut logit_rows: Vec<Tensor> = Vec::with_capacity(l);
        // step -1: image feature informs the state, then each ground-truth
        // token is embedded and fed in turn
        let mut x = feat.clone();
        for t in 0..l {
            let (h2, c2) = self.lstm.step(&x, &h, &c)?;
            h = h2;
            c = c2;
            let logits = self.out_w.matmul(&h)?.add(&self.out_b);
            logit_rows.push(logits.reshape(&[1, self.vocab_size])?);
            if t + 1 < l {
                x = self.we.gather_rows(&[tokens.ids[t]])?.reshape(&[self.feat_dim])?;
            }
        }
        let refs: Vec<&Tensor> = logit_rows.iter().collect();
        let logits = Tensor::concat_rows(&refs)?; // [L, V]
        Ok(CaptionDistribution { probs: logits.softmax_axis(1)?, logp: logits.log_softmax_rows() })
    }

    /// Argmax decoding, fed back autoregressively; stops at END.
    pub fn greedy_decode(&self, image: &Tensor, max_len: usize) -> Result<TokenSeq> {
        no_grad(|| {
            let feat = self.encode_image(image)?;
            let hdim = self.lstm.hidden;
            let mut h = Tensor::zeros(&[hdim]);
            let mut c = Tensor::zeros(&[hdim]);
            let mut x = feat;
            let mut ids = Vec::new();
            for _ in 0..max_len {
                let (h2, c2) = self.lstm.step(&x, &h, &c)?;
                h = h2;
                c = c2;
                let logits = self.out_w.matmul(&h)?.add(&self.out_b);
                let data = logits.data_vec();
                let best = data
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if best == END {
                    break;
                }
                ids.push(best);
                x = self.we.gather_rows(&[best])?.reshape(&[self.feat_dim])?;
            }
            let true_length = ids.len().max(1);
            if ids.is_empty() {
                ids.push(PAD);
            }
            let mut padded = ids;
            padded.resize(max_len.max(true_length), PAD);
            Ok(TokenSeq { ids: padded, true_length })
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut p = Vec::new();
        for (i, (k, b)) in self.enc_convs.iter().enumerate() {
            p.push((format!("stream.enc{i}.k"), k.clone()));
            p.push((format!("stream.enc{i}.b"), b.clone()));
        }
        p.push(("stream.enc_w".to_string(), self.enc_w.clone()));
        p.push(("stream.enc_b".to_string(), self.enc_b.clone()));
        p.push(("stream.we".to_string(), self.we.clone()));
        p.extend(self.lstm.params("stream.lstm"));
        p.push(("stream.out_w".to_string(), self.out_w.clone()));
        p.push(("stream.out_b".to_string(), self.out_b.clone()));
        p
    }
}

/// Masked cross-entropy: -sum over non-PAD positions of log p_t(T_t).
pub fn stream_loss(dist: &CaptionDistribution, tokens: &TokenSeq) -> Result<Tensor> {
    let l = dist.logp.shape()[0];
    if tokens.ids.len() != l {
        return dim_err(format!("stream_loss: {} rows vs {} tokens", l, tokens.ids.len()));
    }
    let mask: Vec<bool> = (0..l).map(|t| t < tokens.true_length && tokens.ids[t] != PAD).collect();
    dist.logp.masked_nll(&tokens.ids, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Config {
        Config { base_side: 4, stages: 3, img_feat_dim: 8, dec_hidden: 8, sentence_len: 5, ..Config::default() }
    }

    #[test]
    fn encode_image_is_deterministic_and_checks_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cfg();
        let cap = Captioner::new(&mut rng, &c, 10);
        let img = Tensor::randn(&mut rng, &[3, 16, 16], 1.0);
        let a = cap.encode_image(&img).unwrap();
        assert_eq!(a.shape(), &[8]);
        assert_eq!(a.data_vec(), cap.encode_image(&img).unwrap().data_vec());
        assert!(cap.encode_image(&Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn caption_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg();
        let cap = Captioner::new(&mut rng, &c, 10);
        let img = Tensor::randn(&mut rng, &[3, 16, 16], 1.0);
        let toks = TokenSeq { ids: vec![4, 5, 6, PAD, PAD], true_length: 3 };
        let dist = cap.caption_logprobs(&img, &toks).unwrap();
        assert_eq!(dist.probs.shape(), &[5, 10]);
        let p = dist.probs.data_vec();
        for row in 0..5 {
            let s: f64 = p[row * 10..(row + 1) * 10].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p[row * 10..(row + 1) * 10].iter().all(|v| *v > 0.0));
        }
        // out-of-vocab token
        let bad = TokenSeq { ids: vec![99, 0, 0, 0, 0], true_length: 1 };
        assert!(cap.caption_logprobs(&img, &bad).is_err());
    }

    #[test]
    fn uniform_projection_gives_near_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg();
        let mut cap = Captioner::new(&mut rng, &c, 10);
        // zero output projection -> exactly uniform distributions
        cap.out_w = Tensor::param(&[10, 8], vec![0.0; 80]);
        cap.out_b = Tensor::param(&[10], vec![0.0; 10]);
        let img = Tensor::randn(&mut rng, &[3, 16, 16], 1.0);
        let toks = TokenSeq { ids: vec![4, 5, 6, 7, 8], true_length: 5 };
        let dist = cap.caption_logprobs(&img, &toks).unwrap();
        let p = dist.probs.data_vec();
        let entropy: f64 = -p[..10].iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((entropy - (10.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn stream_loss_identities_and_oracle() {
        // perfect one-hot predictions -> 0 (logits pushed to a hard one-hot)
        let l = 3;
        let v = 4;
        let ids = vec![1, 2, 3];
        let mut logits = vec![-1e9; l * v];
        for (t, &id) in ids.iter().enumerate() {
            logits[t * v + id] = 0.0;
        }
        let lt = Tensor::from_vec(&[l, v], logits).unwrap();
        let dist = CaptionDistribution { probs: lt.softmax_axis(1).unwrap(), logp: lt.log_softmax_rows() };
        let toks = TokenSeq { ids: ids.clone(), true_length: 3 };
        assert!(stream_loss(&dist, &toks).unwrap().item().abs() < 1e-9);

        // uniform rows, V=10, 3 unmasked tokens -> 3 ln 10
        let lt = Tensor::zeros(&[5, 10]);
        let dist = CaptionDistribution { probs: lt.softmax_axis(1).unwrap(), logp: lt.log_softmax_rows() };
        let toks = TokenSeq { ids: vec![4, 5, 6, PAD, PAD], true_length: 3 };
        let loss = stream_loss(&dist, &toks).unwrap().item();
        assert!((loss - 3.0 * (10.0f64).ln()).abs() < 1e-9);

        // seeded random distribution equals the direct -sum log p oracle
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lt = Tensor::randn(&mut rng, &[4, 6], 1.0);
        let dist = CaptionDistribution { probs: lt.softmax_axis(1).unwrap(), logp: lt.log_softmax_rows() };
        let toks = TokenSeq { ids: vec![2, 0, 5, 1], true_length: 4 };
        let loss = stream_loss(&dist, &toks).unwrap().item();
        let p = dist.probs.data_vec();
        // position 1 holds PAD and is excluded even inside true_length
        let oracle = -(p[2].ln() + p[2 * 6 + 5].ln() + p[3 * 6 + 1].ln());
        assert!((loss - oracle).abs() < 1e-12);

        // length mismatch
        let short = TokenSeq { ids: vec![1], true_length: 1 };
        assert!(stream_loss(&dist, &short).is_err());
    }

    #[test]
    fn greedy_decode_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg();
        let cap = Captioner::new(&mut rng, &c, 10);
        let img = Tensor::randn(&mut rng, &[3, 16, 16], 1.0);
        let t1 = cap.greedy_decode(&img, 1).unwrap();
        assert_eq!(t1.ids.len(), 1);
        let a = cap.greedy_decode(&img, 6).unwrap();
        let b = cap.greedy_decode(&img, 6).unwrap();
        assert_eq!(a.ids, b.ids);
    }
}
