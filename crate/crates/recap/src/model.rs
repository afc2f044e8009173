//! Full generator/discriminator assembly: text encoder, conditioning
//! augmentation, cascaded attentive image stages and per-stage
//! discriminators, with named parameter lists for the optimizer and
//! checkpointing.

use rand::Rng;

use crate::attention::{glam_fuse, sentence_attention, word_attention, AttnProjection};
use crate::cascade::{Discriminator, Stage0, StageUp, ToImage};
use crate::config::Config;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::text::{CondAugment, TextEncoder, TokenSeq};

/// Everything produced by one generator pass, kept for losses, attention
/// export and probes.
pub struct Generation {
    /// Per-stage feature maps [M, N_i].
    pub feats: Vec<Tensor>,
    /// Per-stage images [3, q_i, q_i].
    pub images: Vec<Tensor>,
    /// Word-attention maps per refinement stage (stage index 1..): [L, N].
    pub word_scores: Vec<Tensor>,
    /// Sentence-attention maps per refinement stage, if enabled: [M, N].
    pub global_scores: Vec<Option<Tensor>>,
    pub s: Tensor,
    pub s_ca: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

pub struct Model {
    pub cfg: Config,
    pub encoder: TextEncoder,
    pub aug: CondAugment,
    pub stage0: Stage0,
    pub attn: Vec<AttnProjection>,
    pub ups: Vec<StageUp>,
    pub to_image: Vec<ToImage>,
    pub discs: Vec<Discriminator>,
}

impl Model {
    pub fn new(rng: &mut impl Rng, cfg: &Config, vocab_size: usize) -> Model {
        let m = cfg.feat_channels;
        let encoder = TextEncoder::new(rng, cfg, vocab_size);
        let aug = CondAugment::new(rng, cfg);
        let stage0 = Stage0::new(rng, cfg);
        let mut attn = Vec::new();
        let mut ups = Vec::new();
        let mut to_image = Vec::new();
        let mut discs = Vec::new();
        for i in 0..cfg.stages {
            if i > 0 {
                attn.push(AttnProjection::new(rng, m, cfg.text_dim, cfg.aug_dim));
                ups.push(StageUp::new(rng, cfg));
            }
            to_image.push(ToImage::new(rng, cfg));
            discs.push(Discriminator::new(rng, cfg, i));
        }
        Model { cfg: cfg.clone(), encoder, aug, stage0, attn, ups, to_image, discs }
    }

    /// One full generator pass from tokens and noise. `aug_noise` has
    /// aug_dim entries, `z` has z_dim.
    pub fn generate(&self, tokens: &TokenSeq, z: &Tensor, aug_noise: &Tensor) -> Result<Generation> {
        let cfg = &self.cfg;
        let emb = self.encoder.encode(tokens)?;
        let a = self.aug.forward(&emb.s, aug_noise)?;
        let mut feats = Vec::with_capacity(cfg.stages);
        let mut images = Vec::with_capacity(cfg.stages);
        let mut word_scores = Vec::new();
        let mut global_scores = Vec::new();
        let f0 = self.stage0.forward(z, &a.s_ca)?;
        images.push(self.to_image[0].forward(&f0)?);
        feats.push(f0);
        for i in 1..cfg.stages {
            let prev = feats[i - 1].clone();
            let proj = &self.attn[i - 1];
            let (att_w, score_w) =
                word_attention(&prev, &emb.w, &proj.u, tokens.true_length, cfg.attn_softmax_over_words)?;
            let (att_s, score_s) = if cfg.global_attention {
                let (a_s, s_s) = sentence_attention(&prev, &a.s_ca, &proj.v)?;
                (Some(a_s), Some(s_s))
            } else {
                (None, None)
            };
            let fused = glam_fuse(&prev, &att_w, att_s.as_ref())?;
            let f = self.ups[i - 1].forward(&prev, &fused)?;
            images.push(self.to_image[i].forward(&f)?);
            feats.push(f);
            word_scores.push(score_w);
            global_scores.push(score_s);
        }
        Ok(Generation { feats, images, word_scores, global_scores, s: emb.s, s_ca: a.s_ca, mu: a.mu, logvar: a.logvar })
    }

    /// Generator parameters updated during adversarial training. The text
    /// encoder is excluded: if the generator could update it, collapsing
    /// every caption to one embedding would blind the conditional
    /// discriminator to mismatches and conditioning would die, so it stays
    /// fixed after construction like the frozen captioner.
    pub fn named_params_g_trainable(&self) -> Vec<(String, Tensor)> {
        self.named_params_g().into_iter().filter(|(n, _)| !n.starts_with("encoder.")).collect()
    }

    /// Generator-side parameters (text encoder, augmentation, all stages).
    pub fn named_params_g(&self) -> Vec<(String, Tensor)> {
        let mut p = vec![("encoder.embed".to_string(), self.encoder.embed.clone())];
        p.extend(self.encoder.fwd.params("encoder.fwd"));
        if let Some(bwd) = &self.encoder.bwd {
            p.extend(bwd.params("encoder.bwd"));
        }
        p.push(("aug.w".to_string(), self.aug.w.clone()));
        p.push(("aug.b".to_string(), self.aug.b.clone()));
        p.extend(self.stage0.params());
        for (i, a) in self.attn.iter().enumerate() {
            p.push((format!("attn{}.u", i + 1), a.u.clone()));
            p.push((format!("attn{}.v", i + 1), a.v.clone()));
        }
        for (i, u) in self.ups.iter().enumerate() {
            p.extend(u.params(&format!("up{}", i + 1)));
        }
        for (i, t) in self.to_image.iter().enumerate() {
            p.extend(t.params(&format!("img{i}")));
        }
        p
    }

    /// Discriminator parameters for all stages.
    pub fn named_params_d(&self) -> Vec<(String, Tensor)> {
        let mut p = Vec::new();
        for (i, d) in self.discs.iter().enumerate() {
            p.extend(d.params(&format!("disc{i}")));
        }
        p
    }
}
