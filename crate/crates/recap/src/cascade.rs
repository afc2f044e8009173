//! Cascaded image generation: per-stage feature transformers, image heads,
//! and discriminators with unconditional and conditional outputs.

use rand::Rng;

use crate::config::Config;
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

fn conv_param(rng: &mut impl Rng, co: usize, ci: usize, k: usize) -> (Tensor, Tensor) {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    (Tensor::param_randn(rng, &[co, ci, k, k], std), Tensor::param(&[co], vec![0.0; co]))
}

/// Affine map from (z, s_ca) to the stage-0 feature grid.
pub struct Stage0 {
    pub w: Tensor, // [M*N0, z_dim + D']
    pub b: Tensor,
    m: usize,
    n0: usize,
}

impl Stage0 {
    pub fn new(rng: &mut impl Rng, cfg: &Config) -> Stage0 {
        let m = cfg.feat_channels;
        let n0 = cfg.regions(0);
        let in_dim = cfg.z_dim + cfg.aug_dim;
        let std = 1.0 / (in_dim as f64).sqrt();
        Stage0 {
            w: Tensor::param_randn(rng, &[m * n0, in_dim], std),
            b: Tensor::param(&[m * n0], vec![0.0; m * n0]),
            m,
            n0,
        }
    }

    pub fn forward(&self, z: &Tensor, s_ca: &Tensor) -> Result<Tensor> {
        let in_dim = self.w.shape()[1];
        if z.numel() + s_ca.numel() != in_dim {
            return dim_err(format!("f0_transform: z {:?} + s_ca {:?} != input dim {}", z.shape(), s_ca.shape(), in_dim));
        }
        let x = Tensor::concat_rows(&[z, s_ca])?.reshape(&[in_dim])?;
        let h = self.w.matmul(&x)?.add(&self.b).leaky_relu(0.2);
        h.reshape(&[self.m, self.n0])
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![("f0.w".to_string(), self.w.clone()), ("f0.b".to_string(), self.b.clone())]
    }
}

/// Upsampling feature transformer for stages >= 1: nearest 2x upsample of the
/// fused attention block, a 1x1 mixing conv, a 3x3 conv, and a residual path
/// from the upsampled previous features.
pub struct StageUp {
    pub mix_k: Tensor,
    pub mix_b: Tensor,
    pub conv_k: Tensor,
    pub conv_b: Tensor,
    m: usize,
}

impl StageUp {
    pub fn new(rng: &mut impl Rng, cfg: &Config) -> StageUp {
        let m = cfg.feat_channels;
        let fused_ch = if cfg.global_attention { 3 * m } else { 2 * m };
        let (mix_k, mix_b) = conv_param(rng, m, fused_ch, 1);
        let (conv_k, conv_b) = conv_param(rng, m, m, 3);
        StageUp { mix_k, mix_b, conv_k, conv_b, m }
    }

    /// f_prev is [M, N_prev], fused is [C, N_prev] with C = 2M or 3M.
    /// Output is [M, 4*N_prev].
    pub fn forward(&self, f_prev: &Tensor, fused: &Tensor) -> Result<Tensor> {
        let n_prev = f_prev.shape()[1];
        let q = (n_prev as f64).sqrt() as usize;
        if q * q != n_prev {
            return dim_err(format!("fi_transform: region count {} is not a perfect square", n_prev));
        }
        let ch = fused.shape()[0];
        if fused.shape()[1] != n_prev || ch != self.mix_k.shape()[1] {
            return dim_err(format!("fi_transform: fused {:?} vs expected [{}, {}]", fused.shape(), self.mix_k.shape()[1], n_prev));
        }
        let up = fused.reshape(&[ch, q, q])?.upsample2x()?;
        let h = up.conv2d(&self.mix_k, Some(&self.mix_b), 1, 0)?.leaky_relu(0.2);
        let h = h.conv2d(&self.conv_k, Some(&self.conv_b), 1, 1)?.leaky_relu(0.2);
        let resid = f_prev.reshape(&[self.m, q, q])?.upsample2x()?;
        h.add(&resid).reshape(&[self.m, 4 * n_prev])
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.mix_k"), self.mix_k.clone()),
            (format!("{prefix}.mix_b"), self.mix_b.clone()),
            (format!("{prefix}.conv_k"), self.conv_k.clone()),
            (format!("{prefix}.conv_b"), self.conv_b.clone()),
        ]
    }
}

/// One 3x3 conv to RGB followed by tanh squashing into [-1, 1].
pub struct ToImage {
    pub k: Tensor,
    pub b: Tensor,
    m: usize,
}

impl ToImage {
    pub fn new(rng: &mut impl Rng, cfg: &Config) -> ToImage {
        let (k, b) = conv_param(rng, 3, cfg.feat_channels, 3);
        ToImage { k, b, m: cfg.feat_channels }
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let n = f.shape()[1];
        let q = (n as f64).sqrt() as usize;
        if q * q != n {
            return dim_err(format!("generate_image: region count {} is not a perfect square", n));
        }
        let grid = f.reshape(&[self.m, q, q])?;
        Ok(grid.conv2d(&self.k, Some(&self.b), 1, 1)?.tanh())
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.k"), self.k.clone()), (format!("{prefix}.b"), self.b.clone())]
    }
}

/// Probabilities from the two discriminator heads, both strictly in (0,1)
/// thanks to the logit clamp.
pub struct DiscriminatorVerdict {
    pub uncond: Tensor,
    pub cond: Tensor,
}

/// Strided conv stack down to a 4x4 grid with a logistic head, plus a
/// conditional head that sees the sentence vector broadcast over the grid.
pub struct Discriminator {
    convs: Vec<(Tensor, Tensor)>,
    head_u_w: Tensor,
    head_u_b: Tensor,
    cond_k: Tensor,
    cond_b: Tensor,
    head_c_w: Tensor,
    head_c_b: Tensor,
    side: usize,
    text_dim: usize,
    logit_clamp: f64,
    top_ch: usize,
}

impl Discriminator {
    pub fn new(rng: &mut impl Rng, cfg: &Config, stage: usize) -> Discriminator {
        let side = cfg.side(stage);
        let mut convs = Vec::new();
        let mut ch = 3;
        let mut s = side;
        let mut next = 16;
        while s > 4 {
            convs.push(conv_param(rng, next, ch, 3));
            ch = next;
            next = (next * 2).min(64);
            s /= 2;
        }
        let cond_in = ch + cfg.text_dim;
        let (cond_k, cond_b) = conv_param(rng, 32, cond_in, 1);
        let head_std = 1.0 / ((ch * 16) as f64).sqrt();
        Discriminator {
            convs,
            head_u_w: Tensor::param_randn(rng, &[1, ch * 16], head_std),
            head_u_b: Tensor::param(&[1], vec![0.0]),
            cond_k,
            cond_b,
            head_c_w: Tensor::param_randn(rng, &[1, 32 * 16], 1.0 / ((32.0 * 16.0f64).sqrt())),
            head_c_b: Tensor::param(&[1], vec![0.0]),
            side,
            text_dim: cfg.text_dim,
            logit_clamp: cfg.logit_clamp,
            top_ch: ch,
        }
    }

    /// Scores an image at this stage's resolution against sentence vector s.
    pub fn forward(&self, image: &Tensor, s: &Tensor) -> Result<DiscriminatorVerdict> {
        let sh = image.shape();
        if sh != [3, self.side, self.side] {
            return dim_err(format!("discriminate: image {:?} vs stage resolution {}", sh, self.side));
        }
        if s.numel() != self.text_dim {
            return dim_err(format!("discriminate: sentence {:?} vs text dim {}", s.shape(), self.text_dim));
        }
        let mut h = image.clone();
        for (k, b) in &self.convs {
            h = h.conv2d(k, Some(b), 2, 1)?.leaky_relu(0.2);
        }
        let flat = h.reshape(&[self.top_ch * 16])?;
        let logit_u = self.head_u_w.matmul(&flat)?.add(&self.head_u_b);
        let uncond = logit_u.clamp(-self.logit_clamp, self.logit_clamp).sigmoid();

        // broadcast s over the 4x4 grid and mix with the late features
        let ones = Tensor::full(&[1, 16], 1.0);
        let s_mat = s.reshape(&[self.text_dim, 1])?.matmul(&ones)?; // [D, 16]
        let feat_mat = h.reshape(&[self.top_ch, 16])?;
        let joint = Tensor::concat_rows(&[&feat_mat, &s_mat])?.reshape(&[self.top_ch + self.text_dim, 4, 4])?;
        let c = joint.conv2d(&self.cond_k, Some(&self.cond_b), 1, 0)?.leaky_relu(0.2);
        let logit_c = self.head_c_w.matmul(&c.reshape(&[32 * 16])?)?.add(&self.head_c_b);
        let cond = logit_c.clamp(-self.logit_clamp, self.logit_clamp).sigmoid();
        Ok(DiscriminatorVerdict { uncond, cond })
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut p = Vec::new();
        for (i, (k, b)) in self.convs.iter().enumerate() {
            p.push((format!("{prefix}.conv{i}.k"), k.clone()));
            p.push((format!("{prefix}.conv{i}.b"), b.clone()));
        }
        p.push((format!("{prefix}.head_u.w"), self.head_u_w.clone()));
        p.push((format!("{prefix}.head_u.b"), self.head_u_b.clone()));
        p.push((format!("{prefix}.cond.k"), self.cond_k.clone()));
        p.push((format!("{prefix}.cond.b"), self.cond_b.clone()));
        p.push((format!("{prefix}.head_c.w"), self.head_c_w.clone()));
        p.push((format!("{prefix}.head_c.b"), self.head_c_b.clone()));
        p
    }
}

/// Guard used by the generator loop: stage 0 has its own transform.
pub fn check_upsample_stage(stage: usize) -> Result<()> {
    if stage == 0 {
        return contract_err("stage 0 uses f0_transform, not fi_transform");
    }
    Ok(())
}
