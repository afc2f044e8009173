//! Training objectives and loops: per-stage adversarial losses with both
//! unconditional and conditional heads, the caption-reconstruction term
//! scored by a frozen captioner, the KL regularizer on the augmented
//! sentence code, and alternating discriminator/generator optimization.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::captioner::{stream_loss, Captioner};
use crate::config::Config;
use crate::error::{contract_err, Error, Result};
use crate::model::{Generation, Model};
use crate::optim::Adam;
use crate::synthdata::Dataset;
use crate::tensor::{no_grad, Tensor};
use crate::text::{kl_term, tokenize, tokenize_with_end, TokenSeq, Vocab};

const EPS_LN: f64 = 1e-12;

fn safe_ln(p: &Tensor) -> Tensor {
    p.clamp(EPS_LN, 1.0).ln()
}

/// Generator-side adversarial term for one stage:
///   -1/2 ln D_u(fake) - 1/2 ln D_c(fake, s).
pub fn generator_stage_loss(uncond: &Tensor, cond: &Tensor) -> Tensor {
    safe_ln(uncond).add(&safe_ln(cond)).scale(-0.5)
}

/// Discriminator-side term for one stage:
///   -1/2 [ln D_u(real) + ln(1 - D_u(fake)) + ln D_c(real, s) + ln(1 - D_c(fake, s))].
pub fn discriminator_stage_loss(
    real_uncond: &Tensor,
    real_cond: &Tensor,
    fake_uncond: &Tensor,
    fake_cond: &Tensor,
) -> Tensor {
    let one_minus = |p: &Tensor| p.scale(-1.0).add_scalar(1.0);
    safe_ln(real_uncond)
        .add(&safe_ln(&one_minus(fake_uncond)))
        .add(&safe_ln(real_cond))
        .add(&safe_ln(&one_minus(fake_cond)))
        .scale(-0.5)
}

/// Extra discriminator term for a real image paired with the wrong
/// caption: -1/2 ln(1 - D_c(real, s_wrong)).
pub fn mismatched_pair_loss(cond: &Tensor) -> Tensor {
    safe_ln(&cond.scale(-1.0).add_scalar(1.0)).scale(-0.5)
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda: f64,
    pub kl_weight: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> LossWeights {
        LossWeights { lambda: cfg.lambda, kl_weight: cfg.kl_weight }
    }
}

/// Scalar loss values for one optimization step, written to the metrics log.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub g_stages: Vec<f64>,
    pub d_stages: Vec<f64>,
    pub stream: f64,
    pub kl: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn tsv_header(stages: usize) -> String {
        let mut h = String::from("step");
        for i in 0..stages {
            h.push_str(&format!("\tg{i}"));
        }
        for i in 0..stages {
            h.push_str(&format!("\td{i}"));
        }
        h.push_str("\tstream\tkl\ttotal_g\ttotal_d");
        h
    }

    pub fn tsv_line(&self, step: usize) -> String {
        let mut l = format!("{step}");
        for v in &self.g_stages {
            l.push_str(&format!("\t{v:.6}"));
        }
        for v in &self.d_stages {
            l.push_str(&format!("\t{v:.6}"));
        }
        l.push_str(&format!("\t{:.6}\t{:.6}\t{:.6}\t{:.6}", self.stream, self.kl, self.total_g, self.total_d));
        l
    }
}

/// Caption-reconstruction loss of the finest generated image under a frozen
/// captioner.
pub fn stream_term(captioner: &Captioner, image: &Tensor, tokens: &TokenSeq) -> Result<Tensor> {
    let dist = captioner.caption_logprobs(image, tokens)?;
    stream_loss(&dist, tokens)
}

/// Full generator objective: sum of per-stage adversarial terms, the
/// weighted caption-reconstruction term on the finest image, and the
/// weighted KL term. Returns the scalar loss plus detached components.
pub fn total_generator_loss(
    model: &Model,
    captioner: &Captioner,
    gen: &Generation,
    tokens: &TokenSeq,
    dec_tokens: &TokenSeq,
    weights: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let mut report = LossReport::default();
    let mut total: Option<Tensor> = None;
    for (i, img) in gen.images.iter().enumerate() {
        let v = model.discs[i].forward(img, &gen.s)?;
        let li = generator_stage_loss(&v.uncond, &v.cond);
        report.g_stages.push(li.item());
        total = Some(match total {
            Some(t) => t.add(&li),
            None => li,
        });
    }
    let mut total = total.ok_or_else(|| Error::Contract("no stages".to_string()))?;
    let stream = stream_term(captioner, gen.images.last().unwrap(), dec_tokens)?;
    report.stream = stream.item();
    total = total.add(&stream.scale(weights.lambda));
    let kl = kl_term(&gen.mu, &gen.logvar)?;
    report.kl = kl.item();
    total = total.add(&kl.scale(weights.kl_weight));
    report.total_g = total.item();
    let _ = tokens;
    Ok((total, report))
}

fn fill_randn(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::randn(rng, &[n], 1.0)
}

/// Fingerprint of captioner weights, used to verify bitwise freezing.
pub fn param_fingerprint(params: &[(String, Tensor)]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (name, t) in params {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        for v in t.data_vec() {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

pub struct TrainOutcome {
    pub steps_run: usize,
    pub last: LossReport,
}

/// Options for the adversarial loop beyond what Config carries.
pub struct TrainOpts<'a> {
    pub steps: usize,
    pub seed: u64,
    pub log: Option<&'a mut dyn std::io::Write>,
    pub log_every: usize,
    /// Called with (step, model); may signal early stop by returning true.
    pub stop_check: Option<&'a mut dyn FnMut(usize, &Model) -> bool>,
    /// Restrict training to these record indices (defaults to train split).
    pub subset: Option<Vec<usize>>,
}

impl Default for TrainOpts<'_> {
    fn default() -> Self {
        TrainOpts { steps: 100, seed: 0, log: None, log_every: 1, stop_check: None, subset: None }
    }
}

/// Alternating adversarial training. Each step draws a batch of records,
/// updates all discriminators on real/fake pairs, then updates the
/// generator against the refreshed discriminators. The captioner is frozen
/// and verified bitwise unchanged.
pub fn train_gan(
    model: &Model,
    captioner: &Captioner,
    data: &Dataset,
    vocab: &Vocab,
    cfg: &Config,
    opts: &mut TrainOpts,
) -> Result<TrainOutcome> {
    let weights = LossWeights::from_config(cfg);
    let params_g = model.named_params_g_trainable();
    let params_d = model.named_params_d();
    let mut opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let frozen = param_fingerprint(&captioner.params());
    let pool: Vec<usize> = opts.subset.clone().unwrap_or_else(|| data.train_idx.clone());
    if pool.is_empty() {
        return contract_err("training pool is empty".to_string());
    }
    if let Some(log) = opts.log.as_deref_mut() {
        writeln!(log, "{}", LossReport::tsv_header(cfg.stages))?;
    }
    let mut last = LossReport::default();
    let mut steps_run = 0;
    for step in 0..opts.steps {
        // batch: records plus caption choice and noise draws
        let batch: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let r = pool[rng.gen_range(0..pool.len())];
                let c = rng.gen_range(0..data.records[r].captions.len());
                (r, c)
            })
            .collect();
        let noises: Vec<(Tensor, Tensor)> = (0..cfg.batch_size)
            .map(|_| (fill_randn(&mut rng, cfg.z_dim), fill_randn(&mut rng, cfg.aug_dim)))
            .collect();

        // ── discriminator phase ──
        let mut d_sums = vec![0.0; cfg.stages];
        for (bi, (ri, ci)) in batch.iter().enumerate() {
            let rec = &data.records[*ri];
            let toks = tokenize(&rec.captions[*ci], vocab, cfg.sentence_len)?;
            // fake images without a generator graph; s detached so the text
            // encoder is untouched by the D update
            let (fakes, s) = no_grad(|| {
                let g = model.generate(&toks, &noises[bi].0, &noises[bi].1)?;
                Ok::<_, Error>((g.images, g.s))
            })?;
            // a wrong-caption embedding teaches the conditional head to
            // actually read the text instead of judging the image alone
            let s_mis = if cfg.mismatched_pairs {
                let mut rj = pool[rng.gen_range(0..pool.len())];
                while data.records[rj].spec == rec.spec {
                    rj = pool[rng.gen_range(0..pool.len())];
                }
                let other = &data.records[rj];
                let mtoks = tokenize(&other.captions[0], vocab, cfg.sentence_len)?;
                Some(no_grad(|| Ok::<_, Error>(model.encoder.encode(&mtoks)?.s))?)
            } else {
                None
            };
            let mut d_total: Option<Tensor> = None;
            for i in 0..cfg.stages {
                let vr = model.discs[i].forward(&rec.images[i], &s)?;
                let vf = model.discs[i].forward(&fakes[i], &s)?;
                let mut li = discriminator_stage_loss(&vr.uncond, &vr.cond, &vf.uncond, &vf.cond);
                if let Some(sm) = &s_mis {
                    let vm = model.discs[i].forward(&rec.images[i], sm)?;
                    li = li.add(&mismatched_pair_loss(&vm.cond));
                }
                d_sums[i] += li.item();
                d_total = Some(match d_total {
                    Some(t) => t.add(&li),
                    None => li,
                });
            }
            d_total.unwrap().scale(1.0 / cfg.batch_size as f64).backward()?;
        }
        opt_d.step(&params_d);

        // ── generator phase ──
        let mut g_acc = LossReport::default();
        g_acc.g_stages = vec![0.0; cfg.stages];
        for (bi, (ri, ci)) in batch.iter().enumerate() {
            let rec = &data.records[*ri];
            let toks = tokenize(&rec.captions[*ci], vocab, cfg.sentence_len)?;
            let dec_toks = tokenize_with_end(&rec.captions[*ci], vocab, cfg.sentence_len)?;
            let gen = model.generate(&toks, &noises[bi].0, &noises[bi].1)?;
            let (loss, rep) = total_generator_loss(model, captioner, &gen, &toks, &dec_toks, &weights)?;
            for (a, b) in g_acc.g_stages.iter_mut().zip(&rep.g_stages) {
                *a += b;
            }
            g_acc.stream += rep.stream;
            g_acc.kl += rep.kl;
            g_acc.total_g += rep.total_g;
            loss.scale(1.0 / cfg.batch_size as f64).backward()?;
        }
        opt_g.step(&params_g);

        let bs = cfg.batch_size as f64;
        last = LossReport {
            g_stages: g_acc.g_stages.iter().map(|v| v / bs).collect(),
            d_stages: d_sums.iter().map(|v| v / bs).collect(),
            stream: g_acc.stream / bs,
            kl: g_acc.kl / bs,
            total_g: g_acc.total_g / bs,
            total_d: d_sums.iter().sum::<f64>() / bs,
        };
        if !last.total_g.is_finite() || !last.total_d.is_finite() {
            return contract_err(format!(
                "non-finite loss at step {step}: total_g={} total_d={} stream={} kl={}",
                last.total_g, last.total_d, last.stream, last.kl
            ));
        }
        steps_run = step + 1;
        if let Some(log) = opts.log.as_deref_mut() {
            if step % opts.log_every == 0 || step + 1 == opts.steps {
                writeln!(log, "{}", last.tsv_line(step))?;
            }
        }
        if let Some(check) = opts.stop_check.as_deref_mut() {
            if check(step, model) {
                break;
            }
        }
    }
    if param_fingerprint(&captioner.params()) != frozen {
        return contract_err("captioner weights changed during adversarial training".to_string());
    }
    Ok(TrainOutcome { steps_run, last })
}

/// Supervised pretraining of the captioner on (image, caption) pairs by
/// teacher forcing. Returns (initial mean loss, final mean loss).
pub fn pretrain_stream(
    captioner: &Captioner,
    data: &Dataset,
    vocab: &Vocab,
    cfg: &Config,
    steps: usize,
    seed: u64,
    mut log: Option<&mut dyn std::io::Write>,
    target: Option<f64>,
    subset: Option<&[usize]>,
) -> Result<(f64, f64)> {
    let params = captioner.params();
    let mut opt = Adam::new(cfg.stream_lr, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let default_pool = data.train_idx.clone();
    let pool: &[usize] = subset.unwrap_or(&default_pool);
    if pool.is_empty() {
        return contract_err("pretraining pool is empty".to_string());
    }
    if let Some(log) = log.as_deref_mut() {
        writeln!(log, "step\tstream")?;
    }
    let fine = data.records[pool[0]].images.len() - 1;
    let mut first = f64::NAN;
    let mut mean = f64::NAN;
    for step in 0..steps {
        let mut sum = 0.0;
        for _ in 0..cfg.batch_size {
            let ri = pool[rng.gen_range(0..pool.len())];
            let rec = &data.records[ri];
            let ci = rng.gen_range(0..rec.captions.len());
            let toks = tokenize_with_end(&rec.captions[ci], vocab, cfg.sentence_len)?;
            let loss = stream_term(captioner, &rec.images[fine], &toks)?;
            sum += loss.item();
            loss.scale(1.0 / cfg.batch_size as f64).backward()?;
        }
        opt.step(&params);
        mean = sum / cfg.batch_size as f64;
        if !mean.is_finite() {
            return contract_err(format!("non-finite captioner loss at step {step}"));
        }
        if step == 0 {
            first = mean;
        }
        if let Some(log) = log.as_deref_mut() {
            writeln!(log, "{step}\t{mean:.6}")?;
        }
        if let Some(t) = target {
            if mean < t {
                break;
            }
        }
    }
    Ok((first, mean))
}

/// Convenience wrapper writing the metrics log to a file path.
pub fn open_metrics_log(path: &Path) -> Result<std::fs::File> {
    Ok(std::fs::File::create(path)?)
}
