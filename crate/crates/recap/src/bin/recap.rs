//! Command-line driver for the full pipeline: corpus generation, captioner
//! pretraining, adversarial training, evaluation, attention visualization
//! and word-swap probing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recap::captioner::Captioner;
use recap::harness::checkpoint::{
    has_group, load_captioner, load_model, read_manifest, save_checkpoint, Checkpoint,
};
use recap::harness::eval::evaluate;
use recap::harness::export::export_attention;
use recap::harness::probe::{word_swap_probe, Field};
use recap::model::Model;
use recap::objectives::{pretrain_stream, train_gan, TrainOpts};
use recap::synthdata::{generate_dataset, grammar_vocab, Dataset};
use recap::text::Vocab;
use recap::Config;

#[derive(Parser)]
#[command(name = "recap", about = "caption-conditioned image synthesis with redescription feedback")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// extra key=value overrides, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.apply_file(&std::fs::read_to_string(path)?).with_context(|| format!("config file {}", path.display()))?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').context("--set expects KEY=VALUE")?;
            cfg.set_key(k.trim(), v.trim()).with_context(|| format!("--set {kv}"))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural corpus (images, captions, vocab, split)
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        paraphrases: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the caption reconstructor on real images
    PretrainStream {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Adversarial training against a frozen pretrained captioner
    Train {
        #[arg(long)]
        data: PathBuf,
        /// checkpoint directory holding the pretrained captioner
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_parser = parse_on_off)]
        global_attention: Option<bool>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrieval and oracle metrics on the test split
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        pool: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export stage images and attention maps for one caption
    Visualize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Swap one attribute word and report what the oracle sees
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        caption: String,
        /// field=value, e.g. color=green or position=right
        #[arg(long)]
        swap: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected 'on' or 'off', got '{s}'")),
    }
}

fn load_data(dir: &Path) -> anyhow::Result<(Dataset, Vocab)> {
    let data = Dataset::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))?;
    let vpath = dir.join("vocab.txt");
    let vocab = if vpath.exists() { Vocab::load(&vpath)? } else { grammar_vocab() };
    Ok((data, vocab))
}

/// Reads a checkpoint's embedded config, then lets CLI config args override.
fn config_from_checkpoint(dir: &Path, args: &ConfigArgs) -> anyhow::Result<Config> {
    let manifest = read_manifest(dir)?;
    let mut cfg = manifest.config.clone();
    if let Some(path) = &args.config {
        cfg.apply_file(&std::fs::read_to_string(path)?)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').context("--set expects KEY=VALUE")?;
        cfg.set_key(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn sides(cfg: &Config) -> Vec<usize> {
    (0..cfg.stages).map(|i| cfg.side(i)).collect()
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { out, seed, paraphrases, cfg } => {
            let cfg = cfg.build()?;
            let k = paraphrases.unwrap_or(cfg.paraphrases);
            let data = generate_dataset(&sides(&cfg), k, seed);
            data.save(&out)?;
            grammar_vocab().save(&out.join("vocab.txt"))?;
            println!(
                "wrote {} records ({} train / {} test) to {}",
                data.records.len(),
                data.train_idx.len(),
                data.test_idx.len(),
                out.display()
            );
        }
        Cmd::PretrainStream { data, out, steps, seed, cfg } => {
            let cfg = cfg.build()?;
            let (ds, vocab) = load_data(&data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cap = Captioner::new(&mut rng, &cfg, vocab.len());
            std::fs::create_dir_all(&out)?;
            let mut log = std::fs::File::create(out.join("metrics.tsv"))?;
            let (first, last) =
                pretrain_stream(&cap, &ds, &vocab, &cfg, steps, seed, Some(&mut log), None, None)?;
            let ck = Checkpoint { model: None, captioner: Some(&cap), step: steps, seed, stream_frozen: false };
            save_checkpoint(&out, &cfg, vocab.len(), &ck)?;
            println!("captioner loss {first:.4} -> {last:.4} over {steps} steps; checkpoint at {}", out.display());
        }
        Cmd::Train { data, stream, out, lambda, global_attention, seed, steps, cfg } => {
            let mut cfg = cfg.build()?;
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if let Some(g) = global_attention {
                cfg.global_attention = g;
            }
            let (ds, vocab) = load_data(&data)?;
            let smanifest = read_manifest(&stream)?;
            if !has_group(&smanifest, "stream") {
                bail!("{} holds no captioner weights", stream.display());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Model::new(&mut rng, &cfg, vocab.len());
            let cap = Captioner::new(&mut rng, &cfg, vocab.len());
            load_captioner(&stream, &smanifest, &cap)?;
            std::fs::create_dir_all(&out)?;
            let mut log = std::fs::File::create(out.join("metrics.tsv"))?;
            let mut opts = TrainOpts { steps, seed, log: Some(&mut log), log_every: 10, ..Default::default() };
            let outcome = train_gan(&model, &cap, &ds, &vocab, &cfg, &mut opts)?;
            let ck = Checkpoint {
                model: Some(&model),
                captioner: Some(&cap),
                step: outcome.steps_run,
                seed,
                stream_frozen: true,
            };
            save_checkpoint(&out, &cfg, vocab.len(), &ck)?;
            println!(
                "trained {} steps (total_g {:.4}, total_d {:.4}); checkpoint at {}",
                outcome.steps_run, outcome.last.total_g, outcome.last.total_d, out.display()
            );
        }
        Cmd::Eval { model, data, pool, report, seed, cfg } => {
            let cfg = config_from_checkpoint(&model, &cfg)?;
            let (ds, vocab) = load_data(&data)?;
            let manifest = read_manifest(&model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
            let m = Model::new(&mut rng, &cfg, vocab.len());
            let cap = Captioner::new(&mut rng, &cfg, vocab.len());
            load_model(&model, &manifest, &m)?;
            load_captioner(&model, &manifest, &cap)?;
            let rep = evaluate(&m, &cap, &ds, &vocab, &cfg, pool, seed)?;
            std::fs::write(&report, serde_json::to_string_pretty(&rep)?)?;
            println!(
                "r@1 {:.3}  r@2 {:.3}  r@3 {:.3}  semantic {:.3}  diversity {:.3}  -> {}",
                rep.r_at[0], rep.r_at[1], rep.r_at[2], rep.semantic.overall, rep.semantic.diversity,
                report.display()
            );
        }
        Cmd::Visualize { model, caption, out, seed, cfg } => {
            let cfg = config_from_checkpoint(&model, &cfg)?;
            let manifest = read_manifest(&model)?;
            let vocab = grammar_vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
            let m = Model::new(&mut rng, &cfg, vocab.len());
            load_model(&model, &manifest, &m)?;
            let files = export_attention(&m, &vocab, &cfg, &caption, seed, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Cmd::Probe { model, caption, swap, seed, cfg } => {
            let cfg = config_from_checkpoint(&model, &cfg)?;
            let (field, value) = swap.split_once('=').context("--swap expects field=value")?;
            let field = Field::parse(field.trim())?;
            let manifest = read_manifest(&model)?;
            let vocab = grammar_vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
            let m = Model::new(&mut rng, &cfg, vocab.len());
            load_model(&model, &manifest, &m)?;
            let trial = word_swap_probe(&m, &vocab, &cfg, &caption, field, value.trim(), seed)?;
            println!("{}", serde_json::to_string_pretty(&trial)?);
        }
    }
    Ok(())
}
