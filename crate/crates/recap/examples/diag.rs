use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap::captioner::Captioner;
use recap::model::Model;
use recap::objectives::{pretrain_stream, train_gan, TrainOpts};
use recap::synthdata::{generate_dataset, grammar_vocab, image_to_png, semantic_match};
use recap::tensor::{no_grad, Tensor};
use recap::text::tokenize;
use recap::Config;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let vocab = grammar_vocab();
    let mut cfg = Config::default();
    cfg.lr = lr;
    if let Some(l) = args.get(3) { cfg.lambda = l.parse().unwrap(); }
    cfg.stream_lr = 1e-2;
    let data = generate_dataset(&[16, 32, 64], cfg.paraphrases, 0);
    let subset: Vec<usize> = data.train_idx[..8].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cap = Captioner::new(&mut rng, &cfg, vocab.len());
    let t0 = std::time::Instant::now();
    let (f, l) = pretrain_stream(&cap, &data, &vocab, &cfg, 500, 0, None, Some(0.1 * 40.0), Some(&subset)).unwrap();
    eprintln!("stream CE {f:.2} -> {l:.3} in {:?}", t0.elapsed());
    let model = Model::new(&mut rng, &cfg, vocab.len());
    let mut err = std::io::stderr();
    let mut count = |m: &Model, verbose: bool| {
        let mut crng = ChaCha8Rng::seed_from_u64(999);
        let mut ok = 0;
        for &ri in &subset {
            let rec = &data.records[ri];
            let toks = tokenize(&rec.captions[0], &vocab, cfg.sentence_len).unwrap();
            let img = no_grad(|| {
                let z = Tensor::randn(&mut crng, &[cfg.z_dim], 1.0);
                let e = Tensor::randn(&mut crng, &[cfg.aug_dim], 1.0);
                Ok::<_, recap::Error>(m.generate(&toks, &z, &e)?.images.last().unwrap().clone())
            }).unwrap();
            let rep = semantic_match(&img, &rec.spec);
            if rep.all_ok() { ok += 1; }
            if verbose {
                eprintln!("  want {:?} got {:?}", rec.spec, rep.detected);
                image_to_png(&img, std::path::Path::new(&format!("/tmp/diag/gen_{ri}.png"))).unwrap();
                image_to_png(&rec.images[2], std::path::Path::new(&format!("/tmp/diag/real_{ri}.png"))).unwrap();
            }
        }
        ok
    };
    std::fs::create_dir_all("/tmp/diag").unwrap();
    let mut stop = |step: usize, m: &Model| {
        if step % 25 == 24 { eprintln!("step {step}: ok {}/8 ({:?})", count(m, false), t0.elapsed()); }
        false
    };
    let mut opts = TrainOpts {
        steps, seed: 0, subset: Some(subset.clone()),
        log: Some(&mut err), log_every: 25, stop_check: Some(&mut stop),
        ..Default::default()
    };
    train_gan(&model, &cap, &data, &vocab, &cfg, &mut opts).unwrap();
    eprintln!("final ok {}/8", count(&model, true));
    // caption sensitivity: same z, two different captions
    let mut crng = ChaCha8Rng::seed_from_u64(5);
    let z = Tensor::randn(&mut crng, &[cfg.z_dim], 1.0);
    let e = Tensor::randn(&mut crng, &[cfg.aug_dim], 1.0);
    let c1 = &data.records[subset[0]].captions[0];
    let c2 = &data.records[subset[1]].captions[0];
    let i1 = no_grad(|| Ok::<_, recap::Error>(model.generate(&tokenize(c1, &vocab, cfg.sentence_len).unwrap(), &z, &e)?.images.last().unwrap().clone())).unwrap();
    let i2 = no_grad(|| Ok::<_, recap::Error>(model.generate(&tokenize(c2, &vocab, cfg.sentence_len).unwrap(), &z, &e)?.images.last().unwrap().clone())).unwrap();
    let d1 = i1.data_vec(); let d2 = i2.data_vec();
    let diff: f64 = d1.iter().zip(&d2).map(|(a, b)| (a - b).abs()).sum::<f64>() / d1.len() as f64;
    let mean: f64 = d1.iter().sum::<f64>() / d1.len() as f64;
    let std: f64 = (d1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d1.len() as f64).sqrt();
    eprintln!("caption sensitivity mean|Δ| = {diff:.4}; image mean {mean:.3} std {std:.3}");
    eprintln!("caption 1: {c1}\ncaption 2: {c2}");
}
