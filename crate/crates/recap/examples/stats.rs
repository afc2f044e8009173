use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap::model::Model;
use recap::synthdata::grammar_vocab;
use recap::tensor::{no_grad, Tensor};
use recap::text::tokenize;
use recap::Config;

fn st(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

fn main() {
    let vocab = grammar_vocab();
    let mut cfg = Config::default();
    if let Some(a) = std::env::args().nth(1) { cfg.attn_softmax_over_words = a == "words"; }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut rng, &cfg, vocab.len());
    let toks = tokenize("a large yellow square on the left of a red background", &vocab, cfg.sentence_len).unwrap();
    let z = Tensor::randn(&mut rng, &[cfg.z_dim], 1.0);
    let e = Tensor::randn(&mut rng, &[cfg.aug_dim], 1.0);
    let g = no_grad(|| model.generate(&toks, &z, &e)).unwrap();
    for (i, f) in g.feats.iter().enumerate() {
        let (m, s) = st(&f.data_vec());
        println!("feat{i}: mean {m:.3} std {s:.3}");
    }
    for (i, im) in g.images.iter().enumerate() {
        let (m, s) = st(&im.data_vec());
        let sat = im.data_vec().iter().filter(|v| v.abs() > 0.99).count() as f64 / im.numel() as f64;
        println!("image{i}: mean {m:.3} std {s:.3} |x|>0.99 frac {sat:.3}");
    }
    // caption sensitivity at init
    let toks2 = tokenize("a small green triangle on the right of a blue background", &vocab, cfg.sentence_len).unwrap();
    let g2 = no_grad(|| model.generate(&toks2, &z, &e)).unwrap();
    let d1 = g.images.last().unwrap().data_vec();
    let d2 = g2.images.last().unwrap().data_vec();
    let diff: f64 = d1.iter().zip(&d2).map(|(a, b)| (a - b).abs()).sum::<f64>() / d1.len() as f64;
    println!("caption sensitivity at init: {diff:.5}");
}
