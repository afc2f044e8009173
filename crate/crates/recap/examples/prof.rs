use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap::captioner::Captioner;
use recap::model::Model;
use recap::synthdata::{generate_dataset, grammar_vocab};
use recap::tensor::{no_grad, Tensor};
use recap::text::{tokenize, tokenize_with_end};
use recap::Config;
use std::time::Instant;

fn main() {
    let vocab = grammar_vocab();
    let cfg = Config::default();
    let data = generate_dataset(&[16, 32, 64], 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut rng, &cfg, vocab.len());
    let cap = Captioner::new(&mut rng, &cfg, vocab.len());
    let rec = &data.records[0];
    let toks = tokenize(&rec.captions[0], &vocab, cfg.sentence_len).unwrap();
    let dec = tokenize_with_end(&rec.captions[0], &vocab, cfg.sentence_len).unwrap();
    let z = Tensor::randn(&mut rng, &[cfg.z_dim], 1.0);
    let e = Tensor::randn(&mut rng, &[cfg.aug_dim], 1.0);

    let t = Instant::now();
    for _ in 0..5 { no_grad(|| model.generate(&toks, &z, &e)).unwrap(); }
    println!("generate no_grad: {:?}/it", t.elapsed() / 5);

    let t = Instant::now();
    for _ in 0..5 { model.generate(&toks, &z, &e).unwrap(); }
    println!("generate graph (no bwd): {:?}/it", t.elapsed() / 5);

    let t = Instant::now();
    for _ in 0..5 {
        let g = model.generate(&toks, &z, &e).unwrap();
        g.images.last().unwrap().sum().backward().unwrap();
    }
    println!("generate + backward: {:?}/it", t.elapsed() / 5);

    let g = no_grad(|| model.generate(&toks, &z, &e)).unwrap();
    let t = Instant::now();
    for _ in 0..5 {
        for i in 0..3 {
            model.discs[i].forward(&rec.images[i], &g.s).unwrap();
            model.discs[i].forward(&g.images[i], &g.s).unwrap();
        }
    }
    println!("disc fwd x6 (no_grad graphless? with graph): {:?}/it", t.elapsed() / 5);

    let t = Instant::now();
    for _ in 0..5 {
        let d = cap.caption_logprobs(g.images.last().unwrap(), &dec).unwrap();
        recap::captioner::stream_loss(&d, &dec).unwrap().backward().unwrap();
    }
    println!("captioner fwd+bwd: {:?}/it", t.elapsed() / 5);
}
