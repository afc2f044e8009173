use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap::model::Model;
use recap::synthdata::{generate_dataset, grammar_vocab};
use recap::tensor::no_grad;
use recap::text::tokenize;
use recap::Config;

fn main() {
    let vocab = grammar_vocab();
    let cfg = Config::default();
    let data = generate_dataset(&[16], 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut rng, &cfg, vocab.len());
    let ss: Vec<Vec<f64>> = data.train_idx[..8].iter().map(|&ri| {
        let toks = tokenize(&data.records[ri].captions[0], &vocab, cfg.sentence_len).unwrap();
        no_grad(|| Ok::<_, recap::Error>(model.encoder.encode(&toks)?.s.data_vec())).unwrap()
    }).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("norms: {:?}", ss.iter().map(|v| norm(v)).map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
    for i in 0..8 {
        for j in (i + 1)..8 {
            let dot: f64 = ss[i].iter().zip(&ss[j]).map(|(a, b)| a * b).sum();
            let cos = dot / (norm(&ss[i]) * norm(&ss[j]));
            let dist: f64 = ss[i].iter().zip(&ss[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            print!("{:.3}/{:.2} ", cos, dist);
        }
        println!();
    }
}
