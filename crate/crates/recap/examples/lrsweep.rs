use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap::captioner::Captioner;
use recap::objectives::pretrain_stream;
use recap::synthdata::{generate_dataset, grammar_vocab};
use recap::Config;

fn main() {
    let vocab = grammar_vocab();
    let mut cfg = Config::default();
    let data = generate_dataset(&[16, 32, 64], cfg.paraphrases, 0);
    let subset: Vec<usize> = data.train_idx[..8].to_vec();
    for lr in [2e-4, 1e-3, 3e-3, 1e-2] {
        cfg.lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cap = Captioner::new(&mut rng, &cfg, vocab.len());
        let (first, last) =
            pretrain_stream(&cap, &data, &vocab, &cfg, 300, 0, None, None, Some(&subset)).unwrap();
        println!("lr {lr}: CE {first:.2} -> {last:.3} after 300 steps");
    }
}
