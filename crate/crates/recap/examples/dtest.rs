use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap::model::Model;
use recap::objectives::discriminator_stage_loss;
use recap::optim::Adam;
use recap::synthdata::{generate_dataset, grammar_vocab};
use recap::tensor::{no_grad, Tensor};
use recap::text::tokenize;
use recap::Config;

fn main() {
    let vocab = grammar_vocab();
    let cfg = Config::default();
    let data = generate_dataset(&[16, 32, 64], 1, 0);
    let subset: Vec<usize> = data.train_idx[..8].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut rng, &cfg, vocab.len());
    let params_d = model.named_params_d();
    let mut opt = Adam::new(1e-3, 0.5, 0.999);
    // frozen generator: fixed fakes per record
    let fakes: Vec<Vec<Tensor>> = subset.iter().map(|&ri| {
        let toks = tokenize(&data.records[ri].captions[0], &vocab, cfg.sentence_len).unwrap();
        let z = Tensor::randn(&mut rng, &[cfg.z_dim], 1.0);
        let e = Tensor::randn(&mut rng, &[cfg.aug_dim], 1.0);
        no_grad(|| Ok::<_, recap::Error>(model.generate(&toks, &z, &e)?.images)).unwrap()
    }).collect();
    let s: Vec<Tensor> = subset.iter().map(|&ri| {
        let toks = tokenize(&data.records[ri].captions[0], &vocab, cfg.sentence_len).unwrap();
        no_grad(|| Ok::<_, recap::Error>(model.encoder.encode(&toks).unwrap().s)).unwrap()
    }).collect();
    for step in 0..150 {
        let mut tot = 0.0;
        for (bi, &ri) in subset.iter().enumerate() {
            let rec = &data.records[ri];
            let mut l: Option<Tensor> = None;
            for i in 0..cfg.stages {
                let vr = model.discs[i].forward(&rec.images[i], &s[bi]).unwrap();
                let vf = model.discs[i].forward(&fakes[bi][i], &s[bi]).unwrap();
                let li = discriminator_stage_loss(&vr.uncond, &vr.cond, &vf.uncond, &vf.cond);
                l = Some(match l { Some(t) => t.add(&li), None => li });
            }
            let l = l.unwrap();
            tot += l.item();
            l.scale(1.0 / 8.0).backward().unwrap();
        }
        opt.step(&params_d);
        if step % 10 == 0 || step == 149 {
            // probe: mean D_u on real vs fake at stage 2
            let (mut ru, mut fu) = (0.0, 0.0);
            no_grad(|| {
                for (bi, &ri) in subset.iter().enumerate() {
                    ru += model.discs[2].forward(&data.records[ri].images[2], &s[bi]).unwrap().uncond.item();
                    fu += model.discs[2].forward(&fakes[bi][2], &s[bi]).unwrap().uncond.item();
                }
                Ok::<_, recap::Error>(())
            }).unwrap();
            println!("step {step}: loss {:.4} D_u(real) {:.3} D_u(fake) {:.3}", tot / 8.0, ru / 8.0, fu / 8.0);
        }
    }
}
