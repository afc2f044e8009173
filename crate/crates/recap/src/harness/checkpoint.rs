//! On-disk checkpoint format: a `manifest.json` describing the run plus one
//! little-endian f32 binary per tensor under `tensors/`. Loading restores
//! weights into freshly constructed models and distinguishes missing files,
//! shape mismatches and corrupt manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::Captioner;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: usize,
    pub seed: u64,
    pub stream_frozen: bool,
    pub config: Config,
    pub vocab_size: usize,
    /// tensor name -> shape
    pub tensors: BTreeMap<String, Vec<usize>>,
}

fn tensor_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join("tensors").join(format!("{}.bin", name.replace('.', "_")))
}

fn write_tensor(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data_vec() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(tensor_path(dir, name), bytes)?;
    Ok(())
}

fn read_tensor_into(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    let path = tensor_path(dir, name);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Checkpoint(format!("missing tensor file {}: {e}", path.display())))?;
    if bytes.len() != t.numel() * 4 {
        return Err(Error::Checkpoint(format!(
            "tensor {name}: file holds {} values, model expects {}",
            bytes.len() / 4,
            t.numel()
        )));
    }
    let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    t.set_data(data);
    Ok(())
}

/// Everything a resumable run needs in one directory.
pub struct Checkpoint<'a> {
    pub model: Option<&'a Model>,
    pub captioner: Option<&'a Captioner>,
    pub step: usize,
    pub seed: u64,
    pub stream_frozen: bool,
}

pub fn save_checkpoint(dir: &Path, cfg: &Config, vocab_size: usize, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir.join("tensors"))?;
    let mut tensors = BTreeMap::new();
    let mut dump = |prefix: &str, params: Vec<(String, Tensor)>| -> Result<()> {
        for (name, t) in params {
            let full = format!("{prefix}.{name}");
            write_tensor(dir, &full, &t)?;
            tensors.insert(full, t.shape().to_vec());
        }
        Ok(())
    };
    if let Some(model) = ckpt.model {
        dump("g", model.named_params_g())?;
        dump("d", model.named_params_d())?;
    }
    if let Some(cap) = ckpt.captioner {
        dump("stream", cap.params())?;
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        step: ckpt.step,
        seed: ckpt.seed,
        stream_frozen: ckpt.stream_frozen,
        config: cfg.clone(),
        vocab_size,
        tensors,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("missing manifest {}: {e}", path.display())))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

fn restore(dir: &Path, manifest: &CheckpointManifest, prefix: &str, params: Vec<(String, Tensor)>) -> Result<()> {
    for (name, t) in params {
        let full = format!("{prefix}.{name}");
        match manifest.tensors.get(&full) {
            None => return Err(Error::Checkpoint(format!("manifest lacks tensor {full}"))),
            Some(shape) if shape != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "tensor {full}: checkpoint shape {shape:?} vs model {:?}",
                    t.shape()
                )))
            }
            Some(_) => read_tensor_into(dir, &full, &t)?,
        }
    }
    Ok(())
}

/// Loads generator + discriminator weights into `model`.
pub fn load_model(dir: &Path, manifest: &CheckpointManifest, model: &Model) -> Result<()> {
    restore(dir, manifest, "g", model.named_params_g())?;
    restore(dir, manifest, "d", model.named_params_d())
}

/// Loads captioner weights.
pub fn load_captioner(dir: &Path, manifest: &CheckpointManifest, cap: &Captioner) -> Result<()> {
    restore(dir, manifest, "stream", cap.params())
}

/// True if the checkpoint carries a tensor group with this prefix.
pub fn has_group(manifest: &CheckpointManifest, prefix: &str) -> bool {
    manifest.tensors.keys().any(|k| k.starts_with(&format!("{prefix}.")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::grammar_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.stages = 2;
        cfg.base_side = 8;
        cfg.feat_channels = 8;
        cfg.text_dim = 16;
        cfg.aug_dim = 8;
        cfg.token_embed_dim = 8;
        cfg.z_dim = 8;
        cfg.img_feat_dim = 16;
        cfg.dec_hidden = 16;
        cfg
    }

    #[test]
    fn roundtrip_is_bitwise_in_f32() {
        let cfg = tiny_cfg();
        let v = grammar_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&mut rng, &cfg, v.len());
        let cap = Captioner::new(&mut rng, &cfg, v.len());
        // quantize in-memory weights to f32 first so the roundtrip is exact
        for (_, t) in model.named_params_g().iter().chain(model.named_params_d().iter()).chain(cap.params().iter()) {
            let q: Vec<f64> = t.data_vec().iter().map(|v| *v as f32 as f64).collect();
            t.set_data(q);
        }
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint { model: Some(&model), captioner: Some(&cap), step: 42, seed: 7, stream_frozen: true };
        save_checkpoint(dir.path(), &cfg, v.len(), &ck).unwrap();

        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.step, 42);
        assert!(manifest.stream_frozen);
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let model2 = Model::new(&mut rng2, &cfg, v.len());
        let cap2 = Captioner::new(&mut rng2, &cfg, v.len());
        load_model(dir.path(), &manifest, &model2).unwrap();
        load_captioner(dir.path(), &manifest, &cap2).unwrap();
        for ((_, a), (_, b)) in model.named_params_g().iter().zip(model2.named_params_g().iter()) {
            assert_eq!(a.data_vec(), b.data_vec());
        }
        for ((_, a), (_, b)) in cap.params().iter().zip(cap2.params().iter()) {
            assert_eq!(a.data_vec(), b.data_vec());
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let cfg = tiny_cfg();
        let v = grammar_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&mut rng, &cfg, v.len());
        let dir = tempfile::tempdir().unwrap();
        // missing manifest
        let e = read_manifest(dir.path()).unwrap_err();
        assert!(matches!(e, Error::Checkpoint(_)), "{e}");
        assert!(e.to_string().contains("manifest"));
        // corrupt manifest
        std::fs::write(dir.path().join("manifest.json"), "{not json").unwrap();
        let e = read_manifest(dir.path()).unwrap_err();
        assert!(e.to_string().contains("corrupt"));
        // shape mismatch
        let ck = Checkpoint { model: Some(&model), captioner: None, step: 0, seed: 0, stream_frozen: false };
        save_checkpoint(dir.path(), &cfg, v.len(), &ck).unwrap();
        let manifest = read_manifest(dir.path()).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.feat_channels = 16;
        let model2 = Model::new(&mut rng, &cfg2, v.len());
        let e = load_model(dir.path(), &manifest, &model2).unwrap_err();
        assert!(e.to_string().contains("shape"), "{e}");
        // missing tensor file
        std::fs::remove_file(dir.path().join("tensors").join("g_encoder_embed.bin")).unwrap();
        let e = load_model(dir.path(), &manifest, &model).unwrap_err();
        assert!(e.to_string().contains("missing tensor"), "{e}");
        // captioner group absent
        assert!(!has_group(&manifest, "stream"));
        assert!(has_group(&manifest, "g"));
    }
}
