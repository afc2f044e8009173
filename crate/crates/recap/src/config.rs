use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Desk-scale hyperparameters. Every field can be set from a key=value
/// config file; command-line flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Config {
    // text encoding
    pub sentence_len: usize,
    pub text_dim: usize,
    pub aug_dim: usize,
    pub token_embed_dim: usize,
    pub bidirectional: bool,
    // cascade
    pub stages: usize,
    pub base_side: usize,
    pub feat_channels: usize,
    pub z_dim: usize,
    pub global_attention: bool,
    pub attn_softmax_over_words: bool,
    pub mismatched_pairs: bool,
    pub logit_clamp: f64,
    // captioner
    pub img_feat_dim: usize,
    pub dec_hidden: usize,
    // objectives
    pub lambda: f64,
    pub kl_weight: f64,
    pub lr: f64,
    pub stream_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    // dataset
    pub paraphrases: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            sentence_len: 12,
            text_dim: 64,
            aug_dim: 16,
            token_embed_dim: 32,
            bidirectional: true,
            stages: 3,
            base_side: 16,
            feat_channels: 32,
            z_dim: 16,
            global_attention: true,
            attn_softmax_over_words: true,
            mismatched_pairs: true,
            logit_clamp: 12.0,
            img_feat_dim: 64,
            dec_hidden: 64,
            lambda: 20.0,
            kl_weight: 0.5,
            lr: 2e-4,
            stream_lr: 5e-3,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            paraphrases: 5,
        }
    }
}

impl Config {
    /// Image side at stage `i` (doubles each stage).
    pub fn side(&self, i: usize) -> usize {
        self.base_side << i
    }

    /// Region count N_i = q_i^2.
    pub fn regions(&self, i: usize) -> usize {
        self.side(i) * self.side(i)
    }

    pub fn final_side(&self) -> usize {
        self.side(self.stages - 1)
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            ($field:ident) => {
                self.$field = value
                    .parse()
                    .map_err(|_| crate::Error::Input(format!("bad value '{}' for key '{}'", value, key)))?
            };
        }
        match key {
            "sentence_len" => parse!(sentence_len),
            "text_dim" => parse!(text_dim),
            "aug_dim" => parse!(aug_dim),
            "token_embed_dim" => parse!(token_embed_dim),
            "bidirectional" => parse!(bidirectional),
            "stages" => parse!(stages),
            "base_side" => parse!(base_side),
            "feat_channels" => parse!(feat_channels),
            "z_dim" => parse!(z_dim),
            "global_attention" => parse!(global_attention),
            "attn_softmax_over_words" => parse!(attn_softmax_over_words),
            "mismatched_pairs" => parse!(mismatched_pairs),
            "logit_clamp" => parse!(logit_clamp),
            "img_feat_dim" => parse!(img_feat_dim),
            "dec_hidden" => parse!(dec_hidden),
            "lambda" => parse!(lambda),
            "kl_weight" => parse!(kl_weight),
            "lr" => parse!(lr),
            "stream_lr" => parse!(stream_lr),
            "beta1" => parse!(beta1),
            "beta2" => parse!(beta2),
            "batch_size" => parse!(batch_size),
            "paraphrases" => parse!(paraphrases),
            _ => return input_err(format!("unknown config key '{}'", key)),
        }
        Ok(())
    }

    /// Parses a key=value config file ('#' starts a comment).
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| crate::Error::Input(format!("bad config line '{}'", line)))?;
            self.set_key(k.trim(), v.trim())?;
        }
        Ok(())
    }
}
