//! Text-to-image generation with an image-to-text consistency loss.
//!
//! The pipeline: captions are embedded into word and sentence features,
//! a cascade of attention-guided generators produces images from coarse to
//! fine resolution, per-stage discriminators provide adversarial losses, and
//! a frozen pretrained captioner redescribes the final image so that a
//! cross-entropy reconstruction loss ties image content back to the caption.
//! Everything runs on a procedurally generated shapes corpus whose caption
//! grammar has an exact inverse, giving a deterministic semantic oracle.

pub mod attention;
pub mod captioner;
pub mod cascade;
pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod text;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::Tensor;
