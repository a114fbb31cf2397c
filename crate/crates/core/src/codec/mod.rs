//! The SNR-adaptive codec and its four variants.

mod checkpoint;
mod config;
mod model;
mod network;

pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointInfo, FORMAT_VERSION};
pub use config::{ModelConfig, VariantKind, LATENT_STRIDE, STAGES};
pub use model::{build_model, prefix, LinkOutput, VariantModel};
pub use network::FeaturePyramid;
