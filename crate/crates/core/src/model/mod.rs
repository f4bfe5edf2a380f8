//! The twin-capable variational recurrent network.

mod checkpoint;
mod config;
mod layers;
mod vrnn;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, NetKind};
pub use vrnn::{
    sample_latent, sample_latent_vars, standard_normal, Encoding, GaussVars, GaussianParams, Mode,
    StateVars, StepOptions, StepOutput, StepVars, VrnnModel, VrnnState,
};
