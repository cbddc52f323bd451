//! DarkCovidNet layers, parameters, forward pass and checkpoints.

mod checkpoint;
mod forward;
mod params;
mod spec;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use forward::{forward, predict_log_proba, predict_proba, ForwardOutput, Mode};
pub use params::{BoundLayer, BoundParams, LayerParams, ModelParams, BN_EPS, BN_MOMENTUM};
pub use spec::{build_darkcovidnet, LayerShape, LayerSpec, ModelSpec, Profile, LEAKY_ALPHA};
