//! Miniature diffusion transformer: patch embedding, 2-D rotary positions,
//! bidirectional multi-modal attention blocks and the velocity head.

mod config;
mod model;
mod params;
mod rope;

pub use config::ModelConfig;
pub use model::{
    mma, patchify, patchify_tensor, timestep_features, unpatchify, unpatchify_tensor, Ctx, DiT,
    Segment, TokenLayout,
};
pub use params::{BoundParams, ParamStore};
pub use rope::{rope_angles, rope_frequencies, RopeRotation};
