//! Procedural frame-sequence generation with a miniature diffusion transformer.

pub mod checkpoint;
pub mod dit;
pub mod error;
pub mod flow;
pub mod gradsuite;
pub mod io;
pub mod layout;
pub mod lora;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod recraft;
pub mod synth;

pub use dit::{DiT, ModelConfig, ParamStore};
pub use error::{Error, Result};
pub use layout::{serpentine_order, SerpentineOrder};
pub use numerics::{Graph, Real, Tensor, Var};
