//! Differentiable core of the agent with hand-written reverse-mode gradients.

pub mod checkpoint;
pub mod conv;
pub mod encoder;
pub mod heads;
pub mod lstm;
pub mod model;
pub mod params;

pub use encoder::Readout;
pub use lstm::HiddenState;
pub use model::{InitScheme, NetConfig, Network, StepCache, StepOutput};
pub use params::{ParamId, ParamKind, ParamSpec, ParameterSet};
