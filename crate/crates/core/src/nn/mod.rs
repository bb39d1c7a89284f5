//! Minimal differentiable building blocks: the tape, parameters, layers and
//! the Adam optimizer.

pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use conv::ConvGeometry;
pub use layers::{Activation, Conv2d, ConvTranspose2d, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamGroup, ParamId, ParamStore};
pub use tape::{logistic, Gradients, Tape, Var};
