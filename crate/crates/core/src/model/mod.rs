//! Network components, parameter storage and checkpoints.

mod checkpoint;
mod conv;
mod fused;
pub mod layers;
mod net;
mod params;
mod spec;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use conv::conv2d_same;
pub use layers::{images_to_tensor, Ctx};
pub use net::{Disentangler, Domain2VecNet, ForwardOutput, GeneratorOutput};
pub use params::{Init, ParamStore};
pub use spec::{Activation, LayerDesc, LayerKind, ModelScale, NetworkSpec};
