//! Tensor primitives, parameter storage and the residual U-net.

pub mod ops;
pub mod params;
pub mod tensor;
pub mod unet;

pub use params::{Gradients, ParamKind, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use unet::{init_params, ForwardCache, Mode, NetConfig, SideOutputSet, UNet};
