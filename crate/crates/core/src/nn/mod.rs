//! Minimal CPU neural-network toolkit: strided and transposed 5×5
//! convolutions, batch normalization, leaky ReLU, dense layers and L2
//! normalization, all with explicit backward passes, plus Adam.

mod adam;
mod im2col;
mod layers;
mod sequential;

pub use adam::Adam;
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Mode};
pub use sequential::{Grads, Layer, Sequential, Trace};
