//! Minimal dense/convolutional layers with hand-written backward passes.
//!
//! Everything runs in `f64` on the CPU. Layers expose `forward` for
//! inference and a caching `forward_train` whose cache feeds `backward`;
//! gradients accumulate into each [`Param`] until explicitly cleared.
//! Correctness of every backward pass is pinned by central-finite-difference
//! tests at the bottom of each submodule.

mod act;
mod adam;
pub mod conv;
mod init;
mod linear;

pub use act::{relu, relu_grad, sigmoid, sigmoid_grad_from_y, softplus_arr, softplus_grad};
pub use adam::Adam;
pub use conv::{Conv2d, ConvCache, ConvTranspose2d, ConvTransposeCache};
pub use init::kaiming_uniform;
pub use linear::Linear;

use ndarray::ArrayD;

/// A named trainable array plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns an ordered collection of trainable parameters.
///
/// The order must be stable across calls: optimizers and checkpoints key
/// their state off the position in this list.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}
