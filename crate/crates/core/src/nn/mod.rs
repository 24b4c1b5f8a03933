//! Minimal neural-network plumbing: dense and convolutional layers with
//! hand-derived forward/backward passes, spectral normalization, and
//! deterministic initialization.
//!
//! Gradients are exact: every backward matches central finite differences of
//! the corresponding forward (see the gradcheck tests). Layers expose
//! gradients both w.r.t. parameters (training) and w.r.t. inputs (SGLD).

mod conv;
mod linear;
mod mlp;

pub use conv::{Conv2d, Conv2dGrads, ConvNet, ConvNetCache, ConvNetGrads};
pub use linear::{Linear, LinearGrads, SpectralState};
pub use mlp::{Mlp, MlpCache, MlpGrads};

use crate::num::{real, Real};
use ndarray::{ArrayViewD, ArrayViewMutD};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// x * sigmoid(x); smooth, so input gradients of the energy are themselves smooth.
    Swish,
    /// max(x, slope * x).
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<F: Real>(self, z: F) -> F {
        match self {
            Activation::Swish => z * sigmoid(z),
            Activation::LeakyRelu(slope) => {
                if z >= F::zero() {
                    z
                } else {
                    z * real(slope)
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative expressed in terms of the pre-activation.
    #[inline]
    pub fn derivative<F: Real>(self, z: F) -> F {
        match self {
            Activation::Swish => {
                let s = sigmoid(z);
                s * (F::one() + z * (F::one() - s))
            }
            Activation::LeakyRelu(slope) => {
                if z >= F::zero() {
                    F::one()
                } else {
                    real(slope)
                }
            }
            Activation::Identity => F::one(),
        }
    }

    /// He-style init gain for layers feeding into this nonlinearity.
    pub fn init_gain(self) -> f64 {
        match self {
            Activation::Swish => 2.0f64.sqrt(),
            Activation::LeakyRelu(slope) => (2.0 / (1.0 + slope * slope)).sqrt(),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid<F: Real>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Named-array traversal used by checkpointing and the EMA shadow.
/// Enumeration order is deterministic and is part of the on-disk contract.
pub trait ArrayVisit<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swish_derivative_matches_finite_difference() {
        let a = Activation::Swish;
        for &z in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (a.apply(z + h) - a.apply(z - h)) / (2.0 * h);
            assert!((a.derivative(z) - fd).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn leaky_relu_slope() {
        let a = Activation::LeakyRelu(0.2);
        assert_eq!(a.apply(-2.0f64), -0.4);
        assert_eq!(a.apply(3.0f64), 3.0);
        assert_eq!(a.derivative(-1.0f64), 0.2);
    }
}
