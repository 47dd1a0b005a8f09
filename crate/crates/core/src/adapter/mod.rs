//! Trainable query-side models: the dual-path residual transition adapter
//! and the baselines it is compared against.
//!
//! Every model stores its weights in a plain struct that implements
//! [`Parameters`]; the same struct type doubles as the gradient buffer and
//! the optimizer moment buffers. Forward passes return a tape holding the
//! activations the matching backward pass consumes.

mod baselines;
mod cast;
mod checkpoint;

pub use baselines::{EarlyFusionParams, EarlyFusionTape, LateFusionParams, LateFusionTape};
pub use cast::{CastParams, CastTape, CondPath, CtxPath};
pub use checkpoint::{Model, ModelKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::math::Matrix;

/// A learnable tensor: a matrix or a vector.
pub trait AsTensor {
    fn shape(&self) -> Vec<usize>;
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
}

impl AsTensor for Matrix {
    fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl AsTensor for Vec<f64> {
    fn shape(&self) -> Vec<usize> {
        vec![self.len()]
    }
    fn values(&self) -> &[f64] {
        self
    }
    fn values_mut(&mut self) -> &mut [f64] {
        self
    }
}

/// Named view of one tensor.
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A fixed, ordered collection of named tensors.
pub trait Parameters: Clone + Send + Sync {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s.data) {
                *a += b;
            }
        }
    }

    fn scale_by(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// All values flattened in tensor order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

macro_rules! impl_parameters {
    ($ty:ty { $($name:literal => $($field:ident).+),* $(,)? }) => {
        impl $crate::adapter::Parameters for $ty {
            fn tensors(&self) -> Vec<$crate::adapter::TensorRef<'_>> {
                use $crate::adapter::AsTensor;
                vec![$($crate::adapter::TensorRef {
                    name: $name,
                    shape: self.$($field).+.shape(),
                    data: self.$($field).+.values(),
                }),*]
            }
            fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
                use $crate::adapter::AsTensor;
                vec![$(($name, self.$($field).+.values_mut())),*]
            }
        }
    };
}
pub(crate) use impl_parameters;

/// Inputs to a next-state predictor. All embeddings are expected unit-norm;
/// an all-zero `anchor` stands for "no context" in the context-free setting.
#[derive(Debug, Clone, Copy)]
pub struct PredictInput<'a> {
    pub query: &'a [f64],
    pub anchor: &'a [f64],
    /// Visual history, oldest first, most recent last.
    pub history: &'a [Vec<f64>],
    /// Context window the model was built for; shorter histories are
    /// left-padded with zeros and masked.
    pub max_history: usize,
}

/// A model that maps (instruction, anchor, history) to a predicted
/// next-state embedding on the unit sphere.
pub trait Predictor: Parameters {
    type Tape: Send + Sync;

    /// `rng` is `Some` in training mode (dropout active) and `None` in
    /// evaluation mode, where no randomness is consumed.
    fn forward(&self, input: &PredictInput<'_>, rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, Self::Tape)>;

    /// Parameter gradients for upstream gradient `grad_out` of the output.
    fn backward(&self, tape: &Self::Tape, grad_out: &[f64]) -> Result<Self>;

    fn predict(&self, input: &PredictInput<'_>) -> Result<Vec<f64>> {
        Ok(self.forward(input, None)?.0)
    }
}

/// Glorot-uniform matrix: entries ~ U(−a, a), a = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
    }
}

pub(crate) fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub(crate) fn min_abs<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    xs.fold(f64::INFINITY, |m, x| m.min(x.abs()))
}
