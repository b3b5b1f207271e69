//! Dense tensors, a reverse-mode tape, the parameter store and a
//! finite-difference verifier.

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub(crate) use graph::{attention_row, dot, LatticeCell};
pub use graph::{CubicSpline, Gradients, Graph, RotarySpec, Var, LAYER_NORM_EPS};
pub use params::{Param, ParamStore, CKPT_MAGIC};
pub use tensor::Tensor;
