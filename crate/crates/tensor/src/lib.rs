//! Differentiable tensor substrate for the BID agent: a dense tensor type,
//! a reverse-mode tape with the ops the perception/decision graph needs,
//! named parameter storage, checkpoint files and a finite-difference
//! gradient checker.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use attention::{multihead_attention, AttentionOutput, AttentionVars};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var, NORM_EPS};
pub use params::{Bound, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Result, Tensor, TensorError};
