//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.

pub mod check;
mod graph;
mod params;

pub use graph::{log_sum_exp, sigmoid, softplus, Gradients, Graph, Var};
pub use params::{uniform, xavier, Mat, NamedParam, ParamId, ParamStore};
