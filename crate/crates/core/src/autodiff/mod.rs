//! Reverse-mode differentiation over dense tensors, forward-mode tangents
//! recorded in the same graph, and numerical gradient checks.

mod check;
mod dual;
mod graph;
mod params;

pub use check::{central_difference, finite_diff_check, jvp};
pub use dual::DualVar;
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{Bound, ParamStore};
