//! Dense tensors, a reverse-mode tape, parameter storage, finite-difference
//! checking, and the binary file formats.

mod gradcheck;
mod graph;
pub mod init;
pub mod io;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, OpStats, Var};
pub use params::{GradMap, Param, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{smooth_l1_value, softmax_slice};
