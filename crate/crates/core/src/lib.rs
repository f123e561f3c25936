// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bounds;
pub mod condition;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod lexopt;
pub mod seeding;
pub mod synthdata;
pub mod tensor;

pub use autodiff::{finite_difference, value_and_grad, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
