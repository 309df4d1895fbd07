//! Minimal neural-network and dense linear-algebra kernel.
//!
//! Everything here is a pure function of its inputs. Reductions run
//! left-to-right in a fixed order so results are bit-reproducible.

mod backprop;
mod hessian;
mod linalg;
mod model;
mod tensor;

pub use backprop::{backward, forward, loss_and_gradient, predict, sgd_step, ForwardOutput};
pub use hessian::{hessian, hessian_of, DatasetObjective, Objective, DEFAULT_HESSIAN_CAP};
pub use linalg::{matrix_rank, singular_values, sym_eigenvalues, Matrix, DEFAULT_RANK_TOL};
pub use model::{
    ActShape,
    flatten_params, unflatten_params, Conv2d, Dense, FlatParams, Layer, LayerKind, Model,
    ModelBuilder, MODEL_FORMAT_VERSION,
};
pub use tensor::Tensor;
