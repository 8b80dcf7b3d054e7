pub mod autodiff;
pub mod error;
pub mod hs;
pub mod linalg;
pub mod optim;
pub mod polytope;
pub mod qp;
pub mod scalar;
pub mod tasks;
#[doc(hidden)]
pub mod testing;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::DenseMatrix<f64>;
pub type Polytope64 = polytope::Polytope<f64>;
pub type ProjectionResult64 = qp::ProjectionResult<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type AdamConfig64 = optim::AdamConfig<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Polytope32 = polytope::Polytope<f32>;
