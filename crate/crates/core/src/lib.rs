pub mod bigarray;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod mat;
pub mod modelsel;
pub mod options;
pub mod pipeline;
pub mod rls;
pub mod tasks;

pub use error::{Error, Result};
pub use mat::Mat;
