pub mod adaptation;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod inversion;
pub mod io;
pub mod linalg;
pub mod proxy;
pub mod refinement;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Rng, Scalar, Tensor, Var};
