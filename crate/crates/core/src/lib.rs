pub mod aggregation;
pub mod annindex;
pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod graphgen;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod storage;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
