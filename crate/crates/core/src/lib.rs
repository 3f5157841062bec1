pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod net;
pub mod optim;
pub mod params;
pub mod protoref;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod tensorio;
pub mod trainer;
pub mod xfuse;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorBlob};

#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    pub mod refinement {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
}
