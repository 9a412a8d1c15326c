pub mod cli;
pub mod error;
pub mod gateway;
pub mod nnet;
pub mod ontology;
pub mod preprocess;
pub mod raster;
pub mod scorecam;
pub mod synthgen;
pub mod types;

pub use error::{Error, Result};

/// Runs the guide's snippets as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
    #[doc = include_str!("../../../book/src/ontology.md")]
    mod ontology {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
