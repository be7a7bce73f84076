pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Graph, Shape, Tensor, Var};
pub mod analysis;
pub mod attention;
pub mod cli;
pub mod model;
pub mod partition;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/partition.md")]
    struct Partition;
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/backbone.md")]
    struct Backbone;
    #[doc = include_str!("../../../book/src/analysis.md")]
    struct Analysis;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/testing.md")]
    struct Testing;
}
