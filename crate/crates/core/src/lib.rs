pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod segnet;
pub mod srnet;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/losses-metrics.md")]
    mod losses_metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
