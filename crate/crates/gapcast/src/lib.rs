//! gapcast — long-horizon motion prediction for unsignalized intersections.
//!
//! The engine separates the discrete decision of whether a yielding vehicle
//! enters the intersection (gap acceptance) from the continuous prediction of
//! its acceleration, so externally assigned priorities can be injected per
//! vehicle pair and dozens of candidate maneuvers can be rolled out per
//! planning cycle. See the guide under `book/` for the concepts and the
//! `gapcast` CLI for the full pipeline.

pub mod cli;
pub mod dataset;
pub mod driver;
pub mod env;
pub mod error;
pub mod eval;
pub mod gap;
pub mod map;
pub mod mlp;
pub mod scenario;
pub mod train;

pub use cli::{cli_main, run_from};
pub use error::{Error, Result};

// The guide's code blocks run as doc-tests, keeping the book in sync with
// the crate (`cargo test --doc`).
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/maps.md")]
    mod maps {}
    #[doc = include_str!("../../../book/src/observations.md")]
    mod observations {}
    #[doc = include_str!("../../../book/src/gap-acceptance.md")]
    mod gap_acceptance {}
    #[doc = include_str!("../../../book/src/driver-models.md")]
    mod driver_models {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
