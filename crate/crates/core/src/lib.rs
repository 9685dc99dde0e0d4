//! Bayesian inverse modeling of static entity characteristics from
//! driver–response time series.
//!
//! The crate recovers time-invariant basin attributes from daily
//! weather/streamflow sequences with a bidirectional LSTM autoencoder whose
//! static regressor ends in a variational (Bayes by Backprop) layer,
//! quantifies the epistemic uncertainty of those recoveries, re-weights the
//! supervised loss by that uncertainty, and evaluates the recovered
//! characteristics as inputs to an LSTM streamflow predictor.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled as doctests of this crate.

// `!(x > 0.0)` rejects NaN on purpose; indexed loops read better in the
// numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod forward;
pub mod linalg;
pub mod losses;
pub mod metrics;
mod error;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod training;
mod util;

pub use error::{Error, Result};
pub use util::{derive_seed, sha256_hex};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Introduction, "introduction.md");
    chapter!(Data, "data.md");
    chapter!(Autodiff, "autodiff.md");
    chapter!(Model, "model.md");
    chapter!(Losses, "losses.md");
    chapter!(Training, "training.md");
    chapter!(Forward, "forward.md");
    chapter!(Metrics, "metrics.md");
    chapter!(Synthetic, "synthetic.md");
    chapter!(Cli, "cli.md");
    chapter!(Reproduction, "reproduction.md");
}
