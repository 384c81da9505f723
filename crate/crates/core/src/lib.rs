//! Return forecasting from news text with small transformer language models.
//!
//! The crate covers the whole path from raw news to a monthly portfolio:
//! a reverse-mode autodiff tape, encoder and decoder language models,
//! low-rank adaptation with a regression head, decile diagnostics and a
//! long/short backtest.

pub mod backtest;
pub mod deciles;
pub mod error;
pub mod forecaster;
pub mod market_data;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/forecaster.md")]
    mod forecaster {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/deciles.md")]
    mod deciles {}
    #[doc = include_str!("../../../book/src/backtest.md")]
    mod backtest {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
