//! Online estimation of latent factor risk premia with Kalman and Unscented
//! Kalman filters, and a beta-hedged long/short mean-reversion backtester
//! built on the filtered returns.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod backtest;
pub mod error;
pub mod factor_engine;
pub mod filters;
pub mod market_data;
pub mod portfolio;
pub mod strategy;
pub mod transition;

pub use error::{Error, Result};
