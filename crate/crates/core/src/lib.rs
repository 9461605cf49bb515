//! Benchmark engine for forecasting multi-client electrical load
//! time series.
//!
//! The crate covers the full pipeline: raw CSV ingestion and hourly
//! resampling, calendar feature encoding, window sample construction
//! for the multivariate / local / global training strategies, a small
//! reverse-mode autodiff engine, the five model families built on it,
//! the training loop, and rolling-origin evaluation with MAE/MSE.

pub mod autodiff;
pub mod calendar;
pub mod dataset;
