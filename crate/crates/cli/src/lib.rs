//! Command line pipeline and HTTP service around `qexpand-core`.
//!
//! The offline stages (`prepare`, `train`, `evaluate`, `ablate`) live in
//! [`pipeline`]; the online API lives in [`service`].

pub mod config;
pub mod pipeline;
pub mod service;

pub use config::AppConfig;
