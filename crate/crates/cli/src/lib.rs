//! Command-line front end and HTTP render service for the `dynfield` engine.

pub mod app;
pub mod avatar;
pub mod service;

pub use app::run;
