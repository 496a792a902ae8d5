//! Config-driven pipeline over the `cubeletworld` library.

pub mod config;
pub mod pipeline;
