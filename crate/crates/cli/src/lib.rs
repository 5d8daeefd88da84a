//! Command line umbrella and HTTP service for the infilling workbench.

pub mod service;
pub mod store;
