//! Hierarchical conditional VAE for multilevel prosody modelling.

pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod disentangle;
pub mod metrics;
pub mod model;
pub mod training;
