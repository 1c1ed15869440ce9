//! GCD-GNN: prototype-based fraud detection on multi-relation graphs.

pub mod cli;
pub mod evalkit;
pub mod gcdlayer;
pub mod graphstore;
pub mod numkernel;
pub mod protogcd;
pub mod trainer;
