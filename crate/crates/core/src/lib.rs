pub mod adapter;
pub mod calibrank;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod gradsuite;
pub mod metrics;
pub mod numkernel;
pub mod pipeline;
pub mod recursion;
pub mod rng;
pub mod trainer;
