pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod io;
pub mod kernels;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
