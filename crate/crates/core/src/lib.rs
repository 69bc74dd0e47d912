pub mod annotation;
pub mod cli;
pub mod colmap;
pub mod config;
pub mod depth;
pub mod loss;
pub mod pairs;
pub mod pose_metrics;
pub mod recon;
pub mod repr;
pub mod sampler;
pub mod service;
pub mod so3;
pub mod spatial;
pub mod tensor;
