pub mod atf;
pub mod autograd;
pub mod config;
pub mod error;
pub mod nn;
pub mod params;
pub mod rng;
pub mod vocab;
pub mod explain;
pub mod data;
pub mod features;
pub mod latent;
pub mod detector;
pub mod model;
pub mod keyframe;
pub mod metrics;
pub mod train;
pub mod cli;
