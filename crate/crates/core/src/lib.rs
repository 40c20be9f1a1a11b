pub mod appearance;
pub mod cli;
pub mod config;
pub mod exec;
pub mod fusion_eval;
pub mod imagecore;
pub mod residuals;
pub mod pipeline;
pub mod rng;
pub mod synthsplice;
pub mod svmstream;
pub mod tripletnet;
