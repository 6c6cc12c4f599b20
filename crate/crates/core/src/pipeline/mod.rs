//! Data, optimisation, checkpoints, the training loop and inference helpers.

pub mod checkpoint;
pub mod dataset;
pub mod infer;
pub mod optim;
pub mod toydata;
pub mod train;
