pub mod archmodel;
pub mod cli;
pub mod clustersim;
pub mod costcal;
pub mod datapipe;
pub mod hpgrid;
pub mod lossmath;
