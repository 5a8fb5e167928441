pub mod geometry;
pub mod skeleton;
pub mod map;
pub mod elevation;
pub mod physics;
pub mod vim_init;
pub mod mdba;
pub mod volume;
pub mod sim;
pub mod dataset;
pub mod metrics;
pub mod pipeline;
