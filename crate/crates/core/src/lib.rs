//! Node-cell feeder restoration: environment, physics, offline data and a
//! dual-head sequence model for switch-closure planning.

pub mod data;
pub mod env;
pub mod grid;
pub mod model;
pub mod physics;
pub mod pipeline;
