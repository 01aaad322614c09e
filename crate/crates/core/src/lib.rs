//! Simulation toolkit for pose-regression driven visual servoing on planar scenes.

// `!(x > 0.0)` guards reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dataset;
pub mod estimator;
pub mod geometry;
pub mod perturb;
pub mod raster;
pub mod render;
pub mod report;
pub mod scene;
pub mod sim;
