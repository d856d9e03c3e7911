// `!(x > 0.0)` is how NaN gets rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autolabel;
pub mod config;
pub mod dataset;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod scene;
pub mod segmentation;
pub mod spatial;
pub mod teach;
