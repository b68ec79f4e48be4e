#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod classifier;
pub mod heatmap;
pub mod metrics;
pub mod pipeline;
pub mod qc;
pub mod slide;
pub mod stain;
pub mod synthetic;
