#![allow(dead_code)]

pub mod fixtures;
pub mod metrics_ref;
pub mod plan_check;
