//! Traffic-accounting simulator for CNN layer schedules on a hierarchical
//! many-core chiplet, with closed-form cross-validation.

pub mod analytic;
pub mod cli;
pub mod kernels;
pub mod machine;
pub mod schedules;
pub mod tensor;
