//! Training lab for studying a BatchNorm layer placed directly before the
//! output activation of small classifiers trained on heavily imbalanced data.

pub mod data;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
