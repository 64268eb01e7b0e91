//! Training harness: the teacher-student loop, AP evaluation, strategy
//! comparison and the gradient-check suite.

pub mod compare;
pub mod config;
pub mod detector;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use compare::{compare_strategies, write_curves, CompareRow, CompareTable, Variant};
pub use config::{ExperimentConfig, PcMode, Strategy};
pub use detector::{Detector, DetectorFile};
pub use eval::{average_precision, evaluate_ap};
pub use gradcheck::{gradcheck, GradEntry, GradReport};
pub use train::{train, ApPoint, Counters, RunResult};
