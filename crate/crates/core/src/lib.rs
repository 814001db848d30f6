//! Safe constrained meta-reinforcement learning on tabular CMDPs.
//!
//! Training draws tasks from a distribution, covers them with a greedy
//! epsilon-net and solves each cover member exactly; testing adapts to an
//! unseen task through rollouts while mixing every candidate with a policy
//! that is feasible on the whole family.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cmdp;
pub mod envs;
pub mod error;
pub mod lp;
pub mod planner;
pub mod train;

pub use cmdp::{MixturePolicy, Policy, SmoothnessConstant, TabularCmdp, ValuePair};
pub use error::{Error, Result};
pub use train::{Task, TaskSampler, TrainConfig, TrainingBundle};
pub use safe_test::{TestConfig, TestReport, TestTask};
