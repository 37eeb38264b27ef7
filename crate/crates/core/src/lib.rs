//! Instance-optimal PAC best-policy identification for stochastic contextual
//! bandits.
//!
//! The crate is organized around the pipeline of the benchmark:
//!
//! - [`bandit`]: instances, policy classes, feature maps, exact evaluation.
//! - [`estimators`]: Catoni robust means and regularized IPS gap estimates.
//! - [`design`]: the complexity functionals, optimal allocations, closed-form
//!   dual design values, and grid-search references.
//! - [`oracle`]: the argmax-oracle abstraction and its cost-sensitive
//!   classification reductions, with call-count accounting.
//! - [`solvers`]: the dual objective, gamma descent, and the FW-GD
//!   saddle-point solver with duality-gap certificates.
//! - [`algorithms`]: the elimination/non-elimination/oracle-efficient
//!   learners and the two baselines.
//! - [`harness`]: experiment configuration, seed fan-out, and result files.

pub mod algorithms;
pub mod bandit;
pub mod design;
pub mod estimators;
pub mod harness;
pub mod oracle;
pub mod solvers;
