//! First-order and quasi-Newton minimizers over flat parameter vectors.

mod adam;
mod lbfgs;

pub use adam::{Adam, AdamOutcome};
pub use lbfgs::{Lbfgs, LbfgsOutcome, LbfgsStatus};
