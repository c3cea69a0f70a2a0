//! Exact derivatives for the residual losses.
//!
//! Forward-mode [`HyperDual`] numbers carry first and second derivatives with
//! respect to the scalar network input; the reverse-mode [`Tape`] runs over
//! batches of those values so that parameter gradients also flow through the
//! derivative channels.

mod check;
mod hyperdual;
mod params;
mod tape;

pub use check::finite_difference_check;
pub use hyperdual::{mat_vec, HyperDual};
pub use params::{ParameterStore, Slice};
pub use tape::{NodeId, Tape, Tensor};

use crate::error::{Error, Result};

/// Gradient of a finalized record's loss with respect to `params`.
pub fn loss_gradient(record: &Tape<'_>, params: &ParameterStore) -> Result<Vec<f64>> {
    if record.params().len() != params.len() {
        return Err(Error::usage(
            "record was built against a different parameter layout",
        ));
    }
    record.gradient()
}
