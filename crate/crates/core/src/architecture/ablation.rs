//! Removing the long-term memory from a trained mosaic.

use super::config::{Combine, ModelKind};
use super::model::{Mixer, Model};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// What [`strip_long_term`] overwrote, for [`restore_long_term`].
#[derive(Clone, Debug)]
pub struct LongTermBackup {
    w_out: Vec<(usize, Tensor)>,
}

/// A copy of `model` whose long-term retrievals are replaced by zero.
///
/// In concat mode the output-projection columns reading the long-term heads
/// are zeroed as well; the long-term memories are skipped in the forward pass.
pub fn strip_long_term(model: &Model) -> Result<(Model, LongTermBackup)> {
    if model.kind() != ModelKind::Mosaic {
        return Err(Error::Config("only mosaic models have a long-term memory".into()));
    }
    let mut stripped = model.clone();
    let mut backup = LongTermBackup { w_out: Vec::new() };
    if model.config().combine == Combine::Concat {
        let long_cols = model.config().n_heads * model.config().d_head();
        let layers: Vec<_> = model
            .layout()
            .layers
            .iter()
            .filter(|l| matches!(l.mixer, Mixer::Memories { .. }))
            .map(|l| l.w_out)
            .collect();
        for id in layers {
            let w = stripped.params_mut().get_mut(id);
            backup.w_out.push((id.index(), w.clone()));
            let cols = w.cols();
            for r in 0..w.rows() {
                w.row_mut(r)[cols - long_cols..].fill(0.0);
            }
        }
    }
    stripped.set_long_term(false);
    Ok((stripped, backup))
}

pub fn restore_long_term(mut model: Model, backup: LongTermBackup) -> Model {
    for (i, w) in backup.w_out {
        *model.params_mut().value_mut(i) = w;
    }
    model.set_long_term(true);
    model
}
