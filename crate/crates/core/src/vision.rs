//! Region feature grids and the learned region projection.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Precomputed per-region CNN features for one image, `K x D_raw`, laid out
/// row-major over a `rows x cols` spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    pub regions: Tensor,
    pub grid_hw: (usize, usize),
}

impl FeatureGrid {
    pub fn new(image_id: impl Into<String>, regions: Tensor, grid_hw: (usize, usize)) -> Result<Self> {
        let k = match regions.shape() {
            [k, _] => *k,
            s => return Err(Error::Shape(format!("feature grid must be [K, D], got {s:?}"))),
        };
        if grid_hw.0 * grid_hw.1 != k {
            return Err(Error::Shape(format!(
                "grid {}x{} does not hold {k} regions",
                grid_hw.0, grid_hw.1
            )));
        }
        regions.check_finite("feature grid")?;
        Ok(FeatureGrid {
            image_id: image_id.into(),
            regions,
            grid_hw,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.regions.shape()[0]
    }

    pub fn raw_dim(&self) -> usize {
        self.regions.shape()[1]
    }
}

/// `relu(X_raw W_I + b_I)`, one row per region.
pub fn transform_regions(tape: &Tape, regions: Var, weight: Var, bias: Var) -> Result<Var> {
    let projected = tape.matmul(regions, weight)?;
    tape.relu(tape.add_bias(projected, bias)?)
}
