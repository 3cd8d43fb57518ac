use crate::error::{Result, WaveError};
use crate::tensor::{Tape, Tensor};

use super::layout::PositionGrid;

/// Position axes: temporal, height, width.
pub const AXES: usize = 3;

/// Cosines and sines for every token and rotary pair, `[tokens × rotary_dim/2]`.
///
/// The rotated channels of a head split into three contiguous blocks of
/// `rotary_dim / 3` channels, one per axis. Pair `m` of an axis block turns
/// by `id · base^(-2m / (rotary_dim/3))`.
pub fn rotary_tables(ids: &[[usize; 3]], rotary_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let axis_dim = rotary_dim / AXES;
    let per_axis = axis_dim / 2;
    let inv_freq: Vec<f64> = (0..per_axis)
        .map(|m| base.powf(-2.0 * m as f64 / axis_dim as f64))
        .collect();
    let mut cos = Vec::with_capacity(ids.len() * rotary_dim / 2);
    let mut sin = Vec::with_capacity(cos.capacity());
    for id in ids {
        for &p in id {
            for &f in &inv_freq {
                let angle = p as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
    }
    (cos, sin)
}

/// Applies the time-aligned rotary embedding to `x` (`[tokens × n_heads·head_dim]`).
pub fn apply_tmrope(
    x: &Tensor,
    grid: &PositionGrid,
    n_heads: usize,
    rotary_dim: usize,
    base: f64,
) -> Result<Tensor> {
    if rotary_dim % (2 * AXES) != 0 {
        return Err(WaveError::Argument(format!(
            "rotary dim {rotary_dim} is not a multiple of {}",
            2 * AXES
        )));
    }
    let (t, _) = x.dims2()?;
    if t != grid.len() {
        return Err(WaveError::Dimension {
            op: "apply_tmrope",
            lhs: x.shape().to_vec(),
            rhs: vec![grid.len()],
        });
    }
    let (cos, sin) = rotary_tables(grid.ids(), rotary_dim, base);
    let tape = Tape::new();
    let out = tape.rotary(tape.constant(x.clone()), cos, sin, n_heads, rotary_dim)?;
    Ok(out.to_tensor())
}
