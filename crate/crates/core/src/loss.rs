//! Training objectives evaluated on plain fields. The network crate has
//! differentiable counterparts that must agree with these values.

use serde::{Deserialize, Serialize};

use crate::deform::{forward_diff, DisplacementField};
use crate::error::{Error, Result};
use crate::grid::{ScalarField, VectorField};

/// Terms of the training objective `dice_term + lambda_reg * reg_term`.
/// For intensity and supervised objectives `dice_term` holds the data term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dice_term: f64,
    pub reg_term: f64,
    pub total: f64,
    pub lambda_reg: f64,
}

fn check_pair(a: &ScalarField, b: &ScalarField, what: &str) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

/// Negative mean soft Dice over channels, in [-1, 0]. Channels empty in
/// both inputs contribute zero.
pub fn soft_dice_loss(moved_onehot: &ScalarField, fixed_onehot: &ScalarField) -> Result<f64> {
    check_pair(moved_onehot, fixed_onehot, "soft dice")?;
    let c = moved_onehot.channels();
    let mut inter = vec![0f64; c];
    let mut sum = vec![0f64; c];
    for (a, b) in moved_onehot
        .data()
        .chunks_exact(c)
        .zip(fixed_onehot.data().chunks_exact(c))
    {
        for j in 0..c {
            inter[j] += a[j] as f64 * b[j] as f64;
            sum[j] += a[j] as f64 + b[j] as f64;
        }
    }
    let ratio: f64 = inter
        .iter()
        .zip(&sum)
        .map(|(&i, &s)| if s > 0.0 { i / s } else { 0.0 })
        .sum();
    Ok(-2.0 * ratio / c as f64)
}

/// `0.5 * mean(|D u|^2)` with the mean taken over voxels, components and
/// axes of forward differences (backward on the last sample of an axis).
pub fn smoothness_loss(u: &DisplacementField) -> f64 {
    let f: &VectorField = u.field();
    let meta = f.meta();
    let nd = meta.ndim();
    let mut acc = 0f64;
    for v in 0..meta.num_voxels() {
        let coord = meta.coord(v);
        for c in 0..nd {
            for a in 0..nd {
                let d = forward_diff(f, v, &coord, a, c);
                acc += d * d;
            }
        }
    }
    0.5 * acc / (meta.num_voxels() * nd * nd) as f64
}

pub fn total_loss(dice: f64, reg: f64, lambda_reg: f64) -> LossReport {
    LossReport {
        dice_term: dice,
        reg_term: reg,
        total: dice + lambda_reg * reg,
        lambda_reg,
    }
}

fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Mean squared component difference between two vector fields.
pub fn mse_field_loss(pred: &VectorField, target: &VectorField) -> Result<f64> {
    check_pair(pred.as_scalar(), target.as_scalar(), "field mse")?;
    Ok(mean_sq_diff(pred.data(), target.data()))
}

/// Mean squared intensity difference.
pub fn image_mse_loss(moved: &ScalarField, fixed: &ScalarField) -> Result<f64> {
    check_pair(moved, fixed, "image mse")?;
    Ok(mean_sq_diff(moved.data(), fixed.data()))
}
