//! Evaluation metrics: hard Dice overlap, mean symmetric surface distance
//! and the normalized feature RMSD used to measure contrast sensitivity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::deform::{folding_fraction, DisplacementField};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, ScalarField, MAX_DIMS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceEntry {
    pub dice: f64,
    /// Label absent from both maps; `dice` is then 1 by convention.
    pub absent: bool,
}

fn check_grids(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "label maps on {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)` per label.
pub fn hard_dice(a: &LabelMap, b: &LabelMap, labels: &[u32]) -> Result<BTreeMap<u32, DiceEntry>> {
    check_grids(a, b)?;
    let mut out = BTreeMap::new();
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            na += (x == l) as usize;
            nb += (y == l) as usize;
            both += (x == l && y == l) as usize;
        }
        let entry = if na + nb == 0 {
            DiceEntry {
                dice: 1.0,
                absent: true,
            }
        } else {
            DiceEntry {
                dice: 2.0 * both as f64 / (na + nb) as f64,
                absent: false,
            }
        };
        out.insert(l, entry);
    }
    Ok(out)
}

/// Mean Dice over labels present in at least one map.
pub fn mean_dice(entries: &BTreeMap<u32, DiceEntry>) -> f64 {
    let present: Vec<f64> = entries
        .values()
        .filter(|e| !e.absent)
        .map(|e| e.dice)
        .collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Voxels of `label` with a face neighbor of another label or on the grid
/// edge, in raster order.
pub fn boundary_voxels(s: &LabelMap, label: u32) -> Vec<usize> {
    let meta = s.meta();
    let dims = meta.dims();
    let strides = meta.strides();
    let data = s.data();
    (0..meta.num_voxels())
        .filter(|&v| data[v] == label)
        .filter(|&v| {
            let c = meta.coord(v);
            (0..dims.len()).any(|a| {
                c[a] == 0
                    || c[a] + 1 == dims[a]
                    || data[v - strides[a]] != label
                    || data[v + strides[a]] != label
            })
        })
        .collect()
}

fn physical(coord: [usize; MAX_DIMS], spacing: &[f64]) -> [f64; MAX_DIMS] {
    let mut p = [0.0; MAX_DIMS];
    for (a, s) in spacing.iter().enumerate() {
        p[a] = coord[a] as f64 * s;
    }
    p
}

fn mean_nearest(from: &[[f64; MAX_DIMS]], to: &[[f64; MAX_DIMS]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d2: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                    d2
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

/// Mean symmetric surface distance in mm between the boundaries of
/// `label` in two maps: the average of the two directed mean
/// nearest-boundary distances.
pub fn mean_surface_distance(
    a: &LabelMap,
    b: &LabelMap,
    label: u32,
    spacing: &[f64],
) -> Result<f64> {
    check_grids(a, b)?;
    if spacing.len() != a.meta().ndim() || spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid spacing {spacing:?}"
        )));
    }
    let points = |s: &LabelMap| -> Result<Vec<[f64; MAX_DIMS]>> {
        let bv = boundary_voxels(s, label);
        if bv.is_empty() {
            return Err(Error::MissingLabel(label));
        }
        Ok(bv
            .into_iter()
            .map(|v| physical(s.meta().coord(v), spacing))
            .collect())
    };
    let (pa, pb) = (points(a)?, points(b)?);
    Ok(0.5 * (mean_nearest(&pa, &pb) + mean_nearest(&pb, &pa)))
}

fn rms(values: &[f32]) -> f64 {
    (values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// RMS difference between each stack in `others` and `reference`, taken
/// over voxels per channel, averaged over channels and then over stacks,
/// and divided by the RMS of `reference`. A zero reference leaves the
/// value unnormalized.
pub fn feature_rmsd(reference: &ScalarField, others: &[ScalarField]) -> Result<f64> {
    if others.is_empty() {
        return Err(Error::InvalidArgument(
            "feature_rmsd needs at least one comparison".into(),
        ));
    }
    let c = reference.channels();
    let n = reference.meta().num_voxels() as f64;
    let mut total = 0.0;
    for other in others {
        if other.dims() != reference.dims() || other.channels() != c {
            return Err(Error::ShapeMismatch(
                "feature stacks differ in shape".into(),
            ));
        }
        let mut per_channel = vec![0f64; c];
        for (r, o) in reference
            .data()
            .chunks_exact(c)
            .zip(other.data().chunks_exact(c))
        {
            for j in 0..c {
                per_channel[j] += (o[j] as f64 - r[j] as f64).powi(2);
            }
        }
        total += per_channel.iter().map(|s| (s / n).sqrt()).sum::<f64>() / c as f64;
    }
    let rmsd = total / others.len() as f64;
    let norm = rms(reference.data());
    Ok(if norm > 0.0 { rmsd / norm } else { rmsd })
}

/// Per-label evaluation of a registration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_label_dice: BTreeMap<u32, f64>,
    pub absent: Vec<u32>,
    pub mean_dice: f64,
    /// Missing when the label is absent from either map.
    pub per_label_msd: BTreeMap<u32, Option<f64>>,
    pub folding_fraction: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(
        a: &LabelMap,
        b: &LabelMap,
        labels: &[u32],
        spacing: &[f64],
        warp: Option<&DisplacementField>,
    ) -> Result<MetricReport> {
        let dice = hard_dice(a, b, labels)?;
        let mut per_label_msd = BTreeMap::new();
        for &l in labels {
            let msd = match mean_surface_distance(a, b, l, spacing) {
                Ok(d) => Some(d),
                Err(Error::MissingLabel(_)) => None,
                Err(e) => return Err(e),
            };
            per_label_msd.insert(l, msd);
        }
        Ok(MetricReport {
            mean_dice: mean_dice(&dice),
            absent: dice
                .iter()
                .filter(|(_, e)| e.absent)
                .map(|(&l, _)| l)
                .collect(),
            per_label_dice: dice.into_iter().map(|(l, e)| (l, e.dice)).collect(),
            per_label_msd,
            folding_fraction: warp.map(folding_fraction),
        })
    }

    /// One row per label: `label,dice,msd_mm,absent_flag`. Missing surface
    /// distances are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,dice,msd_mm,absent_flag\n");
        for (l, d) in &self.per_label_dice {
            let msd = self.per_label_msd.get(l).copied().flatten();
            let _ = writeln!(
                out,
                "{l},{d},{},{}",
                msd.map(|m| m.to_string()).unwrap_or_default(),
                self.absent.contains(l) as u8
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
