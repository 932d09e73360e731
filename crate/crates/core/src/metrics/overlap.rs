use serde::{Deserialize, Serialize};

use super::edt::squared_edt;
use crate::error::Result;
use crate::volume::{Volume, Voxel};

/// Distance units for the Hausdorff distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Voxel,
    Mm,
}

fn counts<A: Voxel, B: Voxel>(gt: &Volume<A>, pred: &Volume<B>) -> Result<(usize, usize, usize)> {
    gt.ensure_same_dims(pred, "ground truth vs prediction")?;
    let (mut g, mut p, mut both) = (0, 0, 0);
    for (&a, &b) in gt.data().iter().zip(pred.data()) {
        let (a, b) = (a.is_set(), b.is_set());
        g += a as usize;
        p += b as usize;
        both += (a && b) as usize;
    }
    Ok((g, p, both))
}

/// `2|GT n Pred| / (|GT| + |Pred|)`; both empty gives 1.
pub fn dsc<A: Voxel, B: Voxel>(gt: &Volume<A>, pred: &Volume<B>) -> Result<f64> {
    let (g, p, both) = counts(gt, pred)?;
    Ok(if g + p == 0 {
        1.0
    } else {
        2.0 * both as f64 / (g + p) as f64
    })
}

/// `1 - ||GT| - |Pred|| / (|GT| + |Pred|)`; both empty gives 1.
pub fn volumetric_similarity<A: Voxel, B: Voxel>(gt: &Volume<A>, pred: &Volume<B>) -> Result<f64> {
    let (g, p, _) = counts(gt, pred)?;
    Ok(if g + p == 0 {
        1.0
    } else {
        1.0 - g.abs_diff(p) as f64 / (g + p) as f64
    })
}

fn directed_sq<A: Voxel, B: Voxel>(from: &Volume<A>, to: &Volume<B>, spacing: [f64; 3]) -> f64 {
    let d = squared_edt(to, spacing);
    from.data()
        .iter()
        .zip(&d)
        .filter(|(v, _)| v.is_set())
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance over all mask voxels. `None` when either
/// mask is empty.
pub fn hausdorff<A: Voxel, B: Voxel>(gt: &Volume<A>, pred: &Volume<B>, units: Units) -> Result<Option<f64>> {
    let (g, p, _) = counts(gt, pred)?;
    if g == 0 || p == 0 {
        return Ok(None);
    }
    let spacing = match units {
        Units::Voxel => [1.0; 3],
        Units::Mm => gt.spacing().map(f64::from),
    };
    let h = directed_sq(gt, pred, spacing).max(directed_sq(pred, gt, spacing));
    Ok(Some(h.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub hd: Option<f64>,
    pub vs: f64,
    pub units: Units,
}

pub fn evaluate_case<A: Voxel, B: Voxel>(gt: &Volume<A>, pred: &Volume<B>, units: Units) -> Result<MetricsReport> {
    Ok(MetricsReport {
        dsc: dsc(gt, pred)?,
        hd: hausdorff(gt, pred, units)?,
        vs: volumetric_similarity(gt, pred)?,
        units,
    })
}
