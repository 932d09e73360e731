//! Soft dice, the weighted dice loss `(1 - dsc)^beta * (-dsc)` and its
//! weighting factor `G(x, y) = -(1 - x)^y`.
//!
//! All arithmetic is carried out in f64. `0^0` is taken as 1, so `beta = 0`
//! reduces the weighted loss to plain negative soft dice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    /// Exponent of the weight factor, restricted to `[0, 1]`.
    pub beta: f64,
    /// Smoothing constant added to numerator and denominator.
    #[serde(default = "default_smooth")]
    pub smooth: f64,
}

fn default_smooth() -> f64 {
    1e-4
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            beta: 1.0,
            smooth: default_smooth(),
        }
    }
}

impl LossParams {
    pub fn new(beta: f64) -> Result<Self> {
        let p = LossParams {
            beta,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.smooth > 0.0 && self.smooth.is_finite()) {
            return Err(Error::Invalid(format!(
                "smoothing must be positive, got {}",
                self.smooth
            )));
        }
        Ok(())
    }
}

struct DiceTerms {
    inter: f64,
    denom: f64,
    dsc: f64,
}

fn dice_terms<G, P>(gt: &[G], pred: &[P], smooth: f64) -> Result<DiceTerms>
where
    G: Copy + Into<f64>,
    P: Copy + Into<f64>,
{
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!(
            "dice: ground truth has {} voxels, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    let (mut inter, mut g2, mut p2) = (0f64, 0f64, 0f64);
    for (&g, &p) in gt.iter().zip(pred) {
        let (g, p) = (g.into(), p.into());
        inter += g * p;
        g2 += g * g;
        p2 += p * p;
    }
    let denom = g2 + p2 + smooth;
    Ok(DiceTerms {
        inter,
        denom,
        dsc: 2.0 * (inter + smooth / 2.0) / denom,
    })
}

/// `2 (sum gt*pred + S/2) / (sum gt^2 + sum pred^2 + S)`.
pub fn soft_dice<G, P>(gt: &[G], pred: &[P], smooth: f64) -> Result<f64>
where
    G: Copy + Into<f64>,
    P: Copy + Into<f64>,
{
    if !(smooth > 0.0) {
        return Err(Error::Invalid("smoothing must be positive".into()));
    }
    Ok(dice_terms(gt, pred, smooth)?.dsc)
}

fn weight(one_minus: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        1.0
    } else {
        one_minus.max(0.0).powf(beta)
    }
}

/// Weighted dice loss; lies in `[-1, 0]`.
pub fn wdl<G, P>(gt: &[G], pred: &[P], p: &LossParams) -> Result<f64>
where
    G: Copy + Into<f64>,
    P: Copy + Into<f64>,
{
    p.validate()?;
    let d = dice_terms(gt, pred, p.smooth)?.dsc;
    Ok(weight(1.0 - d, p.beta) * -d)
}

/// Loss value and `d wdl / d pred` at every voxel.
pub fn wdl_with_gradient<G, P>(gt: &[G], pred: &[P], p: &LossParams) -> Result<(f64, Vec<f64>)>
where
    G: Copy + Into<f64>,
    P: Copy + Into<f64>,
{
    p.validate()?;
    let t = dice_terms(gt, pred, p.smooth)?;
    let d = t.dsc;
    let om = 1.0 - d;
    let beta = p.beta;
    // d wdl / d dsc = beta (1-d)^(beta-1) d - (1-d)^beta
    let coef = if beta == 0.0 {
        -1.0
    } else if om > 0.0 {
        beta * om.powf(beta - 1.0) * d - om.powf(beta)
    } else if beta == 1.0 {
        d
    } else {
        // d == 1 forces pred == gt, where d dsc / d pred vanishes
        0.0
    };
    let num = t.inter + p.smooth / 2.0;
    let den2 = t.denom * t.denom;
    let grad = gt
        .iter()
        .zip(pred)
        .map(|(&g, &q)| {
            let (g, q) = (g.into(), q.into());
            coef * 2.0 * (g * t.denom - 2.0 * q * num) / den2
        })
        .collect();
    Ok((weight(om, beta) * -d, grad))
}

pub fn wdl_gradient<G, P>(gt: &[G], pred: &[P], p: &LossParams) -> Result<Vec<f64>>
where
    G: Copy + Into<f64>,
    P: Copy + Into<f64>,
{
    Ok(wdl_with_gradient(gt, pred, p)?.1)
}

/// `G(x, y) = -(1 - x)^y` for `x` in `[0, 1]`, with `0^0 = 1`.
pub fn weight_factor_g(x: f64, y: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Invalid(format!("x must lie in [0, 1], got {x}")));
    }
    let base = 1.0 - x;
    Ok(if y == 0.0 { -1.0 } else { -base.powf(y) })
}

/// Evaluates `G` on the cartesian grid `xs x ys`, rows ordered by y then x.
pub fn g_grid(xs: &[f64], ys: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in ys {
        for &x in xs {
            out.push((x, y, weight_factor_g(x, y)?));
        }
    }
    Ok(out)
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S: f64 = 1e-4;

    #[test]
    fn perfect_overlap_is_one() {
        let ones = vec![1.0f64; 50];
        assert_eq!(soft_dice(&ones, &ones, S).unwrap(), 1.0);
        let zeros = vec![0.0f64; 50];
        assert_eq!(soft_dice(&zeros, &zeros, S).unwrap(), 1.0);
    }

    #[test]
    fn half_prediction_scalar_value() {
        let d = soft_dice(&[1.0f64, 0.0], &[0.5f64, 0.5], S).unwrap();
        assert!((d - 1.0001 / 1.5001).abs() < 1e-12);
        assert!((d - 0.66669).abs() < 1e-5);
        let l = wdl(&[1.0f64, 0.0], &[0.5f64, 0.5], &LossParams { beta: 1.0, smooth: S }).unwrap();
        assert!((l - (1.0 - d) * -d).abs() < 1e-15);
        assert!((l + 0.22222).abs() < 1e-5);
    }

    #[test]
    fn perfect_prediction_endpoints() {
        let m = vec![1.0f64, 0.0, 1.0, 1.0];
        assert_eq!(wdl(&m, &m, &LossParams::new(1.0).unwrap()).unwrap(), 0.0);
        assert_eq!(wdl(&m, &m, &LossParams::new(0.0).unwrap()).unwrap(), -1.0);
    }

    #[test]
    fn beta_outside_unit_interval_rejected() {
        assert!(LossParams::new(1.5).is_err());
        assert!(LossParams::new(-0.1).is_err());
        let m = [1.0f64];
        assert!(wdl(&m, &m, &LossParams { beta: 2.0, smooth: S }).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(soft_dice(&[1.0f64], &[1.0f64, 0.0], S).is_err());
    }

    #[test]
    fn constant_prediction_gradients_are_finite() {
        for beta in [0.0, 0.3, 1.0] {
            let p = LossParams { beta, smooth: S };
            for (g, q) in [
                (vec![0.0f64; 8], vec![0.0f64; 8]),
                (vec![1.0; 8], vec![1.0; 8]),
                (vec![0.0; 8], vec![1.0; 8]),
            ] {
                let gr = wdl_gradient(&g, &q, &p).unwrap();
                assert!(gr.iter().all(|v| v.is_finite()), "beta {beta}");
            }
        }
    }

    #[test]
    fn g_endpoints() {
        assert_eq!(weight_factor_g(0.0, 1.0).unwrap(), -1.0);
        assert_eq!(weight_factor_g(1.0, 1.0).unwrap(), 0.0);
        for x in linspace(0.0, 0.99, 20) {
            assert_eq!(weight_factor_g(x, 0.0).unwrap(), -1.0);
        }
        assert!(weight_factor_g(1.2, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn beta_zero_is_negative_dice(v in proptest::collection::vec((0u8..2, 0.0f64..1.0), 1..40)) {
            let g: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
            let p: Vec<f64> = v.iter().map(|x| x.1).collect();
            let w = wdl(&g, &p, &LossParams { beta: 0.0, smooth: S }).unwrap();
            prop_assert_eq!(w, -soft_dice(&g, &p, S).unwrap());
        }

        #[test]
        fn wdl_bounded(v in proptest::collection::vec((0u8..2, 0.0f64..1.0), 1..40), beta in 0.0f64..1.0) {
            let g: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
            let p: Vec<f64> = v.iter().map(|x| x.1).collect();
            let w = wdl(&g, &p, &LossParams { beta, smooth: S }).unwrap();
            prop_assert!((-1.0..=0.0).contains(&w));
        }
    }
}
