use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{connected_components, Connectivity, Volume, Voxel};

/// How a predicted component is matched to a ground-truth lesion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchRule {
    /// Any voxel overlap; each prediction goes to the lesion it overlaps most.
    #[default]
    Overlap,
    /// The prediction's rounded centroid must fall inside the lesion.
    CenterInside,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_subjects: usize,
}

impl AddAssign for LesionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.n_subjects += o.n_subjects;
    }
}

/// Lesion-level detection counts for one subject.
pub fn match_lesions<A: Voxel, B: Voxel>(
    gt: &Volume<A>,
    pred: &Volume<B>,
    conn: Connectivity,
    rule: MatchRule,
) -> Result<LesionCounts> {
    gt.ensure_same_dims(pred, "lesion matching")?;
    let g = connected_components(gt, conn);
    let p = connected_components(pred, conn);
    // assignment[j] = ground-truth id (1-based) claimed by predicted component j
    let mut assignment = vec![0u32; p.len()];
    match rule {
        MatchRule::Overlap => {
            let mut table: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for (&gl, &pl) in g.labels.iter().zip(&p.labels) {
                if gl != 0 && pl != 0 {
                    *table.entry((pl, gl)).or_default() += 1;
                }
            }
            let mut best: Vec<(usize, u32)> = vec![(0, 0); p.len()];
            for (&(pl, gl), &n) in &table {
                let b = &mut best[pl as usize - 1];
                if n > b.0 {
                    *b = (n, gl);
                }
            }
            for (a, b) in assignment.iter_mut().zip(best) {
                *a = b.1;
            }
        }
        MatchRule::CenterInside => {
            for (a, c) in assignment.iter_mut().zip(&p.components) {
                let [x, y, z] = c.rounded_centroid();
                *a = gt
                    .get_signed([x, y, z])
                    .filter(|v| v.is_set())
                    .map(|_| g.labels[gt.index(x as usize, y as usize, z as usize)])
                    .unwrap_or(0);
            }
        }
    }
    let mut hit = vec![false; g.len()];
    let mut fp = 0;
    for &a in &assignment {
        if a == 0 {
            fp += 1;
        } else {
            hit[a as usize - 1] = true;
        }
    }
    let tp = hit.iter().filter(|&&h| h).count();
    Ok(LesionCounts {
        tp,
        fp,
        fn_: g.len() - tp,
        n_subjects: 1,
    })
}

/// `TP / (TP + FN)`; `None` without ground-truth lesions.
pub fn sensitivity(c: &LesionCounts) -> Option<f64> {
    (c.tp + c.fn_ > 0).then(|| c.tp as f64 / (c.tp + c.fn_) as f64)
}

/// `FP / subjects`.
pub fn fp_per_case(c: &LesionCounts) -> Result<f64> {
    if c.n_subjects == 0 {
        return Err(Error::Invalid(
            "false positives per case needs at least one subject".into(),
        ));
    }
    Ok(c.fp as f64 / c.n_subjects as f64)
}

/// `TP / (TP + FP)`; `None` without predictions.
pub fn ppv(c: &LesionCounts) -> Option<f64> {
    (c.tp + c.fp > 0).then(|| c.tp as f64 / (c.tp + c.fp) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Mask;

    fn blobs(dims: [usize; 3], boxes: &[([usize; 3], [usize; 3])]) -> Mask {
        let mut m = Mask::zeros(dims);
        for &(lo, hi) in boxes {
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        m.set(x, y, z, 1);
                    }
                }
            }
        }
        m
    }

    const C: Connectivity = Connectivity::TwentySix;

    #[test]
    fn identical_two_lesions() {
        let g = blobs([12, 12, 12], &[([1, 1, 1], [3, 3, 3]), ([7, 7, 7], [10, 10, 10])]);
        let c = match_lesions(&g, &g, C, MatchRule::Overlap).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 0, 0));
    }

    #[test]
    fn empty_prediction() {
        let g = blobs([8, 8, 8], &[([1, 1, 1], [3, 3, 3])]);
        let c = match_lesions(&g, &Mask::zeros([8, 8, 8]), C, MatchRule::Overlap).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 1));
        assert_eq!(sensitivity(&c), Some(0.0));
        assert_eq!(ppv(&c), None);
    }

    #[test]
    fn straddling_prediction_is_single_assignment() {
        let g = blobs([12, 6, 6], &[([1, 1, 1], [4, 4, 4]), ([7, 1, 1], [9, 4, 4])]);
        let p = blobs([12, 6, 6], &[([2, 2, 2], [8, 3, 3])]);
        let c = match_lesions(&g, &p, C, MatchRule::Overlap).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 1));
    }

    #[test]
    fn false_positive_and_center_rule() {
        let g = blobs([12, 6, 6], &[([1, 1, 1], [4, 4, 4])]);
        // touches the lesion at one voxel, centroid far outside
        let p = blobs([12, 6, 6], &[([3, 2, 2], [11, 3, 3])]);
        let o = match_lesions(&g, &p, C, MatchRule::Overlap).unwrap();
        assert_eq!((o.tp, o.fp, o.fn_), (1, 0, 0));
        let ci = match_lesions(&g, &p, C, MatchRule::CenterInside).unwrap();
        assert_eq!((ci.tp, ci.fp, ci.fn_), (0, 1, 1));
    }

    #[test]
    fn rate_examples() {
        let c = |tp, fp, fn_, n| LesionCounts {
            tp,
            fp,
            fn_,
            n_subjects: n,
        };
        assert_eq!(sensitivity(&c(2, 0, 0, 1)), Some(1.0));
        assert_eq!(sensitivity(&c(0, 0, 3, 1)), Some(0.0));
        assert_eq!(sensitivity(&c(0, 4, 0, 1)), None);
        assert_eq!(fp_per_case(&c(0, 0, 0, 3)).unwrap(), 0.0);
        assert!((fp_per_case(&c(0, 99, 0, 100)).unwrap() - 0.99).abs() < 1e-12);
        assert_eq!(fp_per_case(&c(0, 3, 0, 2)).unwrap(), 1.5);
        assert!(fp_per_case(&c(0, 3, 0, 0)).is_err());
        assert_eq!(ppv(&c(1, 0, 0, 1)), Some(1.0));
        assert!((ppv(&c(53, 47, 0, 1)).unwrap() * 100.0 - 53.0).abs() < 1e-9);
        assert_eq!(ppv(&c(0, 5, 0, 1)), Some(0.0));
    }
}
