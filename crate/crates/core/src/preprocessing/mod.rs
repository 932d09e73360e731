//! Vessel extraction, normalization, contour extraction, label handling,
//! VOI cropping, subject-level splitting and augmentation.

mod augment;
pub mod filters;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply as apply_recipe, augment, default_recipes, equalize, flip, Recipe, Transform};

use crate::error::{Error, Result};
use crate::volume::{connected_components, crop, Connectivity, LabelVolume, Mask, Region, Volume3D};
use filters::{dilate_ball, dilate_box, sobel_magnitude};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Voxels at or above this quantile of the nonzero intensities are vessel.
    pub vessel_threshold_quantile: f64,
    /// Vessel components smaller than this many voxels are dropped.
    pub min_vessel_component: usize,
    /// Radius of the Euclidean ball used to smooth the mask before Sobel.
    pub smooth_dilate_radius: usize,
    /// Bounds on the per-lesion dilation radius.
    pub adaptive_dilate_clamp: [usize; 2],
    pub voi_size: usize,
    pub augmentation_recipes: Vec<Recipe>,
    pub split_ratio: f64,
    /// Compute z-score statistics inside the vessel mask instead of the whole volume.
    pub zscore_in_mask: bool,
    pub rng_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            vessel_threshold_quantile: 0.99,
            min_vessel_component: 50,
            smooth_dilate_radius: 1,
            adaptive_dilate_clamp: [1, 4],
            voi_size: 64,
            augmentation_recipes: default_recipes(),
            split_ratio: 0.8,
            zscore_in_mask: false,
            rng_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let q = self.vessel_threshold_quantile;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config(format!(
                "vessel_threshold_quantile must lie in (0, 1), got {q}"
            )));
        }
        if self.smooth_dilate_radius == 0 {
            return Err(Error::Config("smooth_dilate_radius must be positive".into()));
        }
        let [lo, hi] = self.adaptive_dilate_clamp;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "adaptive_dilate_clamp must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        if self.voi_size < 8 {
            return Err(Error::Config(format!(
                "voi_size must be at least 8, got {}",
                self.voi_size
            )));
        }
        if self.augmentation_recipes.len() != 8 {
            return Err(Error::Config(format!(
                "exactly 8 augmentation recipes are required, got {}",
                self.augmentation_recipes.len()
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

/// Result of an operation that may degrade instead of failing.
#[derive(Clone, Debug, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub warning: Option<String>,
}

impl<T> Flagged<T> {
    fn ok(value: T) -> Self {
        Flagged { value, warning: None }
    }

    fn warn(value: T, msg: String) -> Self {
        log::warn!("{msg}");
        Flagged {
            value,
            warning: Some(msg),
        }
    }
}

/// Linear-interpolated quantile of a sorted slice.
fn quantile(sorted: &[f32], q: f64) -> f32 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = (pos - i as f64) as f32;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Quantile threshold over nonzero intensities followed by a component-size filter.
pub fn extract_vessels(v: &Volume3D, cfg: &PreprocessConfig) -> Flagged<Mask> {
    let (lo, hi) = v.min_max();
    if v.is_empty() || lo == hi {
        return Flagged::warn(
            Mask::filled(*v.geometry(), 0),
            "volume has no contrast; vessel mask is empty".into(),
        );
    }
    let mut nz: Vec<f32> = v.data().iter().copied().filter(|&x| x != 0.0).collect();
    nz.sort_by(f32::total_cmp);
    let t = quantile(&nz, cfg.vessel_threshold_quantile);
    let raw = v.map(|x| (x != 0.0 && x >= t) as u8);
    let comps = connected_components(&raw, Connectivity::TwentySix);
    let mut mask = Mask::filled(*v.geometry(), 0);
    for c in comps
        .components
        .iter()
        .filter(|c| c.voxel_count() >= cfg.min_vessel_component)
    {
        for &i in &c.voxels {
            mask.data_mut()[i] = 1;
        }
    }
    Flagged::ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZScore {
    pub volume: Volume3D,
    pub mean: f64,
    pub sd: f64,
}

/// `(v - mean) / sd` with population statistics over `mask` (or all voxels).
/// A zero deviation yields all zeros and a warning.
pub fn zscore_normalize(v: &Volume3D, mask: Option<&Mask>) -> Result<Flagged<ZScore>> {
    if let Some(m) = mask {
        v.ensure_same_dims(m, "z-score mask")?;
    }
    let support: Vec<f64> = match mask {
        Some(m) => v
            .data()
            .iter()
            .zip(m.data())
            .filter(|(_, &k)| k != 0)
            .map(|(&x, _)| x as f64)
            .collect(),
        None => v.data().iter().map(|&x| x as f64).collect(),
    };
    if support.is_empty() {
        return Err(Error::Invalid("z-score support is empty".into()));
    }
    let n = support.len() as f64;
    let mean = support.iter().sum::<f64>() / n;
    let sd = (support.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) || sd < 1e-12 * mean.abs().max(1.0) {
        let z = ZScore {
            volume: v.map(|_| 0.0),
            mean,
            sd: 0.0,
        };
        return Ok(Flagged::warn(
            z,
            "zero intensity deviation; normalized volume is all zeros".into(),
        ));
    }
    let volume = v.map(|x| ((x as f64 - mean) / sd) as f32);
    Ok(Flagged::ok(ZScore { volume, mean, sd }))
}

/// Sobel magnitude of the mask after dilation by a Euclidean ball.
pub fn extract_contour(mask: &Mask, cfg: &PreprocessConfig) -> Volume3D {
    if mask.count_set() == 0 {
        return Volume3D::filled(*mask.geometry(), 0.0);
    }
    let smooth = dilate_ball(mask, cfg.smooth_dilate_radius as f64);
    sobel_magnitude(&smooth.map(|x| x as f32))
}

/// Ruptured lesions (2) become background; other values must be 0 or 1.
pub fn remap_ruptured(l: &LabelVolume) -> Result<LabelVolume> {
    if let Some((index, &value)) = l.data().iter().enumerate().find(|(_, &x)| x > 2) {
        return Err(Error::Label { value, index });
    }
    Ok(l.map(|x| (x == 1) as u8))
}

/// Radius applied to a lesion whose largest bounding-box side is `extent`.
pub fn dilation_radius(extent: usize, clamp: [usize; 2]) -> usize {
    ((extent as f64 / 10.0).round() as usize).clamp(clamp[0], clamp[1])
}

/// Dilates each lesion by a box of radius `clamp(round(D / 10))`.
pub fn adaptive_dilate_labels(l: &LabelVolume, cfg: &PreprocessConfig) -> Result<LabelVolume> {
    if let Some((index, &value)) = l.data().iter().enumerate().find(|(_, &x)| x > 1) {
        return Err(Error::Label { value, index });
    }
    let dims = l.dims();
    let comps = connected_components(l, Connectivity::TwentySix);
    let mut out = l.clone();
    for c in &comps.components {
        let r = dilation_radius(c.max_extent(), cfg.adaptive_dilate_clamp);
        let lo: [usize; 3] = std::array::from_fn(|a| (c.bbox.start[a] as usize).saturating_sub(r));
        let hi: [usize; 3] = std::array::from_fn(|a| (c.bbox.end()[a] as usize + r).min(dims[a]));
        let ld: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
        let mut local = vec![0u8; ld[0] * ld[1] * ld[2]];
        for &i in &c.voxels {
            let p = l.coords(i);
            local[(p[0] - lo[0]) + ld[0] * ((p[1] - lo[1]) + ld[1] * (p[2] - lo[2]))] = 1;
        }
        dilate_box(&mut local, ld, r);
        for z in 0..ld[2] {
            for y in 0..ld[1] {
                for x in 0..ld[0] {
                    if local[x + ld[0] * (y + ld[1] * z)] != 0 {
                        out.set(lo[0] + x, lo[1] + y, lo[2] + z, 1);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A dual-channel cube and its label, with its placement in the source volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VoiCrop {
    pub image: Volume3D,
    pub contour: Volume3D,
    pub label: LabelVolume,
    pub placement: Region,
    pub subject_id: String,
}

/// Crops all three grids at `center`.
pub fn crop_at(
    img: &Volume3D,
    contour: &Volume3D,
    l: &LabelVolume,
    center: [i64; 3],
    size: usize,
    subject_id: &str,
) -> Result<VoiCrop> {
    img.ensure_same_dims(contour, "image vs contour")?;
    img.ensure_same_dims(l, "image vs label")?;
    let r = Region::centered(center, [size; 3]);
    Ok(VoiCrop {
        image: crop(img, &r, 0.0)?,
        contour: crop(contour, &r, 0.0)?,
        label: crop(l, &r, 0)?,
        placement: r,
        subject_id: subject_id.to_string(),
    })
}

/// One crop per lesion centered at its rounded centroid. Without lesions,
/// one crop at a seeded-random vessel voxel, or at the volume center when
/// the vessel mask is empty.
pub fn crop_voi_samples(
    img: &Volume3D,
    contour: &Volume3D,
    l: &LabelVolume,
    vessels: Option<&Mask>,
    cfg: &PreprocessConfig,
    subject_id: &str,
) -> Result<Vec<VoiCrop>> {
    img.ensure_same_dims(l, "image vs label")?;
    let comps = connected_components(l, Connectivity::TwentySix);
    let centers: Vec<[i64; 3]> = if comps.is_empty() {
        let vox = vessels.map(|m| m.set_indices()).unwrap_or_default();
        let c = if vox.is_empty() {
            img.dims().map(|d| (d / 2) as i64)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ fnv1a(subject_id));
            img.coords(vox[rng.random_range(0..vox.len())]).map(|c| c as i64)
        };
        vec![c]
    } else {
        comps.components.iter().map(|c| c.rounded_centroid()).collect()
    };
    centers
        .into_iter()
        .map(|c| crop_at(img, contour, l, c, cfg.voi_size, subject_id))
        .collect()
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Number of training subjects out of `n` for a given ratio.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

/// Seeded subject-level partition into (train, val).
pub fn split_subjects(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let uniq: BTreeSet<&String> = ids.iter().collect();
    if uniq.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 subjects to split, got {}",
            uniq.len()
        )));
    }
    let mut order: Vec<String> = uniq.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(train_count(order.len(), ratio));
    Ok((order, val))
}

pub fn split_train_val(samples: Vec<VoiCrop>, cfg: &PreprocessConfig) -> Result<(Vec<VoiCrop>, Vec<VoiCrop>)> {
    let ids: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    let (train_ids, _) = split_subjects(&ids, cfg.split_ratio, cfg.rng_seed)?;
    let train_ids: BTreeSet<String> = train_ids.into_iter().collect();
    Ok(samples.into_iter().partition(|s| train_ids.contains(&s.subject_id)))
}

/// Manifest row describing one crop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub center_xyz: [i64; 3],
    pub size: [usize; 3],
    pub label_count: usize,
}

impl From<&VoiCrop> for ManifestEntry {
    fn from(s: &VoiCrop) -> Self {
        ManifestEntry {
            subject_id: s.subject_id.clone(),
            center_xyz: s.placement.center(),
            size: s.placement.size,
            label_count: s.label.count_set(),
        }
    }
}

/// Everything derived from one raw subject.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vessels: Mask,
    /// Z-scored intensities restricted to the vessel mask.
    pub vessel_image: Volume3D,
    pub contour: Volume3D,
    pub warnings: Vec<String>,
}

/// Vessel extraction (unless `vessels` is given), z-score normalization and
/// contour extraction.
pub fn prepare_image(img: &Volume3D, vessels: Option<Mask>, cfg: &PreprocessConfig) -> Result<Prepared> {
    let mut warnings = Vec::new();
    let vessels = match vessels {
        Some(m) => {
            img.ensure_same_dims(&m, "image vs vessel mask")?;
            m.map(|x| (x != 0) as u8)
        }
        None => {
            let f = extract_vessels(img, cfg);
            warnings.extend(f.warning);
            f.value
        }
    };
    let support = (cfg.zscore_in_mask && vessels.count_set() > 0).then_some(&vessels);
    let z = zscore_normalize(img, support)?;
    warnings.extend(z.warning);
    let vessel_image = z.value.volume.with_data(
        z.value
            .volume
            .data()
            .iter()
            .zip(vessels.data())
            .map(|(&x, &m)| if m != 0 { x } else { 0.0 })
            .collect(),
    )?;
    let contour = extract_contour(&vessels, cfg);
    Ok(Prepared {
        vessels,
        vessel_image,
        contour,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn tube(dims: [usize; 3], value: f32) -> Volume3D {
        let mut v = Volume3D::zeros(dims);
        for x in 0..dims[0] {
            for y in 4..7 {
                for z in 4..7 {
                    v.set(x, y, z, value);
                }
            }
        }
        v
    }

    fn ball(dims: [usize; 3], c: [f64; 3], r: f64) -> Mask {
        let mut m = Mask::zeros(dims);
        for i in 0..m.len() {
            let p = m.coords(i);
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
            if d2 <= r * r {
                m.data_mut()[i] = 1;
            }
        }
        m
    }

    fn cfg(q: f64, min: usize) -> PreprocessConfig {
        PreprocessConfig {
            vessel_threshold_quantile: q,
            min_vessel_component: min,
            ..Default::default()
        }
    }

    #[test]
    fn vessels_constant_volume_is_empty() {
        let v = Volume3D::new(Geometry::new([4, 4, 4]), vec![7.0; 64]).unwrap();
        let f = extract_vessels(&v, &cfg(0.5, 1));
        assert_eq!(f.value.count_set(), 0);
        assert!(f.warning.is_some());
    }

    #[test]
    fn vessels_tube_threshold() {
        let v = tube([20, 12, 12], 1000.0);
        let m = extract_vessels(&v, &cfg(0.5, 5)).value;
        assert_eq!(m, v.to_mask());
    }

    #[test]
    fn vessels_small_component_filtered() {
        let v = tube([20, 12, 12], 1000.0);
        let base = extract_vessels(&v, &cfg(0.5, 5)).value;
        let mut w = v.clone();
        w.set(15, 10, 10, 1000.0);
        assert_eq!(extract_vessels(&w, &cfg(0.5, 5)).value, base);
    }

    #[test]
    fn zscore_examples() {
        let c = Volume3D::new(Geometry::new([2, 2, 2]), vec![5.0; 8]).unwrap();
        let z = zscore_normalize(&c, None).unwrap();
        assert!(z.warning.is_some());
        assert!(z.value.volume.data().iter().all(|&x| x == 0.0));

        let v = Volume3D::new(Geometry::new([3, 1, 1]), vec![-1.0, 0.0, 1.0]).unwrap();
        let z = zscore_normalize(&v, None).unwrap().value;
        assert!((z.sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let s = (1.5f64).sqrt() as f32;
        assert_eq!(z.volume.data(), &[-s, 0.0, s]);
    }

    #[test]
    fn zscore_inside_mask() {
        let v = Volume3D::new(Geometry::new([4, 1, 1]), vec![100.0, 1.0, 3.0, -50.0]).unwrap();
        let mut m = Mask::zeros([4, 1, 1]);
        m.data_mut()[1] = 1;
        m.data_mut()[2] = 1;
        let z = zscore_normalize(&v, Some(&m)).unwrap().value;
        assert_eq!(z.mean, 2.0);
        assert_eq!(z.volume.data()[1], -1.0);
        assert_eq!(z.volume.data()[2], 1.0);
    }

    proptest! {
        #[test]
        fn zscore_statistics(data in proptest::collection::vec(-1000.0f32..1000.0, 27)) {
            let v = Volume3D::new(Geometry::new([3, 3, 3]), data).unwrap();
            let z = zscore_normalize(&v, None).unwrap();
            prop_assume!(z.warning.is_none());
            let d: Vec<f64> = z.value.volume.data().iter().map(|&x| x as f64).collect();
            let mean = d.iter().sum::<f64>() / 27.0;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 27.0).sqrt();
            // outputs are stored as f32
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn contour_trivial_cases() {
        let c = PreprocessConfig::default();
        assert!(extract_contour(&Mask::zeros([6, 6, 6]), &c)
            .data()
            .iter()
            .all(|&x| x == 0.0));
        let ones = Mask::filled(Geometry::new([6, 6, 6]), 1);
        assert!(extract_contour(&ones, &c).data().iter().all(|&x| x == 0.0));
    }

    /// Chebyshev distance from `p` to the nearest surface voxel of `m`
    /// (mask voxels with an unset 26-neighbor).
    fn surface_distance(m: &Mask, p: [usize; 3]) -> usize {
        let dims = m.dims();
        let mut best = usize::MAX;
        for i in 0..m.len() {
            if m.data()[i] == 0 {
                continue;
            }
            let q = m.coords(i);
            let surface = (-1i64..=1).any(|dz| {
                (-1i64..=1).any(|dy| {
                    (-1i64..=1).any(|dx| {
                        let n = [q[0] as i64 + dx, q[1] as i64 + dy, q[2] as i64 + dz];
                        (0..3).any(|a| n[a] < 0 || n[a] >= dims[a] as i64)
                            || m.get(n[0] as usize, n[1] as usize, n[2] as usize) == 0
                    })
                })
            });
            if surface {
                best = best.min((0..3).map(|a| p[a].abs_diff(q[a])).max().unwrap());
            }
        }
        best
    }

    #[test]
    fn contour_of_ball_is_a_thin_shell() {
        let m = ball([20, 20, 20], [10.0; 3], 6.0);
        let c = extract_contour(&m, &PreprocessConfig::default());
        let mut n = 0;
        for i in 0..c.len() {
            if c.data()[i] != 0.0 {
                n += 1;
                assert!(surface_distance(&m, c.coords(i)) <= 2);
            }
        }
        assert!(n > 0);
        assert_eq!(c.get(10, 10, 10), 0.0);
        assert_eq!(c.get(0, 0, 0), 0.0);
    }

    #[test]
    fn contour_locality_on_two_blobs() {
        let mut m = ball([18, 14, 14], [5.0, 6.0, 7.0], 3.0);
        let b = ball([18, 14, 14], [13.0, 7.0, 6.0], 2.5);
        m.data_mut().iter_mut().zip(b.data()).for_each(|(a, b)| *a |= b);
        let cfg = PreprocessConfig {
            smooth_dilate_radius: 2,
            ..Default::default()
        };
        let c = extract_contour(&m, &cfg);
        for i in (0..c.len()).filter(|&i| c.data()[i] != 0.0) {
            assert!(surface_distance(&m, c.coords(i)) <= 3);
        }
    }

    #[test]
    fn remap_examples() {
        let g = Geometry::new([3, 1, 1]);
        let all2 = LabelVolume::filled(g, 2);
        assert_eq!(remap_ruptured(&all2).unwrap().count_set(), 0);
        let mixed = LabelVolume::from_data(g, vec![0, 1, 2]).unwrap();
        assert_eq!(remap_ruptured(&mixed).unwrap().data(), &[0, 1, 0]);
        let plain = LabelVolume::from_data(g, vec![0, 1, 1]).unwrap();
        assert_eq!(remap_ruptured(&plain).unwrap(), plain);
        assert!(remap_ruptured(&LabelVolume::from_data(g, vec![0, 3, 1]).unwrap()).is_err());
    }

    #[test]
    fn adaptive_dilation_examples() {
        let c = PreprocessConfig::default();
        let empty = LabelVolume::zeros([5, 5, 5]);
        assert_eq!(adaptive_dilate_labels(&empty, &c).unwrap(), empty);
        let mut one = LabelVolume::zeros([5, 5, 5]);
        one.set(2, 2, 2, 1);
        assert_eq!(adaptive_dilate_labels(&one, &c).unwrap().count_set(), 27);
        assert_eq!(dilation_radius(40, [1, 4]), 4);
        assert_eq!(dilation_radius(1, [1, 4]), 1);
        assert_eq!(dilation_radius(95, [1, 4]), 4);
        assert_eq!(dilation_radius(25, [1, 4]), 3);
    }

    #[test]
    fn large_lesion_gets_clamped_radius() {
        let m = ball([60, 60, 60], [30.0; 3], 19.6);
        let l = m.clone();
        assert_eq!(
            connected_components(&l, Connectivity::TwentySix).components[0].max_extent(),
            39
        );
        let d = adaptive_dilate_labels(&l, &PreprocessConfig::default()).unwrap();
        // radius round(3.9) = 4 along the axis through the center
        assert_eq!(d.get(30 + 19 + 4, 30, 30), 1);
        assert_eq!(d.get(30 + 19 + 5, 30, 30), 0);
    }

    proptest! {
        #[test]
        fn adaptive_dilation_is_extensive(bits in proptest::collection::vec(proptest::bool::weighted(0.05), 512)) {
            let l = LabelVolume::from_data(Geometry::new([8, 8, 8]), bits.iter().map(|&b| b as u8).collect()).unwrap();
            let d = adaptive_dilate_labels(&l, &PreprocessConfig::default()).unwrap();
            for (a, b) in l.data().iter().zip(d.data()) {
                prop_assert!(*a <= *b);
            }
        }
    }

    #[test]
    fn separated_lesions_stay_separate() {
        let mut l = LabelVolume::zeros([40, 12, 12]);
        l.set(5, 6, 6, 1);
        l.set(5 + 2 * 4 + 3, 6, 6, 1);
        let d = adaptive_dilate_labels(&l, &PreprocessConfig::default()).unwrap();
        assert_eq!(connected_components(&d, Connectivity::TwentySix).len(), 2);
    }

    fn grids(dims: [usize; 3]) -> (Volume3D, Volume3D) {
        let img = Volume3D::new(
            Geometry::new(dims),
            (0..dims.iter().product()).map(|i| i as f32).collect(),
        )
        .unwrap();
        (img.clone(), img.map(|x| -x))
    }

    #[test]
    fn crops_per_component() {
        let c = PreprocessConfig {
            voi_size: 16,
            ..Default::default()
        };
        let (img, con) = grids([40, 40, 40]);
        let mut l = LabelVolume::zeros([40, 40, 40]);
        for x in 8..11 {
            l.set(x, 9, 9, 1);
        }
        let one = crop_voi_samples(&img, &con, &l, None, &c, "s").unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].placement.center(), [9, 9, 9]);
        assert_eq!(one[0].label.get(8, 8, 8), 1);
        assert_eq!(one[0].image.get(8, 8, 8), img.get(9, 9, 9));
        assert_eq!(one[0].contour.get(8, 8, 8), con.get(9, 9, 9));
        l.set(30, 30, 30, 1);
        assert_eq!(crop_voi_samples(&img, &con, &l, None, &c, "s").unwrap().len(), 2);
    }

    #[test]
    fn normal_case_crops() {
        let c = PreprocessConfig {
            voi_size: 8,
            ..Default::default()
        };
        let (img, con) = grids([20, 20, 20]);
        let l = LabelVolume::zeros([20, 20, 20]);
        let s = crop_voi_samples(&img, &con, &l, None, &c, "n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].placement.center(), [10, 10, 10]);
        assert_eq!(s[0].label.count_set(), 0);
        let mut v = Mask::zeros([20, 20, 20]);
        v.set(3, 4, 5, 1);
        v.set(15, 4, 5, 1);
        let a = crop_voi_samples(&img, &con, &l, Some(&v), &c, "n").unwrap();
        let b = crop_voi_samples(&img, &con, &l, Some(&v), &c, "n").unwrap();
        assert_eq!(a, b);
        assert!([[3, 4, 5], [15, 4, 5]].contains(&a[0].placement.center()));
    }

    fn sample(id: &str) -> VoiCrop {
        let (img, con) = grids([8, 8, 8]);
        let mut l = LabelVolume::zeros([8, 8, 8]);
        l.set(1, 2, 3, 1);
        l.set(2, 2, 3, 1);
        crop_at(&img, &con, &l, [4, 4, 4], 8, id).unwrap()
    }

    #[test]
    fn augmentation_contract() {
        let s = sample("a");
        let out = augment(&s, &default_recipes());
        assert_eq!(out.len(), 8);
        assert_eq!(out[0], s);
        for o in &out {
            assert_eq!(o.label.count_set(), s.label.count_set());
        }
        // intensity-only recipes leave the label and contour untouched
        for i in [4, 5] {
            assert_eq!(out[i].label, s.label);
            assert_eq!(out[i].contour, s.contour);
            assert_ne!(out[i].image, s.image);
        }
        let fx: Recipe = "flip_x+flip_x".parse().unwrap();
        assert_eq!(apply_recipe(&s, &fx), s);
        assert_eq!(out[1].label.get(6, 2, 3), 1);
    }

    #[test]
    fn split_examples() {
        let c = PreprocessConfig::default();
        let ten: Vec<VoiCrop> = (0..10).map(|i| sample(&format!("s{i}"))).collect();
        let (t, v) = split_train_val(ten.clone(), &c).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t2, _) = split_train_val(ten, &c).unwrap();
        assert_eq!(t, t2);
        let five: Vec<VoiCrop> = (0..5).map(|i| sample(&format!("s{i}"))).collect();
        let (t, v) = split_train_val(five, &c).unwrap();
        assert_eq!((t.len(), v.len()), (4, 1));
        assert!(split_train_val(vec![sample("x"), sample("x")], &c).is_err());
    }

    #[test]
    fn split_keeps_subjects_whole() {
        let mut s: Vec<VoiCrop> = (0..6).map(|i| sample(&format!("s{i}"))).collect();
        s.extend((0..6).map(|i| sample(&format!("s{i}"))));
        let (t, v) = split_train_val(s, &PreprocessConfig::default()).unwrap();
        let ti: BTreeSet<_> = t.iter().map(|x| x.subject_id.clone()).collect();
        assert!(v.iter().all(|x| !ti.contains(&x.subject_id)));
        assert_eq!(t.len() + v.len(), 12);
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let mut c = PreprocessConfig::default();
        c.augmentation_recipes.pop();
        assert!(c.validate().is_err());
        let c = PreprocessConfig {
            voi_size: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = PreprocessConfig {
            split_ratio: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
