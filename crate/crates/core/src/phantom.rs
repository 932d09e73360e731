//! Synthetic angiography phantoms: bright curved tubes on a dark noisy
//! background, with ellipsoidal bulges attached to the tubes as lesions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub volume_dims: [usize; 3],
    pub spacing: [f32; 3],
    pub n_vessels: usize,
    /// Tube radius range in voxels; each tube tapers between two draws.
    pub vessel_radius: [f64; 2],
    /// Unruptured lesions, labeled 1.
    pub n_aneurysms: usize,
    /// Ruptured lesions, labeled 2.
    pub n_ruptured: usize,
    /// Semi-axis range of the lesion ellipsoids in voxels.
    pub aneurysm_radius: [f64; 2],
    pub background: f32,
    pub vessel_intensity: f32,
    pub noise_sigma: f32,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            volume_dims: [128; 3],
            spacing: [1.0; 3],
            n_vessels: 3,
            vessel_radius: [1.5, 3.0],
            n_aneurysms: 1,
            n_ruptured: 0,
            aneurysm_radius: [3.0, 6.0],
            background: 100.0,
            vessel_intensity: 1000.0,
            noise_sigma: 30.0,
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.volume_dims.iter().any(|&d| d < 16) {
            return bad("every dimension must be at least 16");
        }
        let [a, b] = self.vessel_radius;
        if !(a > 0.0 && a <= b) {
            return bad("vessel_radius must satisfy 0 < min <= max");
        }
        let [a, b] = self.aneurysm_radius;
        if !(a > 0.0 && a <= b) {
            return bad("aneurysm_radius must satisfy 0 < min <= max");
        }
        if self.n_vessels == 0 && self.n_aneurysms + self.n_ruptured > 0 {
            return bad("lesions need at least one vessel to attach to");
        }
        if !(self.noise_sigma >= 0.0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("noise_sigma must be non-negative and spacing positive");
        }
        Ok(())
    }

    /// Spec for the `i`-th subject of a seeded cohort.
    pub fn for_subject(&self, i: usize) -> Self {
        PhantomSpec {
            rng_seed: self.rng_seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..self.clone()
        }
    }
}

type P3 = [f64; 3];

fn lerp(a: P3, b: P3, t: f64) -> P3 {
    std::array::from_fn(|k| a[k] + (b[k] - a[k]) * t)
}

struct Tube {
    points: Vec<P3>,
    radii: Vec<f64>,
}

/// Cubic Bezier from one face to the opposite face with two interior control points.
fn random_tube(rng: &mut ChaCha8Rng, dims: [usize; 3], radius: [f64; 2]) -> Tube {
    let d = dims.map(|v| v as f64);
    let axis = rng.random_range(0..3);
    let inner = |rng: &mut ChaCha8Rng, k: usize| rng.random_range(0.2 * d[k]..0.8 * d[k]);
    let mut p0 = [0.0; 3];
    let mut p3 = [0.0; 3];
    for k in 0..3 {
        p0[k] = inner(rng, k);
        p3[k] = inner(rng, k);
    }
    p0[axis] = 0.0;
    p3[axis] = d[axis] - 1.0;
    let p1: P3 = std::array::from_fn(|k| inner(rng, k));
    let p2: P3 = std::array::from_fn(|k| inner(rng, k));
    let r0 = rng.random_range(radius[0]..=radius[1]);
    let r1 = rng.random_range(radius[0]..=radius[1]);
    let n = 4 * dims.iter().max().unwrap();
    let mut points = Vec::with_capacity(n + 1);
    let mut radii = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let a = lerp(lerp(p0, p1, t), lerp(p1, p2, t), t);
        let b = lerp(lerp(p1, p2, t), lerp(p2, p3, t), t);
        points.push(lerp(a, b, t));
        radii.push(r0 + (r1 - r0) * t);
    }
    Tube { points, radii }
}

fn for_ball(dims: [usize; 3], c: P3, r: [f64; 3], mut f: impl FnMut(usize, usize, usize)) {
    let lo: [usize; 3] = std::array::from_fn(|k| (c[k] - r[k]).floor().max(0.0) as usize);
    let hi: [usize; 3] = std::array::from_fn(|k| ((c[k] + r[k]).ceil() as usize).min(dims[k] - 1));
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = [x as f64, y as f64, z as f64];
                let q: f64 = (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum();
                if q <= 1.0 {
                    f(x, y, z);
                }
            }
        }
    }
}

struct Lesion {
    center: P3,
    radii: [f64; 3],
}

fn place_lesion(rng: &mut ChaCha8Rng, tubes: &[Tube], placed: &[Lesion], spec: &PhantomSpec) -> Option<Lesion> {
    let d = spec.volume_dims.map(|v| v as f64);
    let [amin, amax] = spec.aneurysm_radius;
    for _ in 0..200 {
        let tube = &tubes[rng.random_range(0..tubes.len())];
        let n = tube.points.len();
        let i = rng.random_range(n / 5..4 * n / 5);
        let p = tube.points[i];
        let tangent: P3 = std::array::from_fn(|k| tube.points[(i + 1).min(n - 1)][k] - tube.points[i - 1][k]);
        // random direction orthogonal to the tangent
        let g: P3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let tt: f64 = tangent.iter().map(|v| v * v).sum();
        let gt: f64 = g.iter().zip(&tangent).map(|(a, b)| a * b).sum();
        let mut dir: P3 = std::array::from_fn(|k| g[k] - gt / tt * tangent[k]);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        dir.iter_mut().for_each(|v| *v /= norm);
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(amin..=amax));
        let reach: f64 = (0..3).map(|k| (dir[k] * radii[k]).powi(2)).sum::<f64>().sqrt();
        let offset = tube.radii[i] + 0.5 * reach;
        let center: P3 = std::array::from_fn(|k| p[k] + dir[k] * offset);
        let margin = amax + 2.0;
        if (0..3).any(|k| center[k] < margin || center[k] > d[k] - 1.0 - margin) {
            continue;
        }
        let far = placed.iter().all(|l| {
            let dist = (0..3).map(|k| (l.center[k] - center[k]).powi(2)).sum::<f64>().sqrt();
            dist > 2.0 * amax + 12.0
        });
        if far {
            return Some(Lesion { center, radii });
        }
    }
    None
}

/// Image and label map (0 background, 1 unruptured, 2 ruptured).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, LabelVolume)> {
    spec.validate()?;
    let dims = spec.volume_dims;
    let geom = Geometry::new(dims).with_spacing(spec.spacing);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let tubes: Vec<Tube> = (0..spec.n_vessels)
        .map(|_| random_tube(&mut rng, dims, spec.vessel_radius))
        .collect();
    let mut bright = vec![false; geom.len()];
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    for t in &tubes {
        for (p, &r) in t.points.iter().zip(&t.radii) {
            for_ball(dims, *p, [r; 3], |x, y, z| bright[idx(x, y, z)] = true);
        }
    }
    let mut labels = LabelVolume::filled(geom, 0);
    let mut placed: Vec<Lesion> = Vec::new();
    for k in 0..spec.n_aneurysms + spec.n_ruptured {
        let value = if k < spec.n_aneurysms { 1 } else { 2 };
        let l = place_lesion(&mut rng, &tubes, &placed, spec)
            .ok_or_else(|| Error::Invalid(format!("could not place lesion {} after 200 attempts", k + 1)))?;
        for_ball(dims, l.center, l.radii, |x, y, z| {
            bright[idx(x, y, z)] = true;
            labels.set(x, y, z, value);
        });
        placed.push(l);
    }
    let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let data: Vec<f32> = bright
        .iter()
        .map(|&b| {
            let base = if b { spec.vessel_intensity } else { spec.background };
            base + noise.sample(&mut rng)
        })
        .collect();
    Ok((Volume3D::new(geom, data)?, labels))
}
