use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::filters::gaussian_filter;
use super::VoiCrop;
use crate::error::{Error, Result};
use crate::volume::{Volume, Volume3D, Voxel};

/// Smoothing scale of the Gaussian augmentation, in voxels.
pub const GAUSSIAN_SIGMA: f64 = 0.5;
/// Histogram bins used by equalization.
pub const EQUALIZE_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    FlipX,
    FlipY,
    FlipZ,
    Gaussian,
    Equalize,
}

impl Transform {
    pub fn is_geometric(self) -> bool {
        matches!(self, Transform::FlipX | Transform::FlipY | Transform::FlipZ)
    }
}

/// A sequence of transforms applied left to right; the empty recipe is the
/// identity. Written as `identity` or tags joined by `+`, e.g. `flip_x+gaussian`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Recipe(pub Vec<Transform>);

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(Recipe::default());
        }
        s.split('+')
            .map(|t| match t.trim() {
                "flip_x" => Ok(Transform::FlipX),
                "flip_y" => Ok(Transform::FlipY),
                "flip_z" => Ok(Transform::FlipZ),
                "gaussian" => Ok(Transform::Gaussian),
                "equalize" => Ok(Transform::Equalize),
                other => Err(Error::Config(format!("unknown augmentation tag {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Recipe)
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("identity");
        }
        let tags: Vec<&str> = self
            .0
            .iter()
            .map(|t| match t {
                Transform::FlipX => "flip_x",
                Transform::FlipY => "flip_y",
                Transform::FlipZ => "flip_z",
                Transform::Gaussian => "gaussian",
                Transform::Equalize => "equalize",
            })
            .collect();
        f.write_str(&tags.join("+"))
    }
}

impl Serialize for Recipe {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Recipe {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn default_recipes() -> Vec<Recipe> {
    [
        "identity",
        "flip_x",
        "flip_y",
        "flip_z",
        "gaussian",
        "equalize",
        "flip_x+gaussian",
        "flip_x+equalize",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .collect()
}

pub fn flip<T: Voxel>(v: &Volume<T>, axis: usize) -> Volume<T> {
    let [nx, ny, nz] = v.dims();
    let mut out = v.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let src = match axis {
                    0 => v.get(nx - 1 - x, y, z),
                    1 => v.get(x, ny - 1 - y, z),
                    _ => v.get(x, y, nz - 1 - z),
                };
                out.set(x, y, z, src);
            }
        }
    }
    out
}

/// Histogram equalization over `bins` equal-width bins spanning the volume's
/// range; each voxel maps to `min + (max - min) * cdf(bin)`.
pub fn equalize(v: &Volume3D, bins: usize) -> Volume3D {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return v.clone();
    }
    let width = (hi - lo) as f64 / bins as f64;
    let bin = |x: f32| (((x - lo) as f64 / width) as usize).min(bins - 1);
    let mut hist = vec![0usize; bins];
    for &x in v.data() {
        hist[bin(x)] += 1;
    }
    let n = v.len() as f64;
    let mut acc = 0;
    let cdf: Vec<f64> = hist
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / n
        })
        .collect();
    v.map(|x| lo + (hi - lo) * cdf[bin(x)] as f32)
}

pub fn apply(s: &VoiCrop, r: &Recipe) -> VoiCrop {
    let mut out = s.clone();
    for &t in &r.0 {
        match t {
            Transform::FlipX | Transform::FlipY | Transform::FlipZ => {
                let axis = match t {
                    Transform::FlipX => 0,
                    Transform::FlipY => 1,
                    _ => 2,
                };
                out.image = flip(&out.image, axis);
                out.contour = flip(&out.contour, axis);
                out.label = flip(&out.label, axis);
            }
            Transform::Gaussian => out.image = gaussian_filter(&out.image, GAUSSIAN_SIGMA),
            Transform::Equalize => out.image = equalize(&out.image, EQUALIZE_BINS),
        }
    }
    out
}

/// One output per recipe, in order.
pub fn augment(s: &VoiCrop, recipes: &[Recipe]) -> Vec<VoiCrop> {
    recipes.iter().map(|r| apply(s, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_roundtrip() {
        for r in default_recipes() {
            assert_eq!(r.to_string().parse::<Recipe>().unwrap(), r);
        }
        assert!("flip_w".parse::<Recipe>().is_err());
    }

    #[test]
    fn equalize_constant_is_identity() {
        let v = Volume3D::new(crate::volume::Geometry::new([2, 2, 2]), vec![4.0; 8]).unwrap();
        assert_eq!(equalize(&v, 256), v);
    }

    #[test]
    fn equalize_is_monotone_and_in_range() {
        let data: Vec<f32> = (0..64).map(|i| ((i * 37) % 64) as f32 * 0.1 - 2.0).collect();
        let v = Volume3D::new(crate::volume::Geometry::new([4, 4, 4]), data).unwrap();
        let e = equalize(&v, 256);
        let (lo, hi) = v.min_max();
        for (a, ea) in v.data().iter().zip(e.data()) {
            assert!(*ea >= lo && *ea <= hi);
            for (b, eb) in v.data().iter().zip(e.data()) {
                if a < b {
                    assert!(ea <= eb);
                }
            }
        }
    }
}
