//! Volumetric data model shared by every stage: typed voxel grids with
//! spacing and origin, axis-aligned regions, crop/paste/resample, and
//! connected-component analysis.

mod components;
pub mod nifti;

pub use components::{connected_components, Component, ComponentSet, Connectivity};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid geometry: voxel counts (x fastest), spacing in mm/voxel, origin in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3]) -> Self {
        Geometry {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in dims {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Invalid("non-finite origin".into()));
        }
        Ok(())
    }
}

/// Marker for element types that can live in a [`Volume`].
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    fn is_set(self) -> bool;
}

impl Voxel for f32 {
    fn is_set(self) -> bool {
        self != 0.0
    }
}

impl Voxel for u8 {
    fn is_set(self) -> bool {
        self != 0
    }
}

/// A dense 3D grid stored in x-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    geom: Geometry,
    data: Vec<T>,
}

/// Real-valued image (intensities, contours, probabilities).
pub type Volume3D = Volume<f32>;
/// Integer label map; 0 is background.
pub type LabelVolume = Volume<u8>;
/// Binary mask stored as 0/1 labels.
pub type Mask = Volume<u8>;

impl<T: Voxel> Volume<T> {
    pub fn from_data(geom: Geometry, data: Vec<T>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Volume { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Self {
        Volume {
            data: vec![value; geom.len()],
            geom,
        }
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(Geometry::new(dims), T::default())
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.geom.dims;
        x + nx * (y + ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.geom.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Value at possibly out-of-range signed coordinates.
    #[inline]
    pub fn get_signed(&self, p: [i64; 3]) -> Option<T> {
        let d = self.geom.dims;
        if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d[a]) {
            Some(self.get(p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    }

    pub fn same_geometry<U: Voxel>(&self, other: &Volume<U>) -> bool {
        self.geom.dims == other.geom.dims
    }

    pub fn ensure_same_dims<U: Voxel>(&self, other: &Volume<U>, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.geom.dims, other.geom.dims
            )))
        }
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn with_data<U: Voxel>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Volume::from_data(self.geom, data)
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|v| v.is_set()).count()
    }

    /// Indices of every nonzero voxel, in storage order.
    pub fn set_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_set())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bounds(&self) -> Region {
        Region::new([0, 0, 0], self.geom.dims)
    }
}

impl Volume3D {
    /// Builds an image, rejecting non-finite samples.
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value at voxel {i}")));
        }
        Self::from_data(geom, data)
    }

    pub fn to_mask(&self) -> Mask {
        self.map(|v| u8::from(v != 0.0))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl LabelVolume {
    pub fn to_f32(&self) -> Volume3D {
        self.map(f32::from)
    }

    /// Binarizes any nonzero label to 1.
    pub fn binarized(&self) -> Mask {
        self.map(|v| u8::from(v != 0))
    }
}

/// Axis-aligned box in voxel coordinates. `start` may be negative or extend
/// past the far edge; crops pad such voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub start: [i64; 3],
    pub size: [usize; 3],
}

impl Region {
    pub fn new(start: [i64; 3], size: [usize; 3]) -> Self {
        Region { start, size }
    }

    /// Box of `size` whose voxel `size/2` lands on `center`.
    pub fn centered(center: [i64; 3], size: [usize; 3]) -> Self {
        let start = std::array::from_fn(|a| center[a] - (size[a] / 2) as i64);
        Region { start, size }
    }

    pub fn end(&self) -> [i64; 3] {
        std::array::from_fn(|a| self.start[a] + self.size[a] as i64)
    }

    pub fn center(&self) -> [i64; 3] {
        std::array::from_fn(|a| self.start[a] + (self.size[a] / 2) as i64)
    }

    pub fn voxel_count(&self) -> usize {
        self.size.iter().product()
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        let e = self.end();
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < e[a])
    }

    /// Intersection with `[0, dims)`, as (start, end) in grid coordinates.
    pub fn clip(&self, dims: [usize; 3]) -> Option<([usize; 3], [usize; 3])> {
        let e = self.end();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = self.start[a].max(0);
            let h = e[a].min(dims[a] as i64);
            if h <= l {
                return None;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        Some((lo, hi))
    }

    fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return Err(Error::Invalid(format!("empty region size {:?}", self.size)));
        }
        Ok(())
    }
}

/// Extracts `r` from `v`; voxels outside `v` take `pad`. The output origin
/// records where the crop sits in the source frame.
pub fn crop<T: Voxel>(v: &Volume<T>, r: &Region, pad: T) -> Result<Volume<T>> {
    r.validate()?;
    let sp = v.spacing();
    let o = v.origin();
    let geom = Geometry {
        dims: r.size,
        spacing: sp,
        origin: std::array::from_fn(|a| o[a] + r.start[a] as f32 * sp[a]),
    };
    let mut out = Volume::filled(geom, pad);
    if let Some((lo, hi)) = r.clip(v.dims()) {
        let run = hi[0] - lo[0];
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                let src = v.index(lo[0], y, z);
                let dst = out.index(
                    (lo[0] as i64 - r.start[0]) as usize,
                    (y as i64 - r.start[1]) as usize,
                    (z as i64 - r.start[2]) as usize,
                );
                out.data[dst..dst + run].copy_from_slice(&v.data[src..src + run]);
            }
        }
    }
    Ok(out)
}

/// Writes `src` into `dst` at region `r`, clipped to `dst`'s bounds.
pub fn paste<T: Voxel>(dst: &Volume<T>, src: &Volume<T>, r: &Region) -> Result<Volume<T>> {
    let mut out = dst.clone();
    paste_with(&mut out, src, r, |_, s| s)?;
    Ok(out)
}

/// In-place paste that merges each voxel with `combine(old, new)`.
pub fn paste_with<T: Voxel>(
    dst: &mut Volume<T>,
    src: &Volume<T>,
    r: &Region,
    combine: impl Fn(T, T) -> T,
) -> Result<()> {
    if src.dims() != r.size {
        return Err(Error::Shape(format!(
            "paste source dims {:?} differ from region size {:?}",
            src.dims(),
            r.size
        )));
    }
    if let Some((lo, hi)) = r.clip(dst.dims()) {
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let s = src.get(
                        (x as i64 - r.start[0]) as usize,
                        (y as i64 - r.start[1]) as usize,
                        (z as i64 - r.start[2]) as usize,
                    );
                    let i = dst.index(x, y, z);
                    dst.data[i] = combine(dst.data[i], s);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Linear,
}

fn resampled_geometry(g: &Geometry, factor: [f64; 3]) -> Result<Geometry> {
    if factor.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::Invalid(format!("resample factor must be positive: {factor:?}")));
    }
    let dims: [usize; 3] = std::array::from_fn(|a| (g.dims[a] as f64 * factor[a]).round() as usize);
    if dims.contains(&0) {
        return Err(Error::Shape(format!(
            "resampling {:?} by {factor:?} yields a zero extent",
            g.dims
        )));
    }
    Ok(Geometry {
        dims,
        spacing: std::array::from_fn(|a| (g.spacing[a] as f64 * g.dims[a] as f64 / dims[a] as f64) as f32),
        origin: g.origin,
    })
}

#[inline]
fn nearest_src(i: usize, ratio: f64, n: usize) -> usize {
    (((i as f64 + 0.5) * ratio) as usize).min(n - 1)
}

/// Nearest-neighbour resampling for any voxel type (labels included).
pub fn resample_nearest<T: Voxel>(v: &Volume<T>, factor: [f64; 3]) -> Result<Volume<T>> {
    let geom = resampled_geometry(v.geometry(), factor)?;
    let src = v.dims();
    let ratio: [f64; 3] = std::array::from_fn(|a| src[a] as f64 / geom.dims[a] as f64);
    let [nx, ny, nz] = geom.dims;
    let xs: Vec<usize> = (0..nx).map(|i| nearest_src(i, ratio[0], src[0])).collect();
    let mut data = Vec::with_capacity(geom.len());
    for z in 0..nz {
        let sz = nearest_src(z, ratio[2], src[2]);
        for y in 0..ny {
            let sy = nearest_src(y, ratio[1], src[1]);
            data.extend(xs.iter().map(|&sx| v.get(sx, sy, sz)));
        }
    }
    Volume::from_data(geom, data)
}

/// Resamples by per-axis `factor` (output dims = round(dims * factor)).
/// Sample centres are aligned half-voxel style, so factor 1 is the identity.
pub fn resample(v: &Volume3D, factor: [f64; 3], mode: Interpolation) -> Result<Volume3D> {
    match mode {
        Interpolation::Nearest => resample_nearest(v, factor),
        Interpolation::Linear => {
            let geom = resampled_geometry(v.geometry(), factor)?;
            let src = v.dims();
            let taps = |a: usize| -> Vec<(usize, usize, f32)> {
                let ratio = src[a] as f64 / geom.dims[a] as f64;
                (0..geom.dims[a])
                    .map(|i| {
                        let c = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src[a] - 1) as f64);
                        let i0 = c.floor() as usize;
                        let i1 = (i0 + 1).min(src[a] - 1);
                        (i0, i1, (c - i0 as f64) as f32)
                    })
                    .collect()
            };
            let (tx, ty, tz) = (taps(0), taps(1), taps(2));
            let mut data = Vec::with_capacity(geom.len());
            for &(z0, z1, wz) in &tz {
                for &(y0, y1, wy) in &ty {
                    for &(x0, x1, wx) in &tx {
                        let lerp = |a: f32, b: f32, w: f32| if w == 0.0 { a } else { a + (b - a) * w };
                        let c = |y, z| lerp(v.get(x0, y, z), v.get(x1, y, z), wx);
                        let p0 = lerp(c(y0, z0), c(y1, z0), wy);
                        let p1 = lerp(c(y0, z1), c(y1, z1), wy);
                        data.push(lerp(p0, p1, wz));
                    }
                }
            }
            Volume::from_data(geom, data)
        }
    }
}
