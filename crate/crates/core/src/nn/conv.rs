//! Dense 3D convolution kernels (cubic kernels, symmetric zero padding).
//! Output planes are processed in chunks; each chunk is lowered with im2col
//! and multiplied with `matrixmultiply::sgemm`. Chunks are independent, so
//! they fan out through [`crate::par`].

use super::tensor::Tensor;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn same3() -> Self {
        ConvSpec {
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }
    pub const fn valid3() -> Self {
        ConvSpec {
            kernel: 3,
            stride: 1,
            pad: 0,
        }
    }
    pub const fn down3() -> Self {
        ConvSpec {
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }
    pub const fn point() -> Self {
        ConvSpec {
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> Option<[usize; 3]> {
        Some([self.out_extent(s[0])?, self.out_extent(s[1])?, self.out_extent(s[2])?])
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

const TARGET_COLUMNS: usize = 8192;

struct Geometry {
    ci: usize,
    co: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn new(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Self {
        let ins = x.spatial();
        let outs = spec
            .out_spatial(ins)
            .unwrap_or_else(|| panic!("input {ins:?} smaller than kernel {}", spec.kernel));
        assert_eq!(w.shape()[1], x.channels(), "conv input channels");
        Geometry {
            ci: x.channels(),
            co: w.shape()[0],
            ins,
            outs,
            spec,
        }
    }
    fn k(&self) -> usize {
        self.ci * self.spec.kernel.pow(3)
    }
    fn plane_out(&self) -> usize {
        self.outs[1] * self.outs[2]
    }
    fn vox_out(&self) -> usize {
        self.outs[0] * self.plane_out()
    }
    fn vox_in(&self) -> usize {
        self.ins[0] * self.ins[1] * self.ins[2]
    }
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per = (TARGET_COLUMNS / self.plane_out()).max(1);
        (0..self.outs[0])
            .step_by(per)
            .map(|z0| (z0, (z0 + per).min(self.outs[0])))
            .collect()
    }
    /// Input z range touched by output planes `[z0, z1)`, clipped.
    fn footprint(&self, z0: usize, z1: usize) -> (usize, usize) {
        let s = self.spec;
        let lo = (z0 * s.stride) as i64 - s.pad as i64;
        let hi = ((z1 - 1) * s.stride + s.kernel) as i64 - s.pad as i64;
        (lo.max(0) as usize, (hi.min(self.ins[0] as i64)) as usize)
    }
}

/// Fills `col` (K x P, P = planes * H_out * W_out) for output planes `[z0, z1)`.
fn im2col(x: &[f32], g: &Geometry, z0: usize, z1: usize, col: &mut [f32]) {
    let ConvSpec {
        kernel: k,
        stride: s,
        pad: p,
    } = g.spec;
    let [d, h, w] = g.ins;
    let [_, ho, wo] = g.outs;
    let p_cols = (z1 - z0) * ho * wo;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * p_cols..(row + 1) * p_cols];
                    // valid output x range for this kx
                    let x_lo = p.saturating_sub(kx).div_ceil(s);
                    let x_hi = if w + p > kx {
                        ((w + p - kx - 1) / s + 1).min(wo)
                    } else {
                        0
                    };
                    for (zi, zo) in (z0..z1).enumerate() {
                        let iz = (zo * s + kz) as i64 - p as i64;
                        for yo in 0..ho {
                            let seg = &mut dst[(zi * ho + yo) * wo..(zi * ho + yo + 1) * wo];
                            let iy = (yo * s + ky) as i64 - p as i64;
                            if iz < 0 || iz >= d as i64 || iy < 0 || iy >= h as i64 || x_lo >= x_hi {
                                seg.fill(0.0);
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            seg[..x_lo].fill(0.0);
                            seg[x_hi..].fill(0.0);
                            if s == 1 {
                                let ix0 = x_lo + kx - p;
                                seg[x_lo..x_hi].copy_from_slice(&xc[base + ix0..base + ix0 + (x_hi - x_lo)]);
                            } else {
                                for (xo, v) in seg.iter_mut().enumerate().take(x_hi).skip(x_lo) {
                                    *v = xc[base + xo * s + kx - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into an input slab covering planes `[zs, ze)`.
fn col2im(col: &[f32], g: &Geometry, z0: usize, z1: usize, zs: usize, ze: usize, slab: &mut [f32]) {
    let ConvSpec {
        kernel: k,
        stride: s,
        pad: p,
    } = g.spec;
    let [_, h, w] = g.ins;
    let [_, ho, wo] = g.outs;
    let dz = ze - zs;
    let p_cols = (z1 - z0) * ho * wo;
    let mut row = 0;
    for c in 0..g.ci {
        let sc = &mut slab[c * dz * h * w..(c + 1) * dz * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * p_cols..(row + 1) * p_cols];
                    let x_lo = p.saturating_sub(kx).div_ceil(s);
                    let x_hi = if w + p > kx {
                        ((w + p - kx - 1) / s + 1).min(wo)
                    } else {
                        0
                    };
                    for (zi, zo) in (z0..z1).enumerate() {
                        let iz = (zo * s + kz) as i64 - p as i64;
                        if iz < zs as i64 || iz >= ze as i64 {
                            continue;
                        }
                        for yo in 0..ho {
                            let iy = (yo * s + ky) as i64 - p as i64;
                            if iy < 0 || iy >= h as i64 || x_lo >= x_hi {
                                continue;
                            }
                            let seg = &src[(zi * ho + yo) * wo..(zi * ho + yo + 1) * wo];
                            let base = ((iz as usize - zs) * h + iy as usize) * w;
                            if s == 1 {
                                let ix0 = base + x_lo + kx - p;
                                sc[ix0..ix0 + (x_hi - x_lo)]
                                    .iter_mut()
                                    .zip(&seg[x_lo..x_hi])
                                    .for_each(|(a, b)| *a += b);
                            } else {
                                for (xo, v) in seg.iter().enumerate().take(x_hi).skip(x_lo) {
                                    sc[base + xo * s + kx - p] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `C = alpha * A * B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: all accessed elements were bounds-checked above and `c` is
    // uniquely borrowed; strides are non-negative.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `y = conv(x, w) + b`. `x: [Ci, D, H, W]`, `w: [Co, Ci, k, k, k]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: &[f32], spec: ConvSpec) -> Tensor {
    let g = Geometry::new(x, w, spec);
    let (co, kk, plane, vox) = (g.co, g.k(), g.plane_out(), g.vox_out());
    let chunks = g.chunks();
    let parts = par::map_slice(&chunks, |&(z0, z1)| {
        let p = (z1 - z0) * plane;
        let mut out = vec![0f32; co * p];
        if spec.is_pointwise() {
            gemm(
                co,
                kk,
                p,
                w.data(),
                kk,
                1,
                &x.data()[z0 * plane..],
                vox,
                1,
                0.0,
                &mut out,
                p,
                1,
            );
        } else {
            let mut col = vec![0f32; kk * p];
            im2col(x.data(), &g, z0, z1, &mut col);
            gemm(co, kk, p, w.data(), kk, 1, &col, p, 1, 0.0, &mut out, p, 1);
        }
        out
    });
    let [od, oh, ow] = g.outs;
    let mut y = Tensor::zeros(&[co, od, oh, ow]);
    for ((z0, z1), part) in chunks.iter().zip(parts) {
        let p = (z1 - z0) * plane;
        for c in 0..co {
            let dst = &mut y.data_mut()[c * vox + z0 * plane..c * vox + z0 * plane + p];
            let b = bias.get(c).copied().unwrap_or(0.0);
            dst.iter_mut()
                .zip(&part[c * p..(c + 1) * p])
                .for_each(|(d, s)| *d = s + b);
        }
    }
    y
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Vec<f32>,
}

pub fn conv3d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, spec: ConvSpec, need_dx: bool) -> ConvGrads {
    let g = Geometry::new(x, w, spec);
    let (co, kk, plane, vox) = (g.co, g.k(), g.plane_out(), g.vox_out());
    let [_, h, wi] = g.ins;
    let chunks = g.chunks();
    let parts = par::map_slice(&chunks, |&(z0, z1)| {
        let p = (z1 - z0) * plane;
        let dyc = &dy.data()[z0 * plane..];
        let mut dw = vec![0f32; co * kk];
        let col;
        let col_ref: (&[f32], usize, usize) = if spec.is_pointwise() {
            (&x.data()[z0 * plane..], 1, vox)
        } else {
            let mut c = vec![0f32; kk * p];
            im2col(x.data(), &g, z0, z1, &mut c);
            col = c;
            (&col, 1, p)
        };
        // dW (co x kk) = dY (co x p) * col^T (p x kk)
        gemm(
            co, p, kk, dyc, vox, 1, col_ref.0, col_ref.1, col_ref.2, 0.0, &mut dw, kk, 1,
        );
        let slab = need_dx.then(|| {
            let mut dcol = vec![0f32; kk * p];
            // dcol (kk x p) = W^T (kk x co) * dY (co x p)
            gemm(kk, co, p, w.data(), 1, kk, dyc, vox, 1, 0.0, &mut dcol, p, 1);
            if spec.is_pointwise() {
                (z0, z1, dcol)
            } else {
                let (zs, ze) = g.footprint(z0, z1);
                let mut s = vec![0f32; g.ci * (ze - zs) * h * wi];
                col2im(&dcol, &g, z0, z1, zs, ze, &mut s);
                (zs, ze, s)
            }
        });
        (dw, slab)
    });

    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let vin = g.vox_in();
    for (pdw, slab) in parts {
        dw.data_mut().iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
        if let (Some(dx), Some((zs, ze, s))) = (dx.as_mut(), slab) {
            let n = (ze - zs) * h * wi;
            for c in 0..g.ci {
                let dst = &mut dx.data_mut()[c * vin + zs * h * wi..c * vin + zs * h * wi + n];
                dst.iter_mut().zip(&s[c * n..(c + 1) * n]).for_each(|(a, b)| *a += b);
            }
        }
    }
    let db = (0..co).map(|c| dy.channel(c).iter().sum()).collect();
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct seven-loop convolution used as the reference.
    fn naive(x: &Tensor, w: &Tensor, b: &[f32], s: ConvSpec) -> Tensor {
        let [d, h, wd] = x.spatial();
        let ci = x.channels();
        let co = w.shape()[0];
        let k = s.kernel;
        let o = s.out_spatial([d, h, wd]).unwrap();
        let mut y = Tensor::zeros(&[co, o[0], o[1], o[2]]);
        for c in 0..co {
            for z in 0..o[0] {
                for yy in 0..o[1] {
                    for xx in 0..o[2] {
                        let mut acc = b[c] as f64;
                        for i in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * s.stride + kz) as i64 - s.pad as i64;
                                        let iy = (yy * s.stride + ky) as i64 - s.pad as i64;
                                        let ix = (xx * s.stride + kx) as i64 - s.pad as i64;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as i64
                                            || iy >= h as i64
                                            || ix >= wd as i64
                                        {
                                            continue;
                                        }
                                        let xv = x.data()[((i * d + iz as usize) * h + iy as usize) * wd + ix as usize];
                                        let wv = w.data()[(((c * ci + i) * k + kz) * k + ky) * k + kx];
                                        acc += (xv * wv) as f64;
                                    }
                                }
                            }
                        }
                        y.data_mut()[((c * o[0] + z) * o[1] + yy) * o[2] + xx] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn specs() -> Vec<ConvSpec> {
        vec![
            ConvSpec::same3(),
            ConvSpec::valid3(),
            ConvSpec::down3(),
            ConvSpec::point(),
        ]
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in specs() {
            let x = rand_tensor(&[3, 7, 6, 5], &mut rng);
            let w = rand_tensor(&[4, 3, s.kernel, s.kernel, s.kernel], &mut rng);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let y = conv3d_forward(&x, &w, &b, s);
            let r = naive(&x, &w, &b, s);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-4, "{s:?}: {a} vs {b}");
            }
        }
    }

    /// Backward is the adjoint of forward: <dy, conv(x)> derivatives via
    /// finite differences of a random linear functional.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in specs() {
            let x = rand_tensor(&[2, 5, 4, 6], &mut rng);
            let w = rand_tensor(&[3, 2, s.kernel, s.kernel, s.kernel], &mut rng);
            let b = vec![0.0; 3];
            let y = conv3d_forward(&x, &w, &b, s);
            let dy = rand_tensor(y.shape(), &mut rng);
            let f = |x: &Tensor, w: &Tensor| -> f64 {
                conv3d_forward(x, w, &b, s)
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(a, b)| (*a as f64) * (*b as f64))
                    .sum()
            };
            let gr = conv3d_backward(&x, &w, &dy, s, true);
            let dx = gr.dx.unwrap();
            let eps = 1e-2f32;
            for idx in [0, 7, x.len() / 2, x.len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * eps as f64);
                assert!(
                    (fd - dx.data()[idx] as f64).abs() < 1e-2,
                    "{s:?} dx[{idx}] {fd} vs {}",
                    dx.data()[idx]
                );
            }
            for idx in [0, w.len() / 3, w.len() - 1] {
                let mut wp = w.clone();
                wp.data_mut()[idx] += eps;
                let mut wm = w.clone();
                wm.data_mut()[idx] -= eps;
                let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps as f64);
                assert!(
                    (fd - gr.dw.data()[idx] as f64).abs() < 1e-2,
                    "{s:?} dw[{idx}] {fd} vs {}",
                    gr.dw.data()[idx]
                );
            }
            let db0: f32 = dy.channel(0).iter().sum();
            assert!((gr.db[0] - db0).abs() < 1e-4);
        }
    }

    #[test]
    fn chunked_path_matches_single_chunk() {
        // 96 x 96 planes force one plane per chunk
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 4, 96, 96], &mut rng);
        let w = rand_tensor(&[2, 1, 3, 3, 3], &mut rng);
        let y = conv3d_forward(&x, &w, &[0.0, 0.0], ConvSpec::same3());
        let r = naive(&x, &w, &[0.0, 0.0], ConvSpec::same3());
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
