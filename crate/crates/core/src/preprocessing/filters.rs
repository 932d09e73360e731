//! Separable filters with clamped borders, and binary morphology.

use crate::metrics::squared_edt;
use crate::volume::{Mask, Volume3D, Voxel};

/// Correlates `data` with a centered odd-length `kernel` along `axis`.
pub fn convolve_axis(data: &[f32], dims: [usize; 3], axis: usize, kernel: &[f32]) -> Vec<f32> {
    assert!(kernel.len() % 2 == 1, "kernel length must be odd");
    let half = (kernel.len() / 2) as i64;
    let n = dims[axis] as i64;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = vec![0f32; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = (i / stride) % dims[axis];
        let base = i - c * stride;
        let mut acc = 0f32;
        for (k, &w) in kernel.iter().enumerate() {
            let p = (c as i64 + k as i64 - half).clamp(0, n - 1) as usize;
            acc += w * data[base + p * stride];
        }
        *o = acc;
    }
    out
}

const SMOOTH: [f32; 3] = [0.25, 0.5, 0.25];
const DERIV: [f32; 3] = [-0.5, 0.0, 0.5];

/// Sobel gradient magnitude with a `[1,2,1]/4` smoother and `[-1,0,1]/2`
/// derivative, so a unit step yields a peak response of 0.5.
pub fn sobel_magnitude(v: &Volume3D) -> Volume3D {
    let dims = v.dims();
    let mut mag = vec![0f32; v.len()];
    for axis in 0..3 {
        let mut g = v.data().to_vec();
        for a in 0..3 {
            let k: &[f32] = if a == axis { &DERIV } else { &SMOOTH };
            g = convolve_axis(&g, dims, a, k);
        }
        mag.iter_mut().zip(&g).for_each(|(m, d)| *m += d * d);
    }
    mag.iter_mut().for_each(|m| *m = m.sqrt());
    v.with_data(mag).expect("same length")
}

/// Modified Bessel function of the first kind, `I_n(t)`, by power series.
fn bessel_i(n: usize, t: f64) -> f64 {
    let h = t / 2.0;
    let mut term = h.powi(n as i32) / (1..=n).map(|k| k as f64).product::<f64>();
    let mut sum = term;
    for k in 1..60 {
        term *= h * h / (k as f64 * (k + n) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Discrete Gaussian kernel `T(n, t) = e^-t I_n(t)` with `t = sigma^2`,
/// truncated once a tap falls below 1e-10 and renormalized.
pub fn discrete_gaussian_kernel(sigma: f64) -> Vec<f32> {
    let t = sigma * sigma;
    let mut half = vec![(-t).exp() * bessel_i(0, t)];
    for n in 1..=(8.0 * sigma).ceil() as usize + 8 {
        let w = (-t).exp() * bessel_i(n, t);
        if w < 1e-10 {
            break;
        }
        half.push(w);
    }
    let mut k: Vec<f64> = half.iter().rev().chain(half.iter().skip(1)).copied().collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

pub fn gaussian_filter(v: &Volume3D, sigma: f64) -> Volume3D {
    let k = discrete_gaussian_kernel(sigma);
    let mut d = v.data().to_vec();
    for axis in 0..3 {
        d = convolve_axis(&d, v.dims(), axis, &k);
    }
    v.with_data(d).expect("same length")
}

/// Dilation by the Euclidean ball `{|o| <= radius}`.
pub fn dilate_ball<T: Voxel>(m: &crate::volume::Volume<T>, radius: f64) -> Mask {
    let d = squared_edt(m, [1.0; 3]);
    let r2 = radius * radius;
    m.with_data(d.iter().map(|&v| (v <= r2) as u8).collect())
        .expect("same length")
}

/// Dilation by the `(2r+1)^3` box, via separable running maxima.
pub fn dilate_box(data: &mut [u8], dims: [usize; 3], r: usize) {
    if r == 0 {
        return;
    }
    for axis in 0..3 {
        let n = dims[axis];
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let src = data.to_vec();
        for (i, o) in data.iter_mut().enumerate() {
            if *o != 0 {
                continue;
            }
            let c = (i / stride) % n;
            let base = i - c * stride;
            let lo = c.saturating_sub(r);
            let hi = (c + r).min(n - 1);
            if (lo..=hi).any(|p| src[base + p * stride] != 0) {
                *o = 1;
            }
        }
    }
}
