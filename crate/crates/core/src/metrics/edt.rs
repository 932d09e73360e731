//! Exact squared Euclidean distance transform (lower envelope of parabolas,
//! one separable pass per axis), with anisotropic spacing.

use crate::par;
use crate::volume::{Volume, Voxel};

/// Squared distance from every voxel to the nearest set voxel of `m`,
/// in units of `spacing`. Voxels are `inf` when `m` is empty.
pub fn squared_edt<T: Voxel>(m: &Volume<T>, spacing: [f64; 3]) -> Vec<f64> {
    let dims = m.dims();
    let mut f: Vec<f64> = m
        .data()
        .iter()
        .map(|&v| if v.is_set() { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        pass(&mut f, dims, axis, spacing[axis]);
    }
    f
}

fn pass(f: &mut [f64], dims: [usize; 3], axis: usize, s: f64) {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let starts: Vec<usize> = (0..dims[o2])
        .flat_map(|b| (0..dims[o1]).map(move |a| (a, b)))
        .map(|(a, b)| {
            let mut p = [0usize; 3];
            p[o1] = a;
            p[o2] = b;
            p[0] + dims[0] * (p[1] + dims[1] * p[2])
        })
        .collect();
    let src: &[f64] = f;
    let lines = par::map_slice(&starts, |&st| {
        let line: Vec<f64> = (0..n).map(|i| src[st + i * stride]).collect();
        let mut out = vec![0.0; n];
        envelope(&line, s, &mut out);
        out
    });
    for (st, line) in starts.iter().zip(lines) {
        for (i, v) in line.into_iter().enumerate() {
            f[st + i * stride] = v;
        }
    }
}

/// `out[q] = min_p ((q - p) s)^2 + f[p]` over finite `f[p]`.
fn envelope(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let key = |q: usize| f[q] + (q as f64 * s).powi(2);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let cross = (key(q) - key(last)) / (2.0 * s * (q - last) as f64);
            if cross <= *z.last().unwrap() {
                v.pop();
                z.pop();
                if v.is_empty() {
                    continue;
                }
            } else {
                v.push(q);
                z.push(cross);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * s;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        *o = d * d + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Mask;

    #[test]
    fn single_point_distances() {
        let mut m = Mask::zeros([5, 4, 3]);
        m.set(1, 2, 0, 1);
        let d = squared_edt(&m, [1.0, 1.0, 1.0]);
        for i in 0..m.len() {
            let [x, y, z] = m.coords(i).map(|c| c as f64);
            let e = (x - 1.0).powi(2) + (y - 2.0).powi(2) + z * z;
            assert_eq!(d[i], e);
        }
        let d = squared_edt(&m, [0.5, 2.0, 3.0]);
        assert_eq!(d[m.index(4, 0, 2)], (1.5f64).powi(2) + 16.0 + 36.0);
    }

    #[test]
    fn empty_mask_is_infinite() {
        let m = Mask::zeros([3, 3, 3]);
        assert!(squared_edt(&m, [1.0; 3]).iter().all(|v| v.is_infinite()));
    }
}
