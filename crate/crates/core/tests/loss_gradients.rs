use cascade_core::losses::{soft_dice, wdl, wdl_gradient, LossParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn central_difference(gt: &[u8], pred: &[f64], p: &LossParams, i: usize, h: f64) -> f64 {
    let mut a = pred.to_vec();
    let mut b = pred.to_vec();
    a[i] += h;
    b[i] -= h;
    (wdl(gt, &a, p).unwrap() - wdl(gt, &b, p).unwrap()) / (2.0 * h)
}

#[test]
fn gradient_matches_finite_differences_across_betas() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for &beta in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        for &smooth in &[1e-4, 1e-2, 1.0] {
            let p = LossParams { beta, smooth };
            let n = 27;
            let gt: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let g = wdl_gradient(&gt, &pred, &p).unwrap();
            for (i, &gi) in g.iter().enumerate() {
                let fd = central_difference(&gt, &pred, &p, i, 1e-6);
                let scale = fd.abs().max(gi.abs()).max(1e-8);
                assert!(
                    (gi - fd).abs() / scale < 1e-4,
                    "beta {beta} smooth {smooth} voxel {i}: {gi} vs {fd}"
                );
            }
        }
    }
}

#[test]
fn beta_one_stationary_point_is_half_overlap() {
    // d/dd [-(1 - d) d] = 2d - 1 vanishes at d = 1/2
    let gt = [1u8, 1, 0, 0];
    let p = LossParams::new(1.0).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=200 {
        let q = k as f64 / 200.0;
        let pred = [q, q, 0.0, 0.0];
        let v = wdl(&gt, &pred, &p).unwrap();
        if v < best.0 {
            best = (v, soft_dice(&gt, &pred, p.smooth).unwrap());
        }
    }
    assert!((best.1 - 0.5).abs() < 0.01, "minimizing soft dice {}", best.1);
    assert!((best.0 + 0.25).abs() < 1e-3);
}

#[test]
fn float_and_binary_ground_truth_agree() {
    let gt_u8 = [1u8, 0, 1, 1, 0];
    let gt_f32: Vec<f32> = gt_u8.iter().map(|&v| v as f32).collect();
    let pred = [0.9f32, 0.2, 0.6, 0.4, 0.1];
    let p = LossParams::default();
    assert_eq!(wdl(&gt_u8, &pred, &p).unwrap(), wdl(&gt_f32, &pred, &p).unwrap());
}
