//! Oracles shared by the integration tests: a dense direct solver, a central
//! finite-difference gradient checker and seeded instance builders.
#![allow(dead_code)]

use blend_core::rng::UniformStream;
pub mod cases;

use blend_core::{ImageTensor, Mask};

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap();
        a.swap(k, p);
        b.swap(k, p);
        let pivot = a[k][k];
        assert!(pivot.abs() > 1e-14, "singular system");
        for i in k + 1..n {
            let f = a[i][k] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Central differences of `f` at `x` over the coordinates `which`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], which: &[usize], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    which
        .iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Normwise relative error `max|a - n| / max|n|` over the coordinates
/// `which`, where `analytic` is the full gradient.
pub fn gradient_error(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], which: &[usize], h: f64) -> f64 {
    let numeric = numeric_gradient(f, x, which, h);
    let picked: Vec<f64> = which.iter().map(|&i| analytic[i]).collect();
    let scale = inf_norm(&numeric);
    assert!(scale > 0.0, "numeric gradient vanishes; the check would be vacuous");
    max_abs_diff(&picked, &numeric) / scale
}

pub fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut rng = UniformStream::new(seed);
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.next_unit())
}

pub fn with_data(like: &ImageTensor, data: &[f64]) -> ImageTensor {
    ImageTensor::from_planar(like.height(), like.width(), like.channels(), data.to_vec()).unwrap()
}

/// A blob-shaped mask: the union of a few seeded rectangles, kept at least
/// one pixel away from the frame edge.
pub fn random_mask(h: usize, w: usize, seed: u64) -> Mask {
    let mut rng = UniformStream::new(seed ^ 0x5eed);
    let mut pick = |lo: usize, hi: usize| lo + (rng.next_unit() * (hi - lo) as f64) as usize;
    let rects: Vec<(usize, usize, usize, usize)> = (0..3)
        .map(|_| {
            let y0 = pick(1, h / 2);
            let x0 = pick(1, w / 2);
            let y1 = pick(y0 + 1, h - 1);
            let x1 = pick(x0 + 1, w - 1);
            (y0, x0, y1, x1)
        })
        .collect();
    Mask::from_fn(h, w, |y, x| rects.iter().any(|&(y0, x0, y1, x1)| y >= y0 && y < y1 && x >= x0 && x < x1))
}

/// Centred rectangular mask with a `border`-pixel margin.
pub fn box_mask(h: usize, w: usize, border: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| y >= border && y < h - border && x >= border && x < w - border)
}
