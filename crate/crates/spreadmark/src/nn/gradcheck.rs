//! Central finite-difference checks used by the test suites.
//!
//! The checks compare an analytic gradient against an independent numeric
//! estimate of `dJ/dx[p]`, where `J = sum(R .* f(x))` for a fixed random
//! projection tensor `R`. The numeric path never touches the backward code.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Result of one probed point.
#[derive(Debug)]
pub struct PointCheck {
    pub index: (usize, usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with an absolute floor, as used throughout the checks:
/// |a - n| / (|n| + floor).
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + floor)
}

/// Probe `dJ/dx` at `points` via central differences of the closure `f`
/// (which must return J as f64) and compare against `analytic` values.
pub fn check_points(
    f: &dyn Fn(&Array4<f32>) -> f64,
    x: &Array4<f32>,
    analytic: &Array4<f32>,
    points: &[(usize, usize, usize, usize)],
    h: f32,
    floor: f64,
) -> Vec<PointCheck> {
    points
        .iter()
        .map(|&idx| {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * h as f64);
            let analytic_v = analytic[idx] as f64;
            PointCheck {
                index: idx,
                analytic: analytic_v,
                numeric,
                rel_err: rel_err(analytic_v, numeric, floor),
            }
        })
        .collect()
}

/// Draw `count` random interior points of an (N, H, W, C) tensor, optionally
/// filtered by a validity predicate (e.g. "pixel kept by the dropout mask").
pub fn sample_points(
    rng: &mut ChaCha12Rng,
    dim: (usize, usize, usize, usize),
    count: usize,
    valid: &dyn Fn((usize, usize, usize, usize)) -> bool,
) -> Vec<(usize, usize, usize, usize)> {
    let (n, h, w, c) = dim;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < count * 200 {
        attempts += 1;
        let p = (
            rng.random_range(0..n),
            rng.random_range(1..h.max(2) - 1).max(1).min(h - 1),
            rng.random_range(1..w.max(2) - 1).max(1).min(w - 1),
            rng.random_range(0..c),
        );
        if valid(p) {
            out.push(p);
        }
    }
    out
}

/// Fixed random projection used to reduce a tensor-valued function to a
/// scalar J for finite differencing.
pub fn projection(rng: &mut ChaCha12Rng, dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let mut r = Array4::zeros(dim);
    for v in r.iter_mut() {
        *v = rng.random_range(-1.0..1.0f32);
    }
    r
}

/// J = sum(R .* y), accumulated in f64.
pub fn project(y: &Array4<f32>, r: &Array4<f32>) -> f64 {
    y.iter().zip(r.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
}
