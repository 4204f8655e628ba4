//! Brute-force oracles shared by the acceptance criteria.

/// Maximizer of a unimodal `f` on `[lo, hi]` by golden-section search.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..iters {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}

/// Best point of an exhaustive grid over the probability simplex in three
/// coordinates with spacing `1/steps`, skipping the boundary.
pub fn simplex_grid_max(f: impl Fn(&[f64; 3]) -> f64, steps: usize) -> [f64; 3] {
    let h = 1.0 / steps as f64;
    let mut best = ([1.0 / 3.0; 3], f64::NEG_INFINITY);
    for i in 1..steps {
        for j in 1..steps - i {
            let p = [i as f64 * h, j as f64 * h, (steps - i - j) as f64 * h];
            let v = f(&p);
            if v > best.1 {
                best = (p, v);
            }
        }
    }
    best.0
}

/// Maximizer of `f` over a box by repeated grid search, shrinking the box
/// around the incumbent each pass.
pub fn zoom_grid_max(f: impl Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64], points: usize, passes: usize) -> Vec<f64> {
    let dims = lo.len();
    let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
    let mut best = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<_>>();
    let mut best_v = f(&best);
    for _ in 0..passes {
        let total = points.pow(dims as u32);
        let mut x = vec![0.0; dims];
        for idx in 0..total {
            let mut rest = idx;
            for d in 0..dims {
                let k = rest % points;
                rest /= points;
                x[d] = lo[d] + (hi[d] - lo[d]) * k as f64 / (points - 1) as f64;
            }
            let v = f(&x);
            if v > best_v {
                best_v = v;
                best.copy_from_slice(&x);
            }
        }
        for d in 0..dims {
            let half = (hi[d] - lo[d]) / (points - 1) as f64 * 2.0;
            lo[d] = best[d] - half;
            hi[d] = best[d] + half;
        }
    }
    best
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
