//! Exact Wasserstein distances on the circle `ℝ/ℤ`.
//!
//! * `W₁ = min_c ∫₀¹ |F(x) − G(x) − c| dx` (the optimal `c` is a median of `F − G`).
//! * `W_p^p = min_θ ∫₀¹ |F⁻¹(t) − G⁻¹(t + θ)|^p dt` with `G⁻¹(s + 1) = G⁻¹(s) + 1`;
//!   the objective is convex in `θ`, so a scan of candidate shifts brackets
//!   the minimiser and golden-section search refines it.
//! * Two empirical measures of equal size: minimum over the `N` cyclic
//!   assignments of the sorted points.
//!
//! Grid measures have piecewise-constant densities, hence piecewise-linear
//! CDFs and quantile functions; empirical measures have step CDFs.

use super::{EmpiricalMeasure, GridMeasure};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    W1,
    W2,
}

impl Order {
    fn exponent(self) -> i32 {
        match self {
            Order::W1 => 1,
            Order::W2 => 2,
        }
    }
}

/// Linear piece `[a, b] → [fa, fb]`.
#[derive(Clone, Copy, Debug)]
struct Piece {
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
}

impl Piece {
    fn at(&self, x: f64) -> f64 {
        if self.b > self.a {
            self.fa + (self.fb - self.fa) * (x - self.a) / (self.b - self.a)
        } else {
            self.fa
        }
    }
}

/// A probability measure on the circle, described by its CDF and quantile
/// function on `[0, 1]`.
pub trait CircleMeasure {
    /// Pieces of the CDF covering `[0, 1]`.
    fn cdf_pieces(&self) -> Vec<(f64, f64, f64, f64)>;
    /// Pieces of the quantile function covering `t ∈ [0, 1]`.
    fn quantile_pieces(&self) -> Vec<(f64, f64, f64, f64)>;
    /// Sorted atoms when the measure is a uniform empirical measure.
    fn sorted_atoms(&self) -> Option<Vec<f64>> {
        None
    }
}

impl CircleMeasure for GridMeasure {
    fn cdf_pieces(&self) -> Vec<(f64, f64, f64, f64)> {
        let h = self.h();
        let mut out = Vec::with_capacity(self.cells());
        let mut cum = 0.0;
        for (j, &r) in self.density().iter().enumerate() {
            let next = cum + h * r;
            out.push((j as f64 * h, (j + 1) as f64 * h, cum, next));
            cum = next;
        }
        out
    }

    fn quantile_pieces(&self) -> Vec<(f64, f64, f64, f64)> {
        let h = self.h();
        let total = self.total_mass();
        let mut out = Vec::with_capacity(self.cells());
        let mut cum = 0.0;
        for (j, &r) in self.density().iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            let next = cum + h * r / total;
            out.push((cum, next, j as f64 * h, (j + 1) as f64 * h));
            cum = next;
        }
        if let Some(last) = out.last_mut() {
            last.1 = 1.0;
        }
        out
    }
}

impl CircleMeasure for EmpiricalMeasure {
    fn cdf_pieces(&self) -> Vec<(f64, f64, f64, f64)> {
        let pts = sorted(self.points());
        let n = pts.len() as f64;
        let mut out = Vec::with_capacity(pts.len() + 1);
        let mut prev = 0.0;
        for (i, &x) in pts.iter().enumerate() {
            if x > prev {
                let level = i as f64 / n;
                out.push((prev, x, level, level));
            }
            prev = x;
        }
        out.push((prev, 1.0, 1.0, 1.0));
        out
    }

    fn quantile_pieces(&self) -> Vec<(f64, f64, f64, f64)> {
        let pts = sorted(self.points());
        let n = pts.len() as f64;
        pts.iter()
            .enumerate()
            .map(|(i, &x)| (i as f64 / n, (i + 1) as f64 / n, x, x))
            .collect()
    }

    fn sorted_atoms(&self) -> Option<Vec<f64>> {
        Some(sorted(self.points()))
    }
}

fn sorted(points: &[f64]) -> Vec<f64> {
    let mut v = points.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn to_pieces(raw: Vec<(f64, f64, f64, f64)>) -> Vec<Piece> {
    raw.into_iter()
        .map(|(a, b, fa, fb)| Piece { a, b, fa, fb })
        .collect()
}

/// Index of the piece containing `x` (pieces sorted and contiguous).
fn locate(pieces: &[Piece], x: f64) -> usize {
    let idx = pieces.partition_point(|p| p.b <= x);
    idx.min(pieces.len() - 1)
}

/// `∫₀^L |d0 + (d1 − d0)s/L|^p ds` for p ∈ {1, 2}.
fn integrate_linear_abs(len: f64, d0: f64, d1: f64, p: i32) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    match p {
        2 => len * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0,
        _ => {
            if d0 * d1 >= 0.0 {
                len * 0.5 * (d0.abs() + d1.abs())
            } else {
                len * 0.5 * (d0 * d0 + d1 * d1) / (d0 - d1).abs()
            }
        }
    }
}

/// Pieces of `F − G` on the common refinement of both partitions.
fn difference_pieces(f: &[Piece], g: &[Piece]) -> Vec<Piece> {
    let mut knots: Vec<f64> = f.iter().chain(g.iter()).flat_map(|p| [p.a, p.b]).collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut out = Vec::with_capacity(knots.len());
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let pf = &f[locate(f, mid)];
        let pg = &g[locate(g, mid)];
        out.push(Piece {
            a,
            b,
            fa: pf.at(a) - pg.at(a),
            fb: pf.at(b) - pg.at(b),
        });
    }
    out
}

/// `min_c ∫|D − c|` over a piecewise-linear `D`.
fn l1_median_deviation(d: &[Piece]) -> f64 {
    let below = |c: f64| -> f64 {
        d.iter()
            .map(|p| {
                let len = p.b - p.a;
                let (lo, hi) = if p.fa <= p.fb { (p.fa, p.fb) } else { (p.fb, p.fa) };
                if hi <= lo {
                    if lo < c {
                        len
                    } else {
                        0.0
                    }
                } else {
                    len * ((c - lo) / (hi - lo)).clamp(0.0, 1.0)
                }
            })
            .sum()
    };
    let mut lo = d.iter().map(|p| p.fa.min(p.fb)).fold(f64::INFINITY, f64::min);
    let mut hi = d.iter().map(|p| p.fa.max(p.fb)).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = d.iter().map(|p| p.b - p.a).sum();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) < 0.5 * total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    d.iter()
        .map(|p| integrate_linear_abs(p.b - p.a, p.fa - c, p.fb - c, 1))
        .sum()
}

/// Quantile function extended by `Q(s + k) = Q(s) + k`.
struct PeriodicQuantile {
    pieces: Vec<Piece>,
}

impl PeriodicQuantile {
    fn piece_for(&self, mid: f64) -> (&Piece, f64) {
        let k = mid.floor();
        (&self.pieces[locate(&self.pieces, mid - k)], k)
    }
}

/// `∫₀¹ |F⁻¹(t) − G⁻¹(t + θ)|^p dt`.
fn shifted_quantile_cost(f: &[Piece], g: &PeriodicQuantile, theta: f64, p: i32) -> f64 {
    let mut knots: Vec<f64> = Vec::with_capacity(2 * (f.len() + g.pieces.len()) + 2);
    knots.push(0.0);
    knots.push(1.0);
    for piece in f {
        knots.push(piece.a);
    }
    for piece in &g.pieces {
        for k in [-2.0, -1.0, 0.0, 1.0] {
            let t = piece.a + k - theta;
            if t > 0.0 && t < 1.0 {
                knots.push(t);
            }
        }
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut acc = 0.0;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let pf = &f[locate(f, mid)];
        let (pg, k) = g.piece_for(mid + theta);
        let d0 = pf.at(a) - (pg.at(a + theta - k) + k);
        let d1 = pf.at(b) - (pg.at(b + theta - k) + k);
        acc += integrate_linear_abs(b - a, d0, d1, p);
    }
    acc
}

fn golden_min(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut best = fc.min(fd);
    for _ in 0..200 {
        if (b - a).abs() < 1e-15 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        best = best.min(fc).min(fd);
    }
    best
}

fn quantile_shift_distance(a: &impl CircleMeasure, b: &impl CircleMeasure, p: i32) -> f64 {
    let f = to_pieces(a.quantile_pieces());
    let g = PeriodicQuantile {
        pieces: to_pieces(b.quantile_pieces()),
    };
    let candidates = (2 * f.len().max(g.pieces.len())).clamp(16, 512);
    let step = 2.0 / candidates as f64;
    let cost = |theta: f64| shifted_quantile_cost(&f, &g, theta, p);
    let (mut best_i, mut best_v) = (0, f64::INFINITY);
    for i in 0..=candidates {
        let v = cost(-1.0 + i as f64 * step);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let centre = -1.0 + best_i as f64 * step;
    let refined = golden_min(centre - step, centre + step, cost);
    best_v.min(refined).max(0.0)
}

fn cyclic_assignment_distance(x: &[f64], y: &[f64], p: i32) -> f64 {
    let n = x.len();
    let geo = |u: f64, v: f64| {
        let d = (u - v).abs();
        d.min(1.0 - d)
    };
    (0..n)
        .map(|s| {
            (0..n)
                .map(|i| geo(x[i], y[(i + s) % n]).powi(p))
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Circular Wasserstein distance of the given order between two measures on `ℝ/ℤ`.
pub fn wasserstein_circle(a: &impl CircleMeasure, b: &impl CircleMeasure, order: Order) -> f64 {
    let p = order.exponent();
    if let (Some(x), Some(y)) = (a.sorted_atoms(), b.sorted_atoms()) {
        if x.len() == y.len() {
            return cyclic_assignment_distance(&x, &y, p).powf(1.0 / p as f64);
        }
    }
    match order {
        Order::W1 => {
            let d = difference_pieces(&to_pieces(a.cdf_pieces()), &to_pieces(b.cdf_pieces()));
            l1_median_deviation(&d)
        }
        Order::W2 => quantile_shift_distance(a, b, 2).sqrt(),
    }
}

#[cfg(test)]
pub(crate) fn w1_by_quantile_shift(a: &impl CircleMeasure, b: &impl CircleMeasure) -> f64 {
    quantile_shift_distance(a, b, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(x: &[f64], y: &[f64], p: i32) -> f64 {
        fn permute(k: usize, idx: &mut Vec<usize>, best: &mut f64, x: &[f64], y: &[f64], p: i32) {
            if k == idx.len() {
                let c: f64 = idx
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        let d = (x[i] - y[j]).abs();
                        d.min(1.0 - d).powi(p)
                    })
                    .sum::<f64>()
                    / x.len() as f64;
                *best = best.min(c);
                return;
            }
            for i in k..idx.len() {
                idx.swap(k, i);
                permute(k + 1, idx, best, x, y, p);
                idx.swap(k, i);
            }
        }
        let mut idx: Vec<usize> = (0..x.len()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut idx, &mut best, x, y, p);
        best.powf(1.0 / p as f64)
    }

    #[test]
    fn single_cell_masses_use_the_shorter_arc() {
        let a = GridMeasure::cell_mass(10, 1).unwrap();
        let b = GridMeasure::cell_mass(10, 9).unwrap();
        assert!((wasserstein_circle(&a, &b, Order::W1) - 0.2).abs() < 1e-12);
        assert!((wasserstein_circle(&a, &b, Order::W2) - 0.2).abs() < 1e-9);
        assert_eq!(wasserstein_circle(&a, &a, Order::W1), 0.0);
    }

    #[test]
    fn empirical_three_point_example() {
        let x = EmpiricalMeasure::new(vec![0.1, 0.2, 0.3]).unwrap();
        let y = EmpiricalMeasure::new(vec![0.15, 0.25, 0.35]).unwrap();
        let w = wasserstein_circle(&x, &y, Order::W2);
        assert!((w - 0.05).abs() < 1e-12);
        assert!((brute_force(x.points(), y.points(), 2) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn translation_costs_at_most_the_shift() {
        // Compactly supported: W equals the shift exactly.
        let spike = GridMeasure::from_fn(64, |x| if (x - 0.3).abs() < 0.1 { 1.0 } else { 0.0 }).unwrap();
        let d = 5.0 / 64.0;
        assert!((wasserstein_circle(&spike, &spike.shifted(5), Order::W1) - d).abs() < 1e-12);
        assert!((wasserstein_circle(&spike, &spike.shifted(5), Order::W2) - d).abs() < 1e-9);
        // Full support: rotating part of the mass the other way is cheaper.
        let g = GridMeasure::von_mises(64, 0.3, 2.0).unwrap();
        let w1 = wasserstein_circle(&g, &g.shifted(5), Order::W1);
        assert!(w1 > 0.0 && w1 < d);
        assert!(wasserstein_circle(&GridMeasure::uniform(64), &GridMeasure::uniform(64).shifted(5), Order::W1) < 1e-15);
    }

    #[test]
    fn empirical_versus_grid_routes_agree() {
        let g = GridMeasure::von_mises(32, 0.7, 1.0).unwrap();
        let e = EmpiricalMeasure::new(vec![0.05, 0.61, 0.62, 0.93, 0.2]).unwrap();
        let w1 = wasserstein_circle(&e, &g, Order::W1);
        let w1q = w1_by_quantile_shift(&e, &g);
        assert!((w1 - w1q).abs() < 1e-9, "{w1} vs {w1q}");
    }

    proptest! {
        #[test]
        fn cyclic_assignment_matches_brute_force(
            x in prop::collection::vec(0.0f64..1.0, 1..6),
            seed in prop::collection::vec(0.0f64..1.0, 6),
        ) {
            let y: Vec<f64> = seed[..x.len()].to_vec();
            let a = EmpiricalMeasure::new(x.clone()).unwrap();
            let b = EmpiricalMeasure::new(y.clone()).unwrap();
            for (order, p) in [(Order::W1, 1), (Order::W2, 2)] {
                let w = wasserstein_circle(&a, &b, order);
                let bf = brute_force(&x, &y, p);
                prop_assert!((w - bf).abs() < 1e-12, "{:?}: {} vs {}", order, w, bf);
            }
        }

        #[test]
        fn grid_distances_are_metrics(
            wa in prop::collection::vec(0.05f64..1.0, 12),
            wb in prop::collection::vec(0.05f64..1.0, 12),
            wc in prop::collection::vec(0.05f64..1.0, 12),
        ) {
            let a = GridMeasure::from_unnormalized(wa).unwrap();
            let b = GridMeasure::from_unnormalized(wb).unwrap();
            let c = GridMeasure::from_unnormalized(wc).unwrap();
            for order in [Order::W1, Order::W2] {
                let ab = wasserstein_circle(&a, &b, order);
                let ba = wasserstein_circle(&b, &a, order);
                let bc = wasserstein_circle(&b, &c, order);
                let ac = wasserstein_circle(&a, &c, order);
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!(ac <= ab + bc + 1e-9);
                prop_assert!(wasserstein_circle(&a, &a, order) < 1e-9);
            }
            // W1 by the median formula and by the quantile-shift route
            let q = w1_by_quantile_shift(&a, &b);
            prop_assert!((q - wasserstein_circle(&a, &b, Order::W1)).abs() < 1e-9);
        }

        #[test]
        fn empirical_distances_are_metrics(
            x in prop::collection::vec(0.0f64..1.0, 7),
            y in prop::collection::vec(0.0f64..1.0, 7),
            z in prop::collection::vec(0.0f64..1.0, 7),
        ) {
            let a = EmpiricalMeasure::new(x).unwrap();
            let b = EmpiricalMeasure::new(y).unwrap();
            let c = EmpiricalMeasure::new(z).unwrap();
            for order in [Order::W1, Order::W2] {
                let ab = wasserstein_circle(&a, &b, order);
                let ba = wasserstein_circle(&b, &a, order);
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!(wasserstein_circle(&a, &c, order)
                    <= ab + wasserstein_circle(&b, &c, order) + 1e-9);
            }
        }
    }
}
