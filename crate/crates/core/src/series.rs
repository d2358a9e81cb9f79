//! Finite trigonometric series on the unit torus and their convolutions
//! against grid and empirical measures.
//!
//! Every coefficient function of a problem (external drift, pair kernels,
//! potentials, terminal weight) is a finite series
//!
//! ```text
//! f(z) = Σ_n cos[n]·cos(2πnz) + Σ_n sin[n]·sin(2πnz)
//! ```
//!
//! so derivatives are exact and a convolution `∫k(x−y)μ(dy)` reduces to the
//! first few Fourier moments of `μ`.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrigSeries {
    /// `cos[n]` multiplies `cos(2πnz)`; `cos[0]` is the constant term.
    #[serde(default)]
    pub cos: Vec<f64>,
    /// `sin[n]` multiplies `sin(2πnz)`; `sin[0]` is ignored.
    #[serde(default)]
    pub sin: Vec<f64>,
}

impl TrigSeries {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(cos: Vec<f64>, sin: Vec<f64>) -> Self {
        Self { cos, sin }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c], vec![])
    }

    /// `a·cos(2πnz)`.
    pub fn cosine(n: usize, a: f64) -> Self {
        let mut cos = vec![0.0; n + 1];
        cos[n] = a;
        Self::new(cos, vec![])
    }

    /// `a·sin(2πnz)`.
    pub fn sine(n: usize, a: f64) -> Self {
        let mut sin = vec![0.0; n + 1];
        sin[n] = a;
        Self::new(vec![], sin)
    }

    /// Number of modes `n = 0..modes()` that may carry a coefficient.
    pub fn modes(&self) -> usize {
        self.cos.len().max(self.sin.len())
    }

    pub fn cos_coeff(&self, n: usize) -> f64 {
        self.cos.get(n).copied().unwrap_or(0.0)
    }

    pub fn sin_coeff(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.sin.get(n).copied().unwrap_or(0.0)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.cos.iter().all(|&c| c == 0.0) && self.sin.iter().skip(1).all(|&c| c == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.cos.iter().chain(self.sin.iter()).all(|c| c.is_finite())
    }

    /// Mean over the torus (the constant coefficient).
    pub fn mean(&self) -> f64 {
        self.cos_coeff(0)
    }

    /// Upper bound on `sup |f|`.
    pub fn sup_bound(&self) -> f64 {
        self.cos.iter().map(|c| c.abs()).sum::<f64>()
            + self.sin.iter().skip(1).map(|c| c.abs()).sum::<f64>()
    }

    pub fn eval(&self, z: f64) -> f64 {
        let modes = self.modes();
        if modes == 0 {
            return 0.0;
        }
        let mut acc = self.cos_coeff(0);
        let (s1, c1) = (TAU * z).sin_cos();
        let (mut c, mut s) = (1.0, 0.0);
        for n in 1..modes {
            let cn = c * c1 - s * s1;
            s = s * c1 + c * s1;
            c = cn;
            acc += self.cos_coeff(n) * c + self.sin_coeff(n) * s;
        }
        acc
    }

    /// Exact derivative `f'`.
    pub fn derivative(&self) -> Self {
        let modes = self.modes();
        let mut cos = vec![0.0; modes];
        let mut sin = vec![0.0; modes];
        for n in 1..modes {
            let w = TAU * n as f64;
            // d/dz [a cos + b sin] = -a w sin + b w cos
            cos[n] = w * self.sin_coeff(n);
            sin[n] = -w * self.cos_coeff(n);
        }
        Self::new(cos, sin)
    }

    /// Periodic antiderivative with zero mean; `None` when `f` has nonzero mean.
    pub fn antiderivative(&self) -> Option<Self> {
        if self.mean() != 0.0 {
            return None;
        }
        let modes = self.modes();
        let mut cos = vec![0.0; modes];
        let mut sin = vec![0.0; modes];
        for n in 1..modes {
            let w = TAU * n as f64;
            cos[n] = -self.sin_coeff(n) / w;
            sin[n] = self.cos_coeff(n) / w;
        }
        Some(Self::new(cos, sin))
    }

    /// `z ↦ f(−z)`.
    pub fn reflect(&self) -> Self {
        Self::new(self.cos.clone(), self.sin.iter().map(|s| -s).collect())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::new(
            self.cos.iter().map(|c| c * factor).collect(),
            self.sin.iter().map(|s| s * factor).collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        let modes = self.modes().max(other.modes());
        let cos = (0..modes)
            .map(|n| self.cos_coeff(n) + other.cos_coeff(n))
            .collect();
        let sin = (0..modes)
            .map(|n| self.sin_coeff(n) + other.sin_coeff(n))
            .collect();
        Self::new(cos, sin)
    }

    /// Convolution `∫ f(x − y) μ(dy)` given the Fourier moments of `μ`.
    pub fn convolve(&self, moments: &FourierMoments, x: f64) -> f64 {
        let modes = self.modes().min(moments.modes());
        if modes == 0 {
            return 0.0;
        }
        let mut acc = self.cos_coeff(0) * moments.cos[0];
        let (s1, c1) = (TAU * x).sin_cos();
        let (mut c, mut s) = (1.0, 0.0);
        for n in 1..modes {
            let cn = c * c1 - s * s1;
            s = s * c1 + c * s1;
            c = cn;
            let (mc, ms) = (moments.cos[n], moments.sin[n]);
            acc += self.cos_coeff(n) * (c * mc + s * ms) + self.sin_coeff(n) * (s * mc - c * ms);
        }
        acc
    }
}

/// `∫cos(2πny)μ(dy)` and `∫sin(2πny)μ(dy)` for `n = 0..modes`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierMoments {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FourierMoments {
    pub fn modes(&self) -> usize {
        self.cos.len()
    }

    /// Moments of the uniform atom measure on `points`.
    pub fn of_points(points: &[f64], modes: usize) -> Self {
        Self::of_weighted_points(points.iter().map(|&x| (x, 1.0 / points.len() as f64)), modes)
    }

    pub fn of_weighted_points(points: impl Iterator<Item = (f64, f64)>, modes: usize) -> Self {
        let mut cos = vec![0.0; modes];
        let mut sin = vec![0.0; modes];
        if modes == 0 {
            return Self { cos, sin };
        }
        for (x, w) in points {
            cos[0] += w;
            let (s1, c1) = (TAU * x).sin_cos();
            let (mut c, mut s) = (1.0, 0.0);
            for n in 1..modes {
                let cn = c * c1 - s * s1;
                s = s * c1 + c * s1;
                c = cn;
                cos[n] += w * c;
                sin[n] += w * s;
            }
        }
        Self { cos, sin }
    }
}

/// Cell-centre cosine/sine tables for fast grid convolutions.
#[derive(Clone, Debug)]
pub struct GridBasis {
    cells: usize,
    modes: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl GridBasis {
    pub fn new(cells: usize, modes: usize) -> Self {
        let h = 1.0 / cells as f64;
        let mut cos = vec![0.0; modes * cells];
        let mut sin = vec![0.0; modes * cells];
        for n in 0..modes {
            for j in 0..cells {
                let (s, c) = (TAU * n as f64 * (j as f64 + 0.5) * h).sin_cos();
                cos[n * cells + j] = c;
                sin[n * cells + j] = s;
            }
        }
        Self {
            cells,
            modes,
            cos,
            sin,
        }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Moments `Σ_j weight·v_j·trig(x_j)`.
    pub fn moments(&self, values: &[f64], weight: f64) -> FourierMoments {
        let m = self.cells;
        let mut cos = vec![0.0; self.modes];
        let mut sin = vec![0.0; self.modes];
        for n in 0..self.modes {
            let ct = &self.cos[n * m..(n + 1) * m];
            let st = &self.sin[n * m..(n + 1) * m];
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..m {
                a += ct[j] * values[j];
                b += st[j] * values[j];
            }
            cos[n] = weight * a;
            sin[n] = weight * b;
        }
        FourierMoments { cos, sin }
    }

    /// `out_j += Σ_n` series terms evaluated against `moments` at cell centre `j`.
    pub fn synthesize_into(&self, series: &TrigSeries, moments: &FourierMoments, out: &mut [f64]) {
        let m = self.cells;
        let modes = series.modes().min(self.modes).min(moments.modes());
        for n in 0..modes {
            let (a, b) = (series.cos_coeff(n), series.sin_coeff(n));
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let (mc, ms) = (moments.cos[n], moments.sin[n]);
            // a(c·C + s·S) + b(s·C − c·S)
            let cc = a * mc - b * ms;
            let sc = a * ms + b * mc;
            let ct = &self.cos[n * m..(n + 1) * m];
            let st = &self.sin[n * m..(n + 1) * m];
            for j in 0..m {
                out[j] += cc * ct[j] + sc * st[j];
            }
        }
    }

    /// Grid convolution `(k⋆v)_j = h Σ_m k(x_j − x_m) v_m`.
    pub fn convolve(&self, kernel: &TrigSeries, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells];
        if kernel.is_zero() {
            return out;
        }
        let mom = self.moments(values, 1.0 / self.cells as f64);
        self.synthesize_into(kernel, &mom, &mut out);
        out
    }

    /// Transpose of [`GridBasis::convolve`]: `h Σ_j λ_j k(x_j − x_m)`.
    pub fn convolve_transpose(&self, kernel: &TrigSeries, lambda: &[f64]) -> Vec<f64> {
        self.convolve(&kernel.reflect(), lambda)
    }

    /// Samples of `f` at the cell centres.
    pub fn sample(&self, series: &TrigSeries) -> Vec<f64> {
        let mut out = vec![0.0; self.cells];
        // Convolving against δ₀ yields the plain samples.
        let delta = FourierMoments {
            cos: vec![1.0; self.modes],
            sin: vec![0.0; self.modes],
        };
        self.synthesize_into(series, &delta, &mut out);
        out
    }
}
