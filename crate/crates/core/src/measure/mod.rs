//! Probability measures on the unit torus: cell-averaged grid densities
//! (one and two particles), empirical atom measures, and time-indexed flows.
//!
//! Grid convention: `M` equal cells `[jh, (j+1)h)`, `h = 1/M`, values are
//! densities attached to the cell centres `x_j = (j + ½)h`.

mod wasserstein;

pub use wasserstein::{wasserstein_circle, CircleMeasure, Order};

use crate::error::{Error, Result};
use crate::series::FourierMoments;

/// Normalisation tolerance `|h Σ ρ_j − 1|`.
pub const MASS_TOL: f64 = 1e-12;
/// Default density floor in Fisher information and `∇log ρ`.
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    density: Vec<f64>,
}

fn check_density(density: &[f64], weight: f64, what: &str) -> Result<()> {
    if let Some((j, v)) = density
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::InvalidMeasure(format!(
            "{what}: entry {j} is {v}, expected a finite nonnegative density"
        )));
    }
    let mass = weight * density.iter().sum::<f64>();
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidMeasure(format!(
            "{what}: total mass {mass} differs from 1"
        )));
    }
    Ok(())
}

fn normalize(mut weights: Vec<f64>, cell_volume: f64, what: &str) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidMeasure(format!(
            "{what}: weights must be finite and nonnegative"
        )));
    }
    let total: f64 = weights.iter().sum::<f64>() * cell_volume;
    if total <= 0.0 {
        return Err(Error::InvalidMeasure(format!("{what}: zero total mass")));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// `(ρ_{j+1} − ρ_{j−1}) / 2h` with periodic wrap.
pub(crate) fn central_difference(values: &[f64], out: &mut [f64]) {
    let m = values.len();
    let inv2h = m as f64 / 2.0;
    for j in 0..m {
        let jp = if j + 1 == m { 0 } else { j + 1 };
        let jm = if j == 0 { m - 1 } else { j - 1 };
        out[j] = (values[jp] - values[jm]) * inv2h;
    }
}

pub(crate) fn entropy_of(density: &[f64], weight: f64) -> f64 {
    weight
        * density
            .iter()
            .map(|&r| if r > 0.0 { r * r.ln() } else { 0.0 })
            .sum::<f64>()
}

impl GridMeasure {
    /// Wraps an already normalised density.
    pub fn new(density: Vec<f64>) -> Result<Self> {
        if density.len() < 2 {
            return Err(Error::InvalidMeasure("at least 2 cells required".into()));
        }
        check_density(&density, 1.0 / density.len() as f64, "grid measure")?;
        Ok(Self { density })
    }

    /// Rescales nonnegative weights so that `h Σ ρ = 1`.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidMeasure("at least 2 cells required".into()));
        }
        let h = 1.0 / weights.len() as f64;
        Ok(Self {
            density: normalize(weights, h, "grid measure")?,
        })
    }

    /// Samples `f` at the cell centres and normalises.
    pub fn from_fn(cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let h = 1.0 / cells as f64;
        Self::from_unnormalized((0..cells).map(|j| f((j as f64 + 0.5) * h)).collect())
    }

    pub fn uniform(cells: usize) -> Self {
        Self {
            density: vec![1.0; cells.max(2)],
        }
    }

    /// All mass in a single cell.
    pub fn cell_mass(cells: usize, cell: usize) -> Result<Self> {
        if cell >= cells {
            return Err(Error::InvalidArgument(format!(
                "cell {cell} out of range for {cells} cells"
            )));
        }
        let mut w = vec![0.0; cells];
        w[cell] = 1.0;
        Self::from_unnormalized(w)
    }

    pub fn wrapped_gaussian(cells: usize, mean: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidMeasure(format!("sigma must be positive, got {sigma}")));
        }
        let images = (6.0 * sigma).ceil() as i64 + 2;
        Self::from_fn(cells, |x| {
            (-images..=images)
                .map(|k| {
                    let d = x - mean + k as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .sum()
        })
    }

    /// Density proportional to `exp(κ cos 2π(x − mean))`.
    pub fn von_mises(cells: usize, mean: f64, kappa: f64) -> Result<Self> {
        Self::from_fn(cells, |x| {
            (kappa * (std::f64::consts::TAU * (x - mean)).cos()).exp()
        })
    }

    pub fn cells(&self) -> usize {
        self.density.len()
    }

    pub fn h(&self) -> f64 {
        1.0 / self.density.len() as f64
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn into_density(self) -> Vec<f64> {
        self.density
    }

    pub fn centre(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.h()
    }

    pub fn total_mass(&self) -> f64 {
        self.h() * self.density.iter().sum::<f64>()
    }

    /// `h Σ ρ ln ρ`, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        entropy(self)
    }

    pub fn fisher_information(&self, floor: f64) -> f64 {
        fisher_information(self, floor)
    }

    /// Fourier moments by the cell-centre (midpoint) rule.
    pub fn moments(&self, modes: usize) -> FourierMoments {
        let h = self.h();
        FourierMoments::of_weighted_points(
            self.density
                .iter()
                .enumerate()
                .map(|(j, &r)| ((j as f64 + 0.5) * h, h * r)),
            modes,
        )
    }

    /// Cyclic shift by `k` cells.
    pub fn shifted(&self, k: usize) -> Self {
        let m = self.cells();
        let density = (0..m).map(|j| self.density[(j + m - k % m) % m]).collect();
        Self { density }
    }

    pub fn mean_of(&self, f: impl Fn(f64) -> f64) -> f64 {
        let h = self.h();
        self.density
            .iter()
            .enumerate()
            .map(|(j, &r)| h * r * f((j as f64 + 0.5) * h))
            .sum()
    }
}

/// `h Σ_j ρ_j ln ρ_j`.
pub fn entropy(mu: &GridMeasure) -> f64 {
    entropy_of(&mu.density, mu.h())
}

/// `h Σ_j (D_c ρ)_j² / max(ρ_j, floor)` with the periodic central difference.
pub fn fisher_information(mu: &GridMeasure, floor: f64) -> f64 {
    let mut d = vec![0.0; mu.cells()];
    central_difference(&mu.density, &mut d);
    mu.h()
        * d.iter()
            .zip(&mu.density)
            .map(|(g, &r)| g * g / r.max(floor))
            .sum::<f64>()
}

/// `h Σ ρ ln(ρ/κ)`; `+∞` when `p` is not absolutely continuous w.r.t. `q`.
pub fn kl_grid(p: &GridMeasure, q: &GridMeasure) -> Result<f64> {
    if p.cells() != q.cells() {
        return Err(Error::ShapeMismatch(format!(
            "kl_grid: {} vs {} cells",
            p.cells(),
            q.cells()
        )));
    }
    let mut acc = 0.0;
    for (&r, &k) in p.density.iter().zip(&q.density) {
        if r > 0.0 {
            if k <= 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += r * (r / k).ln();
        }
    }
    Ok(p.h() * acc)
}

/// Density on the product torus `𝕋²`, row-major with `ρ[i·M + j]` at `(x¹_i, x²_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure2 {
    cells: usize,
    density: Vec<f64>,
}

impl GridMeasure2 {
    pub fn new(cells: usize, density: Vec<f64>) -> Result<Self> {
        if cells < 2 || density.len() != cells * cells {
            return Err(Error::ShapeMismatch(format!(
                "expected {cells}×{cells} density, got {} entries",
                density.len()
            )));
        }
        let h = 1.0 / cells as f64;
        check_density(&density, h * h, "product grid measure")?;
        Ok(Self { cells, density })
    }

    pub fn from_unnormalized(cells: usize, weights: Vec<f64>) -> Result<Self> {
        if cells < 2 || weights.len() != cells * cells {
            return Err(Error::ShapeMismatch(format!(
                "expected {cells}×{cells} weights, got {}",
                weights.len()
            )));
        }
        let h = 1.0 / cells as f64;
        Ok(Self {
            cells,
            density: normalize(weights, h * h, "product grid measure")?,
        })
    }

    pub fn product(a: &GridMeasure, b: &GridMeasure) -> Result<Self> {
        if a.cells() != b.cells() {
            return Err(Error::ShapeMismatch("product of different grids".into()));
        }
        let m = a.cells();
        let mut density = Vec::with_capacity(m * m);
        for &ra in &a.density {
            for &rb in &b.density {
                density.push(ra * rb);
            }
        }
        Ok(Self { cells: m, density })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn h(&self) -> f64 {
        1.0 / self.cells as f64
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn into_density(self) -> Vec<f64> {
        self.density
    }

    /// `h² Σ ρ ln ρ`.
    pub fn entropy(&self) -> f64 {
        let h = self.h();
        entropy_of(&self.density, h * h)
    }

    /// `h² Σ (|D¹ρ|² + |D²ρ|²) / max(ρ, floor)` (unnormalised, i.e. not divided by N).
    pub fn fisher_information(&self, floor: f64) -> f64 {
        let m = self.cells;
        let h = self.h();
        let inv2h = 0.5 / h;
        let mut acc = 0.0;
        for i in 0..m {
            let ip = (i + 1) % m;
            let im = (i + m - 1) % m;
            for j in 0..m {
                let jp = (j + 1) % m;
                let jm = (j + m - 1) % m;
                let d1 = (self.density[ip * m + j] - self.density[im * m + j]) * inv2h;
                let d2 = (self.density[i * m + jp] - self.density[i * m + jm]) * inv2h;
                acc += (d1 * d1 + d2 * d2) / self.density[i * m + j].max(floor);
            }
        }
        h * h * acc
    }

    /// Law of the first coordinate.
    pub fn marginal1(&self) -> GridMeasure {
        let m = self.cells;
        let h = self.h();
        let density = (0..m)
            .map(|i| h * self.density[i * m..(i + 1) * m].iter().sum::<f64>())
            .collect();
        GridMeasure { density }
    }

    /// Law of the second coordinate.
    pub fn marginal2(&self) -> GridMeasure {
        let m = self.cells;
        let h = self.h();
        let density = (0..m)
            .map(|j| h * (0..m).map(|i| self.density[i * m + j]).sum::<f64>())
            .collect();
        GridMeasure { density }
    }

    /// Image under `(x¹, x²) ↦ (x², x¹)`.
    pub fn swap_axes(&self) -> Self {
        let m = self.cells;
        let mut density = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                density[j * m + i] = self.density[i * m + j];
            }
        }
        Self { cells: m, density }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = self.cells;
        (0..m).all(|i| (0..i).all(|j| (self.density[i * m + j] - self.density[j * m + i]).abs() <= tol))
    }
}

/// Average of `μ²` and its image under the particle exchange.
pub fn symmetrize_pair(mu2: &GridMeasure2) -> GridMeasure2 {
    let swapped = mu2.swap_axes();
    let density = mu2
        .density
        .iter()
        .zip(&swapped.density)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    GridMeasure2 {
        cells: mu2.cells,
        density,
    }
}

/// Uniform atom measure `(1/N) Σ δ_{x_i}` on the torus.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasure("empirical measure needs N ≥ 1".into()));
        }
        if let Some(x) = points.iter().find(|x| !(0.0..1.0).contains(*x)) {
            return Err(Error::InvalidMeasure(format!(
                "coordinate {x} outside [0, 1)"
            )));
        }
        Ok(Self { points })
    }

    /// Wraps arbitrary real coordinates onto `[0, 1)`.
    pub fn from_wrapped(points: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(points.into_iter().map(wrap).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn moments(&self, modes: usize) -> FourierMoments {
        FourierMoments::of_points(&self.points, modes)
    }
}

/// Maps a real coordinate onto `[0, 1)`.
pub fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Histogram density of `emp` on `cells` equal cells.
pub fn bin_empirical(emp: &EmpiricalMeasure, cells: usize) -> Result<GridMeasure> {
    if cells < 2 {
        return Err(Error::InvalidArgument("bin_empirical needs at least 2 cells".into()));
    }
    let mut counts = vec![0usize; cells];
    for &x in &emp.points {
        let j = ((x * cells as f64) as usize).min(cells - 1);
        counts[j] += 1;
    }
    let scale = cells as f64 / emp.len() as f64;
    Ok(GridMeasure {
        density: counts.into_iter().map(|c| c as f64 * scale).collect(),
    })
}

/// Grid measures at the `K + 1` equally spaced instants `t_k = kT/K`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFlow {
    horizon: f64,
    cells: usize,
    values: Vec<f64>,
}

impl MeasureFlow {
    pub fn new(horizon: f64, cells: usize, values: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0) || cells < 2 || values.is_empty() || values.len() % cells != 0 {
            return Err(Error::ShapeMismatch(format!(
                "measure flow: horizon {horizon}, {cells} cells, {} values",
                values.len()
            )));
        }
        if values.len() / cells < 2 {
            return Err(Error::ShapeMismatch("measure flow needs K ≥ 1".into()));
        }
        let h = 1.0 / cells as f64;
        for (k, row) in values.chunks(cells).enumerate() {
            check_density(row, h, &format!("measure flow at step {k}"))?;
        }
        Ok(Self {
            horizon,
            cells,
            values,
        })
    }

    pub fn from_measures(horizon: f64, measures: &[GridMeasure]) -> Result<Self> {
        let cells = measures
            .first()
            .map(|m| m.cells())
            .ok_or_else(|| Error::ShapeMismatch("empty measure flow".into()))?;
        if measures.iter().any(|m| m.cells() != cells) {
            return Err(Error::ShapeMismatch("measures on different grids".into()));
        }
        let values = measures.iter().flat_map(|m| m.density.iter().copied()).collect();
        Self::new(horizon, cells, values)
    }

    pub(crate) fn from_raw(horizon: f64, cells: usize, values: Vec<f64>) -> Self {
        Self {
            horizon,
            cells,
            values,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.cells - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn density(&self, k: usize) -> &[f64] {
        &self.values[k * self.cells..(k + 1) * self.cells]
    }

    pub fn measure(&self, k: usize) -> GridMeasure {
        GridMeasure {
            density: self.density(k).to_vec(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear interpolation in time, clamped to `[0, T]`.
    pub fn measure_at(&self, t: f64) -> GridMeasure {
        let s = (t / self.dt()).clamp(0.0, self.steps() as f64);
        let k = (s.floor() as usize).min(self.steps() - 1);
        let w = s - k as f64;
        let (a, b) = (self.density(k), self.density(k + 1));
        GridMeasure {
            density: a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect(),
        }
    }

    /// Trapezoidal weights `τ_k` on the time nodes.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.steps(), self.dt())
    }
}

pub(crate) fn trapezoid_weights(steps: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; steps + 1];
    w[0] = 0.5 * dt;
    w[steps] = 0.5 * dt;
    w
}
