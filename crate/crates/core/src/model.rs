//! Problem data: the mean-field drift `b(x, μ)`, the running cost `𝒱(x, μ)`,
//! the terminal cost, the initial (and optionally terminal) law and the
//! horizon. Every coefficient is a [`TrigSeries`] and every interaction is a
//! convolution, so the same formulas apply to grid and empirical measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, GridMeasure};
use crate::series::{FourierMoments, GridBasis, TrigSeries};

/// Anything whose Fourier moments can be taken: grid or empirical measures.
pub trait HasMoments {
    fn fourier_moments(&self, modes: usize) -> FourierMoments;
}

impl HasMoments for GridMeasure {
    fn fourier_moments(&self, modes: usize) -> FourierMoments {
        self.moments(modes)
    }
}

impl HasMoments for EmpiricalMeasure {
    fn fourier_moments(&self, modes: usize) -> FourierMoments {
        self.moments(modes)
    }
}

/// `b(x, μ) = b₀(x) + ∫k_b(x − y) μ(dy)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionField {
    pub external: TrigSeries,
    pub kernel: TrigSeries,
}

impl InteractionField {
    pub fn new(external: TrigSeries, kernel: TrigSeries) -> Self {
        Self { external, kernel }
    }

    /// Drift at `x` against precomputed moments of `μ`.
    pub fn drift_with(&self, x: f64, moments: &FourierMoments) -> f64 {
        self.external.eval(x) + self.kernel.convolve(moments, x)
    }

    pub fn eval_drift(&self, x: f64, mu: &impl HasMoments) -> f64 {
        self.drift_with(x, &mu.fourier_moments(self.kernel.modes()))
    }

    /// `∂ₓ b(x, μ)`.
    pub fn eval_divergence(&self, x: f64, mu: &impl HasMoments) -> f64 {
        let dk = self.kernel.derivative();
        self.external.derivative().eval(x) + dk.convolve(&mu.fourier_moments(dk.modes()), x)
    }

    /// Uniform bound on `|b|` over all probability measures.
    pub fn sup_bound(&self) -> f64 {
        self.external.sup_bound() + self.kernel.sup_bound()
    }

    pub fn is_interacting(&self) -> bool {
        !self.kernel.is_zero()
    }

    /// Periodic potential `Ψ` with `b₀ = −Ψ'`; exists iff `b₀` has zero mean.
    pub fn confinement_potential(&self) -> Result<TrigSeries> {
        self.external.scale(-1.0).antiderivative().ok_or_else(|| {
            Error::SplitUnavailable(format!(
                "external drift has mean {} and is not the gradient of a periodic potential",
                self.external.mean()
            ))
        })
    }
}

/// `𝒱(x, μ) = v_ext(x) + ∫v₁(x − y)μ(dy) − c·(∫v₀'(x − y)μ(dy))²`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningCost {
    pub external: TrigSeries,
    pub pair: TrigSeries,
    pub grad_pair_sq_coeff: f64,
    pub grad_pair: TrigSeries,
}

impl RunningCost {
    pub fn external_only(external: TrigSeries) -> Self {
        Self {
            external,
            ..Self::default()
        }
    }

    fn modes(&self) -> usize {
        self.pair.modes().max(self.grad_pair.modes())
    }

    pub fn eval_with(&self, x: f64, moments: &FourierMoments) -> f64 {
        let mut v = self.external.eval(x) + self.pair.convolve(moments, x);
        if self.grad_pair_sq_coeff != 0.0 {
            let g = self.grad_pair.derivative().convolve(moments, x);
            v -= self.grad_pair_sq_coeff * g * g;
        }
        v
    }

    pub fn eval_running_cost(&self, x: f64, mu: &impl HasMoments) -> f64 {
        self.eval_with(x, &mu.fourier_moments(self.modes()))
    }

    pub fn sup_bound(&self) -> f64 {
        let g = self.grad_pair.derivative().sup_bound();
        self.external.sup_bound() + self.pair.sup_bound() + self.grad_pair_sq_coeff.abs() * g * g
    }

    pub fn is_zero(&self) -> bool {
        self.external.is_zero()
            && self.pair.is_zero()
            && (self.grad_pair_sq_coeff == 0.0 || self.grad_pair.derivative().is_zero())
    }

    pub fn is_interacting(&self) -> bool {
        !self.pair.is_zero()
            || (self.grad_pair_sq_coeff != 0.0 && !self.grad_pair.derivative().is_zero())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum TerminalCost {
    #[default]
    None,
    /// `𝒢(μ) = ∫g dμ`.
    Linear(TrigSeries),
}

impl TerminalCost {
    pub fn eval(&self, mu: &impl HasMoments) -> f64 {
        match self {
            TerminalCost::None => 0.0,
            TerminalCost::Linear(g) => linear_value(g, mu),
        }
    }

    pub fn weight(&self) -> Option<&TrigSeries> {
        match self {
            TerminalCost::None => None,
            TerminalCost::Linear(g) => Some(g),
        }
    }

    pub fn sup_bound(&self) -> f64 {
        self.weight().map_or(0.0, TrigSeries::sup_bound)
    }
}

/// `∫g dμ` from the moments of `μ`: `Σ a_n C_n + b_n S_n`.
fn linear_value(g: &TrigSeries, mu: &impl HasMoments) -> f64 {
    let m = mu.fourier_moments(g.modes());
    (0..g.modes())
        .map(|n| g.cos_coeff(n) * m.cos[n] + g.sin_coeff(n) * m.sin[n])
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    FiniteHorizon,
    Schrodinger,
}

/// Initial/terminal law as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DensitySpec {
    Uniform,
    WrappedGaussian { mean: f64, sigma: f64 },
    VonMises { mean: f64, kappa: f64 },
    /// Cell values on exactly `grid.cells` cells; normalised on load.
    Grid { values: Vec<f64> },
}

impl DensitySpec {
    pub fn build(&self, cells: usize, field: &str) -> Result<GridMeasure> {
        let bad = |msg: String| Error::config(field, msg);
        match self {
            DensitySpec::Uniform => Ok(GridMeasure::uniform(cells)),
            DensitySpec::WrappedGaussian { mean, sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0 && mean.is_finite()) {
                    return Err(bad(format!("wrapped_gaussian needs finite mean and sigma > 0, got sigma {sigma}")));
                }
                GridMeasure::wrapped_gaussian(cells, *mean, *sigma).map_err(|e| bad(e.to_string()))
            }
            DensitySpec::VonMises { mean, kappa } => {
                if !(kappa.is_finite() && *kappa >= 0.0 && mean.is_finite()) {
                    return Err(bad(format!("von_mises needs finite mean and kappa ≥ 0, got kappa {kappa}")));
                }
                GridMeasure::von_mises(cells, *mean, *kappa).map_err(|e| bad(e.to_string()))
            }
            DensitySpec::Grid { values } => {
                if values.len() != cells {
                    return Err(bad(format!(
                        "grid density has {} values but grid.cells is {cells}",
                        values.len()
                    )));
                }
                GridMeasure::from_unnormalized(values.clone()).map_err(|e| bad(e.to_string()))
            }
        }
    }
}

/// A fully specified problem on a fixed spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub drift: InteractionField,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub mu0: GridMeasure,
    pub target: Option<GridMeasure>,
    pub horizon: f64,
    pub mode: Mode,
}

impl ProblemSpec {
    /// Finite-horizon problem with no terminal cost.
    pub fn finite_horizon(
        drift: InteractionField,
        running: RunningCost,
        terminal: TerminalCost,
        mu0: GridMeasure,
        horizon: f64,
    ) -> Result<Self> {
        let spec = Self {
            drift,
            running,
            terminal,
            mu0,
            target: None,
            horizon,
            mode: Mode::FiniteHorizon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn schrodinger(
        drift: InteractionField,
        running: RunningCost,
        mu0: GridMeasure,
        target: GridMeasure,
        horizon: f64,
    ) -> Result<Self> {
        let spec = Self {
            drift,
            running,
            terminal: TerminalCost::None,
            mu0,
            target: Some(target),
            horizon,
            mode: Mode::Schrodinger,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// No drift, no running cost, no terminal cost.
    pub fn free(mu0: GridMeasure, horizon: f64) -> Result<Self> {
        Self::finite_horizon(
            InteractionField::default(),
            RunningCost::default(),
            TerminalCost::None,
            mu0,
            horizon,
        )
    }

    pub fn cells(&self) -> usize {
        self.mu0.cells()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {}", self.horizon)));
        }
        let series = [
            &self.drift.external,
            &self.drift.kernel,
            &self.running.external,
            &self.running.pair,
            &self.running.grad_pair,
        ];
        if series.iter().any(|s| !s.is_finite())
            || !self.running.grad_pair_sq_coeff.is_finite()
            || self.terminal.weight().is_some_and(|g| !g.is_finite())
        {
            return Err(Error::InvalidModel("coefficients must be finite".into()));
        }
        match self.mode {
            Mode::FiniteHorizon => {
                if self.target.is_some() {
                    return Err(Error::InvalidModel("finite-horizon problems take no target law".into()));
                }
            }
            Mode::Schrodinger => {
                let target = self
                    .target
                    .as_ref()
                    .ok_or_else(|| Error::InvalidModel("Schrödinger mode requires a target law".into()))?;
                if target.cells() != self.cells() {
                    return Err(Error::ShapeMismatch("target and initial law on different grids".into()));
                }
                if target.density().iter().any(|&r| r <= 0.0) {
                    return Err(Error::InvalidModel("target law must be strictly positive".into()));
                }
                if self.terminal != TerminalCost::None {
                    return Err(Error::InvalidModel("Schrödinger mode takes no terminal cost".into()));
                }
            }
        }
        Ok(())
    }

    /// Largest number of Fourier modes any convolution needs.
    pub fn modes(&self) -> usize {
        [
            self.drift.kernel.modes(),
            self.running.pair.modes(),
            self.running.grad_pair.modes(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
        .max(1)
    }
}

/// Grid-sampled coefficients of a [`ProblemSpec`], for repeated evaluation
/// against grid densities.
#[derive(Clone, Debug)]
pub struct GridModel {
    basis: GridBasis,
    cells: usize,
    kernel: TrigSeries,
    kernel_prime: TrigSeries,
    pair: TrigSeries,
    grad_kernel: TrigSeries,
    grad_coeff: f64,
    b0: Vec<f64>,
    div_b0: Vec<f64>,
    vext: Vec<f64>,
    terminal: Option<Vec<f64>>,
}

impl GridModel {
    pub fn new(spec: &ProblemSpec) -> Self {
        let cells = spec.cells();
        let basis = GridBasis::new(cells, spec.modes());
        let sample = |s: &TrigSeries| {
            if s.modes() > spec.modes() {
                GridBasis::new(cells, s.modes()).sample(s)
            } else {
                basis.sample(s)
            }
        };
        Self {
            cells,
            kernel: spec.drift.kernel.clone(),
            kernel_prime: spec.drift.kernel.derivative(),
            pair: spec.running.pair.clone(),
            grad_kernel: spec.running.grad_pair.derivative(),
            grad_coeff: spec.running.grad_pair_sq_coeff,
            b0: sample(&spec.drift.external),
            div_b0: sample(&spec.drift.external.derivative()),
            vext: sample(&spec.running.external),
            terminal: spec.terminal.weight().map(sample),
            basis,
        }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn basis(&self) -> &GridBasis {
        &self.basis
    }

    pub fn is_interacting(&self) -> bool {
        !self.kernel.is_zero()
    }

    /// `b(x_j, ρ)` at every cell centre.
    pub fn drift(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = self.basis.convolve(&self.kernel, rho);
        for (o, b) in out.iter_mut().zip(&self.b0) {
            *o += b;
        }
        out
    }

    /// `∂ₓb(x_j, ρ)`.
    pub fn drift_divergence(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = self.basis.convolve(&self.kernel_prime, rho);
        for (o, b) in out.iter_mut().zip(&self.div_b0) {
            *o += b;
        }
        out
    }

    /// Adds `(∂/∂ρ)ᵀ` of the interacting part of the drift applied to `lambda`.
    pub fn drift_adjoint_into(&self, lambda: &[f64], out: &mut [f64]) {
        if self.kernel.is_zero() {
            return;
        }
        for (o, v) in out.iter_mut().zip(self.basis.convolve_transpose(&self.kernel, lambda)) {
            *o += v;
        }
    }

    pub fn external_drift(&self) -> &[f64] {
        &self.b0
    }

    /// `𝒱(x_j, ρ)`.
    pub fn running(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = self.vext.clone();
        if !self.pair.is_zero() {
            for (o, v) in out.iter_mut().zip(self.basis.convolve(&self.pair, rho)) {
                *o += v;
            }
        }
        if self.grad_coeff != 0.0 && !self.grad_kernel.is_zero() {
            for (o, g) in out.iter_mut().zip(self.basis.convolve(&self.grad_kernel, rho)) {
                *o -= self.grad_coeff * g * g;
            }
        }
        out
    }

    /// Gradient in `ρ` of `Σ_j λ_j 𝒱(x_j, ρ)` with `λ` held fixed.
    pub fn running_adjoint_into(&self, lambda: &[f64], rho: &[f64], out: &mut [f64]) {
        if !self.pair.is_zero() {
            for (o, v) in out.iter_mut().zip(self.basis.convolve_transpose(&self.pair, lambda)) {
                *o += v;
            }
        }
        if self.grad_coeff != 0.0 && !self.grad_kernel.is_zero() {
            let g = self.basis.convolve(&self.grad_kernel, rho);
            let weighted: Vec<f64> = lambda.iter().zip(&g).map(|(l, g)| l * g).collect();
            let back = self.basis.convolve_transpose(&self.grad_kernel, &weighted);
            for (o, v) in out.iter_mut().zip(back) {
                *o -= 2.0 * self.grad_coeff * v;
            }
        }
    }

    /// Terminal weight `g(x_j)` if the terminal cost is linear.
    pub fn terminal_weight(&self) -> Option<&[f64]> {
        self.terminal.as_deref()
    }

    /// `h Σ g_j ρ_j`, or 0 without terminal cost.
    pub fn terminal_cost(&self, rho: &[f64]) -> f64 {
        let h = 1.0 / self.cells as f64;
        self.terminal
            .as_ref()
            .map_or(0.0, |g| h * g.iter().zip(rho).map(|(g, r)| g * r).sum::<f64>())
    }

    /// Uniform bound on `|b|`.
    pub fn drift_bound(spec: &ProblemSpec) -> f64 {
        spec.drift.sup_bound()
    }
}

/// Cosine coefficients of the two positive-definite kernels of the convex family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvexAmplitudes {
    /// `v₀(z) = Σ a_n cos(2πnz)`.
    pub v0: Vec<f64>,
    /// `v₁(z) = Σ c_n cos(2πnz)`.
    pub v1: Vec<f64>,
}

/// Builds the convex instance `b = b₀ + ∇δ_μU`, `U(μ) = ∬v₀(x − y)μ(dx)μ(dy)`,
/// `𝒱 = v_ext + v₁⋆μ − 4|v₀'⋆μ|²`.
///
/// Requires nonnegative cosine coefficients and a nonnegative spectrum
/// `2c_n − 4(2πn)²a_n` of the second variation of
/// `K(μ) = ∬v₁ μμ + 2∬v₀'' μμ`.
pub fn make_convex_instance(
    amplitudes: &ConvexAmplitudes,
    external_drift: TrigSeries,
    external_cost: TrigSeries,
    terminal: TerminalCost,
    mu0: GridMeasure,
    horizon: f64,
) -> Result<ProblemSpec> {
    for (name, coeffs) in [("v0", &amplitudes.v0), ("v1", &amplitudes.v1)] {
        if let Some((n, a)) = coeffs.iter().enumerate().find(|(_, a)| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::InvalidModel(format!(
                "{name} cosine coefficient {n} is {a}; the kernel must be positive definite"
            )));
        }
    }
    for (n, s) in convex_hessian_spectrum(amplitudes).into_iter().enumerate().skip(1) {
        if s < 0.0 {
            return Err(Error::InvalidModel(format!(
                "mode {n} of 2v1 + 4v0'' is {s}; K would not be convex"
            )));
        }
    }
    let v0 = TrigSeries::new(amplitudes.v0.clone(), Vec::new());
    let v1 = TrigSeries::new(amplitudes.v1.clone(), Vec::new());
    let drift = InteractionField::new(external_drift, v0.derivative().scale(2.0));
    let running = RunningCost {
        external: external_cost,
        pair: v1,
        grad_pair_sq_coeff: 4.0,
        grad_pair: v0,
    };
    ProblemSpec::finite_horizon(drift, running, terminal, mu0, horizon)
}

/// Cosine spectrum of `2v₁ + 4v₀''`.
pub fn convex_hessian_spectrum(amplitudes: &ConvexAmplitudes) -> Vec<f64> {
    let modes = amplitudes.v0.len().max(amplitudes.v1.len());
    (0..modes)
        .map(|n| {
            let a = amplitudes.v0.get(n).copied().unwrap_or(0.0);
            let c = amplitudes.v1.get(n).copied().unwrap_or(0.0);
            let k = std::f64::consts::TAU * n as f64;
            2.0 * c - 4.0 * k * k * a
        })
        .collect()
}

/// The convex amplitudes of the shipped example:
/// `v₀ = cos(2πz)/(8π²)`, `v₁ = ½ + 3/2·cos(2πz)`.
pub fn default_convex_amplitudes() -> ConvexAmplitudes {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    ConvexAmplitudes {
        v0: vec![0.0, 1.0 / (8.0 * pi2)],
        v1: vec![0.5, 1.5],
    }
}
