//! Fokker–Planck and continuity-equation machinery on the periodic grid.
//!
//! One time step `ρ_k → ρ_{k+1}` of `∂ₜρ = ∂ₓₓρ − ∂ₓ((A + b)ρ)`:
//!
//! 1. half step of advection with `u = A_k + b(ρ_k)` (Heun, central flux),
//! 2. a full step of the semi-discrete heat semigroup `exp(Δt L_h)`, applied
//!    exactly in Fourier space (`L_h` the 3-point periodic Laplacian),
//! 3. half step of advection with `v = A_{k+1} + b(ρ_d)`.
//!
//! Every stage is smooth in its inputs, so the discrete adjoint used by the
//! solver is exact. The diffusion stage is unconditionally stable and the
//! CFL restriction is purely advective: `Δt ≤ 0.4 h / max|u|`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::measure::{central_difference, MeasureFlow, DENSITY_FLOOR};
use crate::model::{GridModel, ProblemSpec};

/// Courant number of the advective half steps.
pub const CFL_NUMBER: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Control,
    Velocity,
}

/// Scalar field on the `(K + 1) × M` time/space grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFlow {
    kind: FieldKind,
    horizon: f64,
    cells: usize,
    values: Vec<f64>,
}

impl FieldFlow {
    pub fn new(kind: FieldKind, horizon: f64, cells: usize, values: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0) || cells < 2 || values.len() % cells != 0 || values.len() / cells < 2 {
            return Err(Error::ShapeMismatch(format!(
                "field flow: horizon {horizon}, {cells} cells, {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "field flow entry {i} is not finite"
            )));
        }
        Ok(Self {
            kind,
            horizon,
            cells,
            values,
        })
    }

    pub fn zeros(kind: FieldKind, horizon: f64, cells: usize, steps: usize) -> Self {
        Self {
            kind,
            horizon,
            cells,
            values: vec![0.0; (steps + 1) * cells],
        }
    }

    /// Samples `f(t_k, x_j)`.
    pub fn from_fn(
        kind: FieldKind,
        horizon: f64,
        cells: usize,
        steps: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let dt = horizon / steps as f64;
        let h = 1.0 / cells as f64;
        let values = (0..=steps)
            .flat_map(|k| (0..cells).map(move |j| (k, j)))
            .map(|(k, j)| f(k as f64 * dt, (j as f64 + 0.5) * h))
            .collect();
        Self::new(kind, horizon, cells, values)
    }

    pub(crate) fn from_raw(kind: FieldKind, horizon: f64, cells: usize, values: Vec<f64>) -> Self {
        Self {
            kind,
            horizon,
            cells,
            values,
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
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

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.cells..(k + 1) * self.cells]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.cells..(k + 1) * self.cells]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Linear in `t` between nodes, periodic-linear in `x` between cell centres.
    pub fn interpolate(&self, t: f64, x: f64) -> f64 {
        let s = (t / self.dt()).clamp(0.0, self.steps() as f64);
        let k = (s.floor() as usize).min(self.steps() - 1);
        let wt = s - k as f64;
        let (j0, j1, wx) = cell_weights(self.cells, x);
        let a = self.row(k);
        let b = self.row(k + 1);
        let at = |r: &[f64]| (1.0 - wx) * r[j0] + wx * r[j1];
        (1.0 - wt) * at(a) + wt * at(b)
    }

    /// Same kind, shape and horizon.
    pub fn same_shape(&self, other: &FieldFlow) -> bool {
        self.kind == other.kind
            && self.cells == other.cells
            && self.values.len() == other.values.len()
            && (self.horizon - other.horizon).abs() <= 1e-12 * self.horizon
    }
}

/// Neighbouring centres `j0, j1` and the weight of `j1` for periodic linear
/// interpolation at `x`.
pub(crate) fn cell_weights(cells: usize, x: f64) -> (usize, usize, f64) {
    let s = x * cells as f64 - 0.5;
    let f = s.floor();
    let w = s - f;
    let j0 = (f as i64).rem_euclid(cells as i64) as usize;
    (j0, (j0 + 1) % cells, w)
}

/// Exact propagator `exp(Δt L_h)` of the periodic 3-point Laplacian.
#[derive(Clone)]
pub struct HeatPropagator {
    cells: usize,
    multipliers: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HeatPropagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatPropagator").field("cells", &self.cells).finish()
    }
}

impl HeatPropagator {
    pub fn new(cells: usize, dt: f64) -> Self {
        let h = 1.0 / cells as f64;
        let multipliers = (0..cells)
            .map(|n| {
                let s = (std::f64::consts::PI * n as f64 / cells as f64).sin();
                (-dt * 4.0 * s * s / (h * h)).exp()
            })
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            cells,
            multipliers,
            forward: planner.plan_fft_forward(cells),
            inverse: planner.plan_fft_inverse(cells),
        }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// In-place application; the operator is symmetric, so this is also its adjoint.
    pub fn apply(&self, values: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.apply_complex(&mut buf);
        for (v, c) in values.iter_mut().zip(&buf) {
            *v = c.re;
        }
    }

    fn apply_complex(&self, buf: &mut [Complex<f64>]) {
        self.forward.process(buf);
        let scale = 1.0 / self.cells as f64;
        for (c, m) in buf.iter_mut().zip(&self.multipliers) {
            *c *= m * scale;
        }
        self.inverse.process(buf);
    }

    /// Applies the propagator along both axes of a row-major `M × M` array.
    pub fn apply_2d(&self, values: &mut [f64]) {
        let m = self.cells;
        let mut buf = vec![Complex::new(0.0, 0.0); m];
        for row in values.chunks_mut(m) {
            for (b, &v) in buf.iter_mut().zip(row.iter()) {
                *b = Complex::new(v, 0.0);
            }
            self.apply_complex(&mut buf);
            for (v, b) in row.iter_mut().zip(&buf) {
                *v = b.re;
            }
        }
        for j in 0..m {
            for i in 0..m {
                buf[i] = Complex::new(values[i * m + j], 0.0);
            }
            self.apply_complex(&mut buf);
            for i in 0..m {
                values[i * m + j] = buf[i].re;
            }
        }
    }
}

/// Heat flow `ρ_{k+1} = exp(Δt L_h) ρ_k` from `μ₀`.
pub fn heat_flow(mu0: &crate::measure::GridMeasure, horizon: f64, steps: usize) -> MeasureFlow {
    let cells = mu0.cells();
    let heat = HeatPropagator::new(cells, horizon / steps as f64);
    let mut values = Vec::with_capacity((steps + 1) * cells);
    values.extend_from_slice(mu0.density());
    let mut rho = mu0.density().to_vec();
    for _ in 0..steps {
        heat.apply(&mut rho);
        values.extend_from_slice(&rho);
    }
    MeasureFlow::from_raw(horizon, cells, values)
}

/// Number of steps the advective CFL bound requires for `|u| ≤ speed`.
pub fn required_steps(horizon: f64, cells: usize, speed: f64) -> usize {
    let h = 1.0 / cells as f64;
    (horizon * speed / (CFL_NUMBER * h)).ceil().max(1.0) as usize
}

/// Bound on `|A + b|` for `control` under `spec`.
pub fn speed_bound(spec: &ProblemSpec, control: &FieldFlow) -> f64 {
    control.max_abs() + spec.drift.sup_bound()
}

pub fn check_cfl(spec: &ProblemSpec, control: &FieldFlow) -> Result<()> {
    let required = required_steps(spec.horizon, spec.cells(), speed_bound(spec, control));
    if control.steps() < required {
        return Err(Error::CflViolation {
            steps: control.steps(),
            required,
        });
    }
    Ok(())
}

/// `y = x − τ/2 (g₁ + g₂)`, `g₁ = D(u x)`, `x* = x − τ g₁`, `g₂ = D(u x*)`.
fn heun(u: &[f64], tau: f64, x: &[f64], x_star: &mut [f64], y: &mut [f64], scratch: &mut [f64], g1: &mut [f64]) {
    for ((s, a), b) in scratch.iter_mut().zip(u).zip(x) {
        *s = a * b;
    }
    central_difference(scratch, g1);
    for ((xs, a), g) in x_star.iter_mut().zip(x).zip(g1.iter()) {
        *xs = a - tau * g;
    }
    for ((s, a), b) in scratch.iter_mut().zip(u).zip(x_star.iter()) {
        *s = a * b;
    }
    central_difference(scratch, y);
    for ((yv, a), g) in y.iter_mut().zip(x).zip(g1.iter()) {
        *yv = a - 0.5 * tau * (g + *yv);
    }
}

/// Reverse pass of [`heun`]: accumulates into `x_bar` and `u_bar`.
#[allow(clippy::too_many_arguments)]
fn heun_adjoint(
    u: &[f64],
    tau: f64,
    x: &[f64],
    x_star: &[f64],
    y_bar: &[f64],
    x_bar: &mut [f64],
    u_bar: &mut [f64],
    scratch: &mut [f64],
    q: &mut [f64],
) {
    let m = u.len();
    // g₂ branch: ḡ₂ = −τ/2 ȳ, q̄₂ = −D ḡ₂ = (τ/2) D ȳ
    central_difference(y_bar, q);
    for j in 0..m {
        let q2 = 0.5 * tau * q[j];
        u_bar[j] += q2 * x_star[j];
        // x̄* = q̄₂ u
        scratch[j] = q2 * u[j];
    }
    // ḡ₁ = −τ/2 ȳ − τ x̄*, q̄₁ = −D ḡ₁
    for j in 0..m {
        x_bar[j] += y_bar[j] + scratch[j];
        scratch[j] = 0.5 * tau * y_bar[j] + tau * scratch[j];
    }
    central_difference(scratch, q);
    for j in 0..m {
        u_bar[j] += q[j] * x[j];
        x_bar[j] += q[j] * u[j];
    }
}

/// Intermediate states of one forward step, kept for the adjoint.
#[derive(Clone, Debug)]
pub(crate) struct StepTape {
    pub u: Vec<f64>,
    pub first_star: Vec<f64>,
    pub diffused: Vec<f64>,
    pub v: Vec<f64>,
    pub second_star: Vec<f64>,
}

/// Forward solve with its tape.
#[derive(Clone, Debug)]
pub(crate) struct FpTape {
    pub flow: MeasureFlow,
    pub steps: Vec<StepTape>,
}

/// Forward/adjoint Fokker–Planck solver for one `(spec, M, K)` triple.
#[derive(Clone, Debug)]
pub struct FpSolver {
    model: GridModel,
    heat: HeatPropagator,
    mu0: Vec<f64>,
    horizon: f64,
    steps: usize,
    drift_bound: f64,
}

impl FpSolver {
    pub fn new(spec: &ProblemSpec, steps: usize) -> Self {
        let dt = spec.horizon / steps as f64;
        Self {
            model: GridModel::new(spec),
            heat: HeatPropagator::new(spec.cells(), dt),
            mu0: spec.mu0.density().to_vec(),
            horizon: spec.horizon,
            steps,
            drift_bound: spec.drift.sup_bound(),
        }
    }

    pub fn model(&self) -> &GridModel {
        &self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cells(&self) -> usize {
        self.model.cells()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    fn check(&self, control: &FieldFlow) -> Result<()> {
        if control.kind() != FieldKind::Control {
            return Err(Error::InvalidArgument("Fokker–Planck solve needs a control field".into()));
        }
        if control.cells() != self.cells()
            || control.steps() != self.steps
            || (control.horizon() - self.horizon).abs() > 1e-12 * self.horizon
        {
            return Err(Error::ShapeMismatch(format!(
                "control is {}×{} on [0, {}], problem grid is {}×{} on [0, {}]",
                control.steps() + 1,
                control.cells(),
                control.horizon(),
                self.steps + 1,
                self.cells(),
                self.horizon
            )));
        }
        let required = required_steps(self.horizon, self.cells(), control.max_abs() + self.drift_bound);
        if self.steps < required {
            return Err(Error::CflViolation {
                steps: self.steps,
                required,
            });
        }
        Ok(())
    }

    pub fn solve(&self, control: &FieldFlow) -> Result<MeasureFlow> {
        Ok(self.forward(control)?.flow)
    }

    pub(crate) fn forward(&self, control: &FieldFlow) -> Result<FpTape> {
        self.check(control)?;
        let m = self.cells();
        let tau = 0.5 * self.dt();
        let mut values = Vec::with_capacity((self.steps + 1) * m);
        values.extend_from_slice(&self.mu0);
        let mut tapes = Vec::with_capacity(self.steps);
        let mut scratch = vec![0.0; m];
        let mut g1 = vec![0.0; m];
        let mut rho = self.mu0.clone();
        for k in 0..self.steps {
            let mut u = self.model.drift(&rho);
            for (a, c) in u.iter_mut().zip(control.row(k)) {
                *a += c;
            }
            let mut first_star = vec![0.0; m];
            let mut advected = vec![0.0; m];
            heun(&u, tau, &rho, &mut first_star, &mut advected, &mut scratch, &mut g1);
            let mut diffused = advected.clone();
            self.heat.apply(&mut diffused);
            let mut v = self.model.drift(&diffused);
            for (a, c) in v.iter_mut().zip(control.row(k + 1)) {
                *a += c;
            }
            let mut second_star = vec![0.0; m];
            heun(&v, tau, &diffused, &mut second_star, &mut rho, &mut scratch, &mut g1);
            let min = rho.iter().copied().fold(f64::INFINITY, f64::min);
            let max = rho.iter().copied().fold(0.0, f64::max);
            if min < -1e-12 * max.max(1.0) {
                return Err(Error::PositivityLoss { step: k + 1, min });
            }
            values.extend_from_slice(&rho);
            tapes.push(StepTape {
                u,
                first_star,
                diffused,
                v,
                second_star,
            });
        }
        Ok(FpTape {
            flow: MeasureFlow::from_raw(self.horizon, m, values),
            steps: tapes,
        })
    }

    /// Reverse sweep. `rho_bar[k]` holds `∂J/∂ρ_k` of an objective `J`
    /// (explicit dependence only); returns `Σ_k (∂ρ_k/∂A)ᵀ rho_bar[k]`.
    pub(crate) fn backward(&self, tape: &FpTape, mut rho_bar: Vec<Vec<f64>>) -> FieldFlow {
        let m = self.cells();
        let tau = 0.5 * self.dt();
        let mut grad = FieldFlow::zeros(FieldKind::Control, self.horizon, m, self.steps);
        let mut scratch = vec![0.0; m];
        let mut q = vec![0.0; m];
        for k in (0..self.steps).rev() {
            let st = &tape.steps[k];
            let next_bar = std::mem::take(&mut rho_bar[k + 1]);
            // second advection half step
            let mut d_bar = vec![0.0; m];
            let mut v_bar = vec![0.0; m];
            heun_adjoint(&st.v, tau, &st.diffused, &st.second_star, &next_bar, &mut d_bar, &mut v_bar, &mut scratch, &mut q);
            for (g, vb) in grad.row_mut(k + 1).iter_mut().zip(&v_bar) {
                *g += vb;
            }
            self.model.drift_adjoint_into(&v_bar, &mut d_bar);
            // diffusion (self-adjoint)
            self.heat.apply(&mut d_bar);
            // first advection half step
            let mut u_bar = vec![0.0; m];
            let mut x_bar = vec![0.0; m];
            heun_adjoint(&st.u, tau, tape.flow.density(k), &st.first_star, &d_bar, &mut x_bar, &mut u_bar, &mut scratch, &mut q);
            for (g, ub) in grad.row_mut(k).iter_mut().zip(&u_bar) {
                *g += ub;
            }
            self.model.drift_adjoint_into(&u_bar, &mut x_bar);
            for (r, x) in rho_bar[k].iter_mut().zip(&x_bar) {
                *r += x;
            }
        }
        grad
    }
}

/// Solves the controlled Fokker–Planck equation for `control` on its own grid.
pub fn solve_fokker_planck(spec: &ProblemSpec, control: &FieldFlow) -> Result<MeasureFlow> {
    FpSolver::new(spec, control.steps()).solve(control)
}

/// The feasible control `A = −b(·, μ_t)` along the heat flow of `μ₀`, with that flow.
pub fn heat_flow_control(spec: &ProblemSpec, steps: usize) -> (FieldFlow, MeasureFlow) {
    let flow = heat_flow(&spec.mu0, spec.horizon, steps);
    let model = GridModel::new(spec);
    let mut values = Vec::with_capacity(flow.values().len());
    for k in 0..=steps {
        values.extend(model.drift(flow.density(k)).into_iter().map(|b| -b));
    }
    (
        FieldFlow::from_raw(FieldKind::Control, spec.horizon, spec.cells(), values),
        flow,
    )
}

/// `D_c log max(ρ, floor)` at each time node.
fn log_gradient(rho: &[f64], out: &mut [f64]) {
    let logs: Vec<f64> = rho.iter().map(|r| r.max(DENSITY_FLOOR).ln()).collect();
    central_difference(&logs, out);
}

fn check_pair(flow: &MeasureFlow, field: &FieldFlow, kind: FieldKind) -> Result<()> {
    if field.kind() != kind {
        return Err(Error::InvalidArgument(format!("expected a {kind:?} field")));
    }
    if field.cells() != flow.cells()
        || field.steps() != flow.steps()
        || (field.horizon() - flow.horizon()).abs() > 1e-12 * flow.horizon()
    {
        return Err(Error::ShapeMismatch("field and measure flow on different grids".into()));
    }
    Ok(())
}

/// `w = A + b(·, μ_t) − ∇log μ_t`.
pub fn control_to_velocity(flow: &MeasureFlow, control: &FieldFlow, spec: &ProblemSpec) -> Result<FieldFlow> {
    check_pair(flow, control, FieldKind::Control)?;
    let model = GridModel::new(spec);
    let m = flow.cells();
    let mut values = Vec::with_capacity(control.values().len());
    let mut dlog = vec![0.0; m];
    for k in 0..=flow.steps() {
        let rho = flow.density(k);
        let b = model.drift(rho);
        log_gradient(rho, &mut dlog);
        values.extend((0..m).map(|j| control.row(k)[j] + b[j] - dlog[j]));
    }
    Ok(FieldFlow::from_raw(FieldKind::Velocity, flow.horizon(), m, values))
}

/// `A = w − b(·, μ_t) + ∇log μ_t`.
pub fn velocity_to_control(flow: &MeasureFlow, velocity: &FieldFlow, spec: &ProblemSpec) -> Result<FieldFlow> {
    check_pair(flow, velocity, FieldKind::Velocity)?;
    let model = GridModel::new(spec);
    let m = flow.cells();
    let mut values = Vec::with_capacity(velocity.values().len());
    let mut dlog = vec![0.0; m];
    for k in 0..=flow.steps() {
        let rho = flow.density(k);
        let b = model.drift(rho);
        log_gradient(rho, &mut dlog);
        values.extend((0..m).map(|j| velocity.row(k)[j] - b[j] + dlog[j]));
    }
    Ok(FieldFlow::from_raw(FieldKind::Control, flow.horizon(), m, values))
}

/// Discrete `L²` norm over interior time nodes of `∂ₜρ + ∂ₓ(wρ)`
/// (centred differences in both `t` and `x`).
pub fn continuity_residual(flow: &MeasureFlow, velocity: &FieldFlow) -> Result<f64> {
    check_pair(flow, velocity, FieldKind::Velocity)?;
    let m = flow.cells();
    let dt = flow.dt();
    let h = 1.0 / m as f64;
    let mut flux = vec![0.0; m];
    let mut div = vec![0.0; m];
    let mut acc = 0.0;
    for k in 1..flow.steps() {
        let rho = flow.density(k);
        for ((f, w), r) in flux.iter_mut().zip(velocity.row(k)).zip(rho) {
            *f = w * r;
        }
        central_difference(&flux, &mut div);
        let (prev, next) = (flow.density(k - 1), flow.density(k + 1));
        for j in 0..m {
            let r = (next[j] - prev[j]) / (2.0 * dt) + div[j];
            acc += r * r;
        }
    }
    Ok((dt * h * acc).sqrt())
}

/// [`continuity_residual`] relative to the same norm of `∂ₜρ` alone.
pub fn relative_continuity_residual(flow: &MeasureFlow, velocity: &FieldFlow) -> Result<f64> {
    let r = continuity_residual(flow, velocity)?;
    let dt = flow.dt();
    let h = 1.0 / flow.cells() as f64;
    let mut acc = 0.0;
    for k in 1..flow.steps() {
        for (a, b) in flow.density(k + 1).iter().zip(flow.density(k - 1)) {
            let d = (a - b) / (2.0 * dt);
            acc += d * d;
        }
    }
    Ok(r / (dt * h * acc).sqrt().max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::GridMeasure;
    use crate::model::{InteractionField, RunningCost, TerminalCost};
    use crate::series::TrigSeries;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::TAU;

    fn drifted_spec(cells: usize, horizon: f64) -> ProblemSpec {
        ProblemSpec::finite_horizon(
            InteractionField::new(
                TrigSeries::new(vec![0.2, 0.3], vec![0.0, 0.4]),
                TrigSeries::new(vec![0.0, 0.3], vec![0.0, -0.2]),
            ),
            RunningCost::default(),
            TerminalCost::None,
            GridMeasure::von_mises(cells, 0.4, 1.5).unwrap(),
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn heun_adjoint_is_the_transpose() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = 12;
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
        let ybar: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = 0.01;
        let run = |u: &[f64], x: &[f64]| {
            let (mut xs, mut y, mut s, mut g) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            heun(u, tau, x, &mut xs, &mut y, &mut s, &mut g);
            (y, xs)
        };
        let (_, xs) = run(&u, &x);
        let (mut xbar, mut ubar, mut s, mut q) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        heun_adjoint(&u, tau, &x, &xs, &ybar, &mut xbar, &mut ubar, &mut s, &mut q);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let eps = 1e-6;
        for j in 0..m {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            let fd = (dot(&run(&u, &xp).0, &ybar) - dot(&run(&u, &xm).0, &ybar)) / (2.0 * eps);
            assert!((fd - xbar[j]).abs() < 1e-8);
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += eps;
            um[j] -= eps;
            let fd = (dot(&run(&up, &x).0, &ybar) - dot(&run(&um, &x).0, &ybar)) / (2.0 * eps);
            assert!((fd - ubar[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn heat_propagator_matches_dense_exponential_action() {
        // compare against many small explicit Euler steps of the 3-point Laplacian
        let m = 16;
        let dt = 1e-3;
        let heat = HeatPropagator::new(m, dt);
        let mu = GridMeasure::von_mises(m, 0.3, 2.0).unwrap();
        let mut a = mu.density().to_vec();
        heat.apply(&mut a);
        let mut b = mu.density().to_vec();
        let sub = 20000;
        let h2 = 1.0 / (m * m) as f64;
        for _ in 0..sub {
            let prev = b.clone();
            for j in 0..m {
                let lap = prev[(j + 1) % m] - 2.0 * prev[j] + prev[(j + m - 1) % m];
                b[j] = prev[j] + dt / sub as f64 * lap / h2;
            }
        }
        for j in 0..m {
            assert!((a[j] - b[j]).abs() < 1e-6);
        }
        let mass: f64 = a.iter().sum::<f64>() / m as f64;
        assert!((mass - 1.0).abs() < 1e-14);
    }

    #[test]
    fn minus_drift_control_reproduces_heat_flow() {
        let spec = drifted_spec(64, 0.1);
        let (control, heat) = heat_flow_control(&spec, 50);
        let flow = solve_fokker_planck(&spec, &control).unwrap();
        assert_eq!(flow.values(), heat.values());
    }

    #[test]
    fn heat_flow_variance_growth() {
        let sigma0: f64 = 0.05;
        let t = 0.01;
        let mu0 = GridMeasure::wrapped_gaussian(1024, 0.5, sigma0).unwrap();
        let spec = ProblemSpec::free(mu0, t).unwrap();
        let control = FieldFlow::zeros(FieldKind::Control, t, 1024, 100);
        let flow = solve_fokker_planck(&spec, &control).unwrap();
        let last = flow.measure(flow.steps());
        let var = last.mean_of(|x| (x - 0.5) * (x - 0.5));
        let expected = sigma0 * sigma0 + 2.0 * t;
        assert!((var / expected - 1.0).abs() < 0.01, "{var} vs {expected}");
    }

    /// Periodic cross-correlation peak with sub-cell parabolic refinement.
    fn shift_between(a: &[f64], b: &[f64]) -> f64 {
        let m = a.len();
        let corr: Vec<f64> = (0..m)
            .map(|s| (0..m).map(|j| a[j] * b[(j + s) % m]).sum())
            .collect();
        let (s, _) = corr
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
        let (l, c, r) = (corr[(s + m - 1) % m], corr[s], corr[(s + 1) % m]);
        let frac = 0.5 * (l - r) / (l - 2.0 * c + r);
        ((s as f64 + frac) / m as f64).rem_euclid(1.0)
    }

    #[test]
    fn constant_drift_translates_heat_flow() {
        let c = 1.5;
        let t = 0.1;
        let m = 512;
        let mu0 = GridMeasure::von_mises(m, 0.3, 4.0).unwrap();
        let spec = ProblemSpec::finite_horizon(
            InteractionField::new(TrigSeries::constant(c), TrigSeries::zero()),
            RunningCost::default(),
            TerminalCost::None,
            mu0.clone(),
            t,
        )
        .unwrap();
        let steps = required_steps(t, m, c);
        let flow = solve_fokker_planck(&spec, &FieldFlow::zeros(FieldKind::Control, t, m, steps)).unwrap();
        let heat = heat_flow(&mu0, t, steps);
        let shift = shift_between(heat.density(steps), flow.density(steps));
        assert!((shift - c * t).abs() < 2e-3, "{shift}");
    }

    #[test]
    fn mass_and_positivity_per_step() {
        let spec = drifted_spec(128, 0.2);
        let control = FieldFlow::from_fn(FieldKind::Control, 0.2, 128, 200, |t, x| (TAU * (x + t)).sin()).unwrap();
        let flow = solve_fokker_planck(&spec, &control).unwrap();
        for k in 0..=flow.steps() {
            let d = flow.density(k);
            let mass = d.iter().sum::<f64>() / 128.0;
            assert!((mass - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|&r| r > 0.0));
        }
    }

    #[test]
    fn cfl_violation_reports_required_steps() {
        let spec = drifted_spec(256, 1.0);
        let control = FieldFlow::from_fn(FieldKind::Control, 1.0, 256, 10, |_, _| 3.0).unwrap();
        match solve_fokker_planck(&spec, &control) {
            Err(Error::CflViolation { steps, required }) => {
                assert_eq!(steps, 10);
                let ok = FieldFlow::from_fn(FieldKind::Control, 1.0, 256, required, |_, _| 3.0).unwrap();
                assert!(solve_fokker_planck(&spec, &ok).is_ok());
            }
            other => panic!("expected CFL violation, got {other:?}"),
        }
    }

    #[test]
    fn velocity_control_roundtrip() {
        let spec = drifted_spec(64, 0.1);
        let control = FieldFlow::from_fn(FieldKind::Control, 0.1, 64, 40, |t, x| (TAU * x).cos() * (1.0 + t)).unwrap();
        let flow = solve_fokker_planck(&spec, &control).unwrap();
        let w = control_to_velocity(&flow, &control, &spec).unwrap();
        let back = velocity_to_control(&flow, &w, &spec).unwrap();
        for (a, b) in back.values().iter().zip(control.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heat_flow_velocity_is_minus_log_gradient() {
        let spec = drifted_spec(64, 0.1);
        let (control, flow) = heat_flow_control(&spec, 40);
        let w = control_to_velocity(&flow, &control, &spec).unwrap();
        let mut dlog = vec![0.0; 64];
        for k in 0..=40 {
            log_gradient(flow.density(k), &mut dlog);
            for j in 0..64 {
                assert!((w.row(k)[j] + dlog[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stationary_gradient_drift_has_zero_velocity() {
        // b₀ = −Ψ', μ ∝ e^{−Ψ}: the discrete log-gradient of μ cancels b₀ up to O(h²)
        let m = 2048;
        let psi = TrigSeries::cosine(1, 1.0 / (4.0 * std::f64::consts::PI.powi(2)));
        let mu = GridMeasure::from_fn(m, |x| (-psi.eval(x)).exp()).unwrap();
        let spec = ProblemSpec::finite_horizon(
            InteractionField::new(psi.derivative().scale(-1.0), TrigSeries::zero()),
            RunningCost::default(),
            TerminalCost::None,
            mu.clone(),
            0.01,
        )
        .unwrap();
        let flow = MeasureFlow::from_measures(0.01, &[mu.clone(), mu.clone(), mu]).unwrap();
        let control = FieldFlow::zeros(FieldKind::Control, 0.01, m, 2);
        let w = control_to_velocity(&flow, &control, &spec).unwrap();
        assert!(w.max_abs() < 1e-6, "{}", w.max_abs());
    }

    #[test]
    fn residual_examples() {
        let u = GridMeasure::uniform(32);
        let flow = MeasureFlow::from_measures(1.0, &[u.clone(), u.clone(), u]).unwrap();
        let w = FieldFlow::zeros(FieldKind::Velocity, 1.0, 32, 2);
        assert_eq!(continuity_residual(&flow, &w).unwrap(), 0.0);

        let translated = |m: usize| {
            let c = 0.7;
            let t = 0.2;
            let k = 4 * m;
            let measures: Vec<_> = (0..=k)
                .map(|i| {
                    let s = c * t * i as f64 / k as f64;
                    GridMeasure::from_fn(m, |x| (1.5 * (TAU * (x - 0.3 - s)).cos()).exp()).unwrap()
                })
                .collect();
            let flow = MeasureFlow::from_measures(t, &measures).unwrap();
            let w = FieldFlow::from_fn(FieldKind::Velocity, t, m, k, |_, _| c).unwrap();
            continuity_residual(&flow, &w).unwrap()
        };
        let (coarse, fine) = (translated(32), translated(64));
        assert!((coarse / fine).log2() >= 1.8, "{coarse} {fine}");
    }

    #[test]
    fn de_bruijn_step_identity() {
        let mu0 = GridMeasure::von_mises(512, 0.5, 2.0).unwrap();
        let flow = heat_flow(&mu0, 0.05, 200);
        for k in [0, 50, 150] {
            let dh = flow.measure(k + 1).entropy() - flow.measure(k).entropy();
            let pred = -flow.dt() * flow.measure(k).fisher_information(DENSITY_FLOOR);
            assert!((dh / pred - 1.0).abs() < 0.02, "step {k}: {dh} vs {pred}");
        }
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_linear_between() {
        let f = FieldFlow::from_fn(FieldKind::Control, 1.0, 8, 4, |t, x| t + 2.0 * x).unwrap();
        assert!((f.interpolate(0.25, 1.0 / 16.0) - (0.25 + 0.125)).abs() < 1e-15);
        assert!((f.interpolate(0.1, 0.5) - (0.1 + 1.0)).abs() < 1e-14);
        // across the periodic seam: halfway between the last and first centres
        let v = f.interpolate(0.0, 0.0);
        assert!((v - 0.5 * (2.0 * 15.0 / 16.0 + 2.0 / 16.0)).abs() < 1e-14);
    }
}
