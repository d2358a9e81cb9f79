//! Two-particle (`N = 2`) system on the product torus `𝕋²`.
//!
//! With `ι² = ½(δ_{y¹} + δ_{y²})` the drift and running cost of particle `i`
//! depend on the position pair only:
//!
//! ```text
//! bⁱ(y) = b₀(yⁱ) + ½(k_b(0) + k_b(yⁱ − y^{3−i}))
//! ```
//!
//! so the joint Fokker–Planck equation is linear. Its step mirrors the
//! one-dimensional scheme: advection half steps along axis 1 then axis 2,
//! the exact heat propagator on both axes, then axis 2 then axis 1.

use crate::dynamics::{FieldKind, HeatPropagator};
use crate::error::{Error, Result};
use crate::measure::{central_difference, trapezoid_weights, GridMeasure2, DENSITY_FLOOR};
use crate::model::ProblemSpec;
use crate::series::GridBasis;

/// Densities on `𝕋²` at the time nodes, each `M × M` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFlow {
    horizon: f64,
    cells: usize,
    values: Vec<f64>,
}

impl PairFlow {
    pub fn new(horizon: f64, cells: usize, values: Vec<f64>) -> Result<Self> {
        let area = cells * cells;
        if !(horizon > 0.0) || cells < 2 || values.len() % area != 0 || values.len() / area < 2 {
            return Err(Error::ShapeMismatch(format!(
                "pair flow: {cells}² cells, {} values",
                values.len()
            )));
        }
        for row in values.chunks(area) {
            GridMeasure2::new(cells, row.to_vec())?;
        }
        Ok(Self { horizon, cells, values })
    }

    pub fn from_measures(horizon: f64, measures: &[GridMeasure2]) -> Result<Self> {
        let cells = measures
            .first()
            .map(GridMeasure2::cells)
            .ok_or_else(|| Error::ShapeMismatch("empty pair flow".into()))?;
        if measures.iter().any(|m| m.cells() != cells) {
            return Err(Error::ShapeMismatch("pair measures on different grids".into()));
        }
        Self::new(horizon, cells, measures.iter().flat_map(|m| m.density().iter().copied()).collect())
    }

    pub(crate) fn from_raw(horizon: f64, cells: usize, values: Vec<f64>) -> Self {
        Self { horizon, cells, values }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn steps(&self) -> usize {
        self.values.len() / (self.cells * self.cells) - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn density(&self, k: usize) -> &[f64] {
        let a = self.cells * self.cells;
        &self.values[k * a..(k + 1) * a]
    }

    pub fn measure(&self, k: usize) -> GridMeasure2 {
        GridMeasure2::new(self.cells, self.density(k).to_vec())
            .unwrap_or_else(|_| GridMeasure2::from_unnormalized(self.cells, self.density(k).to_vec()).expect("positive mass"))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Two-component field on `𝕋²` over the time nodes (control or velocity).
#[derive(Clone, Debug, PartialEq)]
pub struct PairField {
    kind: FieldKind,
    horizon: f64,
    cells: usize,
    /// `first[k·M² + i·M + j]`: component along axis 1 at `(t_k, x_i, x_j)`.
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl PairField {
    pub fn new(kind: FieldKind, horizon: f64, cells: usize, first: Vec<f64>, second: Vec<f64>) -> Result<Self> {
        let area = cells * cells;
        if first.len() != second.len() || first.len() % area != 0 || first.len() / area < 2 || !(horizon > 0.0) {
            return Err(Error::ShapeMismatch("pair field components disagree".into()));
        }
        if first.iter().chain(&second).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("pair field has non-finite entries".into()));
        }
        Ok(Self { kind, horizon, cells, first, second })
    }

    pub fn zeros(kind: FieldKind, horizon: f64, cells: usize, steps: usize) -> Self {
        let n = (steps + 1) * cells * cells;
        Self { kind, horizon, cells, first: vec![0.0; n], second: vec![0.0; n] }
    }

    /// `(a(t, x¹), a(t, x²))` from a one-particle field.
    pub fn tensorized(field: &crate::dynamics::FieldFlow) -> Self {
        let m = field.cells();
        let steps = field.steps();
        let mut first = Vec::with_capacity((steps + 1) * m * m);
        let mut second = Vec::with_capacity((steps + 1) * m * m);
        for k in 0..=steps {
            let row = field.row(k);
            for i in 0..m {
                for j in 0..m {
                    first.push(row[i]);
                    second.push(row[j]);
                }
            }
        }
        Self { kind: field.kind(), horizon: field.horizon(), cells: m, first, second }
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
        self.first.len() / (self.cells * self.cells) - 1
    }

    pub fn max_abs(&self) -> f64 {
        self.first.iter().chain(&self.second).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Replaces the field by its average with the particle-exchanged field.
    pub fn symmetrize(&mut self) {
        let m = self.cells;
        let a = m * m;
        for k in 0..=self.steps() {
            let base = k * a;
            for i in 0..m {
                for j in 0..m {
                    let p = base + i * m + j;
                    let q = base + j * m + i;
                    if p > q {
                        continue;
                    }
                    let f = 0.5 * (self.first[p] + self.second[q]);
                    let s = 0.5 * (self.second[p] + self.first[q]);
                    self.first[p] = f;
                    self.second[q] = f;
                    self.second[p] = s;
                    self.first[q] = s;
                }
            }
        }
    }
}

/// Exchange-symmetrised state: densities averaged, momenta `wρ` averaged.
pub fn symmetrize_pair_state(flow: &PairFlow, velocity: &PairField) -> Result<(PairFlow, PairField)> {
    check_shapes(flow, velocity)?;
    let m = flow.cells;
    let a = m * m;
    let mut rho = flow.values.clone();
    let mut first = velocity.first.clone();
    let mut second = velocity.second.clone();
    for k in 0..=flow.steps() {
        let base = k * a;
        for i in 0..m {
            for j in 0..m {
                let p = base + i * m + j;
                let q = base + j * m + i;
                let r = 0.5 * (flow.values[p] + flow.values[q]);
                rho[p] = r;
                let m1 = 0.5 * (velocity.first[p] * flow.values[p] + velocity.second[q] * flow.values[q]);
                let m2 = 0.5 * (velocity.second[p] * flow.values[p] + velocity.first[q] * flow.values[q]);
                first[p] = if r > 0.0 { m1 / r } else { 0.0 };
                second[p] = if r > 0.0 { m2 / r } else { 0.0 };
            }
        }
    }
    Ok((
        PairFlow::from_raw(flow.horizon, m, rho),
        PairField { kind: velocity.kind, horizon: velocity.horizon, cells: m, first, second },
    ))
}

pub(crate) fn check_shapes(flow: &PairFlow, field: &PairField) -> Result<()> {
    if flow.cells != field.cells
        || flow.values.len() != field.first.len()
        || (flow.horizon - field.horizon).abs() > 1e-12 * flow.horizon
    {
        return Err(Error::ShapeMismatch("pair field and pair flow on different grids".into()));
    }
    Ok(())
}

/// Position-only coefficients of the two-particle system on the grid.
#[derive(Clone, Debug)]
pub struct PairModel {
    cells: usize,
    /// `b¹(x_i, x_j)`; `b²(x_i, x_j) = b¹(x_j, x_i)`.
    drift: Vec<f64>,
    /// `𝒱(x_i, ι²)` for particle 1; particle 2 by transposition.
    running: Vec<f64>,
    /// `½(g(x_i) + g(x_j))`, or zeros.
    terminal: Vec<f64>,
    has_terminal: bool,
}

impl PairModel {
    pub fn new(spec: &ProblemSpec) -> Self {
        let m = spec.cells();
        let h = 1.0 / m as f64;
        let modes = spec
            .drift
            .external
            .modes()
            .max(spec.running.external.modes())
            .max(spec.modes())
            .max(spec.terminal.weight().map_or(0, |g| g.modes()))
            .max(2);
        let basis = GridBasis::new(m, modes);
        let b0 = basis.sample(&spec.drift.external);
        let vext = basis.sample(&spec.running.external);
        let g = spec.terminal.weight().map(|g| basis.sample(g));
        let kb = &spec.drift.kernel;
        let v1 = &spec.running.pair;
        let dv0 = spec.running.grad_pair.derivative();
        let c = spec.running.grad_pair_sq_coeff;
        // differences x_i − x_j = (i − j)h
        let diff = |s: &crate::series::TrigSeries| -> Vec<f64> { (0..m).map(|d| s.eval(d as f64 * h)).collect() };
        let (kb_d, v1_d, dv0_d) = (diff(kb), diff(v1), diff(&dv0));
        let mut drift = vec![0.0; m * m];
        let mut running = vec![0.0; m * m];
        let mut terminal = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let d = (i + m - j) % m;
                let p = i * m + j;
                drift[p] = b0[i] + 0.5 * (kb_d[0] + kb_d[d]);
                let grad = 0.5 * (dv0_d[0] + dv0_d[d]);
                running[p] = vext[i] + 0.5 * (v1_d[0] + v1_d[d]) - c * grad * grad;
                if let Some(g) = &g {
                    terminal[p] = 0.5 * (g[i] + g[j]);
                }
            }
        }
        Self { cells: m, drift, running, terminal, has_terminal: g.is_some() }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Drift of particle `axis ∈ {0, 1}` at grid point `(i, j)`.
    pub fn drift(&self, axis: usize, i: usize, j: usize) -> f64 {
        let m = self.cells;
        if axis == 0 {
            self.drift[i * m + j]
        } else {
            self.drift[j * m + i]
        }
    }

    pub fn running(&self, axis: usize, i: usize, j: usize) -> f64 {
        let m = self.cells;
        if axis == 0 {
            self.running[i * m + j]
        } else {
            self.running[j * m + i]
        }
    }

    pub fn terminal(&self, i: usize, j: usize) -> f64 {
        self.terminal[i * self.cells + j]
    }

    pub fn has_terminal(&self) -> bool {
        self.has_terminal
    }

    pub fn drift_bound(&self) -> f64 {
        self.drift.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Lines of an `M × M` array along `axis` (0: vary `i`, 1: vary `j`).
fn gather(src: &[f64], m: usize, axis: usize, line: usize, out: &mut [f64]) {
    for (t, o) in out.iter_mut().enumerate() {
        *o = if axis == 0 { src[t * m + line] } else { src[line * m + t] };
    }
}

fn scatter(dst: &mut [f64], m: usize, axis: usize, line: usize, vals: &[f64]) {
    for (t, v) in vals.iter().enumerate() {
        if axis == 0 {
            dst[t * m + line] = *v;
        } else {
            dst[line * m + t] = *v;
        }
    }
}

fn add_scatter(dst: &mut [f64], m: usize, axis: usize, line: usize, vals: &[f64]) {
    for (t, v) in vals.iter().enumerate() {
        if axis == 0 {
            dst[t * m + line] += *v;
        } else {
            dst[line * m + t] += *v;
        }
    }
}

/// Heun advection half step along one axis; returns `(y, x*)`.
fn heun_axis(u: &[f64], tau: f64, x: &[f64], m: usize, axis: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; m * m];
    let mut xs = vec![0.0; m * m];
    let (mut lu, mut lx, mut lf, mut g1, mut ls, mut ly) =
        (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for line in 0..m {
        gather(u, m, axis, line, &mut lu);
        gather(x, m, axis, line, &mut lx);
        for t in 0..m {
            lf[t] = lu[t] * lx[t];
        }
        central_difference(&lf, &mut g1);
        for t in 0..m {
            ls[t] = lx[t] - tau * g1[t];
            lf[t] = lu[t] * ls[t];
        }
        central_difference(&lf, &mut ly);
        for t in 0..m {
            ly[t] = lx[t] - 0.5 * tau * (g1[t] + ly[t]);
        }
        scatter(&mut y, m, axis, line, &ly);
        scatter(&mut xs, m, axis, line, &ls);
    }
    (y, xs)
}

/// Reverse pass of [`heun_axis`]: accumulates into `x_bar` and `u_bar`.
#[allow(clippy::too_many_arguments)]
fn heun_axis_adjoint(u: &[f64], tau: f64, x: &[f64], xs: &[f64], y_bar: &[f64], m: usize, axis: usize, x_bar: &mut [f64], u_bar: &mut [f64]) {
    let (mut lu, mut lx, mut ls, mut lyb) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let (mut q, mut s, mut xb, mut ub) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for line in 0..m {
        gather(u, m, axis, line, &mut lu);
        gather(x, m, axis, line, &mut lx);
        gather(xs, m, axis, line, &mut ls);
        gather(y_bar, m, axis, line, &mut lyb);
        central_difference(&lyb, &mut q);
        for t in 0..m {
            let q2 = 0.5 * tau * q[t];
            ub[t] = q2 * ls[t];
            s[t] = q2 * lu[t];
            xb[t] = lyb[t] + s[t];
            s[t] = 0.5 * tau * lyb[t] + tau * s[t];
        }
        central_difference(&s, &mut q);
        for t in 0..m {
            ub[t] += q[t] * lx[t];
            xb[t] += q[t] * lu[t];
        }
        add_scatter(x_bar, m, axis, line, &xb);
        add_scatter(u_bar, m, axis, line, &ub);
    }
}

#[derive(Clone, Debug)]
struct PairStepTape {
    /// Total drifts `(u¹, u²)` at `t_k` and `(v¹, v²)` at `t_{k+1}`.
    u: [Vec<f64>; 2],
    v: [Vec<f64>; 2],
    /// Inputs and intermediate states of the four Heun sub-steps.
    inputs: [Vec<f64>; 4],
    stars: [Vec<f64>; 4],
}

#[derive(Clone, Debug)]
pub(crate) struct PairTape {
    pub flow: PairFlow,
    steps: Vec<PairStepTape>,
}

/// Forward/adjoint solver for the joint Fokker–Planck equation of two particles.
#[derive(Clone, Debug)]
pub struct PairFpSolver {
    model: PairModel,
    heat: HeatPropagator,
    mu0: Vec<f64>,
    horizon: f64,
    steps: usize,
}

impl PairFpSolver {
    pub fn new(spec: &ProblemSpec, steps: usize) -> Self {
        let mu0 = GridMeasure2::product(&spec.mu0, &spec.mu0).expect("same grid").into_density();
        Self {
            model: PairModel::new(spec),
            heat: HeatPropagator::new(spec.cells(), spec.horizon / steps as f64),
            mu0,
            horizon: spec.horizon,
            steps,
        }
    }

    pub fn model(&self) -> &PairModel {
        &self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cells(&self) -> usize {
        self.model.cells
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn total_drift(&self, control: &PairField, k: usize) -> [Vec<f64>; 2] {
        let m = self.cells();
        let a = m * m;
        let mut u1 = control.first[k * a..(k + 1) * a].to_vec();
        let mut u2 = control.second[k * a..(k + 1) * a].to_vec();
        for i in 0..m {
            for j in 0..m {
                u1[i * m + j] += self.model.drift(0, i, j);
                u2[i * m + j] += self.model.drift(1, i, j);
            }
        }
        [u1, u2]
    }

    fn check(&self, control: &PairField) -> Result<()> {
        if control.kind() != FieldKind::Control {
            return Err(Error::InvalidArgument("pair solve needs a control field".into()));
        }
        if control.cells() != self.cells() || control.steps() != self.steps {
            return Err(Error::ShapeMismatch("pair control does not match the solver grid".into()));
        }
        let required = crate::dynamics::required_steps(self.horizon, self.cells(), control.max_abs() + self.model.drift_bound());
        if self.steps < required {
            return Err(Error::CflViolation { steps: self.steps, required });
        }
        Ok(())
    }

    pub fn solve(&self, control: &PairField) -> Result<PairFlow> {
        Ok(self.forward(control)?.flow)
    }

    pub(crate) fn forward(&self, control: &PairField) -> Result<PairTape> {
        self.check(control)?;
        let m = self.cells();
        let tau = 0.5 * self.dt();
        let mut values = Vec::with_capacity((self.steps + 1) * m * m);
        values.extend_from_slice(&self.mu0);
        let mut rho = self.mu0.clone();
        let mut tapes = Vec::with_capacity(self.steps);
        for k in 0..self.steps {
            let u = self.total_drift(control, k);
            let v = self.total_drift(control, k + 1);
            let s0 = rho;
            let (s1, x0) = heun_axis(&u[0], tau, &s0, m, 0);
            let (mut s2, x1) = heun_axis(&u[1], tau, &s1, m, 1);
            self.heat.apply_2d(&mut s2);
            let s3 = s2;
            let (s4, x2) = heun_axis(&v[1], tau, &s3, m, 1);
            let (s5, x3) = heun_axis(&v[0], tau, &s4, m, 0);
            let min = s5.iter().copied().fold(f64::INFINITY, f64::min);
            let max = s5.iter().copied().fold(0.0, f64::max);
            if min < -1e-12 * max.max(1.0) {
                return Err(Error::PositivityLoss { step: k + 1, min });
            }
            values.extend_from_slice(&s5);
            rho = s5;
            tapes.push(PairStepTape { u, v, inputs: [s0, s1, s3, s4], stars: [x0, x1, x2, x3] });
        }
        Ok(PairTape { flow: PairFlow::from_raw(self.horizon, m, values), steps: tapes })
    }

    /// Reverse sweep; see [`crate::dynamics::FpSolver`].
    pub(crate) fn backward(&self, tape: &PairTape, mut rho_bar: Vec<Vec<f64>>) -> PairField {
        let m = self.cells();
        let a = m * m;
        let tau = 0.5 * self.dt();
        let mut grad = PairField::zeros(FieldKind::Control, self.horizon, m, self.steps);
        for k in (0..self.steps).rev() {
            let st = &tape.steps[k];
            let y5 = std::mem::take(&mut rho_bar[k + 1]);
            let mut v_bar = [vec![0.0; a], vec![0.0; a]];
            let mut s4_bar = vec![0.0; a];
            heun_axis_adjoint(&st.v[0], tau, &st.inputs[3], &st.stars[3], &y5, m, 0, &mut s4_bar, &mut v_bar[0]);
            let mut s3_bar = vec![0.0; a];
            heun_axis_adjoint(&st.v[1], tau, &st.inputs[2], &st.stars[2], &s4_bar, m, 1, &mut s3_bar, &mut v_bar[1]);
            self.heat.apply_2d(&mut s3_bar);
            let s2_bar = s3_bar;
            let mut u_bar = [vec![0.0; a], vec![0.0; a]];
            let mut s1_bar = vec![0.0; a];
            heun_axis_adjoint(&st.u[1], tau, &st.inputs[1], &st.stars[1], &s2_bar, m, 1, &mut s1_bar, &mut u_bar[1]);
            let mut s0_bar = vec![0.0; a];
            heun_axis_adjoint(&st.u[0], tau, &st.inputs[0], &st.stars[0], &s1_bar, m, 0, &mut s0_bar, &mut u_bar[0]);
            for p in 0..a {
                grad.first[(k + 1) * a + p] += v_bar[0][p];
                grad.second[(k + 1) * a + p] += v_bar[1][p];
                grad.first[k * a + p] += u_bar[0][p];
                grad.second[k * a + p] += u_bar[1][p];
                rho_bar[k][p] += s0_bar[p];
            }
        }
        grad
    }
}

/// Itemised `N = 2` cost at a control: `½Σᵢ∬(½|Aⁱ|² + 𝒱ⁱ)μ² dt + ∫𝒢(ι²)dμ²_T`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairCost {
    pub kinetic: f64,
    pub running: f64,
    pub terminal: f64,
}

impl PairCost {
    pub fn total(&self) -> f64 {
        self.kinetic + self.running + self.terminal
    }
}

pub(crate) fn pair_cost(model: &PairModel, flow: &PairFlow, control: &PairField) -> PairCost {
    let m = model.cells;
    let a = m * m;
    let h2 = 1.0 / a as f64;
    let w = trapezoid_weights(flow.steps(), flow.dt());
    let mut out = PairCost::default();
    for (k, tw) in w.iter().enumerate() {
        let rho = flow.density(k);
        let (mut kin, mut run) = (0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                let p = i * m + j;
                let (a1, a2) = (control.first[k * a + p], control.second[k * a + p]);
                kin += 0.25 * (a1 * a1 + a2 * a2) * rho[p];
                run += 0.5 * (model.running(0, i, j) + model.running(1, i, j)) * rho[p];
            }
        }
        out.kinetic += tw * h2 * kin;
        out.running += tw * h2 * run;
    }
    if model.has_terminal {
        let rho = flow.density(flow.steps());
        out.terminal = h2 * (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| model.terminal(i, j) * rho[i * m + j]).sum::<f64>();
    }
    out
}

/// `∂J/∂ρ_k` and `∂J/∂A_k` of [`pair_cost`].
pub(crate) fn pair_cost_gradients(model: &PairModel, flow: &PairFlow, control: &PairField) -> (Vec<Vec<f64>>, PairField) {
    let m = model.cells;
    let a = m * m;
    let h2 = 1.0 / a as f64;
    let w = trapezoid_weights(flow.steps(), flow.dt());
    let mut rho_bar = Vec::with_capacity(w.len());
    let mut grad = PairField::zeros(FieldKind::Control, flow.horizon, m, flow.steps());
    for (k, tw) in w.iter().enumerate() {
        let rho = flow.density(k);
        let mut rb = vec![0.0; a];
        for i in 0..m {
            for j in 0..m {
                let p = i * m + j;
                let (a1, a2) = (control.first[k * a + p], control.second[k * a + p]);
                rb[p] = tw * h2 * (0.25 * (a1 * a1 + a2 * a2) + 0.5 * (model.running(0, i, j) + model.running(1, i, j)));
                grad.first[k * a + p] = tw * h2 * 0.5 * a1 * rho[p];
                grad.second[k * a + p] = tw * h2 * 0.5 * a2 * rho[p];
            }
        }
        rho_bar.push(rb);
    }
    if model.has_terminal {
        let last = rho_bar.last_mut().expect("K ≥ 1");
        for i in 0..m {
            for j in 0..m {
                last[i * m + j] += h2 * model.terminal(i, j);
            }
        }
    }
    (rho_bar, grad)
}

/// Riesz weights `τ_k h² ½ ρ` of the pair control metric.
pub(crate) fn pair_metric_weights(flow: &PairFlow) -> Vec<f64> {
    let a = flow.cells * flow.cells;
    let h2 = 1.0 / a as f64;
    let w = trapezoid_weights(flow.steps(), flow.dt());
    let mut out = Vec::with_capacity(flow.values.len());
    for (k, tw) in w.iter().enumerate() {
        out.extend(flow.density(k).iter().map(|r| tw * h2 * 0.5 * r.max(DENSITY_FLOOR)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{solve_fokker_planck, FieldFlow};
    use crate::measure::GridMeasure;
    use crate::model::{InteractionField, RunningCost, TerminalCost};
    use crate::series::TrigSeries;
    use std::f64::consts::TAU;

    fn spec(kernel: TrigSeries) -> ProblemSpec {
        ProblemSpec::finite_horizon(
            InteractionField::new(TrigSeries::sine(1, 0.3), kernel),
            RunningCost::external_only(TrigSeries::cosine(1, 0.5)),
            TerminalCost::Linear(TrigSeries::sine(1, 0.2)),
            GridMeasure::von_mises(16, 0.3, 1.0).unwrap(),
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn tensorized_solve_factorizes_without_interaction() {
        let spec = spec(TrigSeries::zero());
        let control = FieldFlow::from_fn(FieldKind::Control, 0.1, 16, 20, |t, x| (TAU * x).sin() * (1.0 + t)).unwrap();
        let flow1 = solve_fokker_planck(&spec, &control).unwrap();
        let solver = PairFpSolver::new(&spec, 20);
        let flow2 = solver.solve(&PairField::tensorized(&control)).unwrap();
        for k in [0, 7, 20] {
            let prod = GridMeasure2::product(&flow1.measure(k), &flow1.measure(k)).unwrap();
            for (a, b) in prod.density().iter().zip(flow2.density(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_adjoint_matches_finite_differences() {
        let spec = spec(TrigSeries::cosine(1, 0.4));
        let solver = PairFpSolver::new(&spec, 10);
        let mut control = PairField::zeros(FieldKind::Control, 0.1, 16, 10);
        for (n, v) in control.first.iter_mut().enumerate() {
            *v = 0.3 * ((n as f64) * 0.37).sin();
        }
        for (n, v) in control.second.iter_mut().enumerate() {
            *v = 0.2 * ((n as f64) * 0.11).cos();
        }
        let eval = |c: &PairField| {
            let flow = solver.solve(c).unwrap();
            pair_cost(solver.model(), &flow, c).total()
        };
        let tape = solver.forward(&control).unwrap();
        let (rho_bar, explicit) = pair_cost_gradients(solver.model(), &tape.flow, &control);
        let mut grad = solver.backward(&tape, rho_bar);
        for (g, e) in grad.first.iter_mut().zip(&explicit.first) {
            *g += e;
        }
        for (g, e) in grad.second.iter_mut().zip(&explicit.second) {
            *g += e;
        }
        let mut dir = PairField::zeros(FieldKind::Control, 0.1, 16, 10);
        for (n, v) in dir.first.iter_mut().chain(dir.second.iter_mut()).enumerate() {
            *v = ((n as f64) * 1.7).sin();
        }
        let eps = 1e-5;
        let shift = |s: f64| {
            let mut c = control.clone();
            for (a, d) in c.first.iter_mut().zip(&dir.first) {
                *a += s * d;
            }
            for (a, d) in c.second.iter_mut().zip(&dir.second) {
                *a += s * d;
            }
            c
        };
        let fd = (eval(&shift(eps)) - eval(&shift(-eps))) / (2.0 * eps);
        let an: f64 = grad.first.iter().zip(&dir.first).chain(grad.second.iter().zip(&dir.second)).map(|(g, d)| g * d).sum();
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-8), "{fd} vs {an}");
    }

    #[test]
    fn symmetrize_field_swaps_components() {
        let mut f = PairField::zeros(FieldKind::Control, 1.0, 2, 1);
        f.first[1] = 1.0; // (i, j) = (0, 1), axis 1
        f.symmetrize();
        // the exchanged copy lands at (1, 0) on axis 2
        assert_eq!(f.first[1], 0.5);
        assert_eq!(f.second[2], 0.5);
    }
}
