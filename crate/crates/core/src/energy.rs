//! Cost and energy functionals.
//!
//! The cost of a Markovian control is
//! `∬(½|A|² + 𝒱(x, μ_t))μ_t(dx)dt + 𝒢(μ_T)` along its Fokker–Planck flow.
//! The energy of a pair `(μ, w)` solving the continuity equation expands
//! `½∬|w − b + ∇log μ|²μ dt` term by term:
//!
//! ```text
//! ½∬|w|²μ + ½∬|b|²μ + ½∫𝓘 + (H(μ_T) − H(μ_0)) − ∬⟨w, b⟩μ + ∬(div b)μ + ∬𝒱μ + 𝒢(μ_T)
//! ```
//!
//! Time integrals use the trapezoidal rule on the flow's nodes; space
//! integrals are exact cell sums.

use serde::Serialize;

use crate::dynamics::{check_cfl, FieldFlow, FieldKind, FpSolver};
use crate::error::{Error, Result};
use crate::measure::{central_difference, kl_grid, MeasureFlow, DENSITY_FLOOR};
use crate::model::{GridModel, Mode, ProblemSpec};
use crate::pair::{check_shapes, PairField, PairFlow, PairModel};
use crate::parallel::{map_indexed, Estimate};
use crate::particles::{ensemble_cost, replica_seed, simulate};

/// Itemised energy; `total` is the sum of the other eight entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EnergyReport {
    pub kinetic: f64,
    pub drift_sq: f64,
    pub fisher_half: f64,
    pub entropy_diff: f64,
    pub cross: f64,
    pub div_term: f64,
    pub running: f64,
    pub terminal: f64,
    pub total: f64,
}

impl EnergyReport {
    pub fn parts_sum(&self) -> f64 {
        self.kinetic
            + self.drift_sq
            + self.fisher_half
            + self.entropy_diff
            + self.cross
            + self.div_term
            + self.running
            + self.terminal
    }

    fn finish(mut self) -> Self {
        self.total = self.parts_sum();
        self
    }
}

/// Cost of a control split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CostReport {
    /// `½∬|A|²μ dt`.
    pub kinetic: f64,
    /// `∬𝒱μ dt`.
    pub running: f64,
    /// `𝒢(μ_T)`; zero in Schrödinger mode.
    pub terminal: f64,
    /// `KL(μ_T | target)` in Schrödinger mode.
    pub terminal_kl: Option<f64>,
}

impl CostReport {
    pub fn total(&self) -> f64 {
        self.kinetic + self.running + self.terminal
    }
}

/// Cost of `control`; in Schrödinger mode the running part only (see
/// [`eval_cost_report`] for the terminal mismatch).
pub fn eval_cost(spec: &ProblemSpec, control: &FieldFlow) -> Result<f64> {
    Ok(eval_cost_report(spec, control)?.total())
}

pub fn eval_cost_report(spec: &ProblemSpec, control: &FieldFlow) -> Result<CostReport> {
    check_cfl(spec, control)?;
    let solver = FpSolver::new(spec, control.steps());
    let flow = solver.solve(control)?;
    cost_of_flow(spec, solver.model(), &flow, control)
}

pub(crate) fn cost_of_flow(spec: &ProblemSpec, model: &GridModel, flow: &MeasureFlow, control: &FieldFlow) -> Result<CostReport> {
    let h = 1.0 / flow.cells() as f64;
    let weights = flow.trapezoid_weights();
    let mut report = CostReport::default();
    for (k, tw) in weights.iter().enumerate() {
        let rho = flow.density(k);
        let v = model.running(rho);
        let a = control.row(k);
        let (mut kin, mut run) = (0.0, 0.0);
        for j in 0..rho.len() {
            kin += 0.5 * a[j] * a[j] * rho[j];
            run += v[j] * rho[j];
        }
        report.kinetic += tw * h * kin;
        report.running += tw * h * run;
    }
    let last = flow.density(flow.steps());
    match spec.mode {
        Mode::FiniteHorizon => report.terminal = model.terminal_cost(last),
        Mode::Schrodinger => {
            let target = spec.target.as_ref().ok_or_else(|| Error::InvalidModel("missing target".into()))?;
            report.terminal_kl = Some(kl_grid(&flow.measure(flow.steps()), target)?);
        }
    }
    Ok(report)
}

/// Monte Carlo estimate of the `N`-particle cost at the tensorized
/// `control`, over `replicas` independent replicas (replica `r` seeded by
/// [`crate::particles::replica_seed`]).
pub fn eval_cost_n_mc(spec: &ProblemSpec, control: &FieldFlow, particles: usize, replicas: usize, seed: u64) -> Result<Estimate> {
    eval_cost_n_mc_on(spec, control, particles, replicas, seed, None)
}

/// [`eval_cost_n_mc`] on an explicit number of worker threads.
pub fn eval_cost_n_mc_on(
    spec: &ProblemSpec,
    control: &FieldFlow,
    particles: usize,
    replicas: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<Estimate> {
    if replicas == 0 {
        return Err(Error::InvalidArgument("need at least one replica".into()));
    }
    let costs = map_indexed(replicas, workers, |r| {
        let ens = simulate(spec, control, particles, replica_seed(seed, r))?;
        Ok(ensemble_cost(spec, &ens))
    })?;
    Ok(Estimate::from_samples(&costs))
}

/// Explicit partial derivatives of the discrete cost: `∂J/∂ρ_k` per node and
/// `∂J/∂A` (the latter at fixed flow).
pub(crate) fn cost_partials(spec: &ProblemSpec, model: &GridModel, flow: &MeasureFlow, control: &FieldFlow) -> (Vec<Vec<f64>>, FieldFlow) {
    let m = flow.cells();
    let h = 1.0 / m as f64;
    let weights = flow.trapezoid_weights();
    let mut rho_bar = Vec::with_capacity(weights.len());
    let mut a_bar = FieldFlow::zeros(FieldKind::Control, flow.horizon(), m, flow.steps());
    for (k, tw) in weights.iter().enumerate() {
        let rho = flow.density(k);
        let v = model.running(rho);
        let a = control.row(k);
        let mut rb: Vec<f64> = (0..m).map(|j| tw * h * (0.5 * a[j] * a[j] + v[j])).collect();
        let lambda: Vec<f64> = rho.iter().map(|r| tw * h * r).collect();
        model.running_adjoint_into(&lambda, rho, &mut rb);
        for (g, (aj, l)) in a_bar.row_mut(k).iter_mut().zip(a.iter().zip(&lambda)) {
            *g = aj * l;
        }
        rho_bar.push(rb);
    }
    if spec.mode == Mode::FiniteHorizon {
        if let Some(g) = model.terminal_weight() {
            for (r, gv) in rho_bar[flow.steps()].iter_mut().zip(g) {
                *r += h * gv;
            }
        }
    }
    (rho_bar, a_bar)
}

fn check_velocity(flow: &MeasureFlow, w: &FieldFlow) -> Result<()> {
    if w.kind() != FieldKind::Velocity {
        return Err(Error::InvalidArgument("energy needs a velocity field".into()));
    }
    if w.cells() != flow.cells() || w.steps() != flow.steps() || (w.horizon() - flow.horizon()).abs() > 1e-12 * flow.horizon() {
        return Err(Error::ShapeMismatch("velocity and measure flow on different grids".into()));
    }
    Ok(())
}

/// Relative continuity residual above which energy evaluation warns.
pub const RESIDUAL_WARN: f64 = 0.05;

fn warn_on_residual(flow: &MeasureFlow, w: &FieldFlow) -> Result<()> {
    let r = crate::dynamics::relative_continuity_residual(flow, w)?;
    if r > RESIDUAL_WARN {
        log::warn!("relative continuity residual {r:.3e} exceeds {RESIDUAL_WARN:e}");
    }
    Ok(())
}

/// Per-node sums shared by the plain and confined expansions.
struct NodeSums {
    kinetic: f64,
    drift_sq: f64,
    cross: f64,
    div: f64,
    running: f64,
}

fn node_sums(w: &[f64], b: &[f64], div_b: &[f64], v: &[f64], rho: &[f64]) -> NodeSums {
    let mut s = NodeSums { kinetic: 0.0, drift_sq: 0.0, cross: 0.0, div: 0.0, running: 0.0 };
    for j in 0..rho.len() {
        let r = rho[j];
        s.kinetic += 0.5 * w[j] * w[j] * r;
        s.drift_sq += 0.5 * b[j] * b[j] * r;
        s.cross -= w[j] * b[j] * r;
        s.div += div_b[j] * r;
        s.running += v[j] * r;
    }
    s
}

/// Energy of `(flow, w)`.
pub fn eval_energy(spec: &ProblemSpec, flow: &MeasureFlow, w: &FieldFlow) -> Result<EnergyReport> {
    check_velocity(flow, w)?;
    warn_on_residual(flow, w)?;
    let model = GridModel::new(spec);
    let h = 1.0 / flow.cells() as f64;
    let mut rep = EnergyReport::default();
    for (k, tw) in flow.trapezoid_weights().iter().enumerate() {
        let rho = flow.density(k);
        let b = model.drift(rho);
        let div = model.drift_divergence(rho);
        let v = model.running(rho);
        let s = node_sums(w.row(k), &b, &div, &v, rho);
        rep.kinetic += tw * h * s.kinetic;
        rep.drift_sq += tw * h * s.drift_sq;
        rep.cross += tw * h * s.cross;
        rep.div_term += tw * h * s.div;
        rep.running += tw * h * s.running;
        rep.fisher_half += 0.5 * tw * flow.measure(k).fisher_information(DENSITY_FLOOR);
    }
    let last = flow.steps();
    rep.entropy_diff = flow.measure(last).entropy() - flow.measure(0).entropy();
    if spec.mode == Mode::FiniteHorizon {
        rep.terminal = model.terminal_cost(flow.density(last));
    }
    Ok(rep.finish())
}

/// Energy with the external drift written as `b₀ = −Ψ'`.
///
/// The base entries use the interaction part `b₁` alone; the confinement
/// enters through the `potential_*` entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ConfinedEnergyReport {
    /// Entries of the plain report evaluated with `b₁` in place of `b`.
    pub base: EnergyReport,
    /// `∬⟨w, Ψ'⟩μ dt`.
    pub potential_transport: f64,
    /// `∫Ψ dμ_T − ∫Ψ dμ_0`.
    pub potential_boundary: f64,
    /// `−∬Ψ' b₁ μ dt`.
    pub potential_cross: f64,
    /// `½∬|Ψ'|²μ dt`.
    pub potential_sq: f64,
    /// `−∬Ψ''μ dt`.
    pub potential_laplacian: f64,
    /// Sum with the boundary form of the transport term.
    pub total: f64,
    /// Sum with the transport term integrated along the flow; equals the plain total.
    pub total_pathwise: f64,
}

pub fn eval_energy_confined(spec: &ProblemSpec, flow: &MeasureFlow, w: &FieldFlow) -> Result<ConfinedEnergyReport> {
    check_velocity(flow, w)?;
    let psi = spec.drift.confinement_potential()?;
    warn_on_residual(flow, w)?;
    let mut inner = spec.clone();
    inner.drift.external = crate::series::TrigSeries::zero();
    let model = GridModel::new(&inner);
    let m = flow.cells();
    let h = 1.0 / m as f64;
    let modes = psi.modes().max(2);
    let basis = crate::series::GridBasis::new(m, modes);
    let psi_s = basis.sample(&psi);
    let dpsi = basis.sample(&psi.derivative());
    let ddpsi = basis.sample(&psi.derivative().derivative());
    let mut rep = ConfinedEnergyReport::default();
    let mut base = EnergyReport::default();
    for (k, tw) in flow.trapezoid_weights().iter().enumerate() {
        let rho = flow.density(k);
        let b1 = model.drift(rho);
        let div1 = model.drift_divergence(rho);
        let v = model.running(rho);
        let wk = w.row(k);
        let s = node_sums(wk, &b1, &div1, &v, rho);
        base.kinetic += tw * h * s.kinetic;
        base.drift_sq += tw * h * s.drift_sq;
        base.cross += tw * h * s.cross;
        base.div_term += tw * h * s.div;
        base.running += tw * h * s.running;
        base.fisher_half += 0.5 * tw * flow.measure(k).fisher_information(DENSITY_FLOOR);
        let (mut tr, mut cr, mut sq, mut lap) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..m {
            let r = rho[j];
            tr += wk[j] * dpsi[j] * r;
            cr -= dpsi[j] * b1[j] * r;
            sq += 0.5 * dpsi[j] * dpsi[j] * r;
            lap -= ddpsi[j] * r;
        }
        rep.potential_transport += tw * h * tr;
        rep.potential_cross += tw * h * cr;
        rep.potential_sq += tw * h * sq;
        rep.potential_laplacian += tw * h * lap;
    }
    let last = flow.steps();
    base.entropy_diff = flow.measure(last).entropy() - flow.measure(0).entropy();
    if spec.mode == Mode::FiniteHorizon {
        base.terminal = model.terminal_cost(flow.density(last));
    }
    rep.base = base.finish();
    let mean_psi = |k: usize| h * flow.density(k).iter().zip(&psi_s).map(|(r, p)| r * p).sum::<f64>();
    rep.potential_boundary = mean_psi(last) - mean_psi(0);
    let rest = rep.base.total + rep.potential_cross + rep.potential_sq + rep.potential_laplacian;
    rep.total = rest + rep.potential_boundary;
    rep.total_pathwise = rest + rep.potential_transport;
    Ok(rep)
}

/// `(D¹ρ, D²ρ)` by periodic central differences along each axis.
fn pair_gradients(rho: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d1 = vec![0.0; m * m];
    let mut d2 = vec![0.0; m * m];
    let mut line = vec![0.0; m];
    let mut out = vec![0.0; m];
    for j in 0..m {
        for i in 0..m {
            line[i] = rho[i * m + j];
        }
        central_difference(&line, &mut out);
        for i in 0..m {
            d1[i * m + j] = out[i];
        }
    }
    for i in 0..m {
        central_difference(&rho[i * m..(i + 1) * m], &mut out);
        d2[i * m..(i + 1) * m].copy_from_slice(&out);
    }
    (d1, d2)
}

/// Two-particle energy of `(μ², w²)`, normalised per particle.
///
/// The square `|w + ∇μ²/μ² − b|²` is expanded pointwise with the central
/// difference quotient `Dρ/ρ`, with `N = 2`: the slot `entropy_diff` holds
/// `(1/N)∬⟨w, Dμ²⟩ dt` and `div_term` holds `−(1/N)∬⟨b, Dμ²⟩ dt`. The
/// pointwise total is then jointly convex in `(μ², w²μ²)`.
pub fn eval_energy_pair(spec: &ProblemSpec, flow: &PairFlow, w: &PairField) -> Result<EnergyReport> {
    check_shapes(flow, w)?;
    if w.kind() != FieldKind::Velocity {
        return Err(Error::InvalidArgument("pair energy needs a velocity field".into()));
    }
    if !flow.measure(0).is_symmetric(1e-12) {
        log::warn!("pair energy evaluated on a non-symmetric flow");
    }
    let model = PairModel::new(spec);
    let m = flow.cells();
    let a = m * m;
    let h2 = 1.0 / a as f64;
    let n = 2.0;
    let mut rep = EnergyReport::default();
    let weights = crate::measure::trapezoid_weights(flow.steps(), flow.dt());
    for (k, tw) in weights.iter().enumerate() {
        let rho = flow.density(k);
        let (d1, d2) = pair_gradients(rho, m);
        let (mut kin, mut bsq, mut fis, mut ent, mut cross, mut div, mut run) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                let p = i * m + j;
                let r = rho[p];
                let (w1, w2) = (w.first[k * a + p], w.second[k * a + p]);
                let (b1, b2) = (model.drift(0, i, j), model.drift(1, i, j));
                kin += 0.5 * (w1 * w1 + w2 * w2) * r;
                bsq += 0.5 * (b1 * b1 + b2 * b2) * r;
                fis += 0.5 * (d1[p] * d1[p] + d2[p] * d2[p]) / r.max(DENSITY_FLOOR);
                ent += w1 * d1[p] + w2 * d2[p];
                cross -= (w1 * b1 + w2 * b2) * r;
                div -= b1 * d1[p] + b2 * d2[p];
                run += (model.running(0, i, j) + model.running(1, i, j)) * r;
            }
        }
        let s = tw * h2 / n;
        rep.kinetic += s * kin;
        rep.drift_sq += s * bsq;
        rep.fisher_half += s * fis;
        rep.entropy_diff += s * ent;
        rep.cross += s * cross;
        rep.div_term += s * div;
        rep.running += s * run;
    }
    if model.has_terminal() && spec.mode == Mode::FiniteHorizon {
        let rho = flow.density(flow.steps());
        let mut g = 0.0;
        for i in 0..m {
            for j in 0..m {
                g += model.terminal(i, j) * rho[i * m + j];
            }
        }
        rep.terminal = h2 * g;
    }
    Ok(rep.finish())
}

/// `w² = A² + b − Dμ²/μ²` on the product grid.
pub fn pair_control_to_velocity(spec: &ProblemSpec, flow: &PairFlow, control: &PairField) -> Result<PairField> {
    check_shapes(flow, control)?;
    if control.kind() != FieldKind::Control {
        return Err(Error::InvalidArgument("expected a control field".into()));
    }
    let model = PairModel::new(spec);
    let m = flow.cells();
    let a = m * m;
    let mut first = control.first.clone();
    let mut second = control.second.clone();
    for k in 0..=flow.steps() {
        let rho = flow.density(k);
        let (d1, d2) = pair_gradients(rho, m);
        for i in 0..m {
            for j in 0..m {
                let p = i * m + j;
                let r = rho[p].max(DENSITY_FLOOR);
                first[k * a + p] += model.drift(0, i, j) - d1[p] / r;
                second[k * a + p] += model.drift(1, i, j) - d2[p] / r;
            }
        }
    }
    PairField::new(FieldKind::Velocity, flow.horizon(), m, first, second)
}
