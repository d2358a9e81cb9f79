//! Minimisation of the mean-field cost over grid controls, and of the
//! two-particle cost on the product grid.
//!
//! Both solvers run projected gradient descent in the metric
//! `⟨a, a'⟩ = Σ τ_k h ρ_kj a_kj a'_kj` (the discrete `L²(μ dt)` product),
//! with Armijo backtracking. The projection clamps `|A|` to the largest value
//! the time grid admits under the CFL bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{heat_flow_control, required_steps, FieldFlow, FieldKind, FpSolver, CFL_NUMBER};
use crate::energy::{cost_of_flow, cost_partials};
use crate::error::{Error, Result};
use crate::measure::{MeasureFlow, DENSITY_FLOOR};
use crate::model::{GridModel, Mode, ProblemSpec};
use crate::pair::{pair_cost, pair_cost_gradients, pair_metric_weights, PairField, PairFlow, PairFpSolver};

/// Starting control.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// `−b` along the uncontrolled heat flow.
    #[default]
    HeatFlow,
    /// The heat-flow start plus a random smooth perturbation.
    Random { seed: u64, amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Time steps of the control grid.
    pub steps: usize,
    pub max_iters: usize,
    /// Initial step length in the `L²(μ dt)` metric.
    pub step: f64,
    /// Stop once the metric gradient norm drops below this.
    pub tol: f64,
    /// Penalty weights on `KL(μ_T | target)` in Schrödinger mode.
    pub penalty_schedule: Vec<f64>,
    /// Accepted terminal mismatch in Schrödinger mode (nats).
    pub terminal_tol: f64,
    pub init: Init,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            max_iters: 2000,
            step: 1.0,
            tol: 1e-7,
            penalty_schedule: vec![1.0, 10.0, 100.0, 1000.0],
            terminal_tol: 1e-3,
            init: Init::HeatFlow,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub control: FieldFlow,
    pub flow: MeasureFlow,
    /// Cost at `control` (the running part in Schrödinger mode).
    pub theta: f64,
    /// Descent iterations, summed over penalty stages.
    pub iterations: usize,
    pub grad_norm: f64,
    /// `KL(μ_T | target)`; zero in finite-horizon mode.
    pub terminal_kl: f64,
    /// Terminal mismatch after each penalty stage (Schrödinger mode).
    pub stage_terminal_kl: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct PairSolveResult {
    pub control: PairField,
    pub flow: PairFlow,
    /// Per-particle two-particle cost at `control`.
    pub theta: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError<R: std::fmt::Debug> {
    /// The iteration budget ran out; carries the best iterate.
    #[error("solver did not converge")]
    NotConverged(Box<R>),
    #[error(transparent)]
    Failed(#[from] Error),
}

impl<R: std::fmt::Debug> SolveError<R> {
    /// Best iterate of a non-converged run.
    pub fn best(&self) -> Option<&R> {
        match self {
            SolveError::NotConverged(r) => Some(r),
            SolveError::Failed(_) => None,
        }
    }
}

struct Eval {
    value: f64,
    grad: Vec<f64>,
    metric: Vec<f64>,
}

trait Objective {
    fn eval(&self, x: &[f64]) -> Result<Eval>;
    fn project(&self, x: &mut [f64]);
    fn ceiling(&self) -> f64;
}

struct Descent {
    x: Vec<f64>,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

/// Metric norm of the gradient, leaving out components held at the bound.
fn metric_norm(e: &Eval, x: &[f64], ceiling: f64) -> f64 {
    let held = |v: f64, g: f64| (v >= ceiling && g < 0.0) || (v <= -ceiling && g > 0.0);
    e.grad
        .iter()
        .zip(&e.metric)
        .zip(x)
        .filter(|((g, _), v)| !held(**v, **g))
        .map(|((g, m), _)| g * g / m)
        .sum::<f64>()
        .sqrt()
}

const ARMIJO: f64 = 1e-4;

fn descend(obj: &impl Objective, mut x: Vec<f64>, opts: &SolveOptions) -> Result<Descent> {
    obj.project(&mut x);
    let mut cur = obj.eval(&x)?;
    let mut alpha = opts.step;
    let (min_alpha, max_alpha) = (1e-14 * opts.step, 1e6 * opts.step);
    let mut iterations = 0;
    let mut trial = vec![0.0; x.len()];
    loop {
        let grad_norm = metric_norm(&cur, &x, obj.ceiling());
        if grad_norm < opts.tol || iterations >= opts.max_iters {
            return Ok(Descent { x, grad_norm, iterations, converged: grad_norm < opts.tol });
        }
        iterations += 1;
        let mut accepted = None;
        while alpha > min_alpha {
            for (((t, xv), g), m) in trial.iter_mut().zip(&x).zip(&cur.grad).zip(&cur.metric) {
                *t = xv - alpha * g / m;
            }
            obj.project(&mut trial);
            let slope: f64 = trial.iter().zip(&x).zip(&cur.grad).map(|((t, xv), g)| g * (t - xv)).sum();
            if slope >= 0.0 {
                alpha *= 0.5;
                continue;
            }
            match obj.eval(&trial) {
                Ok(e) if e.value <= cur.value + ARMIJO * slope => {
                    accepted = Some(e);
                    break;
                }
                Ok(_) | Err(Error::CflViolation { .. }) | Err(Error::PositivityLoss { .. }) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some(next) = accepted else {
            // no decrease left at working precision
            return Ok(Descent { x, grad_norm, iterations, converged: false });
        };
        // Barzilai–Borwein length for the next trial, in the current metric
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..x.len() {
            let s = trial[i] - x[i];
            ss += s * s * next.metric[i];
            sy += s * (next.grad[i] - cur.grad[i]);
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(min_alpha * 1e3, max_alpha) } else { (2.0 * alpha).min(max_alpha) };
        std::mem::swap(&mut x, &mut trial);
        cur = next;
    }
}

/// Largest `|A|` the CFL bound admits on `steps` time steps.
fn control_ceiling(horizon: f64, cells: usize, steps: usize, drift_bound: f64) -> Result<f64> {
    let h = 1.0 / cells as f64;
    let ceiling = (CFL_NUMBER * h * steps as f64 / horizon - drift_bound) * (1.0 - 1e-9);
    if ceiling <= 0.0 {
        return Err(Error::CflViolation { steps, required: required_steps(horizon, cells, 2.0 * drift_bound) });
    }
    Ok(ceiling)
}

struct MeanField<'a> {
    spec: &'a ProblemSpec,
    solver: FpSolver,
    ceiling: f64,
    /// `(λ, target density)` of the terminal penalty.
    penalty: Option<(f64, Vec<f64>)>,
}

impl MeanField<'_> {
    fn field(&self, x: &[f64]) -> Result<FieldFlow> {
        FieldFlow::new(FieldKind::Control, self.spec.horizon, self.solver.cells(), x.to_vec())
    }
}

impl Objective for MeanField<'_> {
    fn eval(&self, x: &[f64]) -> Result<Eval> {
        let control = self.field(x)?;
        let tape = self.solver.forward(&control)?;
        let model = self.solver.model();
        let report = cost_of_flow(self.spec, model, &tape.flow, &control)?;
        let mut value = report.total();
        let (mut rho_bar, explicit) = cost_partials(self.spec, model, &tape.flow, &control);
        if let Some((lambda, target)) = &self.penalty {
            let last = tape.flow.density(tape.flow.steps());
            let h = 1.0 / last.len() as f64;
            let bar = &mut rho_bar[tape.flow.steps()];
            for ((r, q), b) in last.iter().zip(target).zip(bar.iter_mut()) {
                let log = (r.max(DENSITY_FLOOR) / q).ln();
                value += lambda * h * r * log;
                *b += lambda * h * (log + 1.0);
            }
        }
        let mut grad = self.solver.backward(&tape, rho_bar).into_values();
        for (g, e) in grad.iter_mut().zip(explicit.values()) {
            *g += e;
        }
        let metric = metric_weights(&tape.flow);
        Ok(Eval { value, grad, metric })
    }

    fn ceiling(&self) -> f64 {
        self.ceiling
    }

    fn project(&self, x: &mut [f64]) {
        for v in x {
            *v = v.clamp(-self.ceiling, self.ceiling);
        }
    }
}

/// `τ_k h ρ_kj`, floored.
fn metric_weights(flow: &MeasureFlow) -> Vec<f64> {
    let h = 1.0 / flow.cells() as f64;
    let mut out = Vec::with_capacity(flow.values().len());
    for (k, tw) in flow.trapezoid_weights().iter().enumerate() {
        out.extend(flow.density(k).iter().map(|r| tw * h * r.max(DENSITY_FLOOR)));
    }
    out
}

/// Gradient of [`crate::energy::eval_cost`] with respect to the grid values of `control`.
pub fn adjoint_gradient(spec: &ProblemSpec, control: &FieldFlow) -> Result<FieldFlow> {
    let solver = FpSolver::new(spec, control.steps());
    let obj = MeanField { spec, solver, ceiling: f64::INFINITY, penalty: None };
    if control.cells() != spec.cells() {
        return Err(Error::ShapeMismatch("control and problem on different grids".into()));
    }
    let e = obj.eval(control.values())?;
    FieldFlow::new(FieldKind::Control, spec.horizon, spec.cells(), e.grad)
}

fn initial_control(spec: &ProblemSpec, steps: usize, init: &Init) -> Result<FieldFlow> {
    let (mut control, _) = heat_flow_control(spec, steps);
    if let Init::Random { seed, amplitude } = init {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let coeffs: Vec<[f64; 4]> = (0..3).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let perturbation = FieldFlow::from_fn(FieldKind::Control, spec.horizon, spec.cells(), steps, |t, x| {
            let s = t / spec.horizon;
            coeffs
                .iter()
                .enumerate()
                .map(|(n, c)| {
                    let arg = std::f64::consts::TAU * (n + 1) as f64 * x;
                    ((c[0] + c[1] * s) * arg.cos() + (c[2] + c[3] * s) * arg.sin()) / (n + 1) as f64
                })
                .sum::<f64>()
                * amplitude
        })?;
        for (a, p) in control.values_mut().iter_mut().zip(perturbation.values()) {
            *a += p;
        }
    }
    Ok(control)
}

/// Minimises the mean-field cost; in Schrödinger mode the terminal
/// constraint is imposed by a penalty `λ·KL(μ_T | target)` with `λ` running
/// through `opts.penalty_schedule`.
pub fn solve_mean_field(spec: &ProblemSpec, opts: &SolveOptions) -> std::result::Result<SolveResult, SolveError<SolveResult>> {
    spec.validate()?;
    if opts.steps == 0 || opts.max_iters == 0 || !(opts.step > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("solver options must be positive".into()).into());
    }
    let solver = FpSolver::new(spec, opts.steps);
    let ceiling = control_ceiling(spec.horizon, spec.cells(), opts.steps, GridModel::drift_bound(spec))?;
    let x0 = initial_control(spec, opts.steps, &opts.init)?.into_values();
    let mut obj = MeanField { spec, solver, ceiling, penalty: None };
    let mut stages = Vec::new();

    let (descent, terminal_ok) = match spec.mode {
        Mode::FiniteHorizon => (descend(&obj, x0, opts)?, true),
        Mode::Schrodinger => {
            let target = spec.target.as_ref().ok_or_else(|| Error::InvalidModel("Schrödinger mode needs a target".into()))?;
            if target.density().iter().any(|&q| !(q > 0.0)) {
                return Err(Error::InvalidMeasure("Schrödinger target must be positive".into()).into());
            }
            if opts.penalty_schedule.is_empty() || opts.penalty_schedule.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::InvalidArgument("penalty schedule must be non-empty and positive".into()).into());
            }
            let mut x = x0;
            let mut last: Option<Descent> = None;
            let mut ok = false;
            let mut total = 0;
            for &lambda in &opts.penalty_schedule {
                obj.penalty = Some((lambda, target.density().to_vec()));
                let d = descend(&obj, x, opts)?;
                x = d.x.clone();
                let kl = terminal_kl(&obj, &x)?;
                stages.push(kl);
                total += d.iterations;
                last = Some(Descent { iterations: total, ..d });
                if kl < opts.terminal_tol {
                    ok = true;
                    break;
                }
            }
            (last.expect("schedule is non-empty"), ok)
        }
    };

    let control = obj.field(&descent.x)?;
    let flow = obj.solver.solve(&control)?;
    let report = cost_of_flow(spec, obj.solver.model(), &flow, &control)?;
    let result = SolveResult {
        theta: report.total(),
        terminal_kl: report.terminal_kl.unwrap_or(0.0),
        stage_terminal_kl: stages,
        control,
        flow,
        iterations: descent.iterations,
        grad_norm: descent.grad_norm,
        converged: descent.converged && terminal_ok,
    };
    if result.converged {
        Ok(result)
    } else {
        Err(SolveError::NotConverged(Box::new(result)))
    }
}

fn terminal_kl(obj: &MeanField, x: &[f64]) -> Result<f64> {
    let control = obj.field(x)?;
    let flow = obj.solver.solve(&control)?;
    let report = cost_of_flow(obj.spec, obj.solver.model(), &flow, &control)?;
    Ok(report.terminal_kl.unwrap_or(0.0))
}

struct Pair<'a> {
    spec: &'a ProblemSpec,
    solver: PairFpSolver,
    ceiling: f64,
}

impl Pair<'_> {
    fn field(&self, x: &[f64]) -> Result<PairField> {
        let half = x.len() / 2;
        PairField::new(FieldKind::Control, self.spec.horizon, self.solver.cells(), x[..half].to_vec(), x[half..].to_vec())
    }

    fn symmetrized(&self, x: Vec<f64>) -> Result<Vec<f64>> {
        let mut f = self.field(&x)?;
        f.symmetrize();
        Ok(f.first.into_iter().chain(f.second).collect())
    }
}

impl Objective for Pair<'_> {
    fn eval(&self, x: &[f64]) -> Result<Eval> {
        let control = self.field(x)?;
        let tape = self.solver.forward(&control)?;
        let value = pair_cost(self.solver.model(), &tape.flow, &control).total();
        let (rho_bar, explicit) = pair_cost_gradients(self.solver.model(), &tape.flow, &control);
        let g = self.solver.backward(&tape, rho_bar);
        let grad: Vec<f64> = g
            .first
            .iter()
            .chain(&g.second)
            .zip(explicit.first.iter().chain(&explicit.second))
            .map(|(a, b)| a + b)
            .collect();
        // restrict to exchange-symmetric controls
        let w = pair_metric_weights(&tape.flow);
        let grad = self.symmetrized(grad)?;
        let metric = self.symmetrized(w.iter().chain(&w).copied().collect())?;
        Ok(Eval { value, grad, metric })
    }

    fn ceiling(&self) -> f64 {
        self.ceiling
    }

    fn project(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.clamp(-self.ceiling, self.ceiling);
        }
        if let Ok(sym) = self.symmetrized(x.to_vec()) {
            x.copy_from_slice(&sym);
        }
    }
}

/// Largest grid accepted by [`solve_pair_direct`].
pub const PAIR_MAX_CELLS: usize = 64;
pub const PAIR_MAX_STEPS: usize = 100;

/// Minimises the two-particle cost over exchange-symmetric controls
/// `A²(t, x¹, x²)`, starting from `−b` along the joint heat flow.
pub fn solve_pair_direct(spec: &ProblemSpec, opts: &SolveOptions) -> std::result::Result<PairSolveResult, SolveError<PairSolveResult>> {
    spec.validate()?;
    if spec.mode != Mode::FiniteHorizon {
        return Err(Error::InvalidArgument("the pair solver handles finite-horizon problems only".into()).into());
    }
    if spec.cells() > PAIR_MAX_CELLS || opts.steps > PAIR_MAX_STEPS {
        return Err(Error::InvalidArgument(format!(
            "pair solves are limited to M ≤ {PAIR_MAX_CELLS}, K ≤ {PAIR_MAX_STEPS}"
        ))
        .into());
    }
    let solver = PairFpSolver::new(spec, opts.steps);
    let ceiling = control_ceiling(spec.horizon, spec.cells(), opts.steps, solver.model().drift_bound())?;
    let m = spec.cells();
    let a = m * m;
    let mut x0 = vec![0.0; 2 * (opts.steps + 1) * a];
    let (first, second) = x0.split_at_mut((opts.steps + 1) * a);
    for k in 0..=opts.steps {
        for i in 0..m {
            for j in 0..m {
                first[k * a + i * m + j] = -solver.model().drift(0, i, j);
                second[k * a + i * m + j] = -solver.model().drift(1, i, j);
            }
        }
    }
    let obj = Pair { spec, solver, ceiling };
    let d = descend(&obj, x0, opts)?;
    let control = obj.field(&d.x)?;
    let flow = obj.solver.solve(&control)?;
    let result = PairSolveResult {
        theta: pair_cost(obj.solver.model(), &flow, &control).total(),
        control,
        flow,
        iterations: d.iterations,
        grad_norm: d.grad_norm,
        converged: d.converged,
    };
    if result.converged {
        Ok(result)
    } else {
        Err(SolveError::NotConverged(Box::new(result)))
    }
}
