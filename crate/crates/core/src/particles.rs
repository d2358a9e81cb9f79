//! Euler–Maruyama simulation of the controlled `N`-particle system
//!
//! ```text
//! X^i_{k+1} = wrap(X^i_k + (a^i_k + b(X^i_k, ι^N_k)) Δt + √(2Δt) ξ^i_k)
//! ```
//!
//! where `ι^N_k` is the empirical measure of the particles at step `k`.
//! Noise is drawn from a ChaCha stream keyed by `(seed, particle)` and
//! positioned by step, so every draw is reproducible on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{FieldFlow, FieldKind};
use crate::error::{Error, Result};
use crate::measure::{wrap, EmpiricalMeasure, GridMeasure};
use crate::model::{Mode, ProblemSpec};
use crate::series::FourierMoments;

/// Samples per `(step, cell)` bin below which [`conditional_velocity`] flags the bin.
pub const MIN_CELL_SAMPLES: usize = 10;

/// Seed of replica `r` derived from a run seed.
pub fn replica_seed(seed: u64, replica: usize) -> u64 {
    seed ^ replica as u64
}

/// 32-bit words reserved per `(particle, slot)`: two `f64` uniforms.
const WORDS_PER_SLOT: u128 = 4;

/// Counter-addressed uniforms: slot 0 seeds the initial position, slot
/// `k + 1` the noise of step `k`.
pub(crate) struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub(crate) fn new(seed: u64, particle: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(particle as u64);
        Self { rng }
    }

    pub(crate) fn uniforms(&mut self, slot: usize) -> (f64, f64) {
        self.rng.set_word_pos(slot as u128 * WORDS_PER_SLOT);
        (self.rng.gen::<f64>(), self.rng.gen::<f64>())
    }

    /// Box–Muller normal from the slot's uniforms.
    fn normal(&mut self, slot: usize) -> f64 {
        let (u1, u2) = self.uniforms(slot);
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Inverse-CDF sampler of a grid density with uniform jitter inside the cell.
pub(crate) struct GridSampler {
    cdf: Vec<f64>,
}

impl GridSampler {
    pub(crate) fn new(mu: &GridMeasure) -> Self {
        let h = mu.h();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = mu
            .density()
            .iter()
            .map(|r| {
                acc += h * r;
                acc
            })
            .collect();
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        Self { cdf }
    }

    pub(crate) fn sample(&self, u: f64, jitter: f64) -> f64 {
        let m = self.cdf.len();
        let j = self.cdf.partition_point(|&c| c <= u).min(m - 1);
        wrap((j as f64 + jitter) / m as f64)
    }
}

/// What a drift policy sees for particle `particle` at step `step`.
pub struct DriftContext<'a> {
    pub step: usize,
    pub t: f64,
    pub particle: usize,
    pub x: f64,
    /// Mean-field drift `b(x, ι^N)` at the current step.
    pub interaction: f64,
    /// Positions of all particles at steps `0..=step`, row-major.
    pub history: &'a [f64],
    pub particles: usize,
}

impl DriftContext<'_> {
    /// Position of this particle at an earlier step.
    pub fn past(&self, step: usize) -> f64 {
        self.history[step * self.particles + self.particle]
    }
}

/// Control part `a^i_k` of the drift.
pub trait DriftPolicy: Sync {
    fn control(&self, ctx: &DriftContext) -> f64;
}

/// The tensorized Markov control `a^i_k = A(t_k, X^i_k)`.
pub struct MarkovControl<'a>(pub &'a FieldFlow);

impl DriftPolicy for MarkovControl<'_> {
    fn control(&self, ctx: &DriftContext) -> f64 {
        self.0.interpolate(ctx.t, ctx.x)
    }
}

/// One simulated replica.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    particles: usize,
    steps: usize,
    horizon: f64,
    seed: u64,
    positions: Vec<f64>,
    controls: Vec<f64>,
    drifts: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn noise_seed(&self) -> u64 {
        self.seed
    }

    /// Positions at step `k`.
    pub fn positions(&self, k: usize) -> &[f64] {
        &self.positions[k * self.particles..(k + 1) * self.particles]
    }

    /// Control part of the drift at step `k` (the last row is evaluated at
    /// the final positions and used only by time quadratures).
    pub fn controls(&self, k: usize) -> &[f64] {
        &self.controls[k * self.particles..(k + 1) * self.particles]
    }

    /// Total drift `u^i_k = a^i_k + b(X^i_k, ι^N_k)` at step `k`.
    pub fn drifts(&self, k: usize) -> &[f64] {
        &self.drifts[k * self.particles..(k + 1) * self.particles]
    }

    pub fn empirical_marginal(&self, k: usize, subset: &[usize]) -> Result<EmpiricalMeasure> {
        if k > self.steps {
            return Err(Error::InvalidArgument(format!("step {k} beyond {}", self.steps)));
        }
        let row = self.positions(k);
        let pts = subset
            .iter()
            .map(|&i| row.get(i).copied().ok_or_else(|| Error::InvalidArgument(format!("particle {i} of {}", self.particles))))
            .collect::<Result<Vec<_>>>()?;
        EmpiricalMeasure::new(pts)
    }

    /// Empirical measure of all particles at step `k`.
    pub fn empirical(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.positions(k).to_vec()).expect("positions are wrapped")
    }
}

/// Simulates `particles` particles under the tensorized `control` on its time grid.
pub fn simulate(spec: &ProblemSpec, control: &FieldFlow, particles: usize, seed: u64) -> Result<ParticleEnsemble> {
    if control.kind() != FieldKind::Control || (control.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(Error::ShapeMismatch("control does not match the problem horizon".into()));
    }
    simulate_with(spec, &MarkovControl(control), particles, control.steps(), seed)
}

pub fn simulate_with(spec: &ProblemSpec, policy: &impl DriftPolicy, particles: usize, steps: usize, seed: u64) -> Result<ParticleEnsemble> {
    if particles == 0 || steps == 0 {
        return Err(Error::InvalidArgument("need at least one particle and one step".into()));
    }
    let n = particles;
    let dt = spec.horizon / steps as f64;
    let noise_scale = (2.0 * dt).sqrt();
    let modes = spec.drift.kernel.modes();
    let interacting = spec.drift.is_interacting();
    let sampler = GridSampler::new(&spec.mu0);
    let mut streams: Vec<NoiseStream> = (0..n).map(|i| NoiseStream::new(seed, i)).collect();

    let mut positions = Vec::with_capacity((steps + 1) * n);
    for s in streams.iter_mut() {
        let (u, jitter) = s.uniforms(0);
        positions.push(sampler.sample(u, jitter));
    }
    let mut controls = vec![0.0; (steps + 1) * n];
    let mut drifts = vec![0.0; (steps + 1) * n];
    let empty = FourierMoments { cos: vec![], sin: vec![] };
    for k in 0..=steps {
        let t = k as f64 * dt;
        let moments = if interacting { FourierMoments::of_points(&positions[k * n..(k + 1) * n], modes) } else { empty.clone() };
        for i in 0..n {
            let x = positions[k * n + i];
            let b = if interacting { spec.drift.drift_with(x, &moments) } else { spec.drift.external.eval(x) };
            let ctx = DriftContext { step: k, t, particle: i, x, interaction: b, history: &positions, particles: n };
            let a = policy.control(&ctx);
            controls[k * n + i] = a;
            drifts[k * n + i] = a + b;
        }
        if k == steps {
            break;
        }
        for (i, s) in streams.iter_mut().enumerate() {
            let x = positions[k * n + i];
            let next = wrap(x + drifts[k * n + i] * dt + noise_scale * s.normal(k + 1));
            positions.push(next);
        }
    }
    if drifts.iter().any(|u| !u.is_finite()) {
        return Err(Error::InvalidArgument("non-finite drift in simulation".into()));
    }
    Ok(ParticleEnsemble { particles: n, steps, horizon: spec.horizon, seed, positions, controls, drifts })
}

/// `∫(1/N)Σᵢ(|a^i|²/2 + 𝒱(X^i, ι^N)) dt + 𝒢(ι^N_T)` along one replica,
/// trapezoidal in time (terminal part omitted in Schrödinger mode).
pub fn ensemble_cost(spec: &ProblemSpec, ens: &ParticleEnsemble) -> f64 {
    let n = ens.particles as f64;
    let modes = spec.modes();
    let dt = ens.dt();
    let mut total = 0.0;
    for k in 0..=ens.steps {
        let pos = ens.positions(k);
        let moments = FourierMoments::of_points(pos, modes);
        let row: f64 = pos
            .iter()
            .zip(ens.controls(k))
            .map(|(&x, a)| 0.5 * a * a + spec.running.eval_with(x, &moments))
            .sum::<f64>()
            / n;
        let w = if k == 0 || k == ens.steps { 0.5 * dt } else { dt };
        total += w * row;
    }
    if spec.mode == Mode::FiniteHorizon {
        total += spec.terminal.eval(&ens.empirical(ens.steps));
    }
    total
}

/// Bin average of recorded velocities over `(step, cell)` bins.
///
/// `samples` yields, per step `k`, the positions and velocities of every
/// path at that step.
pub(crate) fn bin_average(
    horizon: f64,
    steps: usize,
    cells: usize,
    rows: impl Fn(usize) -> Vec<(f64, f64)>,
) -> Result<FieldFlow> {
    let mut sums = vec![0.0; (steps + 1) * cells];
    let mut counts = vec![0usize; (steps + 1) * cells];
    for k in 0..=steps {
        for (x, u) in rows(k) {
            let j = ((x * cells as f64) as usize).min(cells - 1);
            sums[k * cells + j] += u;
            counts[k * cells + j] += 1;
        }
    }
    let sparse: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < MIN_CELL_SAMPLES)
        .map(|(p, _)| (p / cells, p % cells))
        .collect();
    if !sparse.is_empty() {
        return Err(Error::SparseCells { cells: sparse });
    }
    let values = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    FieldFlow::new(FieldKind::Velocity, horizon, cells, values)
}

/// Markov projection `ŵ(t_k, x_j)`: average recorded drift of the particles
/// found in cell `j` at step `k`, pooled over `ensembles`.
pub fn conditional_velocity(ensembles: &[ParticleEnsemble], cells: usize) -> Result<FieldFlow> {
    let first = ensembles.first().ok_or_else(|| Error::InvalidArgument("no ensembles".into()))?;
    if ensembles.iter().any(|e| e.steps != first.steps || (e.horizon - first.horizon).abs() > 1e-12 * first.horizon) {
        return Err(Error::ShapeMismatch("ensembles on different time grids".into()));
    }
    if cells < 2 {
        return Err(Error::InvalidArgument("conditional velocity needs at least 2 cells".into()));
    }
    bin_average(first.horizon, first.steps, cells, |k| {
        ensembles
            .iter()
            .flat_map(|e| e.positions(k).iter().copied().zip(e.drifts(k).iter().copied()))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{heat_flow, solve_fokker_planck};
    use crate::measure::{bin_empirical, wasserstein_circle, Order};
    use crate::model::{InteractionField, RunningCost, TerminalCost};
    use crate::series::TrigSeries;
    use std::f64::consts::TAU;

    struct CancelDrift;

    impl DriftPolicy for CancelDrift {
        fn control(&self, ctx: &DriftContext) -> f64 {
            -ctx.interaction
        }
    }

    fn interacting(m: usize) -> ProblemSpec {
        ProblemSpec::finite_horizon(
            InteractionField::new(TrigSeries::sine(1, 0.5), TrigSeries::sine(1, 1.0)),
            RunningCost::external_only(TrigSeries::cosine(1, 0.5)),
            TerminalCost::None,
            GridMeasure::von_mises(m, 0.3, 2.0).unwrap(),
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn cancelled_drift_follows_heat_flow() {
        let spec = interacting(128);
        let ens = simulate_with(&spec, &CancelDrift, 10_000, 40, 7).unwrap();
        let heat = heat_flow(&spec.mu0, 0.2, 40);
        for k in [10, 20, 40] {
            let binned = bin_empirical(&ens.empirical(k), 128).unwrap();
            let d = wasserstein_circle(&binned, &heat.measure(k), Order::W1);
            assert!(d < 0.01, "step {k}: W1 = {d}");
        }
        assert!(ens.drifts(5).iter().all(|u| u.abs() < 1e-12));
    }

    #[test]
    fn quadratic_variation_has_unit_diffusivity() {
        let spec = ProblemSpec::free(GridMeasure::uniform(64), 0.5).unwrap();
        for steps in [100, 400] {
            let zero = FieldFlow::zeros(FieldKind::Control, 0.5, 64, steps);
            let ens = simulate(&spec, &zero, 500, 11).unwrap();
            let mut qv = 0.0;
            for k in 0..steps {
                for (a, b) in ens.positions(k).iter().zip(ens.positions(k + 1)) {
                    let d = b - a - (b - a).round();
                    qv += d * d;
                }
            }
            let ratio = qv / (2.0 * 0.5 * 500.0);
            assert!((ratio - 1.0).abs() < 0.02, "K = {steps}: {ratio}");
        }
    }

    #[test]
    fn single_particle_replicas_match_fokker_planck() {
        let m = 128;
        let spec = ProblemSpec::finite_horizon(
            InteractionField::new(TrigSeries::sine(1, 0.5), TrigSeries::zero()),
            RunningCost::default(),
            TerminalCost::None,
            GridMeasure::von_mises(m, 0.3, 2.0).unwrap(),
            0.2,
        )
        .unwrap();
        let control = FieldFlow::from_fn(FieldKind::Control, 0.2, m, 160, |t, x| (TAU * x).cos() * (1.0 + t)).unwrap();
        let flow = solve_fokker_planck(&spec, &control).unwrap();
        let finals: Vec<f64> = (0..10_000).map(|r| simulate(&spec, &control, 1, replica_seed(3, r)).unwrap().positions(160)[0]).collect();
        let binned = bin_empirical(&EmpiricalMeasure::new(finals).unwrap(), m).unwrap();
        let d = wasserstein_circle(&binned, &flow.measure(160), Order::W1);
        assert!(d < 0.01, "W1 = {d}");
    }

    #[test]
    fn initial_positions_sample_the_initial_law() {
        let spec = interacting(256);
        let n = 4000;
        let ens = simulate_with(&spec, &CancelDrift, n, 1, 5).unwrap();
        let mut pts = ens.positions(0).to_vec();
        pts.sort_by(f64::total_cmp);
        // Kolmogorov–Smirnov distance to the grid CDF
        let h = 1.0 / 256.0;
        let rho = spec.mu0.density();
        let cdf = |x: f64| {
            let j = ((x / h) as usize).min(255);
            h * rho[..j].iter().sum::<f64>() + (x - j as f64 * h) * rho[j]
        };
        let d = pts
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / (n as f64).sqrt(), "KS = {d}");
    }

    #[test]
    fn singleton_subset_is_one_atom() {
        let spec = interacting(32);
        let ens = simulate_with(&spec, &CancelDrift, 5, 3, 1).unwrap();
        let e = ens.empirical_marginal(2, &[3]).unwrap();
        assert_eq!(e.points(), &[ens.positions(2)[3]]);
        assert!(ens.empirical_marginal(4, &[0]).is_err());
        assert!(ens.empirical_marginal(0, &[5]).is_err());
    }

    #[test]
    fn streams_are_addressed_by_particle_and_step() {
        let spec = interacting(32);
        let a = simulate_with(&spec, &CancelDrift, 8, 10, 42).unwrap();
        let b = simulate_with(&spec, &CancelDrift, 16, 10, 42).unwrap();
        // with the drift cancelled, particle i's path depends only on its own stream
        for k in 0..=10 {
            assert_eq!(a.positions(k), &b.positions(k)[..8]);
        }
    }

    #[test]
    fn constant_drift_is_recovered_exactly() {
        let spec = ProblemSpec::free(GridMeasure::uniform(16), 0.1).unwrap();
        let c = FieldFlow::from_fn(FieldKind::Control, 0.1, 16, 10, |_, _| 0.7).unwrap();
        let ens: Vec<_> = (0..20).map(|r| simulate(&spec, &c, 100, r).unwrap()).collect();
        let w = conditional_velocity(&ens, 16).unwrap();
        assert!(w.values().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn sparse_bins_are_reported() {
        let spec = ProblemSpec::free(GridMeasure::uniform(16), 0.1).unwrap();
        let c = FieldFlow::zeros(FieldKind::Control, 0.1, 16, 4);
        let ens = simulate(&spec, &c, 20, 1).unwrap();
        match conditional_velocity(&[ens], 16) {
            Err(Error::SparseCells { cells }) => assert!(!cells.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    struct Remembering<'a>(&'a FieldFlow);

    impl DriftPolicy for Remembering<'_> {
        fn control(&self, ctx: &DriftContext) -> f64 {
            self.0.interpolate(ctx.t, ctx.x) + 0.8 * (TAU * ctx.past(0)).cos()
        }
    }

    #[test]
    fn markov_projection_does_not_increase_kinetic_energy() {
        let spec = interacting(16);
        let c = FieldFlow::from_fn(FieldKind::Control, 0.2, 16, 20, |_, x| (TAU * x).sin()).unwrap();
        let ens: Vec<_> = (0..40).map(|r| simulate_with(&spec, &Remembering(&c), 200, 20, replica_seed(9, r)).unwrap()).collect();
        let w = conditional_velocity(&ens, 16).unwrap();
        let total = (ens.len() * 200) as f64;
        for k in 0..=20 {
            let mut counts = [0.0; 16];
            let mut raw = 0.0;
            for e in &ens {
                for (&x, u) in e.positions(k).iter().zip(e.drifts(k)) {
                    counts[((x * 16.0) as usize).min(15)] += 1.0;
                    raw += u * u;
                }
            }
            let projected: f64 = w.row(k).iter().zip(&counts).map(|(v, c)| v * v * c).sum();
            assert!(projected <= raw * (1.0 + 1e-12), "step {k}");
            assert!(projected / total < raw / total);
        }
    }

    #[test]
    fn single_particle_cost_matches_grid_cost() {
        let m = 128;
        let spec = ProblemSpec::finite_horizon(
            InteractionField::new(TrigSeries::sine(1, 0.3), TrigSeries::zero()),
            RunningCost::external_only(TrigSeries::cosine(1, 0.5)),
            TerminalCost::Linear(TrigSeries::sine(1, 0.2)),
            GridMeasure::von_mises(m, 0.3, 2.0).unwrap(),
            0.2,
        )
        .unwrap();
        let control = FieldFlow::from_fn(FieldKind::Control, 0.2, m, 160, |t, x| (TAU * x).cos() * (1.0 - t)).unwrap();
        let grid = crate::energy::eval_cost(&spec, &control).unwrap();
        let costs: Vec<f64> = (0..4000).map(|r| ensemble_cost(&spec, &simulate(&spec, &control, 1, replica_seed(1, r)).unwrap())).collect();
        let est = crate::parallel::Estimate::from_samples(&costs);
        assert!((est.mean - grid).abs() < 3.0 * est.stderr + 2e-3, "{} ± {} vs {grid}", est.mean, est.stderr);
    }
}
