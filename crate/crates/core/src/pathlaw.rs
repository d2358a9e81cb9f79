//! Path-space constructions: deterministic lifts of a solution `(μ, w)` of
//! the continuity equation, and Girsanov-type relative entropy estimates for
//! simulated particle systems.

use serde::{Deserialize, Serialize};

use crate::dynamics::{relative_continuity_residual, FieldFlow, FieldKind};
use crate::error::{Error, Result};
use crate::measure::{wrap, EmpiricalMeasure, MeasureFlow};
use crate::parallel::{map_indexed, Estimate};
use crate::particles::{bin_average, GridSampler, NoiseStream, ParticleEnsemble};
use crate::series::FourierMoments;

/// Largest relative continuity residual [`lift`] accepts.
pub const LIFT_RESIDUAL_TOL: f64 = 0.05;

/// Paths per parallel work item in [`lift`].
const LIFT_CHUNK: usize = 1024;

/// Equally weighted trajectories of `ẋ = w(t, x)`.
#[derive(Clone, Debug)]
pub struct LiftEnsemble {
    horizon: f64,
    steps: usize,
    /// Unwrapped coordinates, `paths × (steps + 1)`, path-major.
    paths: Vec<f64>,
}

impl LiftEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len() / (self.steps + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
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

    /// Path `r` as unwrapped real coordinates.
    pub fn path(&self, r: usize) -> &[f64] {
        &self.paths[r * (self.steps + 1)..(r + 1) * (self.steps + 1)]
    }

    /// Torus position of path `r` at step `k`.
    pub fn position(&self, r: usize, k: usize) -> f64 {
        wrap(self.path(r)[k])
    }

    /// Pushforward of the path measure at step `k`.
    pub fn marginal(&self, k: usize) -> Result<EmpiricalMeasure> {
        if k > self.steps {
            return Err(Error::InvalidArgument(format!("step {k} beyond {}", self.steps)));
        }
        EmpiricalMeasure::new((0..self.len()).map(|r| self.position(r, k)).collect())
    }

    /// `∫|ẋ|² dt` of each piecewise-linear path, averaged over paths.
    pub fn kinetic(&self) -> Estimate {
        let dt = self.dt();
        let per_path: Vec<f64> = (0..self.len())
            .map(|r| self.path(r).windows(2).map(|p| (p[1] - p[0]) * (p[1] - p[0]) / dt).sum())
            .collect();
        Estimate::from_samples(&per_path)
    }

    /// Finite-difference velocity of path `r` at step `k` (centred inside, one-sided at the ends).
    pub fn velocity(&self, r: usize, k: usize) -> f64 {
        let p = self.path(r);
        let dt = self.dt();
        match k {
            0 => (p[1] - p[0]) / dt,
            k if k == self.steps => (p[k] - p[k - 1]) / dt,
            k => (p[k + 1] - p[k - 1]) / (2.0 * dt),
        }
    }

    /// Bin average of path velocities; see [`crate::particles::conditional_velocity`].
    pub fn conditional_velocity(&self, cells: usize) -> Result<FieldFlow> {
        if cells < 2 {
            return Err(Error::InvalidArgument("conditional velocity needs at least 2 cells".into()));
        }
        bin_average(self.horizon, self.steps, cells, |k| (0..self.len()).map(|r| (self.position(r, k), self.velocity(r, k))).collect())
    }
}

/// Samples `paths` starting points from `μ₀` and integrates `ẋ = w(t, x)`
/// with classical RK4 on the flow's time grid, interpolating `w` bilinearly.
pub fn lift(flow: &MeasureFlow, w: &FieldFlow, paths: usize, seed: u64) -> Result<LiftEnsemble> {
    if w.kind() != FieldKind::Velocity {
        return Err(Error::InvalidArgument("lift needs a velocity field".into()));
    }
    if paths == 0 {
        return Err(Error::InvalidArgument("lift needs at least one path".into()));
    }
    let residual = relative_continuity_residual(flow, w)?;
    if residual > LIFT_RESIDUAL_TOL {
        return Err(Error::InvalidArgument(format!(
            "velocity does not transport the flow (relative continuity residual {residual:.3e})"
        )));
    }
    let steps = flow.steps();
    let dt = flow.dt();
    let sampler = GridSampler::new(&flow.measure(0));
    let chunks = paths.div_ceil(LIFT_CHUNK);
    let parts = map_indexed(chunks, None, |c| {
        let range = c * LIFT_CHUNK..((c + 1) * LIFT_CHUNK).min(paths);
        let mut out = Vec::with_capacity(range.len() * (steps + 1));
        for r in range {
            let (u, jitter) = NoiseStream::new(seed, r).uniforms(0);
            let mut x = sampler.sample(u, jitter);
            out.push(x);
            for k in 0..steps {
                let t = k as f64 * dt;
                let k1 = w.interpolate(t, x);
                let k2 = w.interpolate(t + 0.5 * dt, x + 0.5 * dt * k1);
                let k3 = w.interpolate(t + 0.5 * dt, x + 0.5 * dt * k2);
                let k4 = w.interpolate(t + dt, x + dt * k3);
                x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                out.push(x);
            }
        }
        Ok(out)
    })?;
    Ok(LiftEnsemble { horizon: flow.horizon(), steps, paths: parts.concat() })
}

/// `∫∫|w|² dμ_t dt` on the grid (trapezoid in time), the value
/// [`LiftEnsemble::kinetic`] estimates.
pub fn flow_kinetic(flow: &MeasureFlow, w: &FieldFlow) -> f64 {
    let h = 1.0 / flow.cells() as f64;
    flow.trapezoid_weights()
        .iter()
        .enumerate()
        .map(|(k, tw)| tw * h * w.row(k).iter().zip(flow.density(k)).map(|(v, r)| v * v * r).sum::<f64>())
        .sum()
}

/// Normalisation of the Girsanov relative entropy for noise `√2 dW`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GirsanovConstant {
    /// `∫|u|² dt`, without the quarter.
    #[default]
    Paper,
    /// `¼∫|u|² dt`, the value for diffusion coefficient `√2`.
    Standard,
}

impl GirsanovConstant {
    pub fn factor(self) -> f64 {
        match self {
            GirsanovConstant::Paper => 1.0,
            GirsanovConstant::Standard => 0.25,
        }
    }
}

fn check_ensembles(ensembles: &[ParticleEnsemble]) -> Result<()> {
    let first = ensembles.first().ok_or_else(|| Error::InvalidArgument("no ensembles".into()))?;
    if ensembles.iter().any(|e| e.steps() != first.steps() || e.particles() != first.particles()) {
        return Err(Error::ShapeMismatch("ensembles differ in size".into()));
    }
    Ok(())
}

/// Per-particle relative entropy of the controlled path law to Wiener
/// measure started at `μ₀`: `Σ_{k<K}|u^i_k|²Δt` averaged over particles,
/// one sample per replica.
pub fn kl_path_to_wiener(ensembles: &[ParticleEnsemble], constant: GirsanovConstant) -> Result<Estimate> {
    check_ensembles(ensembles)?;
    let c = constant.factor();
    let samples: Vec<f64> = ensembles
        .iter()
        .map(|e| {
            let dt = e.dt();
            let s: f64 = (0..e.steps()).map(|k| e.drifts(k).iter().map(|u| u * u).sum::<f64>()).sum();
            c * s * dt / e.particles() as f64
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// Bound on the relative entropy of the `k`-particle path marginal to its
/// mean-field limit, for ensembles simulated under the tensorized limit
/// control `a_inf`: `k Σ_{k<K} |k_b⋆ι^N − k_b⋆μ^∞|²(X^i) Δt`, averaged over
/// particles, one sample per replica.
pub fn kl_chaos_bound(
    ensembles: &[ParticleEnsemble],
    a_inf: &FieldFlow,
    mf_flow: &MeasureFlow,
    kernel: &crate::series::TrigSeries,
    k: usize,
    constant: GirsanovConstant,
) -> Result<Estimate> {
    check_ensembles(ensembles)?;
    if k == 0 || k > ensembles[0].particles() {
        return Err(Error::InvalidArgument(format!("marginal size {k} outside 1..={}", ensembles[0].particles())));
    }
    let steps = ensembles[0].steps();
    let horizon = ensembles[0].horizon();
    if (mf_flow.horizon() - horizon).abs() > 1e-12 * horizon {
        return Err(Error::ShapeMismatch("mean-field flow and ensembles on different horizons".into()));
    }
    for e in ensembles {
        for step in [0, steps / 2, steps] {
            let t = step as f64 * e.dt();
            for (x, a) in e.positions(step).iter().zip(e.controls(step)) {
                if (a_inf.interpolate(t, *x) - a).abs() > 1e-9 * (1.0 + a.abs()) {
                    return Err(Error::InvalidArgument("ensemble was not simulated under the given limit control".into()));
                }
            }
        }
    }
    if kernel.is_zero() {
        return Ok(Estimate::from_samples(&vec![0.0; ensembles.len()]));
    }
    let modes = kernel.modes();
    let dt = horizon / steps as f64;
    let limits: Vec<FourierMoments> = (0..steps).map(|s| mf_flow.measure_at(s as f64 * dt).moments(modes)).collect();
    let scale = k as f64 * constant.factor() * dt;
    let samples: Vec<f64> = ensembles
        .iter()
        .map(|e| {
            let mut acc = 0.0;
            for (s, limit) in limits.iter().enumerate() {
                let pos = e.positions(s);
                let emp = FourierMoments::of_points(pos, modes);
                for &x in pos {
                    let d = kernel.convolve(&emp, x) - kernel.convolve(limit, x);
                    acc += d * d;
                }
            }
            scale * acc / e.particles() as f64
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// Total-variation bound `√(KL/2)`.
pub fn tv_upper_bound(kl: f64) -> Result<f64> {
    if !(kl >= 0.0) {
        return Err(Error::InvalidArgument(format!("relative entropy must be non-negative, got {kl}")));
    }
    Ok((kl / 2.0).sqrt())
}

/// [`tv_upper_bound`] capped at 1 (total variation never exceeds 1), with a
/// flag telling whether the cap applied.
pub fn tv_report(kl: f64) -> Result<(f64, bool)> {
    let tv = tv_upper_bound(kl)?;
    Ok(if tv > 1.0 { (1.0, true) } else { (tv, false) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{control_to_velocity, heat_flow, solve_fokker_planck};
    use crate::measure::{bin_empirical, wasserstein_circle, GridMeasure, Order};
    use crate::model::{InteractionField, ProblemSpec, RunningCost, TerminalCost};
    use crate::particles::{replica_seed, simulate};
    use crate::series::TrigSeries;
    use std::f64::consts::TAU;

    #[test]
    fn constant_velocity_translates_every_path() {
        let m = 32;
        let mu = GridMeasure::von_mises(m, 0.0, 1.0).unwrap();
        let steps = 20;
        let t = 0.5;
        // one cell per step
        let c = steps as f64 / (m as f64 * t);
        let measures: Vec<_> = (0..=steps).map(|k| mu.shifted(k)).collect();
        let flow = MeasureFlow::from_measures(t, &measures).unwrap();
        let w = FieldFlow::from_fn(FieldKind::Velocity, t, m, steps, |_, _| c).unwrap();
        let lifted = lift(&flow, &w, 50, 1).unwrap();
        for r in 0..50 {
            let p = lifted.path(r);
            assert!((p[steps] - p[0] - c * t).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_rejects_non_transporting_velocity() {
        let mu0 = GridMeasure::von_mises(64, 0.0, 1.0).unwrap();
        let flow = heat_flow(&mu0, 0.1, 20);
        let w = FieldFlow::from_fn(FieldKind::Velocity, 0.1, 64, 20, |_, x| (TAU * x).sin()).unwrap();
        assert!(lift(&flow, &w, 10, 0).is_err());
    }

    #[test]
    fn lifted_kinetic_energy_matches_grid() {
        let m = 128;
        let spec = ProblemSpec::free(GridMeasure::von_mises(m, 0.2, 1.5).unwrap(), 0.1).unwrap();
        let control = FieldFlow::from_fn(FieldKind::Control, 0.1, m, 100, |t, x| (TAU * x).cos() * (1.0 + t)).unwrap();
        let flow = solve_fokker_planck(&spec, &control).unwrap();
        let w = control_to_velocity(&flow, &control, &spec).unwrap();
        let lifted = lift(&flow, &w, 20_000, 3).unwrap();
        let kin = lifted.kinetic();
        let grid = flow_kinetic(&flow, &w);
        assert!((kin.mean / grid - 1.0).abs() < 0.02, "{} vs {grid}", kin.mean);
        let d = wasserstein_circle(&bin_empirical(&lifted.marginal(100).unwrap(), m).unwrap(), &flow.measure(100), Order::W1);
        assert!(d < 0.01, "{d}");
    }

    #[test]
    fn wiener_divergence_of_constant_drift() {
        let spec = ProblemSpec::free(GridMeasure::uniform(16), 0.4).unwrap();
        let c = FieldFlow::from_fn(FieldKind::Control, 0.4, 16, 20, |_, _| 0.5).unwrap();
        let ens: Vec<_> = (0..3).map(|r| simulate(&spec, &c, 10, r).unwrap()).collect();
        let kl = kl_path_to_wiener(&ens, GirsanovConstant::Paper).unwrap();
        assert!((kl.mean - 0.25 * 0.4).abs() < 1e-12);
        assert!(kl.stderr < 1e-15);
        let quarter = kl_path_to_wiener(&ens, GirsanovConstant::Standard).unwrap();
        assert!((quarter.mean - 0.25 * kl.mean).abs() < 1e-15);
        let zero = FieldFlow::zeros(FieldKind::Control, 0.4, 16, 20);
        let ens: Vec<_> = (0..3).map(|r| simulate(&spec, &zero, 10, r).unwrap()).collect();
        assert_eq!(kl_path_to_wiener(&ens, GirsanovConstant::Paper).unwrap().mean, 0.0);
    }

    fn chaos_setup(kernel: TrigSeries) -> (ProblemSpec, FieldFlow, MeasureFlow) {
        let m = 64;
        let spec = ProblemSpec::finite_horizon(
            InteractionField::new(TrigSeries::sine(1, 0.3), kernel),
            RunningCost::default(),
            TerminalCost::None,
            GridMeasure::von_mises(m, 0.3, 1.5).unwrap(),
            0.2,
        )
        .unwrap();
        let a = FieldFlow::from_fn(FieldKind::Control, 0.2, m, 80, |_, x| 0.5 * (TAU * x).cos()).unwrap();
        let flow = solve_fokker_planck(&spec, &a).unwrap();
        (spec, a, flow)
    }

    #[test]
    fn chaos_bound_vanishes_without_interaction() {
        let (spec, a, flow) = chaos_setup(TrigSeries::zero());
        let ens: Vec<_> = (0..4).map(|r| simulate(&spec, &a, 8, replica_seed(1, r)).unwrap()).collect();
        let b = kl_chaos_bound(&ens, &a, &flow, &spec.drift.kernel, 1, GirsanovConstant::Paper).unwrap();
        assert_eq!(b.mean, 0.0);
    }

    #[test]
    fn chaos_bound_is_linear_in_marginal_size_and_shrinks_with_n() {
        let (spec, a, flow) = chaos_setup(TrigSeries::sine(1, 1.0));
        let run = |n: usize| -> Vec<ParticleEnsemble> { (0..100).map(|r| simulate(&spec, &a, n, replica_seed(2, r)).unwrap()).collect() };
        let small = run(16);
        let one = kl_chaos_bound(&small, &a, &flow, &spec.drift.kernel, 1, GirsanovConstant::Paper).unwrap();
        let two = kl_chaos_bound(&small, &a, &flow, &spec.drift.kernel, 2, GirsanovConstant::Paper).unwrap();
        assert!((two.mean - 2.0 * one.mean).abs() <= 1e-15 * two.mean);
        let large = kl_chaos_bound(&run(64), &a, &flow, &spec.drift.kernel, 1, GirsanovConstant::Paper).unwrap();
        let ratio = one.mean / large.mean;
        assert!((2.5..=6.0).contains(&ratio), "ratio {ratio}");
        assert!(one.separation(&large) > 3.0);
    }

    #[test]
    fn chaos_bound_checks_the_control() {
        let (spec, a, flow) = chaos_setup(TrigSeries::sine(1, 1.0));
        let ens = vec![simulate(&spec, &a, 4, 0).unwrap()];
        let other = FieldFlow::zeros(FieldKind::Control, 0.2, 64, 80);
        assert!(kl_chaos_bound(&ens, &other, &flow, &spec.drift.kernel, 1, GirsanovConstant::Paper).is_err());
    }

    #[test]
    fn total_variation_bounds() {
        assert_eq!(tv_upper_bound(0.0).unwrap(), 0.0);
        assert_eq!(tv_upper_bound(0.5).unwrap(), 0.5);
        assert_eq!(tv_upper_bound(2.0).unwrap(), 1.0);
        assert_eq!(tv_report(8.0).unwrap(), (1.0, true));
        assert!(tv_upper_bound(-1e-3).is_err());
    }

    #[test]
    fn lift_velocities_reconstruct_the_field() {
        let m = 64;
        let spec = ProblemSpec::free(GridMeasure::von_mises(m, 0.2, 1.0).unwrap(), 0.1).unwrap();
        let control = FieldFlow::from_fn(FieldKind::Control, 0.1, m, 50, |t, x| (TAU * x).sin() * (1.0 - t)).unwrap();
        let flow = solve_fokker_planck(&spec, &control).unwrap();
        let w = control_to_velocity(&flow, &control, &spec).unwrap();
        let lifted = lift(&flow, &w, 100_000, 4).unwrap();
        let rec = lifted.conditional_velocity(m).unwrap();
        let diff = FieldFlow::new(FieldKind::Velocity, 0.1, m, rec.values().iter().zip(w.values()).map(|(a, b)| a - b).collect()).unwrap();
        let rel = (flow_kinetic(&flow, &diff) / flow_kinetic(&flow, &w)).sqrt();
        assert!(rel < 0.05, "relative error {rel}");
    }
}
