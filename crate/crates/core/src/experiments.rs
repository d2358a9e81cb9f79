//! Finite-`N` sweeps: value gap, Wasserstein marginals and path-space KL.
//!
//! Every sweep simulates replica `r` with seed `replica_seed(seed, r)` for
//! each `N` and reduces the ensemble to a few numbers inside the parallel
//! map, so memory stays at one ensemble per worker and results do not
//! depend on the worker count.

use serde::Serialize;

use crate::dynamics::FieldFlow;
use crate::error::{Error, Result};
use crate::measure::{wasserstein_circle, MeasureFlow, Order};
use crate::model::ProblemSpec;
use crate::parallel::{map_indexed, Estimate};
use crate::particles::{ensemble_cost, replica_seed, simulate, ParticleEnsemble};
use crate::pathlaw::{kl_chaos_bound, kl_path_to_wiener, tv_report, GirsanovConstant};
use crate::series::FourierMoments;

pub fn check_n_list(n_list: &[usize]) -> Result<()> {
    if n_list.is_empty() {
        return Err(Error::InvalidArgument("particle count list is empty".into()));
    }
    if n_list.contains(&0) {
        return Err(Error::InvalidArgument("particle counts must be positive".into()));
    }
    Ok(())
}

fn check_replicas(replicas: usize) -> Result<()> {
    if replicas == 0 {
        return Err(Error::InvalidArgument("need at least one replica".into()));
    }
    Ok(())
}

/// Time steps for sampled times given as fractions of the horizon.
pub fn time_steps(fractions: &[f64], steps: usize) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("no sampled times".into()));
    }
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("sampled time {f} is not a fraction of the horizon in [0, 1]")));
        }
        let k = (f * steps as f64).round() as usize;
        if out.contains(&k) {
            return Err(Error::InvalidArgument(format!("sampled time {f} duplicates an earlier time (step {k})")));
        }
        out.push(k);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConvergeRow {
    pub n: usize,
    pub cost: Estimate,
    pub theta: f64,
    /// `|cost_N − Θ|`; its standard error is that of `cost`.
    pub gap: f64,
}

/// Cost of the `N`-particle system under the tensorized limit control.
pub fn converge_sweep(
    spec: &ProblemSpec,
    control: &FieldFlow,
    theta: f64,
    n_list: &[usize],
    replicas: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<Vec<ConvergeRow>> {
    check_n_list(n_list)?;
    check_replicas(replicas)?;
    n_list
        .iter()
        .map(|&n| {
            let costs = map_indexed(replicas, workers, |r| Ok(ensemble_cost(spec, &simulate(spec, control, n, replica_seed(seed, r))?)))?;
            let cost = Estimate::from_samples(&costs);
            Ok(ConvergeRow { n, cost, theta, gap: (cost.mean - theta).abs() })
        })
        .collect()
}

/// Per-replica trace at the sampled times.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaTrace {
    /// `W₁(ι^N_t, μ^∞_t)`.
    pub w1: Vec<f64>,
    /// `(1/N)Σᵢ(|a^i_t|²/2 + 𝒱(X^i_t, ι^N_t))`.
    pub running: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ChaosResult {
    pub n: usize,
    /// Sampled times (absolute).
    pub times: Vec<f64>,
    pub w1: Vec<Estimate>,
    /// Replica mean of `sup_t W₁`.
    pub sup_w1: Estimate,
    pub replicas: Vec<ReplicaTrace>,
}

fn replica_trace(spec: &ProblemSpec, flow: &MeasureFlow, ens: &ParticleEnsemble, steps: &[usize]) -> ReplicaTrace {
    let modes = spec.modes();
    let mut trace = ReplicaTrace { w1: Vec::with_capacity(steps.len()), running: Vec::with_capacity(steps.len()) };
    for &k in steps {
        let t = k as f64 * ens.dt();
        let emp = ens.empirical(k);
        trace.w1.push(wasserstein_circle(&emp, &flow.measure_at(t), Order::W1));
        let pos = ens.positions(k);
        let moments = FourierMoments::of_points(pos, modes);
        let sum: f64 = pos.iter().zip(ens.controls(k)).map(|(&x, a)| 0.5 * a * a + spec.running.eval_with(x, &moments)).sum();
        trace.running.push(sum / pos.len() as f64);
    }
    trace
}

/// Wasserstein distance of the empirical marginal to the mean-field flow at
/// the sampled `times` (fractions of the horizon), for each `N`.
#[allow(clippy::too_many_arguments)]
pub fn chaos_sweep(
    spec: &ProblemSpec,
    control: &FieldFlow,
    flow: &MeasureFlow,
    n_list: &[usize],
    times: &[f64],
    replicas: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<Vec<ChaosResult>> {
    check_n_list(n_list)?;
    check_replicas(replicas)?;
    let steps = time_steps(times, control.steps())?;
    n_list
        .iter()
        .map(|&n| {
            let traces = map_indexed(replicas, workers, |r| {
                let ens = simulate(spec, control, n, replica_seed(seed, r))?;
                Ok(replica_trace(spec, flow, &ens, &steps))
            })?;
            let w1 = (0..steps.len())
                .map(|i| Estimate::from_samples(&traces.iter().map(|t| t.w1[i]).collect::<Vec<_>>()))
                .collect();
            let sups: Vec<f64> = traces.iter().map(|t| t.w1.iter().copied().fold(0.0, f64::max)).collect();
            Ok(ChaosResult {
                n,
                times: steps.iter().map(|&k| k as f64 * control.dt()).collect(),
                w1,
                sup_w1: Estimate::from_samples(&sups),
                replicas: traces,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct KlRow {
    pub n: usize,
    pub k: usize,
    /// Bound on `KL(ℙ^{(N|k)} | ℙ^{(∞|k)})`.
    pub kl_bound: Estimate,
    /// Per-particle relative entropy to Wiener measure.
    pub kl_to_wiener: Estimate,
    /// Total-variation bound from `kl_bound`, capped at 1.
    pub tv_bound: f64,
}

/// Path-space relative entropy bounds for the first `k` particles.
#[allow(clippy::too_many_arguments)]
pub fn kl_sweep(
    spec: &ProblemSpec,
    control: &FieldFlow,
    flow: &MeasureFlow,
    n_list: &[usize],
    k: usize,
    replicas: usize,
    seed: u64,
    constant: GirsanovConstant,
    workers: Option<usize>,
) -> Result<Vec<KlRow>> {
    check_n_list(n_list)?;
    check_replicas(replicas)?;
    if k == 0 {
        return Err(Error::InvalidArgument("marginal size k must be at least 1".into()));
    }
    if let Some(n) = n_list.iter().find(|&&n| n < k) {
        return Err(Error::InvalidArgument(format!("marginal size {k} exceeds particle count {n}")));
    }
    n_list
        .iter()
        .map(|&n| {
            let pairs = map_indexed(replicas, workers, |r| {
                let ens = [simulate(spec, control, n, replica_seed(seed, r))?];
                let chaos = kl_chaos_bound(&ens, control, flow, &spec.drift.kernel, k, constant)?;
                let wiener = kl_path_to_wiener(&ens, constant)?;
                Ok((chaos.mean, wiener.mean))
            })?;
            let kl_bound = Estimate::from_samples(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let kl_to_wiener = Estimate::from_samples(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            Ok(KlRow { n, k, kl_bound, kl_to_wiener, tv_bound: tv_report(kl_bound.mean)?.0 })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{heat_flow_control, solve_fokker_planck};
    use crate::energy::eval_cost;
    use crate::measure::GridMeasure;
    use crate::model::{InteractionField, RunningCost, TerminalCost};
    use crate::series::TrigSeries;

    fn external() -> ProblemSpec {
        let mu0 = GridMeasure::von_mises(32, 0.3, 1.0).unwrap();
        ProblemSpec::finite_horizon(
            InteractionField::default(),
            RunningCost::external_only(TrigSeries::cosine(1, 0.5)),
            TerminalCost::None,
            mu0,
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn sampled_times_are_validated() {
        assert_eq!(time_steps(&[0.0, 0.5, 1.0], 40).unwrap(), [0, 20, 40]);
        assert!(time_steps(&[0.5, 0.5], 40).is_err());
        assert!(time_steps(&[0.5, 0.501], 40).is_err());
        assert!(time_steps(&[1.5], 40).is_err());
        assert!(time_steps(&[], 40).is_err());
    }

    #[test]
    fn single_particle_gap_is_monte_carlo_error() {
        let spec = external();
        let (a, _) = heat_flow_control(&spec, 40);
        let theta = eval_cost(&spec, &a).unwrap();
        let rows = converge_sweep(&spec, &a, theta, &[1], 400, 3, None).unwrap();
        assert!(rows[0].gap < 3.5 * rows[0].cost.stderr + 1e-3, "{rows:?}");
        assert!(converge_sweep(&spec, &a, theta, &[], 4, 3, None).is_err());
    }

    #[test]
    fn chaos_w1_shrinks_with_n() {
        let spec = external();
        let (a, _) = heat_flow_control(&spec, 40);
        let flow = solve_fokker_planck(&spec, &a).unwrap();
        let res = chaos_sweep(&spec, &a, &flow, &[8, 128], &[0.0, 1.0], 40, 11, None).unwrap();
        for i in 0..2 {
            assert!(res[1].w1[i].mean < res[0].w1[i].mean);
        }
        assert!(res[1].sup_w1.mean < res[0].sup_w1.mean);
        assert_eq!(res[0].replicas.len(), 40);
    }

    #[test]
    fn kl_is_zero_without_interaction_and_rejects_k_zero() {
        let spec = external();
        let a = FieldFlow::from_fn(crate::dynamics::FieldKind::Control, 0.2, 32, 40, |_, _| 0.5).unwrap();
        let flow = solve_fokker_planck(&spec, &a).unwrap();
        let rows = kl_sweep(&spec, &a, &flow, &[4, 16], 1, 8, 5, GirsanovConstant::Paper, None).unwrap();
        assert!(rows.iter().all(|r| r.kl_bound.mean == 0.0 && r.tv_bound == 0.0));
        // Σ|u|²Δt = 0.25·0.2 per particle
        assert!(rows.iter().all(|r| (r.kl_to_wiener.mean - 0.05).abs() < 1e-12));
        assert!(kl_sweep(&spec, &a, &flow, &[4], 0, 8, 5, GirsanovConstant::Paper, None).is_err());
        assert!(kl_sweep(&spec, &a, &flow, &[4], 5, 8, 5, GirsanovConstant::Paper, None).is_err());
    }

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [8.0, 64.0, 512.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(-0.5))).collect();
        assert!((log_log_slope(&pts) + 0.5).abs() < 1e-12);
    }
}
