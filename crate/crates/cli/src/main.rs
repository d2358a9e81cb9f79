//! `mfc`: solves, particle sweeps and path lifts driven by a JSON config.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 the mean-field (or
//! pair) solver hit its iteration budget. Results are written in every case
//! except 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mfc_core::config::{load, LoadedConfig};
use mfc_core::dynamics::control_to_velocity;
use mfc_core::energy::eval_energy;
use mfc_core::experiments::{chaos_sweep, converge_sweep, kl_sweep, time_steps};
use mfc_core::io::{num, write_csv, write_field_flow, write_json, write_measure_flow, OutputDir};
use mfc_core::measure::{bin_empirical, wasserstein_circle, Order};
use mfc_core::pathlaw::{flow_kinetic, lift};
use mfc_core::solver::{solve_mean_field, solve_pair_direct, SolveError, SolveResult};
use mfc_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mfc", version, about = "Mean-field control solver and particle diagnostics on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Minimise the mean-field cost and write control, velocity and density.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Solve the two-particle problem on the product grid instead.
        #[arg(long)]
        pair: bool,
    },
    /// Cost of the N-particle system under the tensorized optimal control.
    Converge {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
    },
    /// Wasserstein distance of empirical marginals to the mean-field flow.
    Chaos {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
        /// Sampled times as fractions of the horizon.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        times: Vec<f64>,
    },
    /// Path-space relative entropy bounds for k-particle marginals.
    Kl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
        /// Marginal size.
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Lift the optimal flow to deterministic paths and check their marginals.
    Lift {
        #[command(flatten)]
        common: Common,
        /// Number of paths.
        #[arg(long, default_value_t = 100_000)]
        replicas: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        times: Vec<f64>,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Sweep {
    /// Particle counts.
    #[arg(long = "n", value_delimiter = ',', default_value = "8,32,128")]
    n_list: Vec<usize>,
    /// Replicas per particle count (default from the config).
    #[arg(long)]
    replicas: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: solver did not converge; best iterate written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<bool> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match command {
        Command::Solve { common, pair } => {
            let cfg = load(&common.config)?;
            let mut out = OutputDir::create(&common.out)?;
            let converged = if pair { write_pair_solve(&cfg, &mut out)? } else { write_solve(&cfg, &mut out)?.1 };
            finish(out, &cfg, &common, args)?;
            Ok(converged)
        }
        Command::Converge { common, sweep } => {
            let cfg = load(&common.config)?;
            let mut out = OutputDir::create(&common.out)?;
            let (mf, converged) = write_solve(&cfg, &mut out)?;
            let replicas = sweep.replicas.unwrap_or(cfg.config.particles.replicas);
            let rows = converge_sweep(&cfg.spec, &mf.control, mf.theta, &sweep.n_list, replicas, common.seed, None)?;
            write_csv(
                &out.file("converge.csv")?,
                &["N", "cost_N", "stderr", "theta", "gap"],
                rows.iter().map(|r| vec![r.n.to_string(), num(r.cost.mean), num(r.cost.stderr), num(r.theta), num(r.gap)]),
            )?;
            finish(out, &cfg, &common, args)?;
            Ok(converged)
        }
        Command::Chaos { common, sweep, times } => {
            let cfg = load(&common.config)?;
            time_steps(&times, cfg.config.grid.steps)?;
            let mut out = OutputDir::create(&common.out)?;
            let (mf, converged) = write_solve(&cfg, &mut out)?;
            let replicas = sweep.replicas.unwrap_or(cfg.config.particles.replicas);
            let results = chaos_sweep(&cfg.spec, &mf.control, &mf.flow, &sweep.n_list, &times, replicas, common.seed, None)?;
            let mut rows = Vec::new();
            for res in &results {
                for (t, w) in res.times.iter().zip(&res.w1) {
                    rows.push(vec![res.n.to_string(), num(*t), num(w.mean), num(w.stderr)]);
                }
            }
            write_csv(&out.file("chaos.csv")?, &["N", "t", "W1", "stderr"], rows)?;
            write_csv(
                &out.file("chaos_sup.csv")?,
                &["N", "sup_W1", "stderr"],
                results.iter().map(|r| vec![r.n.to_string(), num(r.sup_w1.mean), num(r.sup_w1.stderr)]),
            )?;
            for res in &results {
                let mut rows = Vec::new();
                for (r, trace) in res.replicas.iter().enumerate() {
                    for (i, t) in res.times.iter().enumerate() {
                        rows.push(vec![r.to_string(), num(*t), num(trace.w1[i]), num(trace.running[i])]);
                    }
                }
                let name = format!("chaos_summary_N{}.csv", res.n);
                write_csv(&out.file(&name)?, &["replica", "t", "W1_to_mf", "running_cost"], rows)?;
            }
            finish(out, &cfg, &common, args)?;
            Ok(converged)
        }
        Command::Kl { common, sweep, k } => {
            let cfg = load(&common.config)?;
            if k == 0 {
                return Err(Error::InvalidArgument("--k must be at least 1".into()));
            }
            let mut out = OutputDir::create(&common.out)?;
            let (mf, converged) = write_solve(&cfg, &mut out)?;
            let replicas = sweep.replicas.unwrap_or(cfg.config.particles.replicas);
            let constant = cfg.config.particles.girsanov_constant;
            let rows = kl_sweep(&cfg.spec, &mf.control, &mf.flow, &sweep.n_list, k, replicas, common.seed, constant, None)?;
            write_csv(
                &out.file("kl.csv")?,
                &["N", "k", "kl_bound", "kl_to_wiener_per_particle", "tv_bound", "stderr"],
                rows.iter().map(|r| {
                    vec![r.n.to_string(), r.k.to_string(), num(r.kl_bound.mean), num(r.kl_to_wiener.mean), num(r.tv_bound), num(r.kl_bound.stderr)]
                }),
            )?;
            finish(out, &cfg, &common, args)?;
            Ok(converged)
        }
        Command::Lift { common, replicas, times } => {
            let cfg = load(&common.config)?;
            let steps = time_steps(&times, cfg.config.grid.steps)?;
            let mut out = OutputDir::create(&common.out)?;
            let (mf, converged) = write_solve(&cfg, &mut out)?;
            let w = control_to_velocity(&mf.flow, &mf.control, &cfg.spec)?;
            let paths = lift(&mf.flow, &w, replicas, common.seed)?;
            let cells = cfg.spec.cells();
            let mut rows = Vec::new();
            for k in steps {
                let binned = bin_empirical(&paths.marginal(k)?, cells)?;
                rows.push(vec![num(k as f64 * mf.flow.dt()), num(wasserstein_circle(&binned, &mf.flow.measure(k), Order::W1))]);
            }
            write_csv(&out.file("lift.csv")?, &["t", "W1"], rows)?;
            let kin = paths.kinetic();
            let grid = flow_kinetic(&mf.flow, &w);
            write_csv(
                &out.file("lift_kinetic.csv")?,
                &["kinetic_paths", "stderr", "kinetic_grid", "relative_error"],
                [vec![num(kin.mean), num(kin.stderr), num(grid), num((kin.mean - grid).abs() / grid.abs().max(f64::MIN_POSITIVE))]],
            )?;
            finish(out, &cfg, &common, args)?;
            Ok(converged)
        }
    }
}

fn finish(out: OutputDir, cfg: &LoadedConfig, common: &Common, command: Vec<String>) -> Result<()> {
    let grid = (cfg.config.grid.cells, cfg.config.grid.steps);
    out.finish(&cfg.spec_hash, common.seed, grid, command)?;
    Ok(())
}

/// Mean-field solve plus its files; the flag tells whether it converged.
fn write_solve(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(SolveResult, bool)> {
    let (res, converged) = match solve_mean_field(&cfg.spec, &cfg.config.solve_options()) {
        Ok(r) => (r, true),
        Err(SolveError::NotConverged(r)) => (*r, false),
        Err(SolveError::Failed(e)) => return Err(e),
    };
    let w = control_to_velocity(&res.flow, &res.control, &cfg.spec)?;
    let energy = eval_energy(&cfg.spec, &res.flow, &w)?;
    write_field_flow(&out.file("control.csv")?, &res.control)?;
    write_field_flow(&out.file("velocity.csv")?, &w)?;
    write_measure_flow(&out.file("density.csv")?, &res.flow)?;
    let meta = json!({
        "theta": res.theta,
        "iterations": res.iterations,
        "grad_norm": res.grad_norm,
        "converged": converged,
        "terminal_kl": res.terminal_kl,
        "stage_terminal_kl": res.stage_terminal_kl,
        "energy": energy,
        "opts": cfg.config.solve_options(),
        "spec_hash": cfg.spec_hash,
    });
    write_json(&out.file("solve.json")?, &meta)?;
    Ok((res, converged))
}

fn write_pair_solve(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<bool> {
    let (res, converged) = match solve_pair_direct(&cfg.spec, &cfg.config.solve_options()) {
        Ok(r) => (r, true),
        Err(SolveError::NotConverged(r)) => (*r, false),
        Err(SolveError::Failed(e)) => return Err(e),
    };
    let m = res.flow.cells();
    let dt = res.flow.dt();
    let h = 1.0 / m as f64;
    let x = |i: usize| num((i as f64 + 0.5) * h);
    let mut control_rows = Vec::new();
    let mut density_rows = Vec::new();
    for k in 0..=res.flow.steps() {
        let t = num(k as f64 * dt);
        let rho = res.flow.density(k);
        for i in 0..m {
            for j in 0..m {
                let p = k * m * m + i * m + j;
                control_rows.push(vec![t.clone(), x(i), x(j), num(res.control.first[p]), num(res.control.second[p])]);
                density_rows.push(vec![t.clone(), x(i), x(j), num(rho[i * m + j])]);
            }
        }
    }
    write_csv(&out.file("pair_control.csv")?, &["t", "x", "y", "first", "second"], control_rows)?;
    write_csv(&out.file("pair_density.csv")?, &["t", "x", "y", "value"], density_rows)?;
    let meta = json!({
        "theta": res.theta,
        "iterations": res.iterations,
        "grad_norm": res.grad_norm,
        "converged": converged,
        "opts": cfg.config.solve_options(),
        "spec_hash": cfg.spec_hash,
    });
    write_json(&out.file("solve.json")?, &meta)?;
    Ok(converged)
}
