//! The runs behind each subcommand. Every run writes its artifacts and a
//! `manifest.json` embedding the resolved configuration.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, MarketPolicyConfig, RunSection, TableSection, ValueSource};
use crate::empirical::{
    density_moments, ensemble_moments, moment_gap, moment_of_density, wasserstein1_1d,
    ParticleEnsemble,
};
use crate::error::{Error, Result};
use crate::finmarket::{
    default_objective, market_limit_terms, simplified_market_spec, simulate_market, MarketOptions,
    MarketPolicy, PortfolioEnsemble,
};
use crate::grid::Grid;
use crate::mfg_pde::{sample_ensemble, solve_mfg_fixed_point, LimitTerms, MFGSolution};
use crate::micro::{
    bellman_backward_reduced, simulate_forward, GradientSource, ReducedValueTable,
    SimulationOptions, TableGrid, Trajectory,
};
use crate::model::functions::scalar;
use crate::model::{classify_regime, ModelSpec, RegimeFlags, ScalarForm, ScalingExponents};
use crate::output::{ensure_dir, num, write_json, Csv};
use crate::rng;

/// Outcome of a run that completed without error. `converged` is false when
/// a fixed-point solve stopped at its iteration limit; the artifacts are
/// still written.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub converged: bool,
    pub manifest: Value,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    /// 0 on success, 3 when a solve did not converge.
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            3
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    rng: &'a str,
    config: &'a ExperimentConfig,
    result: &'a Value,
}

fn finish(
    command: &str,
    cfg: &ExperimentConfig,
    out: &Path,
    result: Value,
    mut files: Vec<PathBuf>,
    converged: bool,
) -> Result<RunReport> {
    let path = out.join("manifest.json");
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        rng: rng::ALGORITHM,
        config: cfg,
        result: &result,
    };
    write_json(&path, &manifest)?;
    files.push(path);
    Ok(RunReport {
        converged,
        manifest: serde_json::to_value(&manifest).expect("manifest is plain data"),
        files,
    })
}

fn write_csv(csv: &Csv, path: PathBuf, files: &mut Vec<PathBuf>) -> Result<()> {
    csv.write(&path)?;
    files.push(path);
    Ok(())
}

/// Regime report for the `scaling` section.
pub fn cmd_classify(cfg: &ExperimentConfig) -> Result<RegimeFlags> {
    Ok(classify_regime(&cfg.scaling()?))
}

fn cross_gain_vanishes(cfg: &ExperimentConfig) -> bool {
    cfg.functions.as_ref().is_none_or(|f| {
        f.cross_gain.as_ref().is_none_or(|c| {
            c.0.iter()
                .all(|s| matches!(s, ScalarForm::Constant { value } if *value == 0.0))
        })
    })
}

struct LimitRun {
    spec: ModelSpec,
    exps: ScalingExponents,
    flags: RegimeFlags,
    terms: LimitTerms,
    grid: Grid,
    solution: MFGSolution,
}

fn solve_limit(cfg: &ExperimentConfig) -> Result<LimitRun> {
    let spec = cfg.model_spec()?;
    let exps = cfg.scaling()?;
    let grid = cfg.grid()?;
    let initial = cfg.initial_density()?;
    initial.validate(spec.dimension())?;
    let g0 = initial.discretize(&grid)?;
    let raw = classify_regime(&exps);
    let terms = LimitTerms::new(&raw, cross_gain_vanishes(cfg), spec.cross_weight());
    let flags = terms.effective_flags(&raw);
    let solution = solve_mfg_fixed_point(&spec, &flags, &grid, &g0, &cfg.solver_config()?)?;
    Ok(LimitRun {
        spec,
        exps,
        flags,
        terms,
        grid,
        solution,
    })
}

fn residual_csv(sol: &MFGSolution) -> Csv {
    let mut csv = Csv::with_header(&["iteration", "h_residual", "g_residual"]);
    for r in &sol.residuals {
        csv.row_with_int(
            r.iteration as u64,
            &[r.h_residual.unwrap_or(f64::NAN), r.g_residual],
        );
    }
    csv
}

fn limit_summary(run: &LimitRun) -> Value {
    let sol = &run.solution;
    json!({
        "converged": sol.converged,
        "iterations": sol.iterations,
        "restarts": sol.restarts,
        "dt": sol.dt(),
        "steps": sol.steps(),
        "boundary_mass": sol.boundary_mass,
        "mass_defect": sol.density.mass_defect(),
        "min_density": sol.density.min_value(),
        "regime": run.flags,
        "limit_terms": run.terms,
        "residuals": sol.residuals,
    })
}

/// Solves the mean-field system and writes `value.csv`, `density.csv` and `residuals.csv`.
pub fn cmd_solve_mfg(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let resolved = cfg.resolved();
    let run = solve_limit(&resolved)?;
    let out = ensure_dir(out)?;
    let mut files = Vec::new();
    write_csv(
        &run.solution.value.to_csv(),
        out.join("value.csv"),
        &mut files,
    )?;
    write_csv(
        &run.solution.density.to_csv(),
        out.join("density.csv"),
        &mut files,
    )?;
    write_csv(
        &residual_csv(&run.solution),
        out.join("residuals.csv"),
        &mut files,
    )?;
    let converged = run.solution.converged;
    finish(
        "solve-mfg",
        &resolved,
        &out,
        limit_summary(&run),
        files,
        converged,
    )
}

fn run_section_resolved(cfg: &mut ExperimentConfig) -> RunSection {
    cfg.run.get_or_insert_with(RunSection::default).clone()
}

fn check_agents(run: &RunSection) -> Result<()> {
    if run.agents.is_empty() {
        return Err(Error::config(
            "run.agents",
            "needs at least one agent count",
        ));
    }
    if let Some(n) = run.agents.iter().find(|&&n| n < 2) {
        return Err(Error::config(
            "run.agents",
            format!("N = {n}; leave-one-out diagnostics need N >= 2"),
        ));
    }
    if run.replicas == 0 {
        return Err(Error::config("run.replicas", "must be >= 1"));
    }
    Ok(())
}

/// Reduced table for `n` agents; without an explicit step the step is shrunk
/// until the Courant bound holds.
fn build_table(
    spec: &ModelSpec,
    exps: &ScalingExponents,
    n: usize,
    domain: (&[f64], &[f64]),
    t: &TableSection,
) -> Result<ReducedValueTable> {
    let grid = TableGrid::new(spec.moment(), domain.0, domain.1, t.x_nodes, t.rho_nodes)
        .map_err(|e| Error::config("run.table", e.to_string()))?;
    let spacing = grid
        .x
        .iter()
        .map(|a| a.spacing())
        .fold(f64::INFINITY, f64::min);
    let mut dtau = t.dtau.unwrap_or((spec.horizon() / 20.0).min(spacing));
    for _ in 0..16 {
        match bellman_backward_reduced(spec, exps, n, &grid, dtau, &t.options()) {
            Err(Error::Cfl { courant, limit, .. }) if t.dtau.is_none() => {
                dtau *= 0.9 * limit / courant
            }
            other => return other,
        }
    }
    bellman_backward_reduced(spec, exps, n, &grid, dtau, &t.options())
}

fn thin(traj: &Trajectory, every: usize) -> Trajectory {
    let last = traj.snapshots.len() - 1;
    let keep: Vec<usize> = (0..=last)
        .filter(|&k| k == 0 || k == last || (every > 0 && k % every == 0))
        .collect();
    Trajectory {
        times: keep.iter().map(|&k| traj.times[k]).collect(),
        snapshots: keep.iter().map(|&k| traj.snapshots[k].clone()).collect(),
        controls: keep
            .iter()
            .filter(|&&k| k < last)
            .map(|&k| traj.controls[k].clone())
            .collect(),
    }
}

/// Samples `N` agents from `g0` for every configured `N` and replica and runs
/// the closed-loop particle system under the mean-field value or the reduced table.
pub fn cmd_simulate_micro(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let mut resolved = cfg.resolved();
    let run_cfg = run_section_resolved(&mut resolved);
    check_agents(&run_cfg)?;
    let limit = solve_limit(&resolved)?;
    let domain = resolved.domain_box()?.clone();
    let out = ensure_dir(out)?;
    let g0 = &limit.solution.density.levels[0];
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for &n in &run_cfg.agents {
        let table = match run_cfg.source {
            ValueSource::Table => Some(build_table(
                &limit.spec,
                &limit.exps,
                n,
                (&domain.lower, &domain.upper),
                &run_cfg.table,
            )?),
            ValueSource::Mfg => None,
        };
        let source: &dyn GradientSource = match &table {
            Some(t) => t,
            None => &limit.solution.value,
        };
        let dt = run_cfg.dt.unwrap_or(0.5 * source.time_step());
        let width = domain
            .upper
            .iter()
            .zip(&domain.lower)
            .map(|(u, l)| u - l)
            .fold(0.0, f64::max);
        let opts = SimulationOptions {
            domain: Some(domain.clone()),
            margin: run_cfg.table.margin * width,
        };
        let dir = ensure_dir(&out.join(format!("N{n}")))?;
        if let Some(t) = &table {
            let (c, j) = t.write(&dir, "table", &[0, t.steps()])?;
            files.extend([c, j]);
        }
        let trajectories: Vec<Result<Trajectory>> = (0..run_cfg.replicas)
            .into_par_iter()
            .map(|r| {
                let ens0 =
                    sample_ensemble(&limit.grid, g0, n, &mut rng::stream(run_cfg.seed, n, r))?;
                simulate_forward(&limit.spec, &limit.exps, source, &ens0, dt, &opts)
            })
            .collect();
        for (r, traj) in trajectories.into_iter().enumerate() {
            let traj = traj?;
            let last = traj.final_ensemble();
            let loo = (0..n)
                .map(|i| moment_gap(limit.spec.moment(), last, i))
                .collect::<Result<Vec<_>>>()?;
            write_csv(
                &thin(&traj, run_cfg.snapshot_every).to_csv(),
                dir.join(format!("trajectory_r{r}.csv")),
                &mut files,
            )?;
            write_csv(
                &last.to_csv(),
                dir.join(format!("final_r{r}.csv")),
                &mut files,
            )?;
            runs.push(json!({
                "agents": n,
                "replica": r,
                "steps": traj.controls.len(),
                "dt": traj.times[1] - traj.times[0],
                "final_moment": crate::empirical::empirical_moment(limit.spec.moment(), last),
                "max_loo_gap": loo.iter().copied().fold(0.0, f64::max),
            }));
        }
    }
    let converged = limit.solution.converged;
    let result = json!({ "limit": limit_summary(&limit), "source": run_cfg.source, "runs": runs });
    finish("simulate-micro", &resolved, &out, result, files, converged)
}

struct ConvergeRow {
    agents: usize,
    replica: usize,
    w1: f64,
    loo_gap: f64,
    gaps: Vec<f64>,
}

/// For each `N`: terminal `W1` distance to `g(T)`, largest leave-one-out
/// moment shift and the gaps between empirical and limit moments.
pub fn cmd_converge(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let mut resolved = cfg.resolved();
    let run_cfg = run_section_resolved(&mut resolved);
    check_agents(&run_cfg)?;
    let spec_dim = resolved.model_spec()?.dimension();
    if spec_dim != 1 {
        return Err(Error::config(
            "functions.dimension",
            "the convergence study needs a one-dimensional state",
        ));
    }
    let limit = solve_limit(&resolved)?;
    let domain = resolved.domain_box()?.clone();
    let out = ensure_dir(out)?;
    let sol = &limit.solution;
    let g_final = sol.density.final_level();
    let limit_moments = density_moments(&limit.grid, g_final, run_cfg.moment_order);
    let dt = run_cfg.dt.unwrap_or(0.5 * sol.value.dt);
    let opts = SimulationOptions {
        domain: Some(domain.clone()),
        margin: run_cfg.table.margin * (domain.upper[0] - domain.lower[0]),
    };
    let jobs: Vec<(usize, usize)> = run_cfg
        .agents
        .iter()
        .flat_map(|&n| (0..run_cfg.replicas).map(move |r| (n, r)))
        .collect();
    let results: Vec<Result<(ConvergeRow, ParticleEnsemble)>> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let ens0 = sample_ensemble(
                &limit.grid,
                &sol.density.levels[0],
                n,
                &mut rng::stream(run_cfg.seed, n, r),
            )?;
            let traj = simulate_forward(&limit.spec, &limit.exps, &sol.value, &ens0, dt, &opts)?;
            let last = traj.final_ensemble().clone();
            let w1 = wasserstein1_1d(&last.coordinate(0), &limit.grid, g_final)?;
            let loo_gap = (0..n)
                .map(|i| moment_gap(limit.spec.moment(), &last, i))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            let gaps = ensemble_moments(&last, run_cfg.moment_order)
                .iter()
                .zip(&limit_moments)
                .map(|((_, a), (_, b))| (a - b).abs())
                .collect();
            Ok((
                ConvergeRow {
                    agents: n,
                    replica: r,
                    w1,
                    loo_gap,
                    gaps,
                },
                last,
            ))
        })
        .collect();

    let orders: Vec<String> = limit_moments
        .iter()
        .map(|(idx, _)| {
            format!(
                "gap_m{}",
                idx.iter()
                    .map(|j| j.to_string())
                    .collect::<Vec<_>>()
                    .join("_")
            )
        })
        .collect();
    let mut header = vec![
        "N".to_string(),
        "replica".into(),
        "w1".into(),
        "loo_gap".into(),
    ];
    header.extend(orders.iter().cloned());
    let mut per_run = Csv::with_header(&header);
    let mut files = Vec::new();
    let mut rows = Vec::with_capacity(results.len());
    for res in results {
        let (row, last) = res?;
        let dir = ensure_dir(&out.join(format!("N{}", row.agents)))?;
        write_csv(
            &last.to_csv(),
            dir.join(format!("final_r{}.csv", row.replica)),
            &mut files,
        )?;
        let mut fields = vec![
            row.agents.to_string(),
            row.replica.to_string(),
            num(row.w1),
            num(row.loo_gap),
        ];
        fields.extend(row.gaps.iter().map(|g| num(*g)));
        per_run.fields(&fields);
        rows.push(row);
    }
    let mut summary_header = vec!["N".to_string(), "w1".into(), "loo_gap".into()];
    summary_header.extend(orders.iter().cloned());
    let mut summary = Csv::with_header(&summary_header);
    let mut table = Vec::new();
    for &n in &run_cfg.agents {
        let group: Vec<&ConvergeRow> = rows.iter().filter(|r| r.agents == n).collect();
        let m = group.len() as f64;
        let w1 = group.iter().map(|r| r.w1).sum::<f64>() / m;
        let loo = group.iter().map(|r| r.loo_gap).sum::<f64>() / m;
        let gaps: Vec<f64> = (0..orders.len())
            .map(|k| group.iter().map(|r| r.gaps[k]).sum::<f64>() / m)
            .collect();
        let mut values = vec![w1, loo];
        values.extend(&gaps);
        summary.row_with_int(n as u64, &values);
        table.push(json!({ "N": n, "w1": w1, "loo_gap": loo, "moment_gaps": gaps }));
    }
    write_csv(&summary, out.join("converge.csv"), &mut files)?;
    write_csv(&per_run, out.join("converge_runs.csv"), &mut files)?;
    let result = json!({
        "limit": limit_summary(&limit),
        "grid_spacing": limit.grid.axis(0).dx(),
        "particle_dt": dt,
        "moments": orders,
        "table": table,
    });
    let converged = sol.converged;
    finish("converge", &resolved, &out, result, files, converged)
}

/// Market simulation, optionally next to the risky-book mean-field limit.
pub fn cmd_finmarket(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let mut resolved = cfg.resolved();
    let run_cfg = run_section_resolved(&mut resolved);
    let m = resolved.market_section()?.clone();
    let params = m.params();
    params.validate()?;
    if m.agents == 0 {
        return Err(Error::config("market.agents", "must be >= 1"));
    }
    let grid = m.grid()?;
    for (name, d) in [
        ("market.initial_risky", &m.initial_risky),
        ("market.initial_riskless", &m.initial_riskless),
    ] {
        d.validate(1)
            .map_err(|e| Error::config(name, e.to_string()))?;
    }
    let gx = m.initial_risky.discretize(&grid)?;
    let gy = m.initial_riskless.discretize(&grid)?;
    let n = m.agents;
    let x = sample_ensemble(&grid, &gx, n, &mut rng::stream(run_cfg.seed, n, 0))?;
    let y = sample_ensemble(&grid, &gy, n, &mut rng::stream(run_cfg.seed, n, 1))?;
    let ens0 = PortfolioEnsemble::new(x.coordinate(0), y.coordinate(0), 0.0)?;

    let needs_limit = m.limit || m.policy == MarketPolicyConfig::Mfg;
    let limit = if needs_limit {
        let objective = match &m.objective {
            Some(form) => {
                form.validate(1, "market.objective")?;
                scalar(form.clone())
            }
            None => default_objective(1),
        };
        let spec = simplified_market_spec(&params, objective)?;
        let (flags, _) = market_limit_terms(&params)?;
        Some(solve_mfg_fixed_point(
            &spec,
            &flags,
            &grid,
            &gx,
            &resolved.solver_config()?,
        )?)
    } else {
        None
    };
    let policy = match (&m.policy, &limit) {
        (MarketPolicyConfig::Idle, _) => MarketPolicy::Idle,
        (MarketPolicyConfig::Constant { value }, _) => MarketPolicy::Constant(*value),
        (MarketPolicyConfig::Mfg, Some(sol)) => MarketPolicy::Feedback(&sol.value),
        (MarketPolicyConfig::Mfg, None) => {
            unreachable!("the limit is solved for feedback policies")
        }
    };
    let dt = match &limit {
        Some(sol) if m.policy == MarketPolicyConfig::Mfg => m.dt.min(sol.value.dt),
        _ => m.dt,
    };
    let traj = simulate_market(
        &params,
        &ens0,
        &policy,
        &MarketOptions {
            dt,
            snapshot_every: m.snapshot_every,
        },
    )?;
    let out = ensure_dir(out)?;
    let mut files = Vec::new();
    write_csv(&traj.series_csv(), out.join("market.csv"), &mut files)?;
    write_csv(&traj.snapshots_csv(), out.join("snapshots.csv"), &mut files)?;
    let last = traj.final_ensemble();
    let mut result = json!({
        "agents": n,
        "dt": traj.times[1] - traj.times[0],
        "steps": traj.times.len() - 1,
        "final_price": traj.prices.last(),
        "clamp_count": traj.clamp_counts.last(),
        "mean_wealth": last.wealth().iter().sum::<f64>() / n as f64,
    });
    let mut converged = true;
    if let Some(sol) = &limit {
        let phi = crate::model::MomentPolynomial::coordinate(1, 0);
        let mut csv = Csv::with_header(&["t", "S", "mean_x"]);
        let mut means = Vec::with_capacity(sol.density.levels.len());
        for (k, level) in sol.density.levels.iter().enumerate() {
            let mean = moment_of_density(&phi, &grid, level)?;
            csv.row(&[k as f64 * sol.dt(), params.lambda * mean, mean]);
            means.push(mean);
        }
        write_csv(&csv, out.join("limit.csv"), &mut files)?;
        let w1 = wasserstein1_1d(last.risky(), &grid, sol.density.final_level())?;
        result["limit"] = json!({
            "converged": sol.converged,
            "iterations": sol.iterations,
            "final_mean_x": means.last(),
            "mean_x_gap": (last.mean_risky() - means.last().copied().unwrap_or(f64::NAN)).abs(),
            "w1_risky": w1,
        });
        converged = sol.converged;
    }
    finish("finmarket", &resolved, &out, result, files, converged)
}
