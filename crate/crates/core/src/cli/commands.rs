//! The `train`, `compare-flow` and `criticality` subcommands.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::Serialize;

use super::config::{Experiment, RunPlan};
use crate::error::{Error, Result};
use crate::measures::{derive_seed, seeded_rng};
use crate::sgd::{fmt_float, initial_point, run_many, Scheme, Trajectory};
use crate::swloss::estimate_grad_f;
use crate::trajectory::{
    check_reference_step, criticality_gap, distance_d_c, median, non_increasing_with_allowance, reference_flow,
    InterpolatedPath, PiecewiseAffinePath,
};

/// Random stream of the reference flow (Monte-Carlo mode only).
const STREAM_FLOW: u64 = 11;
/// Random stream of the criticality gap estimates.
const STREAM_GAP: u64 = 12;
/// Relative size of the single inversion tolerated by the trend checks.
pub const TREND_ALLOWANCE: f64 = 0.10;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    std::fs::write(path, body).map_err(io_err(path))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    write_file(path, (text + "\n").as_bytes())
}

/// Builds a CSV document with the config echo as a leading comment.
struct Table {
    buf: Vec<u8>,
}

impl Table {
    fn new(echo: &str, header: &[&str]) -> Self {
        let mut buf = Vec::new();
        writeln!(buf, "# experiment: {echo}").unwrap();
        writeln!(buf, "{}", header.join(",")).unwrap();
        Self { buf }
    }

    fn row(&mut self, fields: &[String]) {
        writeln!(self.buf, "{}", fields.join(",")).unwrap();
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.buf)
    }
}

fn run_label(plan: &RunPlan) -> String {
    format!("alpha{}_seed{}", plan.alpha, plan.seed)
}

fn run_all(exp: &Experiment, plans: &[RunPlan]) -> Result<Vec<Trajectory>> {
    let configs: Vec<_> = plans.iter().map(|p| p.config.clone()).collect();
    let results = run_many(&exp.spec, &configs, &exp.input, &exp.data, exp.config.workers)?;
    plans
        .iter()
        .zip(results)
        .map(|(plan, r)| {
            r.map_err(|e| match e {
                Error::NonFinite { step } => Error::InvalidArgument(format!(
                    "run alpha = {}, seed = {} diverged at step {step}; reduce alpha",
                    plan.alpha, plan.seed
                )),
                other => other,
            })
        })
        .collect()
}

fn save_trajectory(dir: &Path, label: &str, traj: &Trajectory, echo: &str) -> Result<PathBuf> {
    let csv_path = dir.join(format!("{label}.csv"));
    let mut buf = Vec::new();
    writeln!(buf, "# experiment: {echo}").unwrap();
    traj.write_csv(&mut buf).map_err(io_err(&csv_path))?;
    write_file(&csv_path, &buf)?;
    let mut sidecar = traj.sidecar_json();
    sidecar["experiment"] = serde_json::from_str(echo).expect("echo is JSON");
    write_json(&csv_path.with_extension("json"), &sidecar)?;
    Ok(csv_path)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub runs: Vec<TrainRun>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRun {
    pub alpha: f64,
    pub seed: u64,
    pub csv: PathBuf,
    pub alpha_exceeds_threshold: Option<bool>,
    pub tail_mean_sample_loss: Option<f64>,
}

/// Runs every `(alpha, seed)` pair and writes one trajectory CSV plus JSON
/// sidecar per run under `<out>/train`.
pub fn cmd_train(exp: &Experiment) -> Result<TrainReport> {
    let echo = exp.config.echo();
    let plans = exp.config.plans()?;
    let dir = exp.config.out_dir.join("train");
    create_dir(&dir)?;
    let trajectories = run_all(exp, &plans)?;
    let mut runs = Vec::new();
    for (plan, traj) in plans.iter().zip(&trajectories) {
        let csv = save_trajectory(&dir, &run_label(plan), traj, &echo)?;
        runs.push(TrainRun {
            alpha: plan.alpha,
            seed: plan.seed,
            csv,
            alpha_exceeds_threshold: traj.alpha_check.map(|c| c.exceeds),
            tail_mean_sample_loss: traj.summary().tail_mean_sample_loss,
        });
    }
    let report = TrainReport { runs };
    write_json(
        &dir.join("report.json"),
        &serde_json::json!({ "experiment": serde_json::from_str::<serde_json::Value>(&echo).unwrap(), "report": report }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowRow {
    pub alpha: f64,
    pub seed: u64,
    pub d_c: f64,
    pub truncation_bound: f64,
    pub grid_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaMedian {
    pub alpha: f64,
    pub median: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareFlowReport {
    pub rows: Vec<FlowRow>,
    pub medians: Vec<AlphaMedian>,
    /// Medians, ordered by decreasing alpha, never increase (one inversion
    /// of at most 10% allowed).
    pub trend_ok: bool,
    pub step_ref: f64,
    pub horizon: f64,
}

fn medians_by_alpha<'a, I>(alphas: &[f64], rows: I) -> Vec<AlphaMedian>
where
    I: Iterator<Item = (f64, f64)> + Clone + 'a,
{
    alphas
        .iter()
        .map(|&alpha| {
            let vals: Vec<f64> = rows.clone().filter(|(a, _)| *a == alpha).map(|(_, v)| v).collect();
            AlphaMedian {
                alpha,
                median: median(&vals).unwrap_or(f64::NAN),
                runs: vals.len(),
            }
        })
        .collect()
}

fn trend_ok(medians: &[AlphaMedian]) -> bool {
    let mut sorted: Vec<&AlphaMedian> = medians.iter().collect();
    sorted.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
    let values: Vec<f64> = sorted.iter().map(|m| m.median).collect();
    non_increasing_with_allowance(&values, TREND_ALLOWANCE)
}

/// Distance `d_c` between each SGD interpolation and the reference flow
/// started from the same `u^(0)`; writes `runs.csv`, `medians.csv` and
/// `report.json` under `<out>/compare-flow`.
pub fn cmd_compare_flow(exp: &Experiment) -> Result<CompareFlowReport> {
    let cfg = &exp.config;
    let alphas = cfg.alphas();
    if alphas.len() < 2 {
        return Err(Error::InvalidArgument("compare-flow needs at least two alphas".into()));
    }
    let k_max = cfg.flow.k_max;
    let horizon = cfg.sweep.horizon.unwrap_or(k_max as f64);
    if horizon < k_max as f64 {
        return Err(Error::InvalidArgument(format!(
            "sweep horizon {horizon} is shorter than k_max = {k_max}"
        )));
    }
    let alpha_min = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let step_ref = cfg.flow.step_ref.unwrap_or(alpha_min / 50.0);
    check_reference_step(step_ref, alpha_min)?;

    let mut plans = exp.config.plans()?;
    for plan in &mut plans {
        plan.config.t_max = (horizon / plan.alpha - 1e-9).ceil() as usize;
    }
    let trajectories = run_all(exp, &plans)?;

    // One flow per distinct starting point.
    let mut flows: HashMap<Vec<u64>, PiecewiseAffinePath> = HashMap::new();
    let mut flow_order: Vec<Vec<u64>> = Vec::new();
    for plan in &plans {
        let u0 = initial_point(&exp.spec, &plan.config)?;
        let key: Vec<u64> = u0.iter().map(|v| v.to_bits()).collect();
        if flows.contains_key(&key) {
            continue;
        }
        let mut rng = seeded_rng(derive_seed(plan.seed, STREAM_FLOW));
        let flow = reference_flow(
            &exp.spec,
            u0.view(),
            &exp.input,
            &exp.data,
            plan.config.n,
            plan.config.p,
            horizon,
            step_ref,
            cfg.flow.integration,
            &mut rng,
        )?;
        flows.insert(key.clone(), flow);
        flow_order.push(key);
    }

    let mut rows = Vec::new();
    for (plan, traj) in plans.iter().zip(&trajectories) {
        let key: Vec<u64> = traj.iterate(0).iter().map(|v| v.to_bits()).collect();
        let path = InterpolatedPath::from_trajectory(traj);
        let d = distance_d_c(&path, &flows[&key], k_max, cfg.flow.grid_per_unit)?;
        rows.push(FlowRow {
            alpha: plan.alpha,
            seed: plan.seed,
            d_c: d.value,
            truncation_bound: d.truncation_bound,
            grid_bound: d.grid_bound,
        });
    }
    let medians = medians_by_alpha(&alphas, rows.iter().map(|r| (r.alpha, r.d_c)));
    let report = CompareFlowReport {
        trend_ok: trend_ok(&medians),
        rows,
        medians,
        step_ref,
        horizon,
    };

    let echo = cfg.echo();
    let dir = cfg.out_dir.join("compare-flow");
    create_dir(&dir)?;
    let mut table = Table::new(&echo, &["alpha", "seed", "d_c", "truncation_bound", "grid_bound"]);
    for r in &report.rows {
        table.row(&[
            fmt_float(r.alpha),
            r.seed.to_string(),
            fmt_float(r.d_c),
            fmt_float(r.truncation_bound),
            fmt_float(r.grid_bound),
        ]);
    }
    table.save(&dir.join("runs.csv"))?;
    let mut table = Table::new(&echo, &["alpha", "median_d_c", "runs"]);
    for m in &report.medians {
        table.row(&[fmt_float(m.alpha), fmt_float(m.median), m.runs.to_string()]);
    }
    table.save(&dir.join("medians.csv"))?;
    if cfg.flow.write_paths {
        for (i, key) in flow_order.iter().enumerate() {
            let mut buf = Vec::new();
            writeln!(buf, "# experiment: {echo}").unwrap();
            let path = dir.join(format!("flow{i}.csv"));
            flows[key].write_csv(&mut buf).map_err(io_err(&path))?;
            write_file(&path, &buf)?;
        }
    }
    write_json(
        &dir.join("report.json"),
        &serde_json::json!({ "experiment": serde_json::from_str::<serde_json::Value>(&echo).unwrap(), "report": report }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct GapRow {
    pub alpha: f64,
    pub seed: u64,
    /// Median gap over the evaluated tail iterates.
    pub tail_median_gap: f64,
    pub tail_mean_gap: f64,
    pub tail_points: usize,
    /// Norm of the population-gradient estimate at `u^(0)`.
    pub initial_grad_norm: f64,
    pub max_iterate_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalityReport {
    pub rows: Vec<GapRow>,
    pub medians: Vec<AlphaMedian>,
    pub trend_ok: bool,
    /// Median initial gradient norm over all runs.
    pub initial_grad_norm: f64,
    /// Median tail gap of the smallest alpha over `initial_grad_norm`.
    pub smallest_alpha_ratio: f64,
    pub radius_r: f64,
}

/// Criticality gaps over the tail window of projected-noised runs; writes the
/// trajectories, `gaps.csv`, `medians.csv` and `report.json` under
/// `<out>/criticality`.
pub fn cmd_criticality(exp: &Experiment) -> Result<CriticalityReport> {
    let cfg = &exp.config;
    if cfg.sgd.scheme != Scheme::ProjectedNoised {
        return Err(Error::InvalidArgument("criticality needs scheme = \"projected_noised\"".into()));
    }
    let r = cfg.sgd.radius_r.expect("validated");
    let plans = cfg.plans()?;
    let trajectories = run_all(exp, &plans)?;
    let echo = cfg.echo();
    let dir = cfg.out_dir.join("criticality");
    let traj_dir = dir.join("trajectories");
    create_dir(&traj_dir)?;

    let mut rows = Vec::new();
    for (plan, traj) in plans.iter().zip(&trajectories) {
        save_trajectory(&traj_dir, &run_label(plan), traj, &echo)?;
        let mut rng = seeded_rng(derive_seed(plan.seed, STREAM_GAP));
        let gap = |u: ndarray::ArrayView1<'_, f64>, rng: &mut _| {
            criticality_gap(&exp.spec, u, r, &exp.input, &exp.data, plan.config.n, plan.config.p, cfg.criticality.integration, rng)
        };
        let g0: Array1<f64> = estimate_grad_f(
            &exp.spec,
            traj.iterate(0),
            &exp.input,
            &exp.data,
            plan.config.n,
            cfg.criticality.integration,
            &mut rng,
            plan.config.p,
        )?;
        let mut gaps = Vec::new();
        let mut t = traj.tail_start();
        while t <= traj.t_max() {
            gaps.push(gap(traj.iterate(t), &mut rng)?);
            t += cfg.criticality.stride;
        }
        let summary = traj.summary();
        rows.push(GapRow {
            alpha: plan.alpha,
            seed: plan.seed,
            tail_median_gap: median(&gaps).unwrap_or(f64::NAN),
            tail_mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
            tail_points: gaps.len(),
            initial_grad_norm: g0.dot(&g0).sqrt(),
            max_iterate_norm: summary.max_iterate_norm,
        });
    }
    let alphas = cfg.alphas();
    let medians = medians_by_alpha(&alphas, rows.iter().map(|r| (r.alpha, r.tail_median_gap)));
    let initial: Vec<f64> = rows.iter().map(|r| r.initial_grad_norm).collect();
    let initial_grad_norm = median(&initial).unwrap_or(f64::NAN);
    let smallest = medians
        .iter()
        .min_by(|a, b| a.alpha.total_cmp(&b.alpha))
        .map_or(f64::NAN, |m| m.median);
    let report = CriticalityReport {
        trend_ok: trend_ok(&medians),
        smallest_alpha_ratio: smallest / initial_grad_norm,
        initial_grad_norm,
        rows,
        medians,
        radius_r: r,
    };

    let mut table = Table::new(
        &echo,
        &["alpha", "seed", "tail_median_gap", "tail_mean_gap", "tail_points", "initial_grad_norm", "max_iterate_norm"],
    );
    for row in &report.rows {
        table.row(&[
            fmt_float(row.alpha),
            row.seed.to_string(),
            fmt_float(row.tail_median_gap),
            fmt_float(row.tail_mean_gap),
            row.tail_points.to_string(),
            fmt_float(row.initial_grad_norm),
            fmt_float(row.max_iterate_norm),
        ]);
    }
    table.save(&dir.join("gaps.csv"))?;
    let mut table = Table::new(&echo, &["alpha", "median_tail_gap", "runs"]);
    for m in &report.medians {
        table.row(&[fmt_float(m.alpha), fmt_float(m.median), m.runs.to_string()]);
    }
    table.save(&dir.join("medians.csv"))?;
    write_json(
        &dir.join("report.json"),
        &serde_json::json!({ "experiment": serde_json::from_str::<serde_json::Value>(&echo).unwrap(), "report": report }),
    )?;
    Ok(report)
}
