//! Scenario stages: source MPC runs, training, comparison, timing.
//!
//! Every stage reads its inputs from and writes its artifacts to one output
//! directory, so the stages can be run separately.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use super::config::{ControllerConfig, MpcConfig, RunConfig, ScenarioConfig};
use super::io::{export_csv, ingest_csv, slice_indices, CoefficientBundle};
use super::timing::{bench_timing, TimingReport};
use crate::arma::ArmaController;
use crate::error::{Error, Result};
use crate::fuzzy::{rule_weights, FarmaController};
use crate::linear_mpc::LinearMpcController;
use crate::nmpc::NmpcController;
use crate::plant::{simulate_closed_loop, wrap_pi, ClosedLoopTrajectory, ConstantReference, Controller, SimulationSettings};
use crate::trainer::{build_training_matrices, train_arma, TrainingDataset};

/// Points in the membership sweep.
const SWEEP_POINTS: usize = 401;

pub fn source_csv_path(out: &Path, run: &str) -> PathBuf {
    out.join(format!("mpc_{run}.csv"))
}

pub fn theta_path(out: &Path, controller: &str) -> PathBuf {
    out.join(format!("theta_{controller}.txt"))
}

pub fn eval_csv_path(out: &Path, controller: &str) -> PathBuf {
    out.join(format!("eval_{controller}.csv"))
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A fresh MPC controller for the scenario.
pub fn mpc_controller(cfg: &ScenarioConfig) -> Result<Box<dyn Controller>> {
    Ok(match cfg.mpc {
        MpcConfig::Linear { .. } => Box::new(LinearMpcController::new(&cfg.linear_mpc()?)),
        MpcConfig::Nonlinear { .. } => Box::new(NmpcController::new(cfg.nonlinear_mpc()?)),
    })
}

/// Closed-loop run of `controller` on the scenario plant.
pub fn simulate_run(cfg: &ScenarioConfig, controller: &mut dyn Controller, run: &RunConfig) -> Result<ClosedLoopTrajectory> {
    let model = cfg.plant_model()?;
    let limits = cfg.saturation()?;
    let reference = ConstantReference {
        r: cfg.output_reference(),
        x_ref: cfg.state_reference(),
    };
    let settings = SimulationSettings {
        ts: cfg.ts,
        duration: run.duration,
        substeps: cfg.substeps,
    };
    let x0 = DVector::from_column_slice(&run.x0);
    Ok(simulate_closed_loop(model.as_ref(), controller, &limits, &x0, &settings, &reference)?)
}

/// Runs the MPC from every source initial state and writes `mpc_<run>.csv`.
pub fn run_source_mpc(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<(String, ClosedLoopTrajectory)>> {
    ensure_dir(out)?;
    cfg.source_runs
        .iter()
        .map(|run| {
            let stage = format!("sim-mpc `{}`", run.name);
            let traj = mpc_controller(cfg)
                .and_then(|mut c| simulate_run(cfg, c.as_mut(), run))
                .and_then(|t| export_csv(&t, &source_csv_path(out, &run.name)).map(|()| t))
                .map_err(|e| Error::stage(stage, e))?;
            Ok((run.name.clone(), traj))
        })
        .collect()
}

/// The slice of a logged run used to train one controller.
pub fn training_dataset(cfg: &ScenarioConfig, ctrl: &ControllerConfig, traj: &ClosedLoopTrajectory) -> Result<TrainingDataset> {
    let (k0, k1) = slice_indices(cfg.ts, ctrl.slice[0], ctrl.slice[1]);
    if k1 >= traj.len() || k0 > k1 {
        return Err(Error::InvalidParameter(format!(
            "slice [{}, {}] of controller `{}` needs samples {k0}..={k1}, run has {}",
            ctrl.slice[0],
            ctrl.slice[1],
            ctrl.name,
            traj.len()
        )));
    }
    let recs = &traj.records[k0..=k1];
    Ok(TrainingDataset {
        u: recs.iter().map(|r| r.u.clone()).collect(),
        y: recs.iter().map(|r| r.y.clone()).collect(),
        r: recs.iter().map(|r| r.r.clone()).collect(),
        map: ctrl.performance,
        window: ctrl.window,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedController {
    pub name: String,
    pub samples: usize,
    pub rows: usize,
    pub bundle: CoefficientBundle,
}

/// Fits every controller to its slice of the logged source runs and writes
/// `theta_<name>.txt`. Controllers are trained on parallel threads.
pub fn train_controllers(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<TrainedController>> {
    ensure_dir(out)?;
    let limits = cfg.saturation()?;
    let train = |ctrl: &ControllerConfig| -> Result<TrainedController> {
        let traj = ingest_csv(&source_csv_path(out, &ctrl.source))?;
        let data = training_dataset(cfg, ctrl, &traj)?;
        let mats = build_training_matrices(&data, &cfg.regularization(ctrl)?)?;
        let theta = train_arma(&mats, ctrl.constrained.then_some(&limits))?;
        let bundle = CoefficientBundle {
            window: mats.window,
            input_dim: mats.input_dim,
            perf_dim: mats.perf_dim,
            theta,
        };
        bundle.write(&theta_path(out, &ctrl.name))?;
        Ok(TrainedController {
            name: ctrl.name.clone(),
            samples: data.len(),
            rows: mats.phi.nrows(),
            bundle,
        })
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .controllers
            .iter()
            .map(|ctrl| (ctrl, s.spawn(move || train(ctrl))))
            .collect();
        handles
            .into_iter()
            .map(|(ctrl, h)| {
                let res = h.join().unwrap_or_else(|p| std::panic::resume_unwind(p));
                res.map_err(|e| Error::stage(format!("train `{}`", ctrl.name), e))
            })
            .collect()
    })
}

pub fn arma_from_bundle(cfg: &ScenarioConfig, ctrl: &ControllerConfig, bundle: &CoefficientBundle) -> Result<ArmaController> {
    if bundle.window != ctrl.window {
        return Err(Error::InvalidParameter(format!(
            "coefficients for `{}` have window {}, config says {}",
            ctrl.name, bundle.window, ctrl.window
        )));
    }
    ArmaController::new(
        bundle.theta.clone(),
        bundle.window,
        bundle.input_dim,
        bundle.perf_dim,
        cfg.saturation()?,
        ctrl.performance,
    )
}

pub fn load_bundles(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<CoefficientBundle>> {
    cfg.controllers
        .iter()
        .map(|c| CoefficientBundle::read(&theta_path(out, &c.name)))
        .collect()
}

pub fn build_farma(cfg: &ScenarioConfig, bundles: &[CoefficientBundle]) -> Result<FarmaController> {
    let members = cfg
        .controllers
        .iter()
        .zip(bundles)
        .map(|(c, b)| arma_from_bundle(cfg, c, b))
        .collect::<Result<Vec<_>>>()?;
    FarmaController::new(members, cfg.fuzzy_rules()?, cfg.fuzzy.decision, cfg.saturation()?)
}

/// Closed-loop runs from the evaluation state, in the order MPC, each ARMA
/// controller alone, F-ARMA.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub mpc: ClosedLoopTrajectory,
    pub arma: Vec<(String, ClosedLoopTrajectory)>,
    pub farma: ClosedLoopTrajectory,
}

/// Runs the evaluation comparison from the stored coefficients and writes
/// `eval_mpc.csv`, `eval_<controller>.csv` and `eval_farma.csv`.
///
/// Runs are sequential so controller timings are not disturbed.
pub fn simulate_comparison(cfg: &ScenarioConfig, out: &Path) -> Result<Comparison> {
    ensure_dir(out)?;
    let run = &cfg.evaluation;
    let bundles = load_bundles(cfg, out).map_err(|e| Error::stage("sim-farma", e))?;

    let mpc = mpc_controller(cfg)
        .and_then(|mut c| simulate_run(cfg, c.as_mut(), run))
        .and_then(|t| export_csv(&t, &eval_csv_path(out, "mpc")).map(|()| t))
        .map_err(|e| Error::stage("evaluate `mpc`", e))?;

    let mut arma = Vec::new();
    for (ctrl, bundle) in cfg.controllers.iter().zip(&bundles) {
        let traj = arma_from_bundle(cfg, ctrl, bundle)
            .and_then(|mut c| simulate_run(cfg, &mut c, run))
            .and_then(|t| export_csv(&t, &eval_csv_path(out, &ctrl.name)).map(|()| t))
            .map_err(|e| Error::stage(format!("evaluate `{}`", ctrl.name), e))?;
        arma.push((ctrl.name.clone(), traj));
    }

    let farma = build_farma(cfg, &bundles)
        .and_then(|mut c| simulate_run(cfg, &mut c, run))
        .and_then(|t| export_csv(&t, &eval_csv_path(out, "farma")).map(|()| t))
        .map_err(|e| Error::stage("evaluate `farma`", e))?;

    Ok(Comparison { mpc, arma, farma })
}

/// Timing comparison from the stored evaluation CSVs; writes `timing.txt`.
pub fn bench(out: &Path) -> Result<TimingReport> {
    let run = || -> Result<TimingReport> {
        let mpc = ingest_csv(&eval_csv_path(out, "mpc"))?;
        let farma = ingest_csv(&eval_csv_path(out, "farma"))?;
        let report = bench_timing(&mpc, &farma);
        write_text(&out.join("timing.txt"), &timing_text(&report))?;
        Ok(report)
    };
    run().map_err(|e| Error::stage("bench", e))
}

pub fn timing_text(t: &TimingReport) -> String {
    format!(
        "controller,steps,mean_s,median_of_means_s\nmpc,{},{:e},{:e}\nfarma,{},{:e},{:e}\nratio,{}\n",
        t.mpc.samples, t.mpc.mean, t.mpc.median_of_means, t.farma.samples, t.farma.mean, t.farma.median_of_means, t.ratio
    )
}

/// `y_j - r_j`, wrapped into `[-π, π)` for angle outputs.
pub fn output_error(cfg: &ScenarioConfig, r: &DVector<f64>, y: &DVector<f64>, j: usize) -> f64 {
    let e = y[j] - r[j];
    if cfg.checks.angle_outputs.contains(&j) {
        wrap_pi(e)
    } else {
        e
    }
}

/// Largest final error over `outputs`.
pub fn final_error(cfg: &ScenarioConfig, traj: &ClosedLoopTrajectory, outputs: &[usize]) -> f64 {
    traj.last().map_or(f64::INFINITY, |rec| {
        outputs
            .iter()
            .map(|&j| output_error(cfg, &rec.r, &rec.y, j).abs())
            .fold(0.0, f64::max)
    })
}

/// Largest excursion of the applied input outside the limits.
pub fn input_violation(cfg: &ScenarioConfig, traj: &ClosedLoopTrajectory) -> Result<f64> {
    let limits = cfg.saturation()?;
    let mut worst: f64 = 0.0;
    for rec in &traj.records {
        for i in 0..limits.dim() {
            let v = (limits.u_min()[i] - rec.u[i]).max(rec.u[i] - limits.u_max()[i]);
            worst = worst.max(if v.is_nan() { f64::INFINITY } else { v });
        }
    }
    Ok(worst)
}

/// `max_k max_j |y_a - y_b|` over the common samples, angles wrapped.
pub fn max_output_deviation(cfg: &ScenarioConfig, a: &ClosedLoopTrajectory, b: &ClosedLoopTrajectory) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.records.iter().zip(&b.records) {
        for j in 0..ra.y.len() {
            let d = ra.y[j] - rb.y[j];
            let d = if cfg.checks.angle_outputs.contains(&j) { wrap_pi(d) } else { d };
            worst = worst.max(d.abs());
        }
    }
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= limit,
            detail: format!("{value:.6e} <= {limit:e}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: String,
    pub trained: Vec<TrainedController>,
    pub timing: Option<TimingReport>,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("scenario {}\n", self.scenario);
        for t in &self.trained {
            let _ = writeln!(
                s,
                "trained {}: {} samples, {} rows, {} coefficients",
                t.name,
                t.samples,
                t.rows,
                t.bundle.theta.len()
            );
        }
        if let Some(t) = &self.timing {
            let _ = writeln!(
                s,
                "timing: mpc {:.3e} s/step, farma {:.3e} s/step, ratio {:.1}",
                t.mpc.median_of_means, t.farma.median_of_means, t.ratio
            );
        }
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

/// Evaluates the configured checks.
pub fn evaluate_checks(
    cfg: &ScenarioConfig,
    sources: &[(String, ClosedLoopTrajectory)],
    comparison: &Comparison,
    timing: Option<&TimingReport>,
) -> Result<Vec<Check>> {
    let ch = &cfg.checks;
    let mut checks = Vec::new();
    let source = sources
        .iter()
        .find(|(n, _)| *n == ch.source_run)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::InvalidParameter(format!("no source run `{}`", ch.source_run)))?;
    checks.push(Check::bound(
        format!("MPC final error ({})", ch.source_run),
        final_error(cfg, source, &ch.source_outputs),
        ch.source_final_tol,
    ));
    let mut worst_src: f64 = 0.0;
    for (_, t) in sources {
        worst_src = worst_src.max(input_violation(cfg, t)?);
    }
    checks.push(Check::bound("MPC input limits", worst_src, ch.input_tol));
    checks.push(Check::bound(
        "F-ARMA final error",
        final_error(cfg, &comparison.farma, &ch.farma_outputs),
        ch.farma_final_tol,
    ));
    checks.push(Check::bound("F-ARMA input limits", input_violation(cfg, &comparison.farma)?, ch.input_tol));
    if let Some(max_dev) = ch.max_deviation {
        checks.push(Check::bound(
            "F-ARMA deviation from MPC",
            max_output_deviation(cfg, &comparison.farma, &comparison.mpc),
            max_dev,
        ));
    }
    if let (Some(min_ratio), Some(t)) = (ch.min_timing_ratio, timing) {
        checks.push(Check {
            name: "MPC/F-ARMA step time ratio".into(),
            passed: t.ratio >= min_ratio,
            detail: format!("{:.1} >= {min_ratio}", t.ratio),
        });
    }
    Ok(checks)
}

fn csv_row(out: &mut String, vals: impl IntoIterator<Item = f64>) {
    let row: Vec<String> = vals.into_iter().map(|v| v.to_string()).collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

/// Writes the plot inputs: `plot_training_<run>.csv`, `plot_membership.csv`,
/// `plot_comparison.csv` and `plot_fuzzy_weights.csv`.
pub fn write_plot_data(cfg: &ScenarioConfig, out: &Path, sources: &[(String, ClosedLoopTrajectory)], cmp: &Comparison) -> Result<()> {
    for (name, traj) in sources {
        let (_, lu, ly) = traj.dims;
        let mut s = String::from("t");
        (1..=ly).for_each(|j| s.push_str(&format!(",y_{j}")));
        (1..=lu).for_each(|j| s.push_str(&format!(",u_{j}")));
        for c in cfg.controllers.iter().filter(|c| &c.source == name) {
            s.push_str(&format!(",in_{}", c.name));
        }
        s.push('\n');
        for (k, rec) in traj.records.iter().enumerate() {
            let flags = cfg.controllers.iter().filter(|c| &c.source == name).map(|c| {
                let (k0, k1) = slice_indices(cfg.ts, c.slice[0], c.slice[1]);
                f64::from(u8::from((k0..=k1).contains(&k)))
            });
            csv_row(&mut s, std::iter::once(rec.t).chain(rec.y.iter().copied()).chain(rec.u.iter().copied()).chain(flags));
        }
        write_text(&out.join(format!("plot_training_{name}.csv")), &s)?;
    }

    let rules = cfg.fuzzy_rules()?;
    if rules.first().is_some_and(|r| r.memberships.len() == 1) {
        let top = rules
            .iter()
            .map(|r| r.memberships[0].breakpoints().1)
            .fold(0.0, f64::max)
            * 2.0;
        let mut s = String::from("gamma");
        cfg.controllers.iter().for_each(|c| s.push_str(&format!(",mu_{}", c.name)));
        s.push('\n');
        for i in 0..SWEEP_POINTS {
            let g = top * i as f64 / (SWEEP_POINTS - 1) as f64;
            csv_row(&mut s, std::iter::once(g).chain(rules.iter().map(|r| r.memberships[0].eval(g))));
        }
        write_text(&out.join("plot_membership.csv"), &s)?;
    }

    let runs: Vec<(&str, &ClosedLoopTrajectory)> = std::iter::once(("mpc", &cmp.mpc))
        .chain(cmp.arma.iter().map(|(n, t)| (n.as_str(), t)))
        .chain(std::iter::once(("farma", &cmp.farma)))
        .collect();
    let (_, lu, ly) = cmp.mpc.dims;
    let mut s = String::from("t");
    for (n, _) in &runs {
        (1..=ly).for_each(|j| s.push_str(&format!(",y_{j}_{n}")));
        (1..=lu).for_each(|j| s.push_str(&format!(",u_{j}_{n}")));
    }
    s.push('\n');
    let len = runs.iter().map(|(_, t)| t.len()).min().unwrap_or(0);
    for k in 0..len {
        let mut row = vec![cmp.mpc.records[k].t];
        for (_, t) in &runs {
            row.extend(t.records[k].y.iter());
            row.extend(t.records[k].u.iter());
        }
        csv_row(&mut s, row);
    }
    write_text(&out.join("plot_comparison.csv"), &s)?;

    let mut s = String::from("t");
    cfg.controllers.iter().for_each(|c| s.push_str(&format!(",w_{}", c.name)));
    s.push('\n');
    for rec in &cmp.farma.records {
        let w = rule_weights(&rules, &cfg.fuzzy.decision.evaluate(&rec.r, &rec.y));
        let total = w.sum();
        let w = if total > 0.0 { w / total } else { w };
        csv_row(&mut s, std::iter::once(rec.t).chain(w.iter().copied()));
    }
    write_text(&out.join("plot_fuzzy_weights.csv"), &s)
}

/// Runs every stage and writes `summary.txt`.
pub fn run_scenario(cfg: &ScenarioConfig, out: &Path) -> Result<ScenarioReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let sources = run_source_mpc(cfg, out)?;
    let trained = train_controllers(cfg, out)?;
    let comparison = simulate_comparison(cfg, out)?;
    let timing = bench(out)?;
    write_plot_data(cfg, out, &sources, &comparison).map_err(|e| Error::stage("plot data", e))?;
    let checks = evaluate_checks(cfg, &sources, &comparison, Some(&timing))?;
    let report = ScenarioReport {
        scenario: cfg.name.clone(),
        trained,
        timing: Some(timing),
        checks,
    };
    write_text(&out.join("summary.txt"), &report.to_text())?;
    Ok(report)
}
