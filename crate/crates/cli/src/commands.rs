//! Subcommand implementations. Each one validates its inputs, computes
//! everything in memory, and only then writes its artifacts.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use fleetdesign::bayesopt::{self, BoRecord};
use fleetdesign::ingest::{self, TimeSpec};
use fleetdesign::marl::{self, Encoder, EvalConfig, TraceRow};
use fleetdesign::reward::GridCrowdedness;
use fleetdesign::{
    oracle, BoConfig, EvalMode, Hyperparams, MetricsReport, ObjectiveConfig, ObjectiveKind, Policy, RewardDesign,
};

use crate::artifacts::{csv_bytes, resolve_out, Artifacts};
use crate::config::{self, LoadedScenario, RunConfig};
use crate::{DesignArgs, EvalArgs, EvaluateArgs, HyperArgs, IngestArgs, OptimizeArgs, OracleArgs, ReportArgs, TrainArgs};

pub enum Failure {
    /// Bad configuration or input; exit code 1.
    Invalid(anyhow::Error),
    /// Failure while running; exit code 2.
    Runtime(anyhow::Error),
}

pub type Outcome<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

const DEFAULT_EVAL_EPISODES: usize = 200;
const DEFAULT_EVAL_SEED: u64 = 7;

/// Settings shared by the commands that simulate.
struct Setup {
    loaded: LoadedScenario,
    design: RewardDesign,
}

fn resolve_design(file: &RunConfig, args: &DesignArgs) -> anyhow::Result<Setup> {
    let source = args
        .scenario
        .clone()
        .or_else(|| file.scenario.clone())
        .ok_or_else(|| anyhow!("no scenario given; pass --scenario or set `scenario` in the config"))?;
    let loaded = config::load_scenario(&source)?;
    let section = file.design.clone().unwrap_or_default();
    let mode = args
        .design
        .clone()
        .or((!section.mode.is_empty()).then_some(section.mode))
        .unwrap_or_else(|| config::default_design_mode(&source).to_string());
    let grids = args
        .grids
        .clone()
        .or(section.grids)
        .or_else(|| (source == "two-driver").then(|| vec![3]));
    let design = config::build_design(&mode, args.alpha.or(section.alpha), grids)?;
    Ok(Setup { loaded, design })
}

fn resolve_eval(file: &RunConfig, args: &EvalArgs, design: &RewardDesign) -> anyhow::Result<EvalConfig> {
    let objective = config::objective_for(design, &file.objective, args.w)?;
    let episodes = args.eval_episodes.or(file.eval.episodes).unwrap_or(DEFAULT_EVAL_EPISODES);
    if episodes == 0 {
        bail!("evaluation needs at least one episode");
    }
    Ok(EvalConfig::new(
        episodes,
        args.eval_seed.or(file.eval.seed).unwrap_or(DEFAULT_EVAL_SEED),
        args.eval_mode.or(file.eval.mode).unwrap_or(EvalMode::Stochastic),
        objective,
    ))
}

fn resolve_hyper(file: &RunConfig, args: &HyperArgs, scenario: &str) -> anyhow::Result<Hyperparams> {
    let name = args
        .hyper
        .clone()
        .or_else(|| file.hyper.preset.clone())
        .unwrap_or_else(|| config::default_hyper_preset(scenario).to_string());
    let mut hyper = config::overlay(&config::hyper_preset(&name)?, &file.hyper.overrides, "hyperparameter")?;
    if let Some(episodes) = args.episodes {
        hyper.episodes = episodes;
    }
    hyper.validate()?;
    Ok(hyper)
}

/// Per-grid evaluation detail, with the map facts the report needs.
#[derive(Serialize, Deserialize)]
struct BreakdownFile {
    width: usize,
    height: usize,
    cbd: Vec<usize>,
    occupancy: Vec<f64>,
    ics: Vec<GridCrowdedness>,
}

fn evaluate_policy(
    policy: &Policy,
    setup: &Setup,
    eval: &EvalConfig,
) -> fleetdesign::Result<(MetricsReport, BreakdownFile)> {
    let scenario = &setup.loaded.scenario;
    let stats = marl::evaluate_stats(policy, scenario, &setup.design, eval)?;
    let episodes = stats
        .iter()
        .map(|s| marl::episode_metrics(s, scenario, &eval.objective, false))
        .collect::<fleetdesign::Result<Vec<_>>>()?;
    let report = marl::summarize(&episodes, &setup.design, &eval.objective);
    let detail = marl::grid_breakdown(&stats, scenario, &eval.objective)?;
    let breakdown = BreakdownFile {
        width: scenario.width(),
        height: scenario.height(),
        cbd: scenario.cbd().iter().map(|g| g.0).collect(),
        occupancy: detail.occupancy,
        ics: detail.ics,
    };
    Ok((report, breakdown))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    scenario: &'a str,
    design: &'a RewardDesign,
    seed: Option<u64>,
    hyper: Option<&'a Hyperparams>,
    objective: &'a ObjectiveConfig,
    eval_episodes: usize,
    eval_seed: u64,
    eval_mode: EvalMode,
}

fn finish(artifacts: Artifacts, out: &Path) -> Outcome {
    artifacts.write(out).runtime()?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn train(file: &RunConfig, args: &TrainArgs, out: Option<&Path>) -> Outcome {
    let setup = resolve_design(file, &args.design).invalid()?;
    let eval = resolve_eval(file, &args.eval, &setup.design).invalid()?;
    let hyper = resolve_hyper(file, &args.hyper, &setup.loaded.source).invalid()?;
    let seed = args.seed.or(file.train.seed).unwrap_or(0);
    let out = resolve_out(out, "train");

    let every = (hyper.episodes / 10).max(1);
    let (policy, trace) = marl::train_with_progress(&setup.loaded.scenario, &setup.design, &hyper, seed, |row| {
        if (row.episode + 1) % every == 0 {
            eprintln!(
                "episode {:>6}: orr {:.3} mean reward {:.3} epsilon {:.3}",
                row.episode + 1,
                row.orr,
                row.mean_reward,
                row.epsilon
            );
        }
    })
    .runtime()?;
    let (report, breakdown) = evaluate_policy(&policy, &setup, &eval).runtime()?;
    print_metrics(&report);

    let mut artifacts = Artifacts::default();
    artifacts.add("checkpoint.txt", policy.to_text().into_bytes());
    artifacts.add("trace.csv", csv_bytes(|b| trace.write_csv(b)).runtime()?);
    artifacts.add_json("metrics.json", &report).runtime()?;
    artifacts.add_json("breakdown.json", &breakdown).runtime()?;
    let record = RunRecord {
        command: "train",
        scenario: &setup.loaded.source,
        design: &setup.design,
        seed: Some(seed),
        hyper: Some(&hyper),
        objective: &eval.objective,
        eval_episodes: eval.episodes,
        eval_seed: eval.seed,
        eval_mode: eval.mode,
    };
    artifacts.add_json("run.json", &record).runtime()?;
    artifacts.add_json("scenario.json", &setup.loaded.config).runtime()?;
    finish(artifacts, &out)
}

pub fn evaluate(file: &RunConfig, args: &EvaluateArgs, out: Option<&Path>) -> Outcome {
    let setup = resolve_design(file, &args.design).invalid()?;
    let eval = resolve_eval(file, &args.eval, &setup.design).invalid()?;
    let text = std::fs::read_to_string(&args.checkpoint)
        .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))
        .invalid()?;
    let policy = Policy::from_text(&text)
        .with_context(|| format!("parsing checkpoint {}", args.checkpoint.display()))
        .invalid()?;
    if policy.encoder != Encoder::for_scenario(&setup.loaded.scenario) {
        return Err(Failure::Invalid(anyhow!(
            "checkpoint was trained on a {}x{} map with horizon {}, which does not match scenario {}",
            policy.encoder.width,
            policy.encoder.height,
            policy.encoder.horizon,
            setup.loaded.source
        )));
    }
    let out = resolve_out(out, "evaluate");
    let (report, breakdown) = evaluate_policy(&policy, &setup, &eval).runtime()?;
    print_metrics(&report);

    let mut artifacts = Artifacts::default();
    artifacts.add_json("metrics.json", &report).runtime()?;
    artifacts.add_json("breakdown.json", &breakdown).runtime()?;
    let record = RunRecord {
        command: "evaluate",
        scenario: &setup.loaded.source,
        design: &setup.design,
        seed: None,
        hyper: None,
        objective: &eval.objective,
        eval_episodes: eval.episodes,
        eval_seed: eval.seed,
        eval_mode: eval.mode,
    };
    artifacts.add_json("run.json", &record).runtime()?;
    finish(artifacts, &out)
}

fn print_metrics(r: &MetricsReport) {
    println!(
        "alpha {:.4} orr {:.4} osc {:.4} ptc {:.4} ics {:.4} mean reward {:.4} objective {:.4}",
        r.alpha, r.orr, r.osc, r.ptc, r.ics, r.mean_reward, r.objective
    );
}

#[derive(Serialize, Deserialize)]
struct OptimizeSummary {
    w: f64,
    best_alpha: f64,
    /// Posterior mean at `best_alpha`.
    best_value: f64,
    /// Posterior mean at the lower end of the domain.
    baseline_value: f64,
    /// `best_value / baseline_value - 1`.
    improvement: f64,
    evaluations: usize,
    converged_at: Option<usize>,
}

pub fn optimize(file: &RunConfig, args: &OptimizeArgs, out: Option<&Path>) -> Outcome {
    let setup = resolve_design(file, &args.design).invalid()?;
    let hyper = resolve_hyper(file, &args.hyper, &setup.loaded.source).invalid()?;
    let base_eval = resolve_eval(file, &args.eval, &setup.design).invalid()?;
    let kind = setup.design.objective_kind();
    if matches!(setup.design, RewardDesign::None) {
        return Err(Failure::Invalid(anyhow!("design `none` has no parameter to optimize")));
    }
    let default_bo = match kind {
        ObjectiveKind::ServiceCharge => BoConfig::default(),
        ObjectiveKind::Toll => BoConfig::toll(),
    };
    let mut bo = config::overlay(&default_bo, &file.optimize.bo, "optimize").invalid()?;
    bo.lo = args.lo.unwrap_or(bo.lo);
    bo.hi = args.hi.unwrap_or(bo.hi);
    bo.budget = args.budget.unwrap_or(bo.budget);
    bo.seed = args.seed.unwrap_or(bo.seed);
    bo.validate().invalid()?;
    let sweep = args.sweep_w.clone().unwrap_or_else(|| file.optimize.w.clone());
    let weights = if sweep.is_empty() { vec![base_eval.objective.w] } else { sweep };
    let mut objectives = Vec::new();
    for &w in &weights {
        objectives.push(config::objective_for(&setup.design, &file.objective, Some(w)).invalid()?);
    }
    let out = resolve_out(out, "optimize");

    let mut artifacts = Artifacts::default();
    let mut table = Vec::new();
    for objective in objectives {
        let eval = EvalConfig { objective, ..base_eval.clone() };
        let (run, summary) = optimize_one(&setup, &hyper, &bo, &eval).runtime()?;
        eprintln!("w {}: best alpha {:.4}, objective {:.4}", summary.w, summary.best_alpha, summary.best_value);
        table.push(summary);
        if weights.len() == 1 {
            artifacts = run;
        } else {
            artifacts.extend_under(format!("w_{}", objective.w), run);
        }
    }
    if weights.len() > 1 {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["w", "best_alpha", "best_value"]).runtime()?;
        for s in &table {
            w.write_record([s.w.to_string(), s.best_alpha.to_string(), s.best_value.to_string()]).runtime()?;
        }
        artifacts.add("sweep.csv", w.into_inner().map_err(|e| anyhow!("{e}")).runtime()?);
    }
    for s in &table {
        println!("w {} best alpha {:.4} objective {:.4} improvement {:.2}%", s.w, s.best_alpha, s.best_value, 100.0 * s.improvement);
    }
    finish(artifacts, &out)
}

fn optimize_one(
    setup: &Setup,
    hyper: &Hyperparams,
    bo: &BoConfig,
    eval: &EvalConfig,
) -> anyhow::Result<(Artifacts, OptimizeSummary)> {
    let mut n = 0;
    let outcome = bayesopt::bo_loop(
        |alpha| {
            n += 1;
            let design = setup.design.with_alpha(alpha);
            let (_, _, report) = marl::train_and_evaluate(&setup.loaded.scenario, &design, hyper, bo.seed * 1000 + n, eval)?;
            eprintln!("evaluation {n:>3}: alpha {alpha:.4} objective {:.4}", report.objective);
            Ok(report.objective)
        },
        bo,
    )
    .with_context(|| format!("optimization stopped at evaluation {n}"))?;
    // a budget spent entirely on the initial design still gets a posterior
    let posterior = match outcome.posterior.clone() {
        Some(p) => p,
        None => {
            let mut state = outcome.state.clone();
            state.hyper = bo.hyper_for(&state.values);
            bayesopt::centered_posterior(&state, &bayesopt::candidate_grid(bo.lo, bo.hi, bo.candidates))?
        }
    };
    let baseline = posterior.mean[0];
    let summary = OptimizeSummary {
        w: eval.objective.w,
        best_alpha: outcome.best_alpha,
        best_value: outcome.best_value,
        baseline_value: baseline,
        improvement: outcome.best_value / baseline - 1.0,
        evaluations: outcome.history.len(),
        converged_at: outcome.converged_at,
    };
    let mut artifacts = Artifacts::default();
    artifacts.add("bo_history.csv", csv_bytes(|b| outcome.write_history(b))?);
    artifacts.add("posterior.csv", csv_bytes(|b| posterior.write_csv(b))?);
    artifacts.add_json("summary.json", &summary)?;
    Ok((artifacts, summary))
}

pub fn oracle(file: &RunConfig, args: &OracleArgs, out: Option<&Path>) -> Outcome {
    let alphas = args.alpha.clone().unwrap_or_else(|| file.oracle.alpha.clone());
    if let Some(bad) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Failure::Invalid(anyhow!("service charge {bad} lies outside [0, 1]")));
    }
    let rows = if alphas.is_empty() {
        oracle::values_of_interest().runtime()?
    } else {
        alphas.iter().map(|&a| oracle::equilibrium_allocation(a)).collect::<fleetdesign::Result<Vec<_>>>().runtime()?
    };
    let table = csv_bytes(|b| oracle::write_table(&rows, b)).runtime()?;
    print!("{}", String::from_utf8_lossy(&table));
    let mut artifacts = Artifacts::default();
    artifacts.add("oracle.csv", table);
    finish(artifacts, &resolve_out(out, "oracle"))
}

fn open(path: &Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn rejection_log(rejections: &[ingest::Rejection]) -> Vec<u8> {
    rejections.iter().map(|r| format!("{r}\n")).collect::<String>().into_bytes()
}

pub fn ingest(file: &RunConfig, args: &IngestArgs, out: Option<&Path>) -> Outcome {
    let section = &file.ingest;
    let trips = args.trips.clone().or_else(|| section.trips.clone());
    let turnstile = args.turnstile.clone().or_else(|| section.turnstile.clone());
    if trips.is_none() && turnstile.is_none() {
        return Err(Failure::Invalid(anyhow!("nothing to ingest; pass --trips and/or --turnstile")));
    }
    let time = section.time.clone().unwrap_or_else(TimeSpec::evening_peak);
    time.validate().invalid()?;
    let grid = match (&trips, &section.grid) {
        (Some(_), None) => return Err(Failure::Invalid(anyhow!("trip ingestion needs an [ingest.grid] section"))),
        (_, grid) => grid.clone(),
    };
    if let Some(g) = &grid {
        g.validate().invalid()?;
    }
    let trip_file = trips.as_deref().map(open).transpose().invalid()?;
    let turnstile_file = turnstile.as_deref().map(open).transpose().invalid()?;
    let out = resolve_out(out, "ingest");

    let mut artifacts = Artifacts::default();
    let mut counts = None;
    if let Some(f) = turnstile_file {
        let columns = section.turnstile_columns.clone().unwrap_or_default();
        let (c, rejected) = ingest::parse_turnstile(f, &columns).invalid()?;
        eprintln!("turnstile: {} grids, {} rows rejected", c.grids.len(), rejected.len());
        artifacts.add_json("turnstile.json", &c).runtime()?;
        artifacts.add("turnstile_rejected.txt", rejection_log(&rejected));
        counts = Some(c);
    }
    if let (Some(f), Some(grid)) = (trip_file, grid) {
        let columns = section.trip_columns.clone().unwrap_or_default();
        let (records, rejected) = ingest::parse_trips(f, &columns).invalid()?;
        let parsed = records.len();
        let kept = ingest::filter_weekday_peak(records, &time);
        let tensor = ingest::discretize(&kept, &grid, &time).runtime()?;
        eprintln!(
            "trips: {parsed} parsed, {} rejected, {} in the weekday window, {} outside the grid",
            rejected.len(),
            kept.len(),
            tensor.dropped
        );
        artifacts.add_json("demand.json", &tensor).runtime()?;
        artifacts.add("trips_rejected.txt", rejection_log(&rejected));
        if let Some(assembly) = &section.assembly {
            let scenario = ingest::scenario_from_demand(&tensor, counts.clone(), assembly);
            fleetdesign::Scenario::build(scenario.clone()).context("assembled scenario is invalid").invalid()?;
            artifacts.add_json("scenario.json", &scenario).runtime()?;
        }
    }
    finish(artifacts, &out)
}

#[derive(Deserialize)]
struct PosteriorRow {
    alpha: f64,
    mean: f64,
    std: f64,
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

pub fn report(args: &ReportArgs, out: Option<&Path>) -> Outcome {
    let run = &args.run;
    if !run.is_dir() {
        return Err(Failure::Invalid(anyhow!("run directory {} does not exist", run.display())));
    }
    let has = |name: &str| run.join(name).is_file();
    let optimize_run = ["bo_history.csv", "posterior.csv"];
    let train_run = ["trace.csv", "breakdown.json"];
    let complete_optimize = optimize_run.iter().all(|n| has(n));
    let complete_detail = has("breakdown.json");
    if !complete_optimize && !has("trace.csv") && !complete_detail {
        let missing: Vec<&str> = optimize_run.iter().chain(&train_run).copied().filter(|n| !has(n)).collect();
        return Err(Failure::Invalid(anyhow!(
            "{} holds no finished run; missing artifacts: {} (optimize runs need bo_history.csv and posterior.csv, train runs trace.csv and breakdown.json)",
            run.display(),
            missing.join(", ")
        )));
    }
    let out = match out {
        Some(o) => resolve_out(Some(o), "report"),
        None => run.join("report"),
    };

    let mut artifacts = Artifacts::default();
    if complete_optimize {
        let rows: Vec<PosteriorRow> = read_csv(&run.join("posterior.csv")).invalid()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["alpha", "mean", "std", "lower", "upper"]).runtime()?;
        for r in &rows {
            let band = [r.alpha, r.mean, r.std, r.mean - 2.0 * r.std, r.mean + 2.0 * r.std];
            w.write_record(band.map(|v| v.to_string())).runtime()?;
        }
        artifacts.add("posterior_curve.csv", into_bytes(w).runtime()?);

        let history: Vec<BoRecord> = read_csv(&run.join("bo_history.csv")).invalid()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "alpha", "value", "best_so_far"]).runtime()?;
        let mut best = f64::NEG_INFINITY;
        for r in &history {
            best = best.max(r.value);
            w.write_record([r.iteration.to_string(), r.alpha.to_string(), r.value.to_string(), best.to_string()])
                .runtime()?;
        }
        artifacts.add("bo_convergence.csv", into_bytes(w).runtime()?);
    }
    if has("trace.csv") {
        let rows: Vec<TraceRow> = read_csv(&run.join("trace.csv")).invalid()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["episode", "orr", "one_minus_osc", "ptc", "ics", "mean_reward"]).runtime()?;
        for r in &rows {
            let v = [r.orr, r.one_minus_osc, r.ptc, r.ics, r.mean_reward];
            let mut record = vec![r.episode.to_string()];
            record.extend(v.map(|x| x.to_string()));
            w.write_record(record).runtime()?;
        }
        artifacts.add("convergence.csv", into_bytes(w).runtime()?);
    }
    if complete_detail {
        let text = std::fs::read_to_string(run.join("breakdown.json")).runtime()?;
        let b: BreakdownFile = serde_json::from_str(&text).context("parsing breakdown.json").invalid()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["grid", "row", "col", "in_cbd", "share"]).runtime()?;
        for (grid, share) in b.occupancy.iter().enumerate() {
            let record = [
                grid.to_string(),
                (grid / b.width.max(1)).to_string(),
                (grid % b.width.max(1)).to_string(),
                b.cbd.contains(&grid).to_string(),
                share.to_string(),
            ];
            w.write_record(record).runtime()?;
        }
        artifacts.add("occupancy.csv", into_bytes(w).runtime()?);

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "grid", "entry", "exit", "ics"]).runtime()?;
        for (rank, g) in b.ics.iter().enumerate() {
            let record = [(rank + 1).to_string(), g.grid.to_string(), g.entry.to_string(), g.exit.to_string(), g.ics.to_string()];
            w.write_record(record).runtime()?;
        }
        artifacts.add("ics_top_m.csv", into_bytes(w).runtime()?);
    }
    for name in artifacts.names() {
        eprintln!("  {}", PathBuf::from(name).display());
    }
    finish(artifacts, &out)
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> anyhow::Result<Vec<u8>> {
    w.into_inner().map_err(|e| anyhow!("{}", e.error()))
}
