//! Run modes: ensemble, single trajectory, oracle, comparison and benchmark.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::io::{self, RunConfig, TimeSeriesRecord};
use crate::jump::{Engine, JumpEvent, JumpSign, StepOutcome};
use crate::linalg;
use crate::naive;
use crate::oracle::{self, ErrorReport, McPoint, McSeries, OracleSolution};
use crate::propagator::no_jump_trajectory;

/// Deterministic run statistics. Wall-clock time is reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub members: u64,
    pub seed: u64,
    pub t_max: f64,
    pub dt: f64,
    pub grid_points: usize,
    pub substeps: u64,
    pub min_dt_used: f64,
    pub max_jump_prob_seen: f64,
    pub positive_events: u64,
    pub negative_events: u64,
    pub positive_members_moved: u64,
    pub negative_members_moved: u64,
    pub orphan_warnings: u64,
    pub peak_n_eff: usize,
    pub final_n_eff: usize,
}

impl RunSummary {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            members: cfg.members,
            seed: cfg.seed,
            t_max: cfg.t_max,
            dt: cfg.step.dt,
            grid_points: cfg.grid.len(),
            substeps: 0,
            min_dt_used: cfg.step.dt,
            max_jump_prob_seen: 0.0,
            positive_events: 0,
            negative_events: 0,
            positive_members_moved: 0,
            negative_members_moved: 0,
            orphan_warnings: 0,
            peak_n_eff: 1,
            final_n_eff: 1,
        }
    }

    fn absorb(&mut self, out: &StepOutcome, e: &Ensemble) {
        self.substeps += u64::from(out.substeps);
        if out.substeps > 0 {
            self.min_dt_used = self.min_dt_used.min(out.dt_used);
        }
        self.max_jump_prob_seen = self.max_jump_prob_seen.max(out.max_prob_seen);
        self.orphan_warnings += u64::from(out.orphan_warnings);
        for ev in &out.events {
            match ev.sign {
                JumpSign::Positive => {
                    self.positive_events += 1;
                    self.positive_members_moved += ev.members_moved;
                }
                JumpSign::Negative => {
                    self.negative_events += 1;
                    self.negative_members_moved += ev.members_moved;
                }
            }
        }
        self.peak_n_eff = self.peak_n_eff.max(e.n_eff());
        self.final_n_eff = e.n_eff();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub mode: String,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub names: Vec<String>,
    pub records: Vec<TimeSeriesRecord>,
    /// Per grid point, per observable: count-weighted spread of the entry expectation values.
    pub variances: Vec<Vec<f64>>,
    pub events: Vec<JumpEvent>,
    pub summary: RunSummary,
    pub wall_seconds: f64,
}

impl EnsembleRun {
    pub fn mc_series(&self, k: usize) -> McSeries {
        McSeries {
            members: self.summary.members,
            points: self
                .records
                .iter()
                .zip(&self.variances)
                .map(|(r, v)| McPoint {
                    t: r.t,
                    mean: r.values[k],
                    variance: v[k],
                })
                .collect(),
        }
    }
}

fn record(cfg: &RunConfig, e: &Ensemble) -> Result<(TimeSeriesRecord, Vec<f64>)> {
    let mut values = Vec::with_capacity(cfg.observables.len());
    let mut vars = Vec::with_capacity(cfg.observables.len());
    for o in &cfg.observables {
        let (mean, var) = e.expectation_spread(&o.operator)?;
        values.push(mean);
        vars.push(var);
    }
    let counts = cfg
        .record_counts
        .then(|| e.states().iter().map(|s| (s.id, s.count)).collect());
    Ok((
        TimeSeriesRecord {
            t: e.time(),
            values,
            n_eff: Some(e.n_eff()),
            counts,
        },
        vars,
    ))
}

/// Runs the compressed ensemble, calling `observe` after every step.
pub fn run_ensemble_with<F>(cfg: &RunConfig, mut observe: F) -> Result<EnsembleRun>
where
    F: FnMut(&Ensemble, &StepOutcome) -> Result<()>,
{
    let start = Instant::now();
    let mut engine = Engine::new(&cfg.model, cfg.step, cfg.members, cfg.seed);
    let mut summary = RunSummary::new(cfg);
    let mut records = Vec::with_capacity(cfg.grid.len());
    let mut variances = Vec::with_capacity(cfg.grid.len());
    let mut events = Vec::new();
    for (k, &t) in cfg.grid.iter().enumerate() {
        if k > 0 {
            let out = engine.advance_to_with(t, |e, step| {
                summary.absorb(step, e);
                observe(e, step)
            })?;
            events.extend(out.events);
        }
        let (rec, var) = record(cfg, engine.ensemble())?;
        records.push(rec);
        variances.push(var);
    }
    Ok(EnsembleRun {
        names: cfg.observable_names(),
        records,
        variances,
        events,
        summary,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ensemble(cfg: &RunConfig) -> Result<EnsembleRun> {
    run_ensemble_with(cfg, |_, _| Ok(()))
}

/// Per-step consistency checks: count conservation, unit norms, and a valid density matrix.
pub fn step_invariants(e: &Ensemble) -> Vec<String> {
    let mut out = e.invariant_violations();
    out.extend(e.assemble_density().check(1e-12, 1e-10, 1e-12));
    out
}

#[derive(Debug, Clone)]
pub struct TrajectoryRun {
    /// Columns: per-basis probabilities, then `entry_id` and `no_jump_fidelity`.
    pub names: Vec<String>,
    pub records: Vec<TimeSeriesRecord>,
    pub tracked_events: Vec<JumpEvent>,
    pub events: Vec<JumpEvent>,
    pub summary: RunSummary,
    pub wall_seconds: f64,
}

fn basis_names(dim: usize) -> Vec<String> {
    if dim == 2 {
        vec!["p_g".into(), "p_e".into()]
    } else {
        (0..dim).map(|k| format!("p_{k}")).collect()
    }
}

/// Follows one member of a virtual ensemble of `cfg.members`.
pub fn run_trajectory(cfg: &RunConfig) -> Result<TrajectoryRun> {
    let start = Instant::now();
    let no_jump = no_jump_trajectory(&cfg.model, &cfg.grid, &cfg.step)?;
    let mut engine = Engine::new(&cfg.model, cfg.step, cfg.members, cfg.seed);
    engine.track_member();
    let mut summary = RunSummary::new(cfg);
    let mut tracked_events = Vec::new();
    let mut events = Vec::new();
    let mut records = Vec::with_capacity(cfg.grid.len());
    for (k, &t) in cfg.grid.iter().enumerate() {
        if k > 0 {
            let out = engine.advance_to_with(t, |e, step| {
                summary.absorb(step, e);
                tracked_events.extend(step.tracked_jumps.iter().cloned());
                Ok(())
            })?;
            events.extend(out.events);
        }
        let id = engine.tracked_id().expect("tracking enabled");
        let state = engine.tracked_state().expect("tracked entry is populated");
        let mut values = state.probabilities();
        values.push(id as f64);
        values.push(linalg::overlap_fidelity(state, &no_jump[k])?);
        records.push(TimeSeriesRecord {
            t,
            values,
            n_eff: Some(engine.ensemble().n_eff()),
            counts: None,
        });
    }
    let mut names = basis_names(cfg.model.dim);
    names.push("entry_id".into());
    names.push("no_jump_fidelity".into());
    Ok(TrajectoryRun {
        names,
        records,
        tracked_events,
        events,
        summary,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub names: Vec<String>,
    pub solution: OracleSolution,
    pub records: Vec<TimeSeriesRecord>,
    pub wall_seconds: f64,
}

pub fn run_oracle(cfg: &RunConfig) -> Result<OracleRun> {
    let start = Instant::now();
    let solution = oracle::integrate_master_equation(&cfg.model, &cfg.grid)?;
    let columns = cfg
        .observables
        .iter()
        .map(|o| solution.observable(&o.operator))
        .collect::<Result<Vec<_>>>()?;
    let records = cfg
        .grid
        .iter()
        .enumerate()
        .map(|(k, &t)| TimeSeriesRecord {
            t,
            values: columns.iter().map(|c| c[k]).collect(),
            n_eff: None,
            counts: None,
        })
        .collect();
    Ok(OracleRun {
        names: cfg.observable_names(),
        solution,
        records,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct CompareRun {
    pub ensemble: EnsembleRun,
    pub oracle: OracleRun,
    pub reports: Vec<ErrorReport>,
}

impl CompareRun {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }
}

pub fn run_compare(cfg: &RunConfig) -> Result<CompareRun> {
    let ensemble = run_ensemble(cfg)?;
    let oracle = run_oracle(cfg)?;
    let reports = cfg
        .observables
        .iter()
        .enumerate()
        .map(|(k, o)| oracle::compare_to_oracle(&o.name, &ensemble.mc_series(k), &oracle.solution, &o.operator))
        .collect::<Result<_>>()?;
    Ok(CompareRun {
        ensemble,
        oracle,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub members: u64,
    pub peak_n_eff: usize,
    pub compressed_seconds: f64,
    /// Absent when the naive mode was skipped or refused the size.
    pub naive_seconds: Option<f64>,
    pub ratio: Option<f64>,
}

/// Times the compressed engine (and optionally the naive one) for each config and member count.
pub fn run_bench(configs: &[(String, RunConfig)], members: &[u64], with_naive: bool) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (label, base) in configs {
        for &n in members {
            let cfg = RunConfig {
                members: n,
                ..base.clone()
            };
            let compressed = run_ensemble(&cfg)?;
            let naive_seconds = if with_naive && n <= naive::NAIVE_MAX_MEMBERS {
                let start = Instant::now();
                naive::run_naive(&cfg)?;
                Some(start.elapsed().as_secs_f64())
            } else {
                None
            };
            rows.push(BenchRow {
                label: label.clone(),
                members: n,
                peak_n_eff: compressed.summary.peak_n_eff,
                compressed_seconds: compressed.wall_seconds,
                naive_seconds,
                ratio: naive_seconds.map(|s| s / compressed.wall_seconds.max(1e-12)),
            });
        }
    }
    Ok(rows)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_series(path: &Path, names: &[String], records: &[TimeSeriesRecord]) -> Result<()> {
    io::write_timeseries(io::create_file(path)?, names, records)
}

fn write_event_log(path: &Path, events: &[JumpEvent]) -> Result<()> {
    io::write_events(io::create_file(path)?, events)
}

fn write_timing(dir: &Path, mode: &str, wall_seconds: f64) -> Result<()> {
    io::write_json(
        &dir.join("timing.json"),
        &Timing {
            mode: mode.into(),
            wall_seconds,
        },
    )
}

/// `timeseries.csv`, `events.jsonl`, `summary.json`, `timing.json`.
pub fn write_ensemble_outputs(dir: &Path, run: &EnsembleRun) -> Result<()> {
    ensure_dir(dir)?;
    write_series(&dir.join("timeseries.csv"), &run.names, &run.records)?;
    write_event_log(&dir.join("events.jsonl"), &run.events)?;
    io::write_json(&dir.join("summary.json"), &run.summary)?;
    write_timing(dir, "run", run.wall_seconds)
}

/// `trajectory.csv`, `trajectory_events.jsonl`, `events.jsonl`, `summary.json`, `timing.json`.
pub fn write_trajectory_outputs(dir: &Path, run: &TrajectoryRun) -> Result<()> {
    ensure_dir(dir)?;
    write_series(&dir.join("trajectory.csv"), &run.names, &run.records)?;
    write_event_log(&dir.join("trajectory_events.jsonl"), &run.tracked_events)?;
    write_event_log(&dir.join("events.jsonl"), &run.events)?;
    io::write_json(&dir.join("summary.json"), &run.summary)?;
    write_timing(dir, "trajectory", run.wall_seconds)
}

/// `oracle.csv`, `timing.json`.
pub fn write_oracle_outputs(dir: &Path, run: &OracleRun) -> Result<()> {
    ensure_dir(dir)?;
    write_series(&dir.join("oracle.csv"), &run.names, &run.records)?;
    write_timing(dir, "oracle", run.wall_seconds)
}

/// Ensemble and oracle outputs plus `compare.json`.
pub fn write_compare_outputs(dir: &Path, run: &CompareRun) -> Result<()> {
    write_ensemble_outputs(dir, &run.ensemble)?;
    write_series(&dir.join("oracle.csv"), &run.oracle.names, &run.oracle.records)?;
    io::write_json(&dir.join("compare.json"), &run.reports)?;
    write_timing(dir, "compare", run.ensemble.wall_seconds + run.oracle.wall_seconds)
}

/// `bench.csv` and `bench.json`.
pub fn write_bench_outputs(dir: &Path, rows: &[BenchRow]) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join("bench.csv");
    let mut w = csv::Writer::from_writer(io::create_file(&path)?);
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    io::write_json(&dir.join("bench.json"), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    const CFG: &str = r#"
seed = 11
members = 2000
t_max = 1.0
[output]
spacing = 0.25
record_counts = true
[step]
dt = 0.01
[model]
preset = "two_level"
initial = "excited"
delta = { kind = "damped_oscillation", amplitude = 1.0, decay = 0.25, frequency = 2.0 }
"#;

    fn cfg() -> RunConfig {
        io::parse_config(CFG, Path::new(".")).unwrap()
    }

    #[test]
    fn ensemble_run_shapes_and_conservation() {
        let cfg = cfg();
        let run = run_ensemble_with(&cfg, |e, _| {
            assert_eq!(e.count_sum(), 2000);
            Ok(())
        })
        .unwrap();
        assert_eq!(run.records.len(), 5);
        assert_eq!(run.records[0].values, vec![0.0, 1.0]);
        assert_eq!(run.summary.substeps, 100);
        assert_eq!(run.summary.peak_n_eff, 2);
        let moved: u64 = run.events.iter().map(|e| e.members_moved).sum();
        assert_eq!(moved, run.summary.positive_members_moved + run.summary.negative_members_moved);
        for r in &run.records {
            assert!((r.values[0] + r.values[1] - 1.0).abs() < 1e-12);
            let counts = r.counts.as_ref().unwrap();
            assert_eq!(counts.iter().map(|c| c.1).sum::<u64>(), 2000);
        }
    }

    #[test]
    fn trajectory_starts_on_no_jump_path() {
        let cfg = cfg();
        let run = run_trajectory(&cfg).unwrap();
        assert_eq!(run.names, vec!["p_g", "p_e", "entry_id", "no_jump_fidelity"]);
        let first = &run.records[0];
        assert_eq!(first.values, vec![0.0, 1.0, 0.0, 1.0]);
        for r in &run.records {
            assert!((r.values[0] + r.values[1] - 1.0).abs() < 1e-12);
        }
        assert!(run.tracked_events.len() <= run.events.len());
    }

    #[test]
    fn compare_and_bench() {
        let cfg = cfg();
        let cmp = run_compare(&cfg).unwrap();
        assert_eq!(cmp.reports.len(), 2);
        assert!(cmp.passed(), "{:?}", cmp.reports);
        let rows = run_bench(&[("decay".into(), cfg)], &[100, 200], true).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.naive_seconds.is_some() && r.peak_n_eff <= 2));
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let run = run_ensemble(&cfg).unwrap();
        write_ensemble_outputs(dir.path(), &run).unwrap();
        for f in ["timeseries.csv", "events.jsonl", "summary.json", "timing.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let (names, back) = io::read_timeseries(fs::File::open(dir.path().join("timeseries.csv")).unwrap()).unwrap();
        assert_eq!(names, run.names);
        assert_eq!(back, run.records);
        let ev = io::read_events(fs::File::open(dir.path().join("events.jsonl")).unwrap()).unwrap();
        assert_eq!(ev, run.events);
    }
}
