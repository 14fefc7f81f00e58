//! Run configuration and file formats.
//!
//! Configs are TOML. Matrices and vectors are row-major lists of
//! `[re, im]` pairs. Tabulated rates are either inline (`times`, `values`) or
//! a two-column CSV file `time,rate` resolved relative to the config file.
//! Outputs: time series as CSV, jump events as JSON lines, summaries as JSON.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jump::JumpEvent;
use crate::linalg::{C64, Operator, StateVector};
use crate::model::{
    self, DecayChannel, ModelSpec, RateFunction, excited_projector, ground_projector,
};
use crate::propagator::StepControl;

type Pairs = Vec<[f64; 2]>;

fn to_complex(p: &[[f64; 2]]) -> Vec<C64> {
    p.iter().map(|[re, im]| C64::new(*re, *im)).collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    members: u64,
    t_max: f64,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    step: StepControl,
    model: Option<RawModel>,
    model_file: Option<PathBuf>,
    #[serde(default)]
    observables: Vec<RawObservable>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    spacing: Option<f64>,
    times: Option<Vec<f64>>,
    #[serde(default)]
    record_counts: bool,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawRate {
    Constant {
        value: f64,
    },
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
    DampedOscillation {
        amplitude: f64,
        decay: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    Tabulated {
        times: Option<Vec<f64>>,
        values: Option<Vec<f64>>,
        file: Option<PathBuf>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawState {
    Named(String),
    Amplitudes(Pairs),
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    TwoLevel,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<Preset>,
    dim: Option<usize>,
    hamiltonian: Option<Pairs>,
    initial: RawState,
    delta: Option<RawRate>,
    lamb_shift: Option<RawRate>,
    lamb_shift_operator: Option<Pairs>,
    #[serde(default)]
    channels: Vec<RawChannel>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    label: String,
    operator: Pairs,
    rate: RawRate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObservable {
    name: String,
    operator: Option<Pairs>,
    preset: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub name: String,
    pub operator: Operator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub members: u64,
    pub step: StepControl,
    pub t_max: f64,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub observables: Vec<Observable>,
    pub record_counts: bool,
}

impl RunConfig {
    pub fn observable_names(&self) -> Vec<String> {
        self.observables.iter().map(|o| o.name.clone()).collect()
    }
}

/// Uniform grid `0, spacing, ..., t_max` (last point is `t_max` exactly).
pub fn uniform_grid(t_max: f64, spacing: f64) -> Vec<f64> {
    let n = ((t_max / spacing) - 1e-9).ceil().max(1.0) as usize;
    (0..=n).map(|k| (k as f64 * spacing).min(t_max)).collect::<Vec<_>>().into_iter().fold(
        Vec::new(),
        |mut acc, t| {
            if acc.last() != Some(&t) {
                acc.push(t);
            }
            acc
        },
    )
}

/// Reads a two-column `time,rate` CSV; an optional header line is skipped.
pub fn read_rate_table(path: &Path) -> Result<RateFunction> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path.display().to_string(), e))?;
        if rec.len() != 2 {
            return Err(Error::config(
                path.display().to_string(),
                format!("line {}: expected 2 columns, found {}", line + 1, rec.len()),
            ));
        }
        let parsed = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
        match parsed {
            (Ok(t), Ok(v)) => {
                times.push(t);
                values.push(v);
            }
            _ if line == 0 => continue,
            _ => {
                return Err(Error::config(
                    path.display().to_string(),
                    format!("line {}: not numeric", line + 1),
                ));
            }
        }
    }
    let rate = RateFunction::Tabulated { times, values };
    let diags = rate.diagnostics(&path.display().to_string());
    if let Some(d) = diags.into_iter().next() {
        return Err(Error::config(path.display().to_string(), d));
    }
    Ok(rate)
}

impl RawRate {
    fn resolve(self, base: &Path, field: &str) -> Result<RateFunction> {
        let rate = match self {
            RawRate::Constant { value } => RateFunction::Constant { value },
            RawRate::PiecewiseConstant {
                breakpoints,
                values,
            } => RateFunction::PiecewiseConstant {
                breakpoints,
                values,
            },
            RawRate::DampedOscillation {
                amplitude,
                decay,
                frequency,
                phase,
            } => RateFunction::DampedOscillation {
                amplitude,
                decay,
                frequency,
                phase,
            },
            RawRate::Tabulated {
                times: Some(times),
                values: Some(values),
                file: None,
            } => RateFunction::Tabulated { times, values },
            RawRate::Tabulated {
                times: None,
                values: None,
                file: Some(file),
            } => read_rate_table(&base.join(file))?,
            RawRate::Tabulated { .. } => {
                return Err(Error::config(
                    field,
                    "tabulated rate needs either `file` or both `times` and `values`",
                ));
            }
        };
        if let Some(d) = rate.diagnostics(field).into_iter().next() {
            return Err(Error::config(field, d));
        }
        Ok(rate)
    }
}

fn parse_state(raw: RawState, dim: usize) -> Result<StateVector> {
    let field = "model.initial";
    match raw {
        RawState::Named(name) => {
            if dim != 2 {
                return Err(Error::config(field, "named states are only defined for two-level models"));
            }
            match name.as_str() {
                "ground" => Ok(model::ground()),
                "excited" => Ok(model::excited()),
                "superposition" => Ok(model::superposition()),
                other => Err(Error::config(
                    field,
                    format!("unknown state '{other}' (ground, excited, superposition)"),
                )),
            }
        }
        RawState::Amplitudes(p) => {
            if p.len() != dim {
                return Err(Error::config(
                    field,
                    format!("expected {dim} amplitudes, found {}", p.len()),
                ));
            }
            StateVector::new(to_complex(&p))
                .map_err(|_| Error::config(field, "initial state not unit-norm"))
        }
    }
}

fn parse_matrix(p: &[[f64; 2]], dim: usize, field: &str) -> Result<Operator> {
    if p.len() != dim * dim {
        return Err(Error::config(
            field,
            format!("expected {} entries for a {dim}x{dim} matrix, found {}", dim * dim, p.len()),
        ));
    }
    Operator::from_row_major(to_complex(p)).map_err(|e| Error::config(field, e.to_string()))
}

fn build_model(raw: RawModel, base: &Path) -> Result<ModelSpec> {
    let model = match raw.preset {
        Some(Preset::TwoLevel) => {
            if !raw.channels.is_empty() || raw.hamiltonian.is_some() {
                return Err(Error::config(
                    "model",
                    "two_level preset takes `delta`, `lamb_shift` and `initial` only",
                ));
            }
            let delta = raw
                .delta
                .ok_or_else(|| Error::config("model.delta", "required for the two_level preset"))?
                .resolve(base, "model.delta")?;
            let lamb = match raw.lamb_shift {
                Some(r) => r.resolve(base, "model.lamb_shift")?,
                None => RateFunction::zero(),
            };
            let initial = parse_state(raw.initial, 2)?;
            model::build_two_level_model(delta, lamb, initial)?
        }
        None => {
            let dim = raw
                .dim
                .ok_or_else(|| Error::config("model.dim", "required without a preset"))?;
            if raw.delta.is_some() {
                return Err(Error::config("model.delta", "only valid with the two_level preset"));
            }
            let hamiltonian = match &raw.hamiltonian {
                Some(p) => parse_matrix(p, dim, "model.hamiltonian")?,
                None => Operator::zeros(dim),
            };
            let lamb_shift = raw
                .lamb_shift
                .map(|r| r.resolve(base, "model.lamb_shift"))
                .transpose()?;
            let lamb_shift_operator = raw
                .lamb_shift_operator
                .as_deref()
                .map(|p| parse_matrix(p, dim, "model.lamb_shift_operator"))
                .transpose()?;
            let channels = raw
                .channels
                .into_iter()
                .enumerate()
                .map(|(k, ch)| {
                    let op = parse_matrix(&ch.operator, dim, &format!("model.channels[{k}].operator"))?;
                    let rate = ch.rate.resolve(base, &format!("model.channels[{k}].rate"))?;
                    Ok(DecayChannel::new(ch.label, op, rate))
                })
                .collect::<Result<Vec<_>>>()?;
            let initial_state = parse_state(raw.initial, dim)?;
            ModelSpec {
                dim,
                hamiltonian,
                lamb_shift,
                lamb_shift_operator,
                channels,
                initial_state,
            }
            .checked()?
        }
    };
    Ok(model)
}

fn default_observables(dim: usize) -> Vec<Observable> {
    if dim == 2 {
        return vec![
            Observable {
                name: "P_g".into(),
                operator: ground_projector(),
            },
            Observable {
                name: "P_e".into(),
                operator: excited_projector(),
            },
        ];
    }
    (0..dim)
        .map(|k| {
            let mut op = Operator::zeros(dim);
            op.set(k, k, crate::linalg::ONE);
            Observable {
                name: format!("P_{k}"),
                operator: op,
            }
        })
        .collect()
}

fn parse_observable(raw: RawObservable, dim: usize, k: usize) -> Result<Observable> {
    let field = format!("observables[{k}]");
    let operator = match (raw.operator, raw.preset.as_deref()) {
        (Some(p), None) => parse_matrix(&p, dim, &format!("{field}.operator"))?,
        (None, Some("excited")) if dim == 2 => excited_projector(),
        (None, Some("ground")) if dim == 2 => ground_projector(),
        (None, Some(p)) if p.starts_with("population:") => {
            let level: usize = p["population:".len()..]
                .parse()
                .map_err(|_| Error::config(&field, format!("bad preset '{p}'")))?;
            if level >= dim {
                return Err(Error::config(&field, format!("level {level} out of range")));
            }
            let mut op = Operator::zeros(dim);
            op.set(level, level, crate::linalg::ONE);
            op
        }
        (None, Some(p)) => return Err(Error::config(&field, format!("unknown preset '{p}'"))),
        _ => return Err(Error::config(&field, "give exactly one of `operator` or `preset`")),
    };
    Ok(Observable {
        name: raw.name,
        operator,
    })
}

fn deserialize_at<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let value: toml::Value = toml::from_str(text)
        .map_err(|e| Error::config(origin, e.to_string().trim().to_string()))?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." { origin.to_string() } else { path },
            // the toml deserializer appends its own location line
            e.into_inner().to_string().lines().next().unwrap_or_default().to_string(),
        )
    })
}

/// Parses and validates a run configuration; relative file references resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    parse_config_seeded(text, base_dir, None)
}

/// As [`parse_config`], with `seed` taking precedence over the file's seed.
pub fn parse_config_seeded(text: &str, base_dir: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let raw: RawConfig = deserialize_at(text, "config")?;
    let seed = seed
        .or(raw.seed)
        .ok_or_else(|| Error::config("seed", "seed required"))?;
    if raw.members == 0 {
        return Err(Error::config("members", "must be at least 1"));
    }
    if !(raw.t_max > 0.0 && raw.t_max.is_finite()) {
        return Err(Error::config("t_max", "must be positive"));
    }
    if let Some(d) = raw.step.diagnostics().into_iter().next() {
        return Err(Error::config("step", d));
    }
    let model = match (raw.model, raw.model_file) {
        (Some(m), None) => build_model(m, base_dir)?,
        (None, Some(path)) => {
            let full = base_dir.join(&path);
            let text = fs::read_to_string(&full).map_err(|e| Error::io(full.display().to_string(), e))?;
            let raw: RawModel = deserialize_at(&text, &full.display().to_string())?;
            build_model(raw, full.parent().unwrap_or(base_dir))?
        }
        _ => return Err(Error::config("model", "give exactly one of `model` or `model_file`")),
    };
    let window = model.window_diagnostics(raw.t_max);
    if !window.is_empty() {
        return Err(Error::InvalidModel(window));
    }
    let grid = match (raw.output.spacing, raw.output.times) {
        (Some(s), None) if s > 0.0 => uniform_grid(raw.t_max, s),
        (None, Some(times)) => times,
        (None, None) => uniform_grid(raw.t_max, raw.t_max / 100.0),
        _ => {
            return Err(Error::config(
                "output",
                "give one of `spacing` (> 0) or `times`",
            ));
        }
    };
    crate::propagator::check_grid(&grid).map_err(|e| Error::config("output", e.to_string()))?;
    if grid.iter().any(|&t| t > raw.t_max) {
        return Err(Error::config("output.times", "grid extends past t_max"));
    }
    let observables = if raw.observables.is_empty() {
        default_observables(model.dim)
    } else {
        raw.observables
            .into_iter()
            .enumerate()
            .map(|(k, o)| parse_observable(o, model.dim, k))
            .collect::<Result<_>>()?
    };
    Ok(RunConfig {
        model,
        members: raw.members,
        step: raw.step,
        t_max: raw.t_max,
        grid,
        seed,
        observables,
        record_counts: raw.output.record_counts,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    load_config_seeded(path, None)
}

pub fn load_config_seeded(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_seeded(&text, path.parent().unwrap_or(Path::new(".")), seed)
}

/// One output row.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRecord {
    pub t: f64,
    pub values: Vec<f64>,
    /// Absent for oracle series.
    pub n_eff: Option<usize>,
    /// `(id, count)` per entry, when requested. Either every row carries counts or none does.
    pub counts: Option<Vec<(u64, u64)>>,
}

fn format_counts(c: &[(u64, u64)]) -> String {
    c.iter().map(|(id, n)| format!("{id}:{n}")).collect::<Vec<_>>().join(";")
}

fn parse_counts(s: &str) -> Option<Vec<(u64, u64)>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(';')
        .map(|kv| {
            let (a, b) = kv.split_once(':')?;
            Some((a.parse().ok()?, b.parse().ok()?))
        })
        .collect()
}

/// Header `t,<names...>,n_eff[,counts]`; floats use shortest round-trip formatting.
pub fn write_timeseries<W: Write>(out: W, names: &[String], records: &[TimeSeriesRecord]) -> Result<()> {
    let with_counts = records.iter().any(|r| r.counts.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    header.push("n_eff".into());
    if with_counts {
        header.push("counts".into());
    }
    w.write_record(&header).map_err(|e| Error::io("time series", e))?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.values.iter().map(|v| v.to_string()));
        row.push(r.n_eff.map(|n| n.to_string()).unwrap_or_default());
        if with_counts {
            row.push(r.counts.as_deref().map(format_counts).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| Error::io("time series", e))?;
    }
    w.flush().map_err(|e| Error::io("time series", e))?;
    Ok(())
}

pub fn read_timeseries<R: Read>(input: R) -> Result<(Vec<String>, Vec<TimeSeriesRecord>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::io("time series", e))?
        .iter()
        .map(str::to_string)
        .collect();
    let with_counts = header.last().map(String::as_str) == Some("counts");
    let n_obs = header.len() - 2 - usize::from(with_counts);
    let names = header[1..1 + n_obs].to_vec();
    let bad = |what: &str| Error::config("time series", format!("unparsable {what}"));
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::io("time series", e))?;
        let t = rec[0].parse().map_err(|_| bad("t"))?;
        let values = (1..=n_obs)
            .map(|k| rec[k].parse().map_err(|_| bad(&header[k])))
            .collect::<Result<_>>()?;
        let n_eff = match &rec[1 + n_obs] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("n_eff"))?),
        };
        let counts = if with_counts {
            Some(parse_counts(&rec[2 + n_obs]).ok_or_else(|| bad("counts"))?)
        } else {
            None
        };
        records.push(TimeSeriesRecord {
            t,
            values,
            n_eff,
            counts,
        });
    }
    Ok((names, records))
}

pub fn write_events<W: Write>(mut out: W, events: &[JumpEvent]) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut out, ev).map_err(|e| Error::io("event log", e))?;
        out.write_all(b"\n").map_err(|e| Error::io("event log", e))?;
    }
    Ok(())
}

pub fn read_events<R: Read>(input: R) -> Result<Vec<JumpEvent>> {
    BufReader::new(input)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io("event log", e))?;
            serde_json::from_str(&line).map_err(|e| Error::io("event log", e))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}
