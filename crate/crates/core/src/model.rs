//! Time-local master equations with signed, time-dependent decay rates.
//!
//! A [`ModelSpec`] holds the system Hamiltonian, the decay channels
//! `(C_j, Delta_j(t))` and an optional Lamb-shift term `(S(t)/2) L`. Rates may
//! be negative on finite intervals; nothing here assumes positivity.
//! `hbar = 1` throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{C64, I, ONE, Operator, StateVector};

/// Hermiticity tolerance for the system Hamiltonian.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Signed scalar function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateFunction {
    Constant {
        value: f64,
    },
    /// `values[0]` before `breakpoints[0]`, `values[i]` on `[breakpoints[i-1], breakpoints[i])`.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
    /// `amplitude * exp(-decay t) * sin(frequency t + phase)`.
    DampedOscillation {
        amplitude: f64,
        decay: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Linear interpolation on an ascending table; no extrapolation.
    Tabulated {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

fn domain_slack(t: f64) -> f64 {
    1e-9 * (1.0 + t.abs())
}

impl RateFunction {
    pub fn constant(value: f64) -> Self {
        RateFunction::Constant { value }
    }

    pub fn zero() -> Self {
        RateFunction::Constant { value: 0.0 }
    }

    pub fn evaluate(&self, t: f64) -> Result<f64> {
        match self {
            RateFunction::Constant { value } => Ok(*value),
            RateFunction::PiecewiseConstant { breakpoints, values } => {
                let idx = breakpoints.partition_point(|&b| b <= t);
                Ok(values[idx])
            }
            RateFunction::DampedOscillation {
                amplitude,
                decay,
                frequency,
                phase,
            } => Ok(amplitude * (-decay * t).exp() * (frequency * t + phase).sin()),
            RateFunction::Tabulated { times, values } => {
                let (start, end) = (times[0], times[times.len() - 1]);
                if t < start - domain_slack(start) || t > end + domain_slack(end) {
                    return Err(Error::OutsideRateDomain { t, start, end });
                }
                let t = t.clamp(start, end);
                // first index with times[idx] > t
                let idx = times.partition_point(|&x| x <= t);
                if idx == 0 {
                    return Ok(values[0]);
                }
                if idx == times.len() {
                    return Ok(values[times.len() - 1]);
                }
                let (t0, t1) = (times[idx - 1], times[idx]);
                if t == t0 {
                    return Ok(values[idx - 1]);
                }
                let w = (t - t0) / (t1 - t0);
                Ok(values[idx - 1] + w * (values[idx] - values[idx - 1]))
            }
        }
    }

    /// Points where the function or its derivative may be discontinuous.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            RateFunction::PiecewiseConstant { breakpoints, .. } => breakpoints.clone(),
            RateFunction::Tabulated { times, .. } => times.clone(),
            _ => Vec::new(),
        }
    }

    /// Closed interval on which the function may be evaluated.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            RateFunction::Tabulated { times, .. } => (times[0], times[times.len() - 1]),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn diagnostics(&self, what: &str) -> Vec<String> {
        let mut out = Vec::new();
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            RateFunction::Constant { value } => {
                if !value.is_finite() {
                    out.push(format!("{what}: constant rate not finite"));
                }
            }
            RateFunction::PiecewiseConstant { breakpoints, values } => {
                if values.len() != breakpoints.len() + 1 {
                    out.push(format!(
                        "{what}: piecewise rate needs {} values for {} breakpoints, got {}",
                        breakpoints.len() + 1,
                        breakpoints.len(),
                        values.len()
                    ));
                }
                if !breakpoints.windows(2).all(|w| w[0] < w[1]) {
                    out.push(format!("{what}: piecewise breakpoints not ascending"));
                }
                if !finite(breakpoints) || !finite(values) {
                    out.push(format!("{what}: piecewise rate not finite"));
                }
            }
            RateFunction::DampedOscillation {
                amplitude,
                decay,
                frequency,
                phase,
            } => {
                if !finite(&[*amplitude, *decay, *frequency, *phase]) {
                    out.push(format!("{what}: damped oscillation parameters not finite"));
                }
                if *decay < 0.0 {
                    out.push(format!("{what}: damped oscillation decay must be >= 0"));
                }
            }
            RateFunction::Tabulated { times, values } => {
                if times.len() < 2 {
                    out.push(format!("{what}: tabulated rate needs at least two points"));
                }
                if times.len() != values.len() {
                    out.push(format!(
                        "{what}: tabulated rate has {} times but {} values",
                        times.len(),
                        values.len()
                    ));
                }
                if !times.windows(2).all(|w| w[0] < w[1]) {
                    out.push(format!("{what}: tabulated times not ascending"));
                }
                if !finite(times) || !finite(values) {
                    out.push(format!("{what}: tabulated rate not finite"));
                }
            }
        }
        out
    }
}

/// One dissipative channel `(C, Delta(t))` with `C^dag C` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayChannel {
    label: String,
    operator: Operator,
    rate: RateFunction,
    c_dag_c: Operator,
}

impl DecayChannel {
    pub fn new(label: impl Into<String>, operator: Operator, rate: RateFunction) -> Self {
        let c_dag_c = operator
            .adjoint()
            .matmul(&operator)
            .expect("adjoint has matching dimension");
        Self {
            label: label.into(),
            operator,
            rate,
            c_dag_c,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn operator(&self) -> &Operator {
        &self.operator
    }

    pub fn rate(&self) -> &RateFunction {
        &self.rate
    }

    pub fn c_dag_c(&self) -> &Operator {
        &self.c_dag_c
    }
}

pub fn evaluate_rate(channel: &DecayChannel, t: f64) -> Result<f64> {
    channel.rate.evaluate(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dim: usize,
    pub hamiltonian: Operator,
    pub lamb_shift: Option<RateFunction>,
    pub lamb_shift_operator: Option<Operator>,
    pub channels: Vec<DecayChannel>,
    pub initial_state: StateVector,
}

impl ModelSpec {
    /// Runs [`validate`] and fails on any diagnostic.
    pub fn checked(self) -> Result<Self> {
        let diags = validate(&self);
        if diags.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidModel(diags))
        }
    }

    /// The Lamb-shift operator, defaulting to `sigma_+ sigma_-` in two dimensions.
    pub fn lamb_operator(&self) -> Option<Operator> {
        match (&self.lamb_shift, &self.lamb_shift_operator) {
            (None, _) => None,
            (Some(_), Some(op)) => Some(op.clone()),
            (Some(_), None) if self.dim == 2 => Some(excited_projector()),
            (Some(_), None) => None,
        }
    }

    /// Hermitian part `H_s + (S(t)/2) L`.
    pub fn hermitian_part(&self, t: f64) -> Result<Operator> {
        let mut h = self.hamiltonian.clone();
        if let (Some(s), Some(l)) = (&self.lamb_shift, self.lamb_operator()) {
            let s = s.evaluate(t)?;
            if s != 0.0 {
                h.add_scaled(C64::new(0.5 * s, 0.0), &l)?;
            }
        }
        Ok(h)
    }

    pub fn rates_at(&self, t: f64) -> Result<Vec<f64>> {
        self.channels.iter().map(|c| c.rate.evaluate(t)).collect()
    }

    /// Diagnostics for a simulation window `[0, t_max]`, on top of [`validate`].
    pub fn window_diagnostics(&self, t_max: f64) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |what: String, rate: &RateFunction| {
            let (lo, hi) = rate.domain();
            if lo > domain_slack(lo) || hi < t_max - domain_slack(t_max) {
                out.push(format!(
                    "{what}: tabulated domain [{lo}, {hi}] does not cover [0, {t_max}]"
                ));
            }
        };
        for ch in &self.channels {
            check(format!("channel '{}' rate", ch.label), &ch.rate);
        }
        if let Some(s) = &self.lamb_shift {
            check("lamb shift".into(), s);
        }
        out
    }
}

/// `H_s + (S/2) L - (i/2) sum_j Delta_j(t) C_j^dag C_j`.
pub fn effective_hamiltonian(model: &ModelSpec, t: f64) -> Result<Operator> {
    let mut h = model.hermitian_part(t)?;
    for ch in &model.channels {
        let rate = ch.rate.evaluate(t)?;
        if rate != 0.0 {
            h.add_scaled(I * (-0.5 * rate), &ch.c_dag_c)?;
        }
    }
    Ok(h)
}

/// Empty iff every model invariant holds.
pub fn validate(model: &ModelSpec) -> Vec<String> {
    let mut diags = Vec::new();
    let d = model.dim;
    if d == 0 {
        diags.push("dimension must be positive".to_string());
    }
    if model.hamiltonian.dim() != d {
        diags.push(format!(
            "hamiltonian dimension {} does not match model dimension {d}",
            model.hamiltonian.dim()
        ));
    } else if !model.hamiltonian.is_hermitian(HERMITIAN_TOL) {
        diags.push("hamiltonian not Hermitian".to_string());
    }
    if !model.hamiltonian.is_finite() {
        diags.push("hamiltonian not finite".to_string());
    }
    if model.channels.is_empty() {
        diags.push("model needs at least one decay channel".to_string());
    }
    for ch in &model.channels {
        if ch.operator.dim() != d {
            diags.push(format!(
                "channel '{}' operator dimension {} does not match model dimension {d}",
                ch.label,
                ch.operator.dim()
            ));
        }
        if !ch.operator.is_finite() {
            diags.push(format!("channel '{}' operator not finite", ch.label));
        }
        diags.extend(ch.rate.diagnostics(&format!("channel '{}' rate", ch.label)));
    }
    if let Some(s) = &model.lamb_shift {
        diags.extend(s.diagnostics("lamb shift"));
        match &model.lamb_shift_operator {
            Some(l) if l.dim() != d => diags.push(format!(
                "lamb shift operator dimension {} does not match model dimension {d}",
                l.dim()
            )),
            Some(l) if !l.is_hermitian(HERMITIAN_TOL) => {
                diags.push("lamb shift operator not Hermitian".to_string())
            }
            None if d != 2 => diags
                .push("lamb shift operator required for models that are not two-level".to_string()),
            _ => {}
        }
    }
    if model.initial_state.dim() != d {
        diags.push(format!(
            "initial state dimension {} does not match model dimension {d}",
            model.initial_state.dim()
        ));
    }
    let n = crate::linalg::norm_sq(model.initial_state.amps());
    if (n - 1.0).abs() > crate::linalg::NORM_TOL {
        diags.push(format!("initial state not unit-norm (norm^2 = {n})"));
    }
    diags
}

/// `sigma_- = |g><e|` in the `{|g>, |e>}` basis.
pub fn sigma_minus() -> Operator {
    let mut op = Operator::zeros(2);
    op.set(0, 1, ONE);
    op
}

pub fn sigma_plus() -> Operator {
    sigma_minus().adjoint()
}

/// `sigma_+ sigma_- = |e><e|`.
pub fn excited_projector() -> Operator {
    let mut op = Operator::zeros(2);
    op.set(1, 1, ONE);
    op
}

pub fn ground_projector() -> Operator {
    let mut op = Operator::zeros(2);
    op.set(0, 0, ONE);
    op
}

pub fn ground() -> StateVector {
    StateVector::basis(2, 0)
}

pub fn excited() -> StateVector {
    StateVector::basis(2, 1)
}

/// `(|g> + |e>)/sqrt(2)`.
pub fn superposition() -> StateVector {
    StateVector::normalized(vec![ONE, ONE]).expect("nonzero")
}

/// Two-level atom with a single `sigma_-` channel of rate `delta` and Lamb shift `lamb`.
pub fn build_two_level_model(
    delta: RateFunction,
    lamb: RateFunction,
    initial: StateVector,
) -> Result<ModelSpec> {
    if initial.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: initial.dim(),
        });
    }
    ModelSpec {
        dim: 2,
        hamiltonian: Operator::zeros(2),
        lamb_shift: Some(lamb),
        lamb_shift_operator: Some(excited_projector()),
        channels: vec![DecayChannel::new("sigma_minus", sigma_minus(), delta)],
        initial_state: initial,
    }
    .checked()
}
