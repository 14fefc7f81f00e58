//! Deterministic non-unitary evolution under the effective Hamiltonian
//! `H(t) = H_s + (S/2) L - (i/2) sum_j Delta_j(t) C_j^dag C_j`.
//!
//! Each step integrates the linear ODE `d|phi>/dt = -i H(t) |phi>` without
//! renormalizing; callers renormalize once per step. Global phase is left
//! untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64, I, Operator, StateVector, ZERO};
use crate::model::{ModelSpec, effective_hamiltonian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorOrder {
    /// `(1 - i H dt) |psi>`, rates frozen at the step start.
    First,
    /// Classical four-stage Runge-Kutta with rates at stage times.
    #[default]
    Fourth,
}

impl IntegratorOrder {
    pub fn order(self) -> u32 {
        match self {
            IntegratorOrder::First => 1,
            IntegratorOrder::Fourth => 4,
        }
    }
}

/// What to do when a negative channel has no populated source state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrphanPolicy {
    #[default]
    Strict,
    Permissive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepControl {
    pub dt: f64,
    /// Upper bound on the summed jump probability of any entry in one step.
    pub max_jump_prob: f64,
    pub integrator_order: IntegratorOrder,
    /// Halve the step on probability overflow instead of failing.
    pub adaptive_dt: bool,
    pub orphan_policy: OrphanPolicy,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            max_jump_prob: 0.1,
            integrator_order: IntegratorOrder::Fourth,
            adaptive_dt: true,
            orphan_policy: OrphanPolicy::Strict,
        }
    }
}

impl StepControl {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            out.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.max_jump_prob > 0.0 && self.max_jump_prob <= 0.5) {
            out.push(format!(
                "max_jump_prob must lie in (0, 0.5], got {}",
                self.max_jump_prob
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnnormalizedState {
    amps: Vec<C64>,
    norm_sq: f64,
}

impl UnnormalizedState {
    pub fn new(amps: Vec<C64>) -> Self {
        let norm_sq = linalg::norm_sq(&amps);
        Self { amps, norm_sq }
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }
}

/// Generator matrices `-i H` at the stage times of one step.
#[derive(Debug, Clone)]
pub(crate) enum Stages {
    First { m: Operator },
    Fourth { dt: f64, a0: Operator, a_mid: Operator, a1: Operator },
}

impl Stages {
    pub(crate) fn new(model: &ModelSpec, t: f64, dt: f64, order: IntegratorOrder) -> Result<Self> {
        let gen = |s: f64| effective_hamiltonian(model, s).map(|h| h.scale(-I));
        match order {
            IntegratorOrder::First => {
                let h = effective_hamiltonian(model, t)?;
                let d = h.dim();
                let m = Operator::from_fn(d, |r, c| {
                    let id = if r == c { linalg::ONE } else { ZERO };
                    id - I * dt * h.get(r, c)
                });
                Ok(Stages::First { m })
            }
            IntegratorOrder::Fourth => Ok(Stages::Fourth {
                dt,
                a0: gen(t)?,
                a_mid: gen(t + 0.5 * dt)?,
                a1: gen(t + dt)?,
            }),
        }
    }

    pub(crate) fn advance(&self, y: &[C64]) -> Result<Vec<C64>> {
        match self {
            Stages::First { m, .. } => linalg::apply(m, y),
            Stages::Fourth { dt, a0, a_mid, a1 } => {
                let h = *dt;
                let axpy = |x: &[C64], s: f64, k: &[C64]| -> Vec<C64> {
                    x.iter().zip(k).map(|(a, b)| a + b * s).collect()
                };
                let k1 = linalg::apply(a0, y)?;
                let k2 = linalg::apply(a_mid, &axpy(y, 0.5 * h, &k1))?;
                let k3 = linalg::apply(a_mid, &axpy(y, 0.5 * h, &k2))?;
                let k4 = linalg::apply(a1, &axpy(y, h, &k3))?;
                Ok(y.iter()
                    .enumerate()
                    .map(|(i, yi)| yi + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0))
                    .collect())
            }
        }
    }
}

/// Evolves `state` over `[t, t + ctrl.dt]` without renormalizing.
pub fn deterministic_step(
    state: &StateVector,
    model: &ModelSpec,
    t: f64,
    ctrl: &StepControl,
) -> Result<UnnormalizedState> {
    let stages = Stages::new(model, t, ctrl.dt, ctrl.integrator_order)?;
    Ok(UnnormalizedState::new(stages.advance(state.amps())?))
}

pub fn renormalize(phi: UnnormalizedState) -> Result<StateVector> {
    if !phi.norm_sq.is_finite() || phi.norm_sq <= 1e-30 {
        return Err(Error::StateAnnihilated {
            norm_sq: phi.norm_sq,
        });
    }
    if (phi.norm_sq - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(StateVector::from_raw_unchecked(phi.amps));
    }
    let s = 1.0 / phi.norm_sq.sqrt();
    Ok(StateVector::from_raw_unchecked(
        phi.amps.into_iter().map(|a| a * s).collect(),
    ))
}

/// Splits `[t0, t1]` into the fewest equal sub-steps no longer than `dt`.
pub fn substeps(t0: f64, t1: f64, dt: f64) -> (usize, f64) {
    let span = t1 - t0;
    if span <= 0.0 {
        return (0, 0.0);
    }
    let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    (n, span / n as f64)
}

pub fn check_grid(grid: &[f64]) -> Result<()> {
    match grid.first() {
        None => return Err(Error::Grid("empty grid".into())),
        Some(&t0) if t0 != 0.0 => return Err(Error::Grid(format!("grid starts at {t0}, not 0"))),
        _ => {}
    }
    if !grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Grid("grid not strictly ascending".into()));
    }
    Ok(())
}

/// States of the jump-free evolution of `model.initial_state` at each grid time.
pub fn no_jump_trajectory(
    model: &ModelSpec,
    grid: &[f64],
    ctrl: &StepControl,
) -> Result<Vec<StateVector>> {
    check_grid(grid)?;
    let mut psi = model.initial_state.clone();
    let mut out = Vec::with_capacity(grid.len());
    out.push(psi.clone());
    for w in grid.windows(2) {
        let (n, h) = substeps(w[0], w[1], ctrl.dt);
        for k in 0..n {
            let t = w[0] + k as f64 * h;
            let stages = Stages::new(model, t, h, ctrl.integrator_order)?;
            psi = renormalize(UnnormalizedState::new(stages.advance(psi.amps())?))?;
        }
        out.push(psi.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        DecayChannel, RateFunction, build_two_level_model, excited, sigma_minus, superposition,
    };
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_level(delta: RateFunction, init: StateVector) -> ModelSpec {
        build_two_level_model(delta, RateFunction::zero(), init).unwrap()
    }

    #[test]
    fn zero_hamiltonian_is_identity() {
        let m = two_level(RateFunction::zero(), superposition());
        let phi = deterministic_step(&m.initial_state, &m, 0.0, &StepControl::with_dt(0.1)).unwrap();
        assert_eq!(phi.amps(), m.initial_state.amps());
        assert_eq!(renormalize(phi).unwrap(), m.initial_state);
    }

    #[test]
    fn first_order_literal_step() {
        let m = two_level(RateFunction::constant(1.0), excited());
        let ctrl = StepControl {
            integrator_order: IntegratorOrder::First,
            ..StepControl::with_dt(0.01)
        };
        let phi = deterministic_step(&excited(), &m, 0.0, &ctrl).unwrap();
        assert_abs_diff_eq!(phi.amps()[1].re, 1.0 - 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(phi.norm_sq(), 0.990025, epsilon = 1e-15);
    }

    #[test]
    fn fourth_order_matches_exponential_norm() {
        // |phi(t)|^2 = exp(-t) for |e> under Delta = 1
        let m = two_level(RateFunction::constant(1.0), excited());
        let ctrl = StepControl::with_dt(1e-3);
        let mut amps = excited().into_amps();
        for k in 0..1000 {
            let st = Stages::new(&m, k as f64 * 1e-3, 1e-3, ctrl.integrator_order).unwrap();
            amps = st.advance(&amps).unwrap();
        }
        assert_abs_diff_eq!(linalg::norm_sq(&amps), (-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn first_order_bit_exact_against_hand_rolled() {
        let h = Operator::from_row_major(vec![
            C64::new(0.3, 0.0),
            C64::new(0.1, -0.2),
            C64::new(0.1, 0.2),
            C64::new(-0.4, 0.0),
        ])
        .unwrap();
        let m = ModelSpec {
            dim: 2,
            hamiltonian: h,
            lamb_shift: None,
            lamb_shift_operator: None,
            channels: vec![DecayChannel::new("c", sigma_minus(), RateFunction::constant(0.7))],
            initial_state: superposition(),
        };
        let dt = 0.013;
        let ctrl = StepControl {
            integrator_order: IntegratorOrder::First,
            ..StepControl::with_dt(dt)
        };
        let phi = deterministic_step(&m.initial_state, &m, 0.0, &ctrl).unwrap();

        let heff = effective_hamiltonian(&m, 0.0).unwrap();
        let psi = m.initial_state.amps();
        let mut expected = [ZERO; 2];
        for (r, e) in expected.iter_mut().enumerate() {
            let mut acc = ZERO;
            for (c, p) in psi.iter().enumerate() {
                let id = if r == c { linalg::ONE } else { ZERO };
                acc += (id - I * dt * heff.get(r, c)) * p;
            }
            *e = acc;
        }
        assert_eq!(phi.amps(), &expected);
    }

    #[test]
    fn renormalize_cases() {
        let v = superposition();
        assert_eq!(renormalize(UnnormalizedState::new(v.amps().to_vec())).unwrap(), v);
        let two_e = UnnormalizedState::new(vec![ZERO, C64::new(2.0, 0.0)]);
        assert_eq!(renormalize(two_e).unwrap(), excited());
        let zero = UnnormalizedState::new(vec![ZERO, ZERO]);
        assert!(matches!(renormalize(zero), Err(Error::StateAnnihilated { .. })));
    }

    #[test]
    fn no_jump_constant_without_rates() {
        let m = two_level(RateFunction::zero(), superposition());
        let grid: Vec<f64> = (0..11).map(|k| k as f64 * 0.1).collect();
        let traj = no_jump_trajectory(&m, &grid, &StepControl::default()).unwrap();
        assert!(traj.iter().all(|s| s == &m.initial_state));
    }

    /// Closed form for the superposition under a time-dependent rate:
    /// excited population exp(-G)/(1 + exp(-G)), G = int_0^t Delta.
    #[test]
    fn no_jump_superposition_closed_form() {
        let (a, g, w) = (1.0, 0.25, 2.0);
        let delta = RateFunction::DampedOscillation {
            amplitude: a,
            decay: g,
            frequency: w,
            phase: 0.0,
        };
        let big_gamma = |t: f64| {
            // int_0^t a e^{-g s} sin(w s) ds
            let den = g * g + w * w;
            a * (w - (-g * t).exp() * (g * (w * t).sin() + w * (w * t).cos())) / den
        };
        let m = two_level(delta, superposition());
        let grid: Vec<f64> = (0..=60).map(|k| k as f64 * 0.1).collect();
        let traj = no_jump_trajectory(&m, &grid, &StepControl::with_dt(1e-3)).unwrap();
        for (t, s) in grid.iter().zip(&traj) {
            let e = (-big_gamma(*t)).exp();
            assert_abs_diff_eq!(s.probabilities()[1], e / (1.0 + e), epsilon = 1e-10);
        }
    }

    #[test]
    fn halving_dt_converges_at_integrator_order() {
        let delta = RateFunction::DampedOscillation {
            amplitude: 1.5,
            decay: 0.2,
            frequency: 2.0,
            phase: 0.0,
        };
        let m = two_level(delta, superposition());
        let grid = [0.0, 2.0];
        for (order, dts) in [
            (IntegratorOrder::First, [0.02, 0.01, 0.005]),
            (IntegratorOrder::Fourth, [0.1, 0.05, 0.025]),
        ] {
            let pe = |dt: f64| {
                let ctrl = StepControl {
                    integrator_order: order,
                    ..StepControl::with_dt(dt)
                };
                no_jump_trajectory(&m, &grid, &ctrl).unwrap()[1].probabilities()[1]
            };
            let (a, b, c) = (pe(dts[0]), pe(dts[1]), pe(dts[2]));
            let ratio = (a - b) / (b - c);
            let expected = 2f64.powi(order.order() as i32);
            assert!(
                (ratio / expected - 1.0).abs() < 0.2,
                "{order:?}: ratio {ratio}, expected {expected}"
            );
        }
    }

    #[test]
    fn norm_grows_under_negative_rate() {
        let m = two_level(RateFunction::constant(-0.8), superposition());
        let phi = deterministic_step(&m.initial_state, &m, 0.0, &StepControl::with_dt(0.01)).unwrap();
        assert!(phi.norm_sq() > 1.0);
    }

    #[test]
    fn substeps_cover_interval() {
        assert_eq!(substeps(0.0, 0.05, 1e-3).0, 50);
        let (n, h) = substeps(0.0, 0.1, 0.03);
        assert_eq!(n, 4);
        assert_abs_diff_eq!(h, 0.025, epsilon = 1e-15);
        assert!(check_grid(&[0.0, 0.5, 0.4]).is_err());
        assert!(check_grid(&[0.1, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn norm_never_grows_under_positive_rates(
            rate in 0.0f64..5.0,
            re in -1.0f64..1.0, im in -1.0f64..1.0, b in 0.0f64..1.0,
            dt in 1e-4f64..0.05,
        ) {
            let init = StateVector::normalized(vec![C64::new(b, 0.0), C64::new(re, im)]);
            prop_assume!(init.is_ok());
            let mut m = two_level(RateFunction::constant(rate), init.unwrap());
            m.lamb_shift = Some(RateFunction::constant(0.9));
            let phi = deterministic_step(&m.initial_state, &m, 0.0, &StepControl::with_dt(dt)).unwrap();
            prop_assert!(phi.norm_sq() <= 1.0 + 1e-12);
        }
    }
}
