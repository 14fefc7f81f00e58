//! Reference solutions of the master equation
//!
//! `drho/dt = -i[H_s + (S/2) L, rho] + sum_j Delta_j (C_j rho C_j^dag - {C_j^dag C_j, rho}/2)`
//!
//! integrated directly on the density matrix, plus the closed-form two-level
//! solution. Both are independent of the jump engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{C64, DensityMatrix, I, Operator};
use crate::model::{ModelSpec, RateFunction};
use crate::propagator::{check_grid, substeps};

/// Refinement target: halving the sub-step changes no entry by more than this.
pub const ORACLE_TOL: f64 = 1e-8;

const QUADRATURE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub grid: Vec<f64>,
    pub densities: Vec<DensityMatrix>,
    /// Sub-step size that met [`ORACLE_TOL`].
    pub substep: f64,
}

impl OracleSolution {
    pub fn observable(&self, obs: &Operator) -> Result<Vec<f64>> {
        self.densities
            .iter()
            .map(|rho| rho.expectation(obs).map(|z| z.re))
            .collect()
    }
}

/// Right-hand side of the master equation at time `t`.
pub fn lindblad_rhs(model: &ModelSpec, t: f64, rho: &Operator) -> Result<Operator> {
    let h = model.hermitian_part(t)?;
    let comm = h.matmul(rho)?.sub(&rho.matmul(&h)?)?;
    let mut out = comm.scale(-I);
    for ch in &model.channels {
        let rate = ch.rate().evaluate(t)?;
        if rate == 0.0 {
            continue;
        }
        let c = ch.operator();
        let jump = c.matmul(rho)?.matmul(&c.adjoint())?;
        let anti = ch.c_dag_c().matmul(rho)?.add(&rho.matmul(ch.c_dag_c())?)?;
        out.add_scaled(C64::new(rate, 0.0), &jump)?;
        out.add_scaled(C64::new(-0.5 * rate, 0.0), &anti)?;
    }
    Ok(out)
}

/// One RK4 step; `t_end` is where the last stage samples the coefficients
/// (just short of `t + h` when the step ends on a rate discontinuity).
fn rk4_step(model: &ModelSpec, t: f64, h: f64, t_end: f64, rho: &Operator) -> Result<Operator> {
    let shifted = |k: &Operator, s: f64| -> Result<Operator> {
        let mut y = rho.clone();
        y.add_scaled(C64::new(s, 0.0), k)?;
        Ok(y)
    };
    let k1 = lindblad_rhs(model, t, rho)?;
    let k2 = lindblad_rhs(model, t + 0.5 * h, &shifted(&k1, 0.5 * h)?)?;
    let k3 = lindblad_rhs(model, t + 0.5 * h, &shifted(&k2, 0.5 * h)?)?;
    let k4 = lindblad_rhs(model, t_end, &shifted(&k3, h)?)?;
    let mut out = rho.clone();
    out.add_scaled(C64::new(h / 6.0, 0.0), &k1)?;
    out.add_scaled(C64::new(h / 3.0, 0.0), &k2)?;
    out.add_scaled(C64::new(h / 3.0, 0.0), &k3)?;
    out.add_scaled(C64::new(h / 6.0, 0.0), &k4)?;
    Ok(out)
}

/// Sorted points where some coefficient of the model is not smooth.
fn model_breakpoints(model: &ModelSpec) -> Vec<f64> {
    let mut bps: Vec<f64> = model
        .channels
        .iter()
        .map(|c| c.rate())
        .chain(model.lamb_shift.as_ref())
        .flat_map(RateFunction::breakpoints)
        .collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    bps
}

/// Fixed-size RK4 that never steps across a breakpoint.
fn integrate_fixed(model: &ModelSpec, grid: &[f64], bps: &[f64], h_max: f64) -> Result<Vec<Operator>> {
    let mut rho = DensityMatrix::from_pure(&model.initial_state).into_operator();
    let mut out = Vec::with_capacity(grid.len());
    out.push(rho.clone());
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let eps = 1e-12 * (1.0 + b.abs());
        let lo = bps.partition_point(|&x| x <= a + eps);
        let hi = bps.partition_point(|&x| x < b - eps);
        let mut edges = Vec::with_capacity(hi.saturating_sub(lo) + 2);
        edges.push(a);
        edges.extend_from_slice(&bps[lo..hi.max(lo)]);
        edges.push(b);
        for seg in edges.windows(2) {
            let (n, h) = substeps(seg[0], seg[1], h_max);
            let ends_on_break = bps.binary_search_by(|x| x.total_cmp(&seg[1])).is_ok();
            for k in 0..n {
                let t = seg[0] + k as f64 * h;
                let mut t_end = t + h;
                if k + 1 == n && ends_on_break {
                    t_end = seg[1] - (1e-12 * (1.0 + seg[1].abs())).min(0.5 * h);
                }
                rho = rk4_step(model, t, h, t_end, &rho)?;
            }
        }
        out.push(rho.clone());
    }
    Ok(out)
}

/// Fourth-order integration of the density matrix, refining the sub-step
/// until halving it moves no entry at any grid point by more than [`ORACLE_TOL`].
pub fn integrate_master_equation(model: &ModelSpec, grid: &[f64]) -> Result<OracleSolution> {
    check_grid(grid)?;
    let bps = model_breakpoints(model);
    let mut h = 0.02;
    let mut coarse = integrate_fixed(model, grid, &bps, h)?;
    loop {
        let fine = integrate_fixed(model, grid, &bps, 0.5 * h)?;
        let diff = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        h *= 0.5;
        if diff < ORACLE_TOL || h < 1e-6 {
            if diff >= ORACLE_TOL {
                log::warn!("oracle refinement stopped at h = {h} with change {diff:e}");
            }
            return Ok(OracleSolution {
                grid: grid.to_vec(),
                densities: fine.into_iter().map(DensityMatrix::from_operator).collect(),
                substep: h,
            });
        }
        coarse = fine;
    }
}

fn simpson(f: &dyn Fn(f64) -> Result<f64>, a: f64, b: f64, n: usize) -> Result<f64> {
    let h = (b - a) / n as f64;
    let mut acc = f(a)? + f(b)?;
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h)?;
    }
    Ok(acc * h / 3.0)
}

/// `int_a^b rate(s) ds` by composite Simpson on each smooth piece, doubling
/// the panel count until successive estimates agree to 1e-10.
pub fn integrate_rate(rate: &RateFunction, a: f64, b: f64) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let mut cuts = vec![a];
    cuts.extend(rate.breakpoints().into_iter().filter(|&x| x > a && x < b));
    cuts.push(b);
    let f = |s: f64| rate.evaluate(s);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        // evaluate strictly inside the piece so jumps at the ends do not leak in
        let (lo, hi) = (w[0], w[1]);
        let eps = 1e-13 * (1.0 + hi.abs());
        let inner = |s: f64| f(s.clamp(lo + eps, (hi - eps).max(lo + eps)));
        let piece: &dyn Fn(f64) -> Result<f64> = match rate {
            RateFunction::PiecewiseConstant { .. } => &inner,
            _ => &f,
        };
        let mut n = 2;
        let mut prev = simpson(piece, lo, hi, n)?;
        loop {
            n *= 2;
            let next = simpson(piece, lo, hi, n)?;
            if (next - prev).abs() < QUADRATURE_TOL || n >= 1 << 22 {
                total += next;
                break;
            }
            prev = next;
        }
    }
    Ok(total)
}

/// Closed-form two-level solution: with `G = int Delta` and `P = int S`,
/// `rho_ee = rho_ee(0) e^{-G}` and `rho_eg = rho_eg(0) e^{-G/2} e^{-iP/2}`
/// in the `{|g>, |e>}` basis.
pub fn analytic_two_level(
    delta: &RateFunction,
    lamb: &RateFunction,
    rho0: &DensityMatrix,
    t: f64,
) -> Result<DensityMatrix> {
    if rho0.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: rho0.dim(),
        });
    }
    let gamma = integrate_rate(delta, 0.0, t)?;
    let phase = integrate_rate(lamb, 0.0, t)?;
    let decay = (-gamma).exp();
    let ee = rho0.get(1, 1) * decay;
    let gg = rho0.get(0, 0) + rho0.get(1, 1) * (1.0 - decay);
    let eg = rho0.get(1, 0) * (-0.5 * gamma).exp() * C64::from_polar(1.0, -0.5 * phase);
    let mut out = Operator::zeros(2);
    out.set(0, 0, gg);
    out.set(1, 1, ee);
    out.set(1, 0, eg);
    out.set(0, 1, eg.conj());
    Ok(DensityMatrix::from_operator(out))
}

/// Monte Carlo estimate of one observable on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSeries {
    pub members: u64,
    pub points: Vec<McPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McPoint {
    pub t: f64,
    pub mean: f64,
    /// Per-member variance of the observable.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub t: f64,
    pub mc: f64,
    pub exact: f64,
    pub abs_error: f64,
    pub bound: f64,
    pub exceeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub observable: String,
    pub members: u64,
    pub points: Vec<ErrorPoint>,
    pub max_error: f64,
    pub exceedances: usize,
    pub passed: bool,
}

/// Added to every statistical bound so integrator round-off is not flagged
/// where the ensemble spread vanishes.
pub const BOUND_FLOOR: f64 = 1e-9;

/// Per-time error against the oracle with bound `5 sqrt(v(t)/N)`.
pub fn compare_to_oracle(
    name: &str,
    mc: &McSeries,
    oracle: &OracleSolution,
    obs: &Operator,
) -> Result<ErrorReport> {
    if mc.points.len() != oracle.grid.len() {
        return Err(Error::Grid(format!(
            "Monte Carlo series has {} points, oracle {}",
            mc.points.len(),
            oracle.grid.len()
        )));
    }
    let exact = oracle.observable(obs)?;
    let n = mc.members as f64;
    let mut points = Vec::with_capacity(exact.len());
    for ((p, &t), &x) in mc.points.iter().zip(&oracle.grid).zip(&exact) {
        if (p.t - t).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(Error::Grid(format!("time {} does not match oracle time {t}", p.t)));
        }
        let abs_error = (p.mean - x).abs();
        let bound = 5.0 * (p.variance.max(0.0) / n).sqrt() + BOUND_FLOOR;
        points.push(ErrorPoint {
            t,
            mc: p.mean,
            exact: x,
            abs_error,
            bound,
            exceeded: abs_error > bound,
        });
    }
    let max_error = points.iter().map(|p| p.abs_error).fold(0.0, f64::max);
    let exceedances = points.iter().filter(|p| p.exceeded).count();
    Ok(ErrorReport {
        observable: name.to_string(),
        members: mc.members,
        points,
        max_error,
        exceedances,
        passed: exceedances == 0,
    })
}
