//! Stochastic update of a compressed ensemble with forward and reverse jumps.
//!
//! Channels with `Delta_j(t) > 0` fire forward: a member in `psi_a` jumps to
//! `C_j psi_a / |C_j psi_a|` with probability `Delta_j dt <C_j^dag C_j>_a`.
//! Channels with `Delta_j(t) < 0` fire in reverse: a member in the source
//! `psi_a = C_j psi_a' / |C_j psi_a'|` returns to the target `psi_a'` with
//! probability `(N_a'/N_a) |Delta_j| dt <C_j^dag C_j>_a'`. The target's
//! occupation sets the rate, so members are not independent and all counts
//! are read from the start-of-step snapshot.
//!
//! Members sharing an entry are sampled together: one multinomial draw per
//! entry (sequential conditional binomials over its branches) stands in for
//! `N_a` independent per-member decisions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, MERGE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{self, DensityMatrix, Operator, StateVector};
use crate::model::{DecayChannel, ModelSpec};
use crate::propagator::{OrphanPolicy, StepControl, Stages, UnnormalizedState, renormalize};

/// Rates with `|Delta| < ZERO_RATE_TOL` are inactive.
pub const ZERO_RATE_TOL: f64 = 1e-14;

/// Below this norm `C|psi>` counts as annihilated.
pub const ANNIHILATION_TOL: f64 = 1e-15;

pub(crate) const MAX_HALVINGS: u32 = 30;

/// Stream id reserved for the tracked-member decisions.
const TRACK_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpSign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub channel: String,
    pub sign: JumpSign,
    pub source_id: u64,
    pub target_id: u64,
    pub members_moved: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    pub events: Vec<JumpEvent>,
    /// Largest summed branch probability of any entry.
    pub max_prob_seen: f64,
    /// Smallest sub-step actually taken.
    pub dt_used: f64,
    pub substeps: u32,
    /// Negative channels skipped under the permissive orphan policy.
    pub orphan_warnings: u32,
    /// Jumps taken by the tracked member, in order.
    pub tracked_jumps: Vec<JumpEvent>,
}

impl StepOutcome {
    fn absorb(&mut self, other: StepOutcome) {
        self.events.extend(other.events);
        self.max_prob_seen = self.max_prob_seen.max(other.max_prob_seen);
        self.dt_used = if self.substeps == 0 {
            other.dt_used
        } else {
            self.dt_used.min(other.dt_used)
        };
        self.substeps += other.substeps;
        self.orphan_warnings += other.orphan_warnings;
        self.tracked_jumps.extend(other.tracked_jumps);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChannelClasses {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub zero: Vec<usize>,
}

pub fn classify_channels(model: &ModelSpec, t: f64) -> Result<ChannelClasses> {
    let mut out = ChannelClasses::default();
    for (j, ch) in model.channels.iter().enumerate() {
        let rate = ch.rate().evaluate(t)?;
        if rate.abs() < ZERO_RATE_TOL {
            out.zero.push(j);
        } else if rate > 0.0 {
            out.positive.push(j);
        } else {
            out.negative.push(j);
        }
    }
    Ok(out)
}

fn positive_probability(rate: f64, dt: f64, c_dag_c: f64, t: f64) -> Result<f64> {
    let p = rate * dt * c_dag_c;
    if p > 1.0 {
        return Err(Error::StepTooLarge { probability: p, t });
    }
    Ok(p.max(0.0))
}

/// `Delta(t) dt <psi|C^dag C|psi>` for a channel with positive rate at `t`.
pub fn positive_jump_probability(
    state: &StateVector,
    ch: &DecayChannel,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let rate = ch.rate().evaluate(t)?;
    let e = linalg::expectation(state, ch.c_dag_c())?.re;
    positive_probability(rate, dt, e, t)
}

pub fn apply_positive_jump(state: &StateVector, ch: &DecayChannel) -> Result<StateVector> {
    let w = linalg::apply(ch.operator(), state.amps())?;
    if linalg::norm_sq(&w).sqrt() <= ANNIHILATION_TOL {
        return Err(Error::ChannelCannotFire);
    }
    renormalize(UnnormalizedState::new(w))
}

/// Every `(source, target)` pair of a channel, plus whether some populated
/// target state has no source entry.
fn reverse_pairs(e: &Ensemble, ch: &DecayChannel) -> Result<(Vec<(u64, u64)>, bool)> {
    let mut pairs = Vec::new();
    let mut orphaned = false;
    for target in e.states().iter().filter(|s| s.count > 0) {
        let w = linalg::apply(ch.operator(), target.vector.amps())?;
        if linalg::norm_sq(&w).sqrt() <= ANNIHILATION_TOL {
            continue;
        }
        let mut matched = false;
        for source in e.states().iter().filter(|s| s.count > 0) {
            if linalg::fidelity_unnormalized(&source.vector, &w)? > 1.0 - MERGE_TOL {
                matched = true;
                if source.id != target.id {
                    pairs.push((source.id, target.id));
                }
            }
        }
        orphaned |= !matched;
    }
    Ok((pairs, orphaned))
}

/// Entries whose state `C psi` maps onto `source_id`, excluding the source itself.
pub fn find_reverse_targets(e: &Ensemble, source_id: u64, ch: &DecayChannel) -> Result<Vec<u64>> {
    let (pairs, _) = reverse_pairs(e, ch)?;
    Ok(pairs
        .into_iter()
        .filter(|(s, _)| *s == source_id)
        .map(|(_, t)| t)
        .collect())
}

fn negative_probability(
    n_target: u64,
    n_source: u64,
    rate: f64,
    dt: f64,
    c_dag_c: f64,
    t: f64,
) -> Result<f64> {
    if n_target == 0 || rate == 0.0 {
        return Ok(0.0);
    }
    let p = (n_target as f64 / n_source as f64) * rate.abs() * dt * c_dag_c;
    if p > 1.0 {
        return Err(Error::NegativeStepTooLarge { probability: p, t });
    }
    Ok(p.max(0.0))
}

/// `(N_target / N_source) |Delta(t)| dt <psi_target|C^dag C|psi_target>`.
pub fn negative_jump_probability(
    e: &Ensemble,
    source_id: u64,
    target_id: u64,
    ch: &DecayChannel,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let source = e.get(source_id).ok_or(Error::UnknownId(source_id))?;
    let n_target = e.count_of(target_id);
    if n_target == 0 {
        return Ok(0.0);
    }
    let target = e.get(target_id).ok_or(Error::UnknownId(target_id))?;
    if source.count == 0 {
        return Err(Error::InsufficientCount {
            from: source_id,
            requested: 1,
            available: 0,
        });
    }
    let rate = ch.rate().evaluate(t)?;
    let c = linalg::expectation(&target.vector, ch.c_dag_c())?.re;
    negative_probability(n_target, source.count, rate, dt, c, t)
}

/// Number of successes among `n` independent Bernoulli(`p`) trials.
pub fn sample_jump_count<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
}

/// Independent generator for `(root, stream, step)`.
pub fn stream_rng(root: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&root.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(b"nmqj-rng");
    ChaCha8Rng::from_seed(key)
}

/// Root seed plus a counter of executed sub-steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub root: u64,
    pub step: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum BranchKind {
    Positive { channel: usize },
    Negative { channel: usize, target: u64 },
}

#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub(crate) kind: BranchKind,
    pub(crate) p: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct EntryPlan {
    pub(crate) id: u64,
    pub(crate) count: u64,
    pub(crate) branches: Vec<Branch>,
    pub(crate) total_p: f64,
}

#[derive(Debug)]
pub(crate) struct StepPlan {
    pub(crate) entries: Vec<EntryPlan>,
    pub(crate) orphan_warnings: u32,
    pub(crate) max_prob: f64,
}

pub(crate) fn plan_step(e: &Ensemble, model: &ModelSpec, ctrl: &StepControl, dt: f64) -> Result<StepPlan> {
    let t = e.time();
    let classes = classify_channels(model, t)?;
    let rates = model.rates_at(t)?;

    let mut entries: Vec<EntryPlan> = e
        .states()
        .iter()
        .filter(|s| s.count > 0)
        .map(|s| -> Result<EntryPlan> {
            let mut branches = Vec::new();
            for &j in &classes.positive {
                let ch = &model.channels[j];
                let c = linalg::expectation(&s.vector, ch.c_dag_c())?.re;
                let p = positive_probability(rates[j], dt, c, t)?;
                if p > 0.0 {
                    branches.push(Branch {
                        kind: BranchKind::Positive { channel: j },
                        p,
                    });
                }
            }
            Ok(EntryPlan {
                id: s.id,
                count: s.count,
                branches,
                total_p: 0.0,
            })
        })
        .collect::<Result<_>>()?;

    let mut orphan_warnings = 0;
    for &j in &classes.negative {
        let ch = &model.channels[j];
        let (mut pairs, orphaned) = reverse_pairs(e, ch)?;
        if orphaned {
            match ctrl.orphan_policy {
                OrphanPolicy::Strict => {
                    return Err(Error::UnravelingBreakdown {
                        channel: ch.label().to_string(),
                        t,
                    });
                }
                OrphanPolicy::Permissive => {
                    log::warn!(
                        "negative channel '{}' at t = {t} has a populated state without a source entry; skipping it",
                        ch.label()
                    );
                    orphan_warnings += 1;
                }
            }
        }
        pairs.sort_unstable();
        for (source, target) in pairs {
            let target_state = e.get(target).expect("pair from ensemble");
            let c = linalg::expectation(&target_state.vector, ch.c_dag_c())?.re;
            let n_source = e.count_of(source);
            let p = negative_probability(target_state.count, n_source, rates[j], dt, c, t)?;
            if p > 0.0 {
                let plan = entries
                    .iter_mut()
                    .find(|p| p.id == source)
                    .expect("source is populated");
                plan.branches.push(Branch {
                    kind: BranchKind::Negative { channel: j, target },
                    p,
                });
            }
        }
    }

    let mut max_prob: f64 = 0.0;
    for plan in &mut entries {
        plan.total_p = plan.branches.iter().map(|b| b.p).sum();
        max_prob = max_prob.max(plan.total_p);
    }
    if max_prob > ctrl.max_jump_prob {
        return Err(Error::StepTooLarge {
            probability: max_prob,
            t,
        });
    }
    Ok(StepPlan {
        entries,
        orphan_warnings,
        max_prob,
    })
}

/// Multinomial split of `count` members over the branches; returns per-branch counts.
fn sample_branches(plan: &EntryPlan, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut remaining_n = plan.count;
    let mut remaining_p = 1.0;
    plan.branches
        .iter()
        .map(|b| {
            if remaining_n == 0 {
                return 0;
            }
            let q = (b.p / remaining_p).clamp(0.0, 1.0);
            let k = sample_jump_count(remaining_n, q, rng);
            remaining_n -= k;
            remaining_p -= b.p;
            k
        })
        .collect()
}

pub(crate) fn is_too_large(err: &Error) -> bool {
    matches!(
        err,
        Error::StepTooLarge { .. } | Error::NegativeStepTooLarge { .. }
    )
}

/// Tuning knobs that do not change results.
#[derive(Debug, Clone, Copy)]
pub struct Parallelism {
    /// Use the thread pool once the ensemble has at least this many entries.
    pub min_entries: usize,
}

impl Default for Parallelism {
    fn default() -> Self {
        Self { min_entries: 64 }
    }
}

/// One step of size `dt` with no splitting.
fn execute_step(
    e: &mut Ensemble,
    model: &ModelSpec,
    ctrl: &StepControl,
    dt: f64,
    streams: &mut SeedStreams,
    tracked: &mut Option<u64>,
    par: Parallelism,
) -> Result<StepOutcome> {
    let plan = plan_step(e, model, ctrl, dt)?;
    let t = e.time();
    let step = streams.step;
    streams.step += 1;
    let root = streams.root;
    let parallel = e.states().len() >= par.min_entries;

    let draw = |p: &EntryPlan| {
        let mut rng = stream_rng(root, p.id, step);
        sample_branches(p, &mut rng)
    };
    let draws: Vec<Vec<u64>> = if parallel {
        plan.entries.par_iter().map(draw).collect()
    } else {
        plan.entries.iter().map(draw).collect()
    };

    let mut out = StepOutcome {
        max_prob_seen: plan.max_prob,
        dt_used: dt,
        substeps: 1,
        orphan_warnings: plan.orphan_warnings,
        ..StepOutcome::default()
    };

    // which branch the tracked member follows, if any
    let mut tracked_branch: Option<(u64, usize)> = None;
    if let Some(tid) = *tracked {
        if let Some((plan_e, ks)) = plan.entries.iter().zip(&draws).find(|(p, _)| p.id == tid) {
            let mut rng = stream_rng(root, TRACK_STREAM, step);
            let u = rng.random_range(0..plan_e.count);
            let mut acc = 0;
            for (b, k) in ks.iter().enumerate() {
                acc += k;
                if u < acc {
                    tracked_branch = Some((tid, b));
                    break;
                }
            }
        }
    }

    for (plan_e, ks) in plan.entries.iter().zip(&draws) {
        let source_vec = e.get(plan_e.id).expect("planned entry").vector.clone();
        for (b, (branch, &k)) in plan_e.branches.iter().zip(ks).enumerate() {
            if k == 0 {
                continue;
            }
            let (channel, sign, target) = match branch.kind {
                BranchKind::Positive { channel } => {
                    let jumped = apply_positive_jump(&source_vec, &model.channels[channel])?;
                    (channel, JumpSign::Positive, e.find_or_insert(jumped)?)
                }
                BranchKind::Negative { channel, target } => (channel, JumpSign::Negative, target),
            };
            if target != plan_e.id {
                e.transfer_count(plan_e.id, target, k)?;
            }
            let event = JumpEvent {
                t,
                channel: model.channels[channel].label().to_string(),
                sign,
                source_id: plan_e.id,
                target_id: target,
                members_moved: k,
            };
            if tracked_branch == Some((plan_e.id, b)) {
                *tracked = Some(target);
                out.tracked_jumps.push(JumpEvent {
                    members_moved: 1,
                    ..event.clone()
                });
            }
            out.events.push(event);
        }
    }
    e.purge_empty();

    let stages = Stages::new(model, t, dt, ctrl.integrator_order)?;
    let advance = |v: &StateVector| -> Result<StateVector> {
        renormalize(UnnormalizedState::new(stages.advance(v.amps())?))
    };
    let next: Vec<StateVector> = if parallel {
        e.states().par_iter().map(|s| advance(&s.vector)).collect::<Result<_>>()?
    } else {
        e.states().iter().map(|s| advance(&s.vector)).collect::<Result<_>>()?
    };
    for (s, v) in e.states_mut().iter_mut().zip(next) {
        s.vector = v;
    }
    e.set_time(t + dt);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn step_recursive(
    e: &mut Ensemble,
    model: &ModelSpec,
    ctrl: &StepControl,
    dt: f64,
    depth: u32,
    streams: &mut SeedStreams,
    tracked: &mut Option<u64>,
    par: Parallelism,
) -> Result<StepOutcome> {
    match execute_step(e, model, ctrl, dt, streams, tracked, par) {
        Err(err) if is_too_large(&err) && ctrl.adaptive_dt && depth < MAX_HALVINGS => {
            let mut out = step_recursive(e, model, ctrl, 0.5 * dt, depth + 1, streams, tracked, par)?;
            let second = step_recursive(e, model, ctrl, 0.5 * dt, depth + 1, streams, tracked, par)?;
            out.absorb(second);
            Ok(out)
        }
        other => other,
    }
}

/// Advances the ensemble by `ctrl.dt`.
///
/// Probabilities come from the start-of-step snapshot; counts are moved,
/// new jump targets are merged into existing entries where possible, empty
/// entries are dropped, and every surviving vector is propagated and
/// renormalized. With `ctrl.adaptive_dt` the step is halved (recursively)
/// when an entry's summed jump probability exceeds `ctrl.max_jump_prob`;
/// otherwise that is an error.
pub fn step_ensemble(
    e: &mut Ensemble,
    model: &ModelSpec,
    ctrl: &StepControl,
    streams: &mut SeedStreams,
) -> Result<StepOutcome> {
    step_recursive(e, model, ctrl, ctrl.dt, 0, streams, &mut None, Parallelism::default())
}

/// Owns an ensemble and its random streams; optionally follows one member.
#[derive(Debug, Clone)]
pub struct Engine<'m> {
    model: &'m ModelSpec,
    ctrl: StepControl,
    ensemble: Ensemble,
    streams: SeedStreams,
    tracked: Option<u64>,
    par: Parallelism,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m ModelSpec, ctrl: StepControl, members: u64, seed: u64) -> Self {
        Self::with_ensemble(
            model,
            ctrl,
            Ensemble::pure(model.initial_state.clone(), members),
            seed,
        )
    }

    pub fn with_ensemble(model: &'m ModelSpec, ctrl: StepControl, ensemble: Ensemble, seed: u64) -> Self {
        Self {
            model,
            ctrl,
            ensemble,
            streams: SeedStreams::new(seed),
            tracked: None,
            par: Parallelism::default(),
        }
    }

    pub fn set_parallelism(&mut self, par: Parallelism) {
        self.par = par;
    }

    /// Starts following one member of the first entry.
    pub fn track_member(&mut self) {
        self.tracked = self.ensemble.states().first().map(|s| s.id);
    }

    pub fn tracked_id(&self) -> Option<u64> {
        self.tracked
    }

    pub fn tracked_state(&self) -> Option<&StateVector> {
        self.tracked
            .and_then(|id| self.ensemble.get(id))
            .map(|s| &s.vector)
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    pub fn time(&self) -> f64 {
        self.ensemble.time()
    }

    /// One step of size `dt` (split further if needed).
    pub fn step(&mut self, dt: f64) -> Result<StepOutcome> {
        step_recursive(
            &mut self.ensemble,
            self.model,
            &self.ctrl,
            dt,
            0,
            &mut self.streams,
            &mut self.tracked,
            self.par,
        )
    }

    /// Steps from the current time to `t_end` in equal sub-steps no longer than `ctrl.dt`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<StepOutcome> {
        self.advance_to_with(t_end, |_, _| Ok(()))
    }

    /// Like [`Engine::advance_to`], calling `observe` after every step.
    pub fn advance_to_with<F>(&mut self, t_end: f64, mut observe: F) -> Result<StepOutcome>
    where
        F: FnMut(&Ensemble, &StepOutcome) -> Result<()>,
    {
        let t0 = self.time();
        let (n, h) = crate::propagator::substeps(t0, t_end, self.ctrl.dt);
        let mut out = StepOutcome::default();
        for k in 0..n {
            // keep step start times identical to t0 + k h
            self.ensemble.set_time(t0 + k as f64 * h);
            let step = self.step(h)?;
            observe(&self.ensemble, &step)?;
            out.absorb(step);
        }
        if n > 0 {
            self.ensemble.set_time(t_end);
        }
        Ok(out)
    }
}

/// Deterministic average over every branch of one step, weighted by the
/// engine's jump probabilities and with each branch's end state formed
/// exactly as [`step_ensemble`] forms it.
pub fn branch_average(e: &Ensemble, model: &ModelSpec, ctrl: &StepControl, dt: f64) -> Result<DensityMatrix> {
    let plan = plan_step(e, model, ctrl, dt)?;
    let t = e.time();
    let stages = Stages::new(model, t, dt, ctrl.integrator_order)?;
    let evolve = |v: &StateVector| -> Result<StateVector> {
        renormalize(UnnormalizedState::new(stages.advance(v.amps())?))
    };
    let d = model.dim;
    let mut sigma = Operator::zeros(d);
    let n = e.total() as f64;
    let mut add = |w: f64, v: &StateVector| {
        let a = v.amps();
        for r in 0..d {
            for c in 0..d {
                let z = sigma.get(r, c) + a[r] * a[c].conj() * w;
                sigma.set(r, c, z);
            }
        }
    };
    for p in &plan.entries {
        let s = e.get(p.id).expect("planned entry");
        let w = s.count as f64 / n;
        add(w * (1.0 - p.total_p), &evolve(&s.vector)?);
        for b in &p.branches {
            let landed = match b.kind {
                BranchKind::Positive { channel } => {
                    apply_positive_jump(&s.vector, &model.channels[channel])?
                }
                BranchKind::Negative { target, .. } => e.get(target).expect("pair").vector.clone(),
            };
            add(w * b.p, &evolve(&landed)?);
        }
    }
    Ok(DensityMatrix::from_operator(sigma))
}
