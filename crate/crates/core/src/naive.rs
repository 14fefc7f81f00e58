//! Uncompressed reference: every member is stored, decided and propagated on its own.
//!
//! Branch probabilities are the same as the compressed engine's, but classes
//! of identical members are rediscovered from scratch each step, each member
//! makes its own draw, and each member's vector is integrated separately.
//! This is the baseline the compressed ensemble is benchmarked against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ensemble::{Ensemble, MERGE_TOL};
use crate::error::{Error, Result};
use crate::io::{RunConfig, TimeSeriesRecord};
use crate::jump::{self, BranchKind, MAX_HALVINGS, apply_positive_jump, plan_step};
use crate::linalg::{self, Operator, StateVector};
use crate::model::ModelSpec;
use crate::propagator::{Stages, StepControl, UnnormalizedState, renormalize, substeps};

pub const NAIVE_MAX_MEMBERS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NaiveCounters {
    pub positive_jumps: u64,
    pub negative_jumps: u64,
    pub substeps: u64,
    pub peak_classes: usize,
}

#[derive(Debug, Clone)]
pub struct NaiveEnsemble {
    members: Vec<StateVector>,
    time: f64,
    rng: ChaCha8Rng,
    counters: NaiveCounters,
}

impl NaiveEnsemble {
    pub fn new(state: StateVector, members: u64, seed: u64) -> Result<Self> {
        if members > NAIVE_MAX_MEMBERS {
            return Err(Error::NaiveTooLarge(members));
        }
        if members == 0 {
            return Err(Error::ZeroTransfer);
        }
        Ok(Self {
            members: vec![state; members as usize],
            time: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: NaiveCounters {
                peak_classes: 1,
                ..NaiveCounters::default()
            },
        })
    }

    pub fn members(&self) -> &[StateVector] {
        &self.members
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn counters(&self) -> NaiveCounters {
        self.counters
    }

    /// Groups members that agree up to global phase; returns the classes and each member's class id.
    pub fn classes(&self) -> Result<(Ensemble, Vec<u64>)> {
        let mut reps: Vec<(StateVector, u64)> = Vec::new();
        let mut class_of = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let mut found = None;
            for (k, (rep, _)) in reps.iter().enumerate() {
                if linalg::overlap_fidelity(rep, m)? > 1.0 - MERGE_TOL {
                    found = Some(k);
                    break;
                }
            }
            let k = match found {
                Some(k) => k,
                None => {
                    reps.push((m.clone(), 0));
                    reps.len() - 1
                }
            };
            reps[k].1 += 1;
            class_of.push(k as u64);
        }
        Ok((Ensemble::from_counts(reps, self.time)?, class_of))
    }

    /// Mean of `<psi|O|psi>` over all members.
    pub fn expectation(&self, obs: &Operator) -> Result<f64> {
        let mut acc = 0.0;
        for m in &self.members {
            acc += linalg::expectation(m, obs)?.re;
        }
        Ok(acc / self.members.len() as f64)
    }

    fn step_once(&mut self, model: &ModelSpec, ctrl: &StepControl, dt: f64) -> Result<()> {
        let (classes, class_of) = self.classes()?;
        self.counters.peak_classes = self.counters.peak_classes.max(classes.n_eff());
        let plan = plan_step(&classes, model, ctrl, dt)?;
        let t = self.time;

        for (member, &class) in self.members.iter_mut().zip(&class_of) {
            let entry = plan
                .entries
                .iter()
                .find(|p| p.id == class)
                .expect("every class is planned");
            let u: f64 = self.rng.random();
            let mut acc = 0.0;
            for b in &entry.branches {
                acc += b.p;
                if u < acc {
                    *member = match b.kind {
                        BranchKind::Positive { channel } => {
                            self.counters.positive_jumps += 1;
                            apply_positive_jump(member, &model.channels[channel])?
                        }
                        BranchKind::Negative { target, .. } => {
                            self.counters.negative_jumps += 1;
                            classes.get(target).expect("planned target").vector.clone()
                        }
                    };
                    break;
                }
            }
        }

        let stages = Stages::new(model, t, dt, ctrl.integrator_order)?;
        for member in &mut self.members {
            let next = stages.advance(member.amps())?;
            *member = renormalize(UnnormalizedState::new(next))?;
        }
        self.time = t + dt;
        self.counters.substeps += 1;
        Ok(())
    }

    fn step_recursive(&mut self, model: &ModelSpec, ctrl: &StepControl, dt: f64, depth: u32) -> Result<()> {
        match self.step_once(model, ctrl, dt) {
            Err(err) if jump::is_too_large(&err) && ctrl.adaptive_dt && depth < MAX_HALVINGS => {
                self.step_recursive(model, ctrl, 0.5 * dt, depth + 1)?;
                self.step_recursive(model, ctrl, 0.5 * dt, depth + 1)
            }
            other => other,
        }
    }

    /// Steps to `t_end` using the same sub-step layout as the compressed engine.
    pub fn advance_to(&mut self, model: &ModelSpec, ctrl: &StepControl, t_end: f64) -> Result<()> {
        let t0 = self.time;
        let (n, h) = substeps(t0, t_end, ctrl.dt);
        for k in 0..n {
            self.time = t0 + k as f64 * h;
            self.step_recursive(model, ctrl, h, 0)?;
        }
        if n > 0 {
            self.time = t_end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NaiveRun {
    pub records: Vec<TimeSeriesRecord>,
    pub counters: NaiveCounters,
}

/// Runs the configuration member by member. Refuses `members > 1e6`.
pub fn run_naive(cfg: &RunConfig) -> Result<NaiveRun> {
    let mut ens = NaiveEnsemble::new(cfg.model.initial_state.clone(), cfg.members, cfg.seed)?;
    let mut records = Vec::with_capacity(cfg.grid.len());
    for (k, &t) in cfg.grid.iter().enumerate() {
        if k > 0 {
            ens.advance_to(&cfg.model, &cfg.step, t)?;
        }
        let values = cfg
            .observables
            .iter()
            .map(|o| ens.expectation(&o.operator))
            .collect::<Result<_>>()?;
        records.push(TimeSeriesRecord {
            t,
            values,
            n_eff: None,
            counts: None,
        });
    }
    Ok(NaiveRun {
        records,
        counters: ens.counters(),
    })
}
