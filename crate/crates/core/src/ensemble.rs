//! Count-compressed ensemble: `N` members spread over `N_eff` distinct state
//! vectors, each stored once with an integer occupation.
//!
//! `rho = sum_a (N_a / N) |psi_a><psi_a|`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64, DensityMatrix, Operator, StateVector, ZERO};

/// Two states are the same entry when their fidelity exceeds `1 - MERGE_TOL`.
pub const MERGE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DistinctState {
    pub id: u64,
    pub vector: StateVector,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    total: u64,
    states: Vec<DistinctState>,
    time: f64,
    next_id: u64,
}

/// One entry of a snapshot export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub id: u64,
    pub count: u64,
    /// `[re, im]` pairs.
    pub amplitudes: Vec<[f64; 2]>,
}

impl Ensemble {
    /// All `total` members in `state` at `t = 0`.
    pub fn pure(state: StateVector, total: u64) -> Self {
        assert!(total > 0, "ensemble needs at least one member");
        Self {
            total,
            states: vec![DistinctState {
                id: 0,
                vector: state,
                count: total,
            }],
            time: 0.0,
            next_id: 1,
        }
    }

    /// Builds an ensemble from `(state, count)` pairs; ids are assigned in order.
    pub fn from_counts(entries: Vec<(StateVector, u64)>, time: f64) -> Result<Self> {
        let mut e = Self {
            total: entries.iter().map(|(_, c)| c).sum(),
            states: Vec::new(),
            time,
            next_id: 0,
        };
        if e.total == 0 {
            return Err(Error::ZeroTransfer);
        }
        for (v, count) in entries {
            let before = e.states.len();
            let id = e.find_or_insert(v)?;
            if e.states.len() == before {
                return Err(Error::config("ensemble", format!("duplicate state for id {id}")));
            }
            e.states.last_mut().expect("just inserted").count = count;
        }
        e.purge_empty();
        Ok(e)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub(crate) fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn states(&self) -> &[DistinctState] {
        &self.states
    }

    pub(crate) fn states_mut(&mut self) -> &mut [DistinctState] {
        &mut self.states
    }

    pub fn get(&self, id: u64) -> Option<&DistinctState> {
        self.states.iter().find(|s| s.id == id)
    }

    fn index_of(&self, id: u64) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s.id == id)
            .ok_or(Error::UnknownId(id))
    }

    pub fn count_of(&self, id: u64) -> u64 {
        self.get(id).map_or(0, |s| s.count)
    }

    pub fn count_sum(&self) -> u64 {
        self.states.iter().map(|s| s.count).sum()
    }

    /// Id of an entry equal to `v` up to global phase, inserting a zero-count entry if none.
    pub fn find_or_insert(&mut self, v: StateVector) -> Result<u64> {
        for s in &self.states {
            if linalg::overlap_fidelity(&s.vector, &v)? > 1.0 - MERGE_TOL {
                return Ok(s.id);
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.states.push(DistinctState {
            id,
            vector: v,
            count: 0,
        });
        Ok(id)
    }

    /// Moves `k` members from `from` to `to`. Emptied entries stay until [`Ensemble::purge_empty`].
    pub fn transfer_count(&mut self, from: u64, to: u64, k: u64) -> Result<()> {
        if k == 0 {
            return Err(Error::ZeroTransfer);
        }
        let src = self.index_of(from)?;
        let dst = self.index_of(to)?;
        let available = self.states[src].count;
        if k > available {
            return Err(Error::InsufficientCount {
                from,
                requested: k,
                available,
            });
        }
        self.states[src].count -= k;
        self.states[dst].count += k;
        Ok(())
    }

    /// Drops entries with zero occupation.
    pub fn purge_empty(&mut self) {
        self.states.retain(|s| s.count > 0);
    }

    pub fn n_eff(&self) -> usize {
        self.states.iter().filter(|s| s.count > 0).count()
    }

    pub fn weights(&self) -> impl Iterator<Item = (f64, &DistinctState)> {
        let n = self.total as f64;
        self.states.iter().map(move |s| (s.count as f64 / n, s))
    }

    pub fn assemble_density(&self) -> DensityMatrix {
        let d = self.states[0].vector.dim();
        let mut rho = Operator::zeros(d);
        for (w, s) in self.weights() {
            if s.count == 0 {
                continue;
            }
            let a = s.vector.amps();
            for r in 0..d {
                for c in 0..d {
                    let z = rho.get(r, c) + a[r] * a[c].conj() * w;
                    rho.set(r, c, z);
                }
            }
        }
        DensityMatrix::from_operator(rho)
    }

    /// `sum_a (N_a/N) <psi_a|obs|psi_a>`.
    pub fn expectation_value(&self, obs: &Operator) -> Result<C64> {
        let mut acc = ZERO;
        for (w, s) in self.weights() {
            acc += linalg::expectation(&s.vector, obs)? * w;
        }
        Ok(acc)
    }

    /// Count-weighted mean and spread of the per-entry expectation values (real parts).
    pub fn expectation_spread(&self, obs: &Operator) -> Result<(f64, f64)> {
        let vals = self
            .weights()
            .map(|(w, s)| Ok((w, linalg::expectation(&s.vector, obs)?.re)))
            .collect::<Result<Vec<_>>>()?;
        let mean: f64 = vals.iter().map(|(w, x)| w * x).sum();
        let var: f64 = vals.iter().map(|(w, x)| w * (x - mean).powi(2)).sum();
        Ok((mean, var))
    }

    pub fn snapshot(&self) -> Vec<SnapshotEntry> {
        self.states
            .iter()
            .map(|s| SnapshotEntry {
                id: s.id,
                count: s.count,
                amplitudes: s.vector.amps().iter().map(|a| [a.re, a.im]).collect(),
            })
            .collect()
    }

    /// Diagnostics for the count and distinctness invariants.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.count_sum() != self.total {
            out.push(format!("counts sum to {} instead of {}", self.count_sum(), self.total));
        }
        for (i, a) in self.states.iter().enumerate() {
            if (linalg::norm_sq(a.vector.amps()) - 1.0).abs() > linalg::NORM_TOL {
                out.push(format!("entry {} not unit-norm", a.id));
            }
            for b in &self.states[i + 1..] {
                let f = linalg::overlap_fidelity(&a.vector, &b.vector).unwrap_or(0.0);
                if f > 1.0 - MERGE_TOL {
                    out.push(format!("entries {} and {} coincide (fidelity {f})", a.id, b.id));
                }
            }
        }
        out
    }
}

pub fn assemble_density(e: &Ensemble) -> DensityMatrix {
    e.assemble_density()
}

pub fn n_eff(e: &Ensemble) -> usize {
    e.n_eff()
}
