//! Budget-constrained schedule solver.
//!
//! Bounded dynamic program over (slot, spent-units) states: one retention
//! candidate per (step, sub-layer) slot, exact global unit budget, ascending
//! candidate scan with strict improvement so ties resolve deterministically,
//! reachability pre-pruning, and backtracking to recover the assignment.

use crate::cost::{CandidateSet, CostMatrix, StepCostMatrix};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    /// Spend the budget exactly (the written constraint).
    Equality,
    /// Spend at most the budget, taking the cheapest reachable total.
    AtMost,
}

/// Global retained-compute budget. Candidate index = retained units per
/// slot; B = round((1 - R) * slots * u) where R is the advertised cache
/// ratio (fraction of compute replaced by reuse).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub target_cache_ratio: f64,
    pub schedulable_slots: usize,
    pub units_per_slot: usize,
    pub total_units: usize,
}

impl Budget {
    pub fn new(target_cache_ratio: f64, schedulable_slots: usize, units_per_slot: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_cache_ratio) {
            return Err(Error::Budget(format!(
                "cache ratio {target_cache_ratio} outside [0, 1]"
            )));
        }
        let total = (1.0 - target_cache_ratio) * (schedulable_slots * units_per_slot) as f64;
        Ok(Budget {
            target_cache_ratio,
            schedulable_slots,
            units_per_slot,
            total_units: total.round_ties_even() as usize,
        })
    }

    pub fn with_units(total_units: usize, schedulable_slots: usize, units_per_slot: usize) -> Result<Self> {
        let cap = schedulable_slots * units_per_slot;
        if total_units > cap {
            return Err(Error::Budget(format!(
                "budget {total_units} exceeds capacity {cap}"
            )));
        }
        Ok(Budget {
            target_cache_ratio: 1.0 - total_units as f64 / cap as f64,
            schedulable_slots,
            units_per_slot,
            total_units,
        })
    }

    /// Reachable band of partial unit sums after `slot_index` slots have been
    /// assigned. DP cells outside the band are never computed.
    pub fn prune_states(&self, slot_index: usize) -> (usize, usize) {
        let b = self.total_units;
        let u = self.units_per_slot;
        let remaining = (self.schedulable_slots - slot_index) * u;
        let r_min = b.saturating_sub(remaining);
        let r_max = (slot_index * u).min(b);
        (r_min, r_max)
    }
}

/// Chosen retention candidate per (schedulable step, sub-layer).
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    /// T' x L_d candidate indices.
    pub candidates: Array2<usize>,
    pub candidate_set: CandidateSet,
    pub achieved_units: usize,
    pub achieved_cost: f64,
}

impl SparsitySchedule {
    pub fn new(candidates: Array2<usize>, candidate_set: CandidateSet) -> Self {
        let achieved_units = candidates.iter().sum();
        SparsitySchedule {
            candidates,
            candidate_set,
            achieved_units,
            achieved_cost: 0.0,
        }
    }

    /// Uniform schedule: every slot at the same candidate index.
    pub fn uniform(steps: usize, sub_layers: usize, candidate_set: CandidateSet, index: usize) -> Self {
        Self::new(
            Array2::from_elem((steps, sub_layers), index),
            candidate_set,
        )
    }

    /// Budget-exact even spread: every slot gets floor(B / slots) units and
    /// the first B mod slots slots one extra.
    pub fn uniform_spread(
        budget: &Budget,
        steps: usize,
        sub_layers: usize,
        candidate_set: CandidateSet,
    ) -> Self {
        let slots = steps * sub_layers;
        let base = budget.total_units / slots;
        let extra = budget.total_units % slots;
        Self::new(
            Array2::from_shape_fn((steps, sub_layers), |(t, l)| {
                base + usize::from(t * sub_layers + l < extra)
            }),
            candidate_set,
        )
    }

    pub fn schedulable_steps(&self) -> usize {
        self.candidates.nrows()
    }

    pub fn sub_layers(&self) -> usize {
        self.candidates.ncols()
    }

    pub fn candidate(&self, t: usize, l: usize) -> usize {
        self.candidates[[t, l]]
    }

    /// Retention fraction for a schedulable step (0-based within the
    /// schedulable range, i.e. execution step t+1).
    pub fn rho(&self, t: usize, l: usize) -> f64 {
        self.candidate_set.fractions[self.candidates[[t, l]]]
    }

    pub fn total_units(&self) -> usize {
        self.candidates.iter().sum()
    }

    pub fn mean_retention(&self) -> f64 {
        let cap = self.candidates.len() * self.candidate_set.units_per_slot();
        self.total_units() as f64 / cap as f64
    }
}

/// Serialized schedule file (JSON, bit-exact round trip).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleFile {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub sub_layers: Vec<String>,
    pub fractions: Vec<f64>,
    pub schedule: Vec<Vec<usize>>,
    pub budget_units: usize,
    pub total_cost: f64,
}

impl ScheduleFile {
    pub fn from_schedule(
        sched: &SparsitySchedule,
        num_steps: usize,
        sub_layer_names: Vec<String>,
        config_hash: Option<String>,
    ) -> Self {
        ScheduleFile {
            version: 1,
            config_hash,
            num_steps,
            sub_layers: sub_layer_names,
            fractions: sched.candidate_set.fractions.clone(),
            schedule: sched
                .candidates
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            budget_units: sched.achieved_units,
            total_cost: sched.achieved_cost,
        }
    }

    pub fn to_schedule(&self) -> Result<SparsitySchedule> {
        let set = CandidateSet::from_fractions(&self.fractions)?;
        let tp = self.schedule.len();
        let ld = self.sub_layers.len();
        let mut candidates = Array2::zeros((tp, ld));
        for (t, row) in self.schedule.iter().enumerate() {
            if row.len() != ld {
                return Err(Error::Contract(format!(
                    "schedule row {t} has {} entries, expected {ld}",
                    row.len()
                )));
            }
            for (l, &s) in row.iter().enumerate() {
                if s >= set.len() {
                    return Err(Error::Contract(format!(
                        "candidate index {s} out of range at ({t}, {l})"
                    )));
                }
                candidates[[t, l]] = s;
            }
        }
        let mut sched = SparsitySchedule::new(candidates, set);
        sched.achieved_cost = self.total_cost;
        Ok(sched)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("schedule serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Minimum-cost assignment of one candidate per slot with Sum(units) = B.
pub fn solve(costs: &CostMatrix, budget: &Budget, candidate_set: &CandidateSet) -> Result<SparsitySchedule> {
    solve_with_options(costs, budget, candidate_set, SolveMode::Equality, true)
}

pub fn solve_with_options(
    costs: &CostMatrix,
    budget: &Budget,
    candidate_set: &CandidateSet,
    mode: SolveMode,
    prune: bool,
) -> Result<SparsitySchedule> {
    let slots = costs.slots();
    let u = candidate_set.units_per_slot();
    if budget.schedulable_slots != slots || budget.units_per_slot != u {
        return Err(Error::Budget(format!(
            "budget shaped for {} slots x {} units, costs have {} x {}",
            budget.schedulable_slots, budget.units_per_slot, slots, u
        )));
    }
    if costs.candidates() != candidate_set.len() {
        return Err(Error::Contract(format!(
            "cost matrix has {} candidates, set has {}",
            costs.candidates(),
            candidate_set.len()
        )));
    }
    let b = budget.total_units;
    if b > slots * u {
        return Err(Error::Budget(format!(
            "budget {b} infeasible for {slots} slots x {u} units"
        )));
    }

    let width = b + 1;
    let mut prev = vec![f64::INFINITY; width];
    let mut cur = vec![f64::INFINITY; width];
    prev[0] = 0.0;
    // choice[i * width + r]: candidate chosen at slot i to reach partial sum r
    let mut choice = vec![0u8; slots * width];
    for i in 0..slots {
        let (lo, hi) = if prune && mode == SolveMode::Equality {
            budget.prune_states(i + 1)
        } else {
            // the lower band presumes the budget must be met exactly
            (0, ((i + 1) * u).min(b))
        };
        for v in cur.iter_mut() {
            *v = f64::INFINITY;
        }
        let row = costs.values.row(i);
        for r in lo..=hi {
            let mut best = f64::INFINITY;
            let mut best_s = 0u8;
            for s in 0..=u.min(r) {
                let below = prev[r - s];
                if below.is_finite() {
                    let c = below + row[s];
                    if c < best {
                        best = c;
                        best_s = s as u8;
                    }
                }
            }
            cur[r] = best;
            choice[i * width + r] = best_s;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let target = match mode {
        SolveMode::Equality => b,
        SolveMode::AtMost => {
            let mut best_r = 0;
            let mut best = f64::INFINITY;
            for (r, &v) in prev.iter().enumerate() {
                if v < best {
                    best = v;
                    best_r = r;
                }
            }
            best_r
        }
    };
    if !prev[target].is_finite() {
        return Err(Error::Budget(format!("no feasible assignment for budget {b}")));
    }
    let total_cost = prev[target];

    let mut flat = vec![0usize; slots];
    let mut r = target;
    for i in (0..slots).rev() {
        let s = choice[i * width + r] as usize;
        flat[i] = s;
        r -= s;
    }
    debug_assert_eq!(r, 0);

    let tp = costs.schedulable_steps;
    let ld = costs.sub_layers;
    let candidates = Array2::from_shape_fn((tp, ld), |(t, l)| flat[t * ld + l]);
    let mut sched = SparsitySchedule::new(candidates, candidate_set.clone());
    sched.achieved_cost = total_cost;
    Ok(sched)
}

/// Choose exactly `count` full steps minimizing total step cost
/// (choose-k DP, ascending candidate scan, strict improvement).
pub fn solve_full_steps(step_costs: &StepCostMatrix, count: usize) -> Result<Vec<usize>> {
    let tp = step_costs.values.nrows();
    if count > tp {
        return Err(Error::Contract(format!(
            "requested {count} full steps out of {tp}"
        )));
    }
    let width = count + 1;
    let mut prev = vec![f64::INFINITY; width];
    let mut cur = vec![f64::INFINITY; width];
    prev[0] = 0.0;
    let mut choice = vec![0u8; tp * width];
    for t in 0..tp {
        for v in cur.iter_mut() {
            *v = f64::INFINITY;
        }
        for j in 0..=count.min(t + 1) {
            let mut best = f64::INFINITY;
            let mut best_c = 0u8;
            // candidate 0 = accelerated, 1 = full; ascending scan
            if prev[j].is_finite() {
                best = prev[j] + step_costs.values[[t, 0]];
                best_c = 0;
            }
            if j > 0 && prev[j - 1].is_finite() {
                let c = prev[j - 1] + step_costs.values[[t, 1]];
                if c < best {
                    best = c;
                    best_c = 1;
                }
            }
            cur[j] = best;
            choice[t * width + j] = best_c;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    if !prev[count].is_finite() {
        return Err(Error::Contract("full-step selection infeasible".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut j = count;
    for t in (0..tp).rev() {
        if choice[t * width + j] == 1 {
            out.push(t);
            j -= 1;
        }
    }
    out.reverse();
    Ok(out)
}
