//! Learnable sparsity cost tensors.
//!
//! Two parameter tensors drive scheduling: a layer-sparsity cost of shape
//! (T' x L_d x |S|) consumed by the DP solver, and a step cost of shape
//! (T' x 2) scoring accelerated-vs-full steps. Training reads the tensors
//! through relaxed softmax gates; the DP reads the raw values.

use crate::checkpoint::NamedArrays;
use crate::dp::SparsitySchedule;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use ndarray::Array2;

/// Discrete grid of retention fractions selectable per (step, sub-layer).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub interval: f64,
    pub fractions: Vec<f64>,
}

impl CandidateSet {
    pub fn new(interval: f64) -> Result<Self> {
        if !(interval > 0.0 && interval <= 1.0) {
            return Err(Error::Config(format!(
                "candidate interval {interval} must lie in (0, 1]"
            )));
        }
        let inv = 1.0 / interval;
        if (inv - inv.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "candidate interval {interval} must divide 1"
            )));
        }
        let u = inv.round() as usize;
        let fractions = (0..=u).map(|s| s as f64 * interval).collect();
        Ok(CandidateSet {
            interval,
            fractions,
        })
    }

    pub fn from_fractions(fractions: &[f64]) -> Result<Self> {
        if fractions.len() < 2 || fractions[0] != 0.0 || *fractions.last().unwrap() != 1.0 {
            return Err(Error::Config(
                "fractions must run from 0 to 1 inclusive".into(),
            ));
        }
        let interval = 1.0 / (fractions.len() - 1) as f64;
        Self::new(interval)
    }

    /// Number of retention units per slot, u = |S| - 1.
    pub fn units_per_slot(&self) -> usize {
        self.fractions.len() - 1
    }

    pub fn len(&self) -> usize {
        self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Layer-sparsity cost tensor, stored t-major: row t * L_d + l, column s.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub schedulable_steps: usize,
    pub sub_layers: usize,
    /// (T' * L_d) x |S|
    pub values: Array2<f64>,
    pub temperature: f64,
}

impl CostMatrix {
    pub fn zeros(schedulable_steps: usize, sub_layers: usize, candidates: usize) -> Self {
        CostMatrix {
            schedulable_steps,
            sub_layers,
            values: Array2::zeros((schedulable_steps * sub_layers, candidates)),
            temperature: 1.0,
        }
    }

    pub fn slots(&self) -> usize {
        self.schedulable_steps * self.sub_layers
    }

    pub fn candidates(&self) -> usize {
        self.values.ncols()
    }

    pub fn slot(&self, t: usize, l: usize) -> usize {
        t * self.sub_layers + l
    }

    pub fn value(&self, t: usize, l: usize, s: usize) -> f64 {
        self.values[[self.slot(t, l), s]]
    }

    /// Softmax over negated costs for one slot; the differentiable view of
    /// the schedule decision. Rows sum to 1.
    pub fn relaxed_gates(&self, t: usize, l: usize) -> Vec<f64> {
        relaxed_gates_row(
            self.values.row(self.slot(t, l)).as_slice().unwrap(),
            self.temperature,
        )
    }

    /// Warm start (stage-1 to stage-2 hand-off): lower the full-retention
    /// candidate cost by `delta` at every chosen full step.
    pub fn warm_start(&mut self, full_steps: &[usize], delta: f64) -> Result<()> {
        if delta < 0.0 {
            return Err(Error::Contract("warm-start delta must be >= 0".into()));
        }
        let last = self.candidates() - 1;
        for &t in full_steps {
            if t >= self.schedulable_steps {
                return Err(Error::Contract(format!(
                    "full step {t} outside schedulable range"
                )));
            }
            for l in 0..self.sub_layers {
                let slot = self.slot(t, l);
                self.values[[slot, last]] -= delta;
            }
        }
        Ok(())
    }

    /// Round every entry through f32, matching what the checkpoint container
    /// stores. Solving from rounded values keeps the emitted schedule and a
    /// later solve-from-checkpoint byte-identical.
    pub fn rounded_f32(&self) -> Self {
        let mut out = self.clone();
        out.values.mapv_inplace(|v| f64::from(v as f32));
        out
    }

    pub fn to_named_arrays(&self, step_costs: &StepCostMatrix) -> NamedArrays {
        let mut out = NamedArrays::new();
        out.push(
            "cost_layer",
            &[self.schedulable_steps, self.sub_layers, self.candidates()],
            self.values.iter().cloned().collect(),
        );
        out.push(
            "cost_step",
            &[step_costs.values.nrows(), 2],
            step_costs.values.iter().cloned().collect(),
        );
        out
    }

    pub fn from_named_arrays(arrays: &NamedArrays) -> Result<(CostMatrix, StepCostMatrix)> {
        let (shape, data) = arrays
            .get("cost_layer")
            .ok_or_else(|| Error::Contract("checkpoint missing cost_layer".into()))?;
        if shape.len() != 3 {
            return Err(Error::Contract("cost_layer must be rank 3".into()));
        }
        let (tp, ld, s) = (shape[0], shape[1], shape[2]);
        let values = Array2::from_shape_vec((tp * ld, s), data.to_vec())
            .map_err(|e| Error::Contract(e.to_string()))?;
        let layer = CostMatrix {
            schedulable_steps: tp,
            sub_layers: ld,
            values,
            temperature: 1.0,
        };
        let (sshape, sdata) = arrays
            .get("cost_step")
            .ok_or_else(|| Error::Contract("checkpoint missing cost_step".into()))?;
        if sshape.len() != 2 || sshape[1] != 2 {
            return Err(Error::Contract("cost_step must be (T' x 2)".into()));
        }
        let step = StepCostMatrix {
            values: Array2::from_shape_vec((sshape[0], 2), sdata.to_vec())
                .map_err(|e| Error::Contract(e.to_string()))?,
        };
        Ok((layer, step))
    }
}

pub fn relaxed_gates_row(costs: &[f64], temperature: f64) -> Vec<f64> {
    let max = costs
        .iter()
        .map(|c| -c / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = costs
        .iter()
        .map(|c| (-c / temperature - max).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Step cost: column 0 scores the accelerated variant of a step, column 1
/// the full-compute variant.
#[derive(Debug, Clone)]
pub struct StepCostMatrix {
    /// T' x 2
    pub values: Array2<f64>,
}

impl StepCostMatrix {
    pub fn init(seed: u64, schedulable_steps: usize) -> Self {
        let mut rng = SeededRng::for_component(seed, "cost-step-init");
        StepCostMatrix {
            values: Array2::from_shape_fn((schedulable_steps, 2), |_| rng.normal() * 0.01),
        }
    }
}

/// Initialize layer costs: small zero-mean noise (sigma = 0.01), optionally
/// biased so the DP reproduces `init_schedule` before any training.
pub fn init_costs(
    seed: u64,
    schedulable_steps: usize,
    sub_layers: usize,
    candidates: usize,
    init_schedule: Option<&SparsitySchedule>,
) -> CostMatrix {
    let mut rng = SeededRng::for_component(seed, "cost-layer-init");
    let mut costs = CostMatrix::zeros(schedulable_steps, sub_layers, candidates);
    costs
        .values
        .mapv_inplace(|_| rng.normal() * 0.01);
    if let Some(sched) = init_schedule {
        for t in 0..schedulable_steps {
            for l in 0..sub_layers {
                let s = sched.candidate(t, l);
                let slot = costs.slot(t, l);
                costs.values[[slot, s]] -= 1.0;
            }
        }
    }
    costs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_set_quarter_interval() {
        let s = CandidateSet::new(0.25).unwrap();
        assert_eq!(s.fractions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(s.units_per_slot(), 4);
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn candidate_set_rejects_non_divisors() {
        assert!(CandidateSet::new(0.3).is_err());
        assert!(CandidateSet::new(0.0).is_err());
        assert!(CandidateSet::new(1.5).is_err());
        assert!(CandidateSet::new(1.0).is_ok());
    }

    #[test]
    fn relaxed_gates_sum_to_one() {
        let mut c = CostMatrix::zeros(2, 3, 5);
        let mut rng = SeededRng::new(1);
        c.values.mapv_inplace(|_| rng.normal());
        for t in 0..2 {
            for l in 0..3 {
                let g = c.relaxed_gates(t, l);
                assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn high_temperature_gates_approach_uniform() {
        let mut c = CostMatrix::zeros(1, 1, 5);
        c.values[[0, 0]] = 3.0;
        c.values[[0, 4]] = -2.0;
        c.temperature = 1e9;
        for g in c.relaxed_gates(0, 0) {
            assert!((g - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn warm_start_subtracts_delta() {
        let mut c = CostMatrix::zeros(3, 2, 5);
        let slot = c.slot(1, 0);
        c.values[[slot, 4]] = 3.2;
        let before = c.values.clone();
        c.warm_start(&[1], 10.0).unwrap();
        assert!((c.value(1, 0, 4) - (-6.8)).abs() < 1e-12);
        assert!((c.value(1, 1, 4) - (-10.0)).abs() < 1e-12);
        // all other entries untouched
        for t in 0..3 {
            for l in 0..2 {
                for s in 0..4 {
                    assert_eq!(c.value(t, l, s), before[[c.slot(t, l), s]]);
                }
            }
        }
        // delta = 0 is the identity
        let snapshot = c.values.clone();
        c.warm_start(&[0, 2], 0.0).unwrap();
        assert_eq!(c.values, snapshot);
    }

    #[test]
    fn init_is_seeded_and_small() {
        let a = init_costs(9, 3, 4, 5, None);
        let b = init_costs(9, 3, 4, 5, None);
        assert_eq!(a.values, b.values);
        for v in a.values.iter() {
            assert!(v.abs() < 0.1, "|{v}| >= 0.1");
        }
    }
}
