//! Token-wise feature cache and the scheduled sampler executor.
//!
//! Each sub-layer keeps its last computed output per token plus a reuse
//! counter. At a scheduled step a retention fraction rho per sub-layer picks
//! how many tokens recompute: selected tokens refresh the cache and reset
//! their counters, the rest reuse cached outputs and age by one. A zero
//! retention skips the sub-layer entirely, selector included.

use crate::error::{Error, Result};
use crate::dp::SparsitySchedule;
use crate::model::{
    ddim_update, sublayer_forward, ContextKv, SubLayerId, SubLayerKind, ToyDiTModel,
};
use crate::selector::{score_alternative, score_tokens, select_top_k, ScoreKind, SelectorWeights};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Number of tokens recomputed at retention fraction rho (ties-to-even).
pub fn retained_tokens(rho: f64, n: usize) -> usize {
    (rho * n as f64).round_ties_even() as usize
}

#[derive(Debug, Clone)]
pub struct SubLayerCache {
    pub output: Array2<f64>,
    pub reuse: Vec<u32>,
    /// Full stored attention map; computed rows refresh on every computed
    /// pass so the selector has a map even when a later step skips compute.
    pub last_attention: Option<Array2<f64>>,
    pub initialized: bool,
}

#[derive(Debug, Clone)]
pub struct TokenCache {
    pub layers: Vec<SubLayerCache>,
}

impl TokenCache {
    pub fn new(sub_layers: usize, n: usize, d: usize) -> Self {
        TokenCache {
            layers: (0..sub_layers)
                .map(|_| SubLayerCache {
                    output: Array2::zeros((n, d)),
                    reuse: vec![0; n],
                    last_attention: None,
                    initialized: false,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub flat_index: usize,
    pub rho: f64,
    pub selected_indices: Vec<usize>,
    pub macs: u64,
    pub selector_macs: u64,
}

/// Score the tokens of one sub-layer and pick the top `k` to recompute.
/// Shared by the sampler executor and the differentiable forward so both
/// select identical token sets.
#[allow(clippy::too_many_arguments)]
pub fn select_tokens(
    selector: &SelectorWeights,
    kind: SubLayerKind,
    last_attention: Option<&Array2<f64>>,
    reuse: &[u32],
    stream: &Array2<f64>,
    cached: &Array2<f64>,
    grid: (usize, usize),
    k: usize,
) -> Result<Vec<bool>> {
    let scores = match selector.score_kind {
        ScoreKind::Attention => {
            let (self_map, cross_map) = match kind {
                SubLayerKind::SelfAttn => (last_attention, None),
                SubLayerKind::CrossAttn => (None, last_attention),
                SubLayerKind::Mlp => (None, None),
            };
            score_tokens(selector, self_map, cross_map, reuse, grid)?
        }
        ScoreKind::Similarity | ScoreKind::Norm => {
            score_alternative(selector, stream, cached, reuse, grid)?
        }
    };
    select_top_k(&scores, k)
}

/// Single-run executor: owns the cache, the schedule, and the MAC counters.
/// Create one executor per sample.
pub struct CacheExecutor {
    pub schedule: SparsitySchedule,
    pub selector: SelectorWeights,
    pub cache: TokenCache,
    pub trace: Vec<TraceEntry>,
    pub macs_total: u64,
    pub selector_macs_total: u64,
    ctx: ContextKv,
}

impl CacheExecutor {
    pub fn new(model: &ToyDiTModel, schedule: SparsitySchedule, selector: SelectorWeights) -> Result<Self> {
        let cfg = &model.config;
        if schedule.schedulable_steps() != cfg.schedulable_steps()
            || schedule.sub_layers() != cfg.sub_layer_count()
        {
            return Err(Error::Contract(format!(
                "schedule is {} x {}, model needs {} x {}",
                schedule.schedulable_steps(),
                schedule.sub_layers(),
                cfg.schedulable_steps(),
                cfg.sub_layer_count()
            )));
        }
        Ok(CacheExecutor {
            schedule,
            selector,
            cache: TokenCache::new(cfg.sub_layer_count(), cfg.token_count, cfg.model_dim),
            trace: Vec::new(),
            macs_total: 0,
            selector_macs_total: 0,
            ctx: ContextKv::empty(),
        })
    }

    /// Scheduled retention for an execution step; step 0 is always full.
    pub fn rho_at(&self, step: usize, flat_index: usize) -> f64 {
        if step == 0 {
            1.0
        } else {
            self.schedule.rho(step - 1, flat_index)
        }
    }

    fn store_attention(layer: &mut SubLayerCache, attn: &Array2<f64>, selected: &[usize]) {
        match &mut layer.last_attention {
            Some(stored) if stored.ncols() == attn.ncols() => {
                for (r, &i) in selected.iter().enumerate() {
                    stored.row_mut(i).assign(&attn.row(r));
                }
            }
            _ => {
                // first computed pass is always full, so this covers all rows
                let mut full = Array2::zeros((layer.output.nrows(), attn.ncols()));
                for (r, &i) in selected.iter().enumerate() {
                    full.row_mut(i).assign(&attn.row(r));
                }
                layer.last_attention = Some(full);
            }
        }
    }

    /// One sub-layer under the schedule: fresh compute for the selected
    /// tokens merged with cached outputs for the rest.
    pub fn execute_sublayer(
        &mut self,
        model: &ToyDiTModel,
        id: SubLayerId,
        stream: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let cfg = &model.config;
        let n = cfg.token_count;
        let rho = self.rho_at(id.step, id.flat_index);
        let k = retained_tokens(rho, n);
        let layer_initialized = self.cache.layers[id.flat_index].initialized;

        if k == n {
            let mask = vec![true; n];
            let out = sublayer_forward(model, id.block, id.kind, stream, &self.ctx, &mask)?;
            let layer = &mut self.cache.layers[id.flat_index];
            layer.output.assign(&out.out);
            layer.reuse.iter_mut().for_each(|c| *c = 0);
            if let Some(attn) = &out.attn {
                let all: Vec<usize> = (0..n).collect();
                Self::store_attention(layer, attn, &all);
            }
            layer.initialized = true;
            let mut macs = out.macs;
            if id.step == 0 && id.kind == SubLayerKind::CrossAttn {
                macs += self.ctx.macs_per_block;
            }
            self.macs_total += macs;
            self.trace.push(TraceEntry {
                step: id.step,
                flat_index: id.flat_index,
                rho,
                selected_indices: (0..n).collect(),
                macs,
                selector_macs: 0,
            });
            return Ok(out.out.clone());
        }

        if !layer_initialized {
            return Err(Error::State(format!(
                "sub-layer {} asked for rho = {rho} before any full compute",
                id.flat_index
            )));
        }

        if k == 0 {
            let layer = &mut self.cache.layers[id.flat_index];
            layer.reuse.iter_mut().for_each(|c| *c += 1);
            let out = layer.output.clone();
            self.trace.push(TraceEntry {
                step: id.step,
                flat_index: id.flat_index,
                rho,
                selected_indices: Vec::new(),
                macs: 0,
                selector_macs: 0,
            });
            return Ok(out);
        }

        // partial retention: score, select, compute, merge
        let (mask, selector_macs) = self.select_for(model, id, stream)?;
        let out = sublayer_forward(model, id.block, id.kind, stream, &self.ctx, &mask)?;
        let selected: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let layer = &mut self.cache.layers[id.flat_index];
        let mut merged = layer.output.clone();
        for &i in &selected {
            merged.row_mut(i).assign(&out.out.row(i));
            layer.output.row_mut(i).assign(&out.out.row(i));
            layer.reuse[i] = 0;
        }
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                layer.reuse[i] += 1;
            }
        }
        if let Some(attn) = &out.attn {
            Self::store_attention(layer, attn, &selected);
        }
        self.macs_total += out.macs;
        self.selector_macs_total += selector_macs;
        self.trace.push(TraceEntry {
            step: id.step,
            flat_index: id.flat_index,
            rho,
            selected_indices: selected,
            macs: out.macs,
            selector_macs,
        });
        Ok(merged)
    }

    fn select_for(
        &self,
        model: &ToyDiTModel,
        id: SubLayerId,
        stream: &Array2<f64>,
    ) -> Result<(Vec<bool>, u64)> {
        let cfg = &model.config;
        let n = cfg.token_count;
        let layer = &self.cache.layers[id.flat_index];
        let rho = self.rho_at(id.step, id.flat_index);
        let k = retained_tokens(rho, n);
        let mask = select_tokens(
            &self.selector,
            id.kind,
            layer.last_attention.as_ref(),
            &layer.reuse,
            stream,
            &layer.output,
            cfg.grid_shape(),
            k,
        )?;
        let selector_macs = match self.selector.score_kind {
            ScoreKind::Attention => {
                let mut macs = 3 * n as u64 + n as u64; // weighted sum + bonus scan
                if id.kind != SubLayerKind::Mlp {
                    if let Some(m) = &layer.last_attention {
                        macs += (m.nrows() * m.ncols()) as u64;
                    }
                }
                macs
            }
            ScoreKind::Similarity => 3 * (n * cfg.model_dim) as u64 + 4 * n as u64,
            ScoreKind::Norm => (n * cfg.model_dim) as u64 + 4 * n as u64,
        };
        Ok((mask, selector_macs))
    }

    /// Run the full scheduled sampler. Resets cache, counters, and trace, so
    /// a fresh executor and a reused one agree.
    pub fn run_scheduled_sample(
        &mut self,
        model: &ToyDiTModel,
        condition: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let cfg = &model.config;
        self.cache = TokenCache::new(cfg.sub_layer_count(), cfg.token_count, cfg.model_dim);
        self.trace.clear();
        self.macs_total = 0;
        self.selector_macs_total = 0;
        self.ctx = if cfg.has_cross_attn() {
            ContextKv::new(model, condition)
        } else {
            ContextKv::empty()
        };

        let mut x = noise.clone();
        for step in 0..cfg.num_steps {
            let t = model.time_of_step(step);
            let mut h = model.embed(&x, t);
            for flat in 0..cfg.sub_layer_count() {
                let id = cfg.sub_layer_id(step, flat);
                let merged = self.execute_sublayer(model, id, &h)?;
                h += &merged;
            }
            let eps = model.head(&h);
            x = ddim_update(
                &x,
                &eps,
                model.schedule.alpha_bars[t],
                model.schedule.alpha_bar_prev(t),
            );
        }
        Ok(x)
    }

    pub fn trace_json(&self) -> String {
        serde_json::to_string_pretty(&self.trace).expect("trace serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CandidateSet;
    use crate::model::{init_model, make_condition, make_noise, ToyDiTConfig};

    fn small_config() -> ToyDiTConfig {
        ToyDiTConfig {
            num_blocks: 2,
            token_count: 16,
            model_dim: 16,
            mlp_hidden: 32,
            context_tokens: 4,
            num_heads: 2,
            num_steps: 4,
            seed: 7,
        }
    }

    fn bits(a: &Array2<f64>) -> Vec<u64> {
        a.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn all_full_schedule_matches_teacher_bitwise() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let teacher = model.sample(&cond, &noise).unwrap();
        let set = CandidateSet::new(0.25).unwrap();
        let sched = SparsitySchedule::uniform(3, cfg.sub_layer_count(), set, 4);
        let mut exec = CacheExecutor::new(&model, sched, SelectorWeights::pixart_preset()).unwrap();
        let student = exec.run_scheduled_sample(&model, &cond, &noise).unwrap();
        assert_eq!(bits(&teacher), bits(&student));
    }

    #[test]
    fn zero_schedule_serves_cache_and_ages_counters() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let set = CandidateSet::new(0.25).unwrap();
        let sched = SparsitySchedule::uniform(3, cfg.sub_layer_count(), set, 0);
        let mut exec = CacheExecutor::new(&model, sched, SelectorWeights::pixart_preset()).unwrap();
        exec.run_scheduled_sample(&model, &cond, &noise).unwrap();
        for layer in &exec.cache.layers {
            assert!(layer.reuse.iter().all(|&c| c as usize == cfg.num_steps - 1));
        }
        // every scheduled entry recorded zero MACs
        for e in &exec.trace {
            if e.step > 0 {
                assert_eq!(e.macs, 0);
                assert_eq!(e.selector_macs, 0);
                assert!(e.selected_indices.is_empty());
            }
        }
    }

    #[test]
    fn partial_retention_touches_exactly_k_rows() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let set = CandidateSet::new(0.25).unwrap();
        let sched = SparsitySchedule::uniform(3, cfg.sub_layer_count(), set, 2); // rho = 0.5
        let mut exec = CacheExecutor::new(&model, sched, SelectorWeights::pixart_preset()).unwrap();

        // drive the first step manually, snapshot, then one scheduled step
        exec.ctx = ContextKv::new(&model, &cond);
        let mut x = noise.clone();
        let t = model.time_of_step(0);
        let mut h = model.embed(&x, t);
        for flat in 0..cfg.sub_layer_count() {
            let id = cfg.sub_layer_id(0, flat);
            let merged = exec.execute_sublayer(&model, id, &h).unwrap();
            h += &merged;
        }
        let eps = model.head(&h);
        x = ddim_update(
            &x,
            &eps,
            model.schedule.alpha_bars[t],
            model.schedule.alpha_bar_prev(t),
        );

        let snapshot: Vec<Array2<f64>> = exec.cache.layers.iter().map(|l| l.output.clone()).collect();
        let t = model.time_of_step(1);
        let h = model.embed(&x, t);
        let id = cfg.sub_layer_id(1, 0);
        let merged = exec.execute_sublayer(&model, id, &h).unwrap();
        let changed: Vec<usize> = (0..cfg.token_count)
            .filter(|&i| {
                (0..cfg.model_dim).any(|j| merged[[i, j]].to_bits() != snapshot[0][[i, j]].to_bits())
            })
            .collect();
        let selected = &exec.trace.last().unwrap().selected_indices;
        assert_eq!(selected.len(), 8);
        // rows that differ from the pre-call cache are a subset of the
        // selected rows; unselected rows are bitwise-identical to the cache
        for i in &changed {
            assert!(selected.contains(i));
        }
        for i in 0..cfg.token_count {
            if !selected.contains(&i) {
                for j in 0..cfg.model_dim {
                    assert_eq!(merged[[i, j]].to_bits(), snapshot[0][[i, j]].to_bits());
                }
            }
        }
    }

    #[test]
    fn partial_rho_on_uninitialized_cache_is_a_state_error() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let set = CandidateSet::new(0.25).unwrap();
        let sched = SparsitySchedule::uniform(3, cfg.sub_layer_count(), set, 2);
        let mut exec = CacheExecutor::new(&model, sched, SelectorWeights::pixart_preset()).unwrap();
        exec.ctx = ContextKv::new(&model, &make_condition(&cfg, 1));
        let h = make_noise(&cfg, 3);
        let id = cfg.sub_layer_id(1, 0); // step 1 without a prior full pass
        assert!(matches!(
            exec.execute_sublayer(&model, id, &h),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn counter_law_replay() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let set = CandidateSet::new(0.25).unwrap();
        // mixed schedule
        let mut sched = SparsitySchedule::uniform(3, cfg.sub_layer_count(), set, 2);
        sched.candidates[[0, 1]] = 0;
        sched.candidates[[1, 3]] = 4;
        sched.candidates[[2, 5]] = 1;
        let mut exec = CacheExecutor::new(&model, sched, SelectorWeights::pixart_preset()).unwrap();
        exec.run_scheduled_sample(&model, &cond, &noise).unwrap();

        // replay: n_i must equal steps since token i last computed fresh
        let mut last_fresh = vec![vec![0i64; cfg.token_count]; cfg.sub_layer_count()];
        for e in &exec.trace {
            for &i in &e.selected_indices {
                last_fresh[e.flat_index][i] = e.step as i64;
            }
        }
        let final_step = (cfg.num_steps - 1) as i64;
        for (flat, layer) in exec.cache.layers.iter().enumerate() {
            for i in 0..cfg.token_count {
                assert_eq!(
                    i64::from(layer.reuse[i]),
                    final_step - last_fresh[flat][i],
                    "sub-layer {flat} token {i}"
                );
            }
        }
    }

    #[test]
    fn schedule_shape_mismatch_rejected() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let set = CandidateSet::new(0.25).unwrap();
        let sched = SparsitySchedule::uniform(2, cfg.sub_layer_count(), set, 4);
        assert!(CacheExecutor::new(&model, sched, SelectorWeights::pixart_preset()).is_err());
    }
}
