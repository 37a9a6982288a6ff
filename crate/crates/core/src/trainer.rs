//! Two-stage cost training and schedule-search baselines.
//!
//! Stage 1 trains the layer-cost tensor and the per-step cost tensor in
//! separate phases against the full-compute teacher, each through the
//! straight-through gates. The step costs then pick a set of full-compute
//! steps whose full-retention candidates get a warm-start discount of delta,
//! and stage 2 fine-tunes the unified layer costs with the DP re-solved every
//! iteration. Baselines: random search over budget-exact schedules and a
//! small elitist genetic algorithm with budget-repairing operators.

use crate::cache::CacheExecutor;
use crate::cost::{init_costs, CandidateSet, CostMatrix, StepCostMatrix};
use crate::diffexec::{scheduled_forward_diff, step_mixture_forward_diff, GateMode};
use crate::dp::{solve, solve_full_steps, Budget, SparsitySchedule};
use crate::error::{Error, Result};
use crate::loss::{distill_loss, distill_loss_diff, LossKind};
use crate::metrics::ssim_mean;
use crate::model::ToyDiTModel;
use crate::rng::SeededRng;
use crate::selector::SelectorWeights;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_layer_lr: f64,
    pub stage1_step_lr: f64,
    pub stage2_lr: f64,
    /// warm-start discount on full-retention candidates at chosen full steps
    pub delta: f64,
    pub iterations_stage1: usize,
    pub iterations_stage2: usize,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    /// re-solve the DP every this many stage-2 iterations
    pub dp_resolve_period: usize,
    /// size of the fixed training-sample pool cycled across iterations;
    /// 0 draws a fresh sample every iteration
    pub sample_pool: usize,
    /// early stopping: restore the stage-2 cost snapshot whose solved
    /// schedule had the lowest hard-execution pool loss
    pub keep_best: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_layer_lr: 1.0,
            stage1_step_lr: 0.01,
            stage2_lr: 0.1,
            delta: 10.0,
            iterations_stage1: 40,
            iterations_stage2: 40,
            batch_size: 1,
            loss_kind: LossKind::FeatureProxy,
            dp_resolve_period: 1,
            sample_pool: 8,
            keep_best: true,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stage1_layer_lr", self.stage1_layer_lr),
            ("stage1_step_lr", self.stage1_step_lr),
            ("stage2_lr", self.stage2_lr),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.delta < 0.0 {
            return Err(Error::Config("delta must be >= 0".into()));
        }
        if self.batch_size == 0 || self.dp_resolve_period == 0 {
            return Err(Error::Config(
                "batch_size and dp_resolve_period must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction and no weight decay.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Adam {
    pub fn new(lr: f64, shape: (usize, usize)) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }

    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), (v, g)) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grad.iter()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub stage: u8,
    pub loss: f64,
    pub budget_units: usize,
    pub dp_total_cost: f64,
    pub wall_ms: u128,
}

pub fn log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("iteration,stage,loss,budget_units,dp_total_cost,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.stage, r.loss, r.budget_units, r.dp_total_cost, r.wall_ms
        ));
    }
    out
}

pub struct TrainOutput {
    pub layer_costs: CostMatrix,
    pub step_costs: StepCostMatrix,
    /// solved from the f32-rounded final costs so a later solve from the
    /// checkpoint reproduces it byte-identically
    pub schedule: SparsitySchedule,
    pub full_steps: Vec<usize>,
    pub log: Vec<TrainLogRow>,
    /// number of distinct schedules scored during early stopping; search
    /// baselines get the same number of candidate evaluations for a fair
    /// comparison
    pub evaluated_schedules: usize,
}

fn draw_seeds(seed: u64, tag: &str, count: usize) -> Vec<u64> {
    let mut rng = SeededRng::for_component(seed, tag);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Training-sample seeds for `count` draws: either cycled from a fixed pool
/// or fresh for every draw.
fn training_seeds(cfg: &TrainConfig, count: usize) -> Vec<u64> {
    if cfg.sample_pool > 0 {
        let pool = draw_seeds(cfg.seed, "train-samples", cfg.sample_pool);
        (0..count).map(|i| pool[i % pool.len()]).collect()
    } else {
        draw_seeds(cfg.seed, "train-samples", count)
    }
}

fn guard_finite(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("{what} loss is {loss}")));
    }
    Ok(())
}

/// Stage-1 result: trained cost tensors with the warm-start discount already
/// applied at the chosen full steps.
pub struct Stage1Output {
    pub layer_costs: CostMatrix,
    pub step_costs: StepCostMatrix,
    pub full_steps: Vec<usize>,
    pub log: Vec<TrainLogRow>,
}

/// Full two-stage training run. `delta = 0` degenerates to the single-stage
/// baseline: the warm start becomes the identity and stage 2 starts from the
/// unmodified stage-1 costs.
pub fn train(
    model: &ToyDiTModel,
    budget: &Budget,
    set: &CandidateSet,
    selector: &SelectorWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let stage1 = train_stage1(model, budget, set, selector, cfg)?;
    train_stage2(model, budget, set, selector, cfg, stage1)
}

/// Stage 1: layer costs against the DP-committed hard schedule, then step
/// costs through the two-way step mixture, then the warm-start hand-off.
pub fn train_stage1(
    model: &ToyDiTModel,
    budget: &Budget,
    set: &CandidateSet,
    selector: &SelectorWeights,
    cfg: &TrainConfig,
) -> Result<Stage1Output> {
    cfg.validate()?;
    let mcfg = &model.config;
    let tp = mcfg.schedulable_steps();
    let ld = mcfg.sub_layer_count();
    let mut log = Vec::new();

    // start from the budget-exact even spread so early DP solves are sane
    let init_sched = SparsitySchedule::uniform_spread(budget, tp, ld, set.clone());
    let mut layer_costs = init_costs(cfg.seed, tp, ld, set.len(), Some(&init_sched));
    layer_costs.temperature = cfg.temperature;
    let mut step_costs = StepCostMatrix::init(cfg.seed, tp);

    let sample_seeds = training_seeds(cfg, cfg.iterations_stage1 * cfg.batch_size * 2);
    let mut seed_cursor = 0usize;

    // stage 1a: layer costs against the DP-committed hard schedule
    let mut opt = Adam::new(cfg.stage1_layer_lr, layer_costs.values.dim());
    let mut hard = solve(&layer_costs, budget, set)?;
    for iter in 0..cfg.iterations_stage1 {
        let started = Instant::now();
        if iter % cfg.dp_resolve_period == 0 {
            hard = solve(&layer_costs, budget, set)?;
        }
        let (loss, grad) = layer_batch_grad(
            model,
            &layer_costs,
            &hard,
            selector,
            cfg,
            &sample_seeds[seed_cursor..seed_cursor + cfg.batch_size],
        )?;
        seed_cursor += cfg.batch_size;
        guard_finite(loss, "stage-1 layer")?;
        opt.step(&mut layer_costs.values, &grad);
        log.push(TrainLogRow {
            iteration: iter,
            stage: 1,
            loss,
            budget_units: hard.total_units(),
            dp_total_cost: hard.achieved_cost,
            wall_ms: started.elapsed().as_millis(),
        });
    }

    // stage 1b: step costs through the two-way step mixture
    let accel_index = (0.5 * set.units_per_slot() as f64).round_ties_even() as usize;
    let accel = SparsitySchedule::uniform(tp, ld, set.clone(), accel_index);
    let mut opt = Adam::new(cfg.stage1_step_lr, step_costs.values.dim());
    for iter in 0..cfg.iterations_stage1 {
        let started = Instant::now();
        let hard_full: Vec<bool> = (0..tp)
            .map(|t| step_costs.values[[t, 1]] < step_costs.values[[t, 0]])
            .collect();
        let (loss, grad) = step_batch_grad(
            model,
            &step_costs,
            &hard_full,
            &accel,
            selector,
            cfg,
            &sample_seeds[seed_cursor..seed_cursor + cfg.batch_size],
        )?;
        seed_cursor += cfg.batch_size;
        guard_finite(loss, "stage-1 step")?;
        opt.step(&mut step_costs.values, &grad);
        log.push(TrainLogRow {
            iteration: iter,
            stage: 1,
            loss,
            budget_units: budget.total_units,
            dp_total_cost: 0.0,
            wall_ms: started.elapsed().as_millis(),
        });
    }

    // warm start: discount full retention at the chosen full steps
    let full_count = (0.15 * tp as f64).ceil() as usize;
    let full_steps = solve_full_steps(&step_costs, full_count)?;
    layer_costs.warm_start(&full_steps, cfg.delta)?;

    Ok(Stage1Output {
        layer_costs,
        step_costs,
        full_steps,
        log,
    })
}

/// Stage 2: unified fine-tune of the layer costs with periodic DP re-solve,
/// starting from the (warm-started) stage-1 tensors.
pub fn train_stage2(
    model: &ToyDiTModel,
    budget: &Budget,
    set: &CandidateSet,
    selector: &SelectorWeights,
    cfg: &TrainConfig,
    stage1: Stage1Output,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let Stage1Output {
        mut layer_costs,
        step_costs,
        full_steps,
        mut log,
    } = stage1;
    layer_costs.temperature = cfg.temperature;

    let sample_seeds = training_seeds(cfg, cfg.iterations_stage2 * cfg.batch_size);
    let mut seed_cursor = 0usize;
    let mut opt = Adam::new(cfg.stage2_lr, layer_costs.values.dim());
    let mut hard = solve(&layer_costs, budget, set)?;

    // early-stopping bookkeeping: hard-execution pool loss per distinct
    // schedule the rounded costs solve to, with the cost snapshot that
    // produced the best one
    let eval_pool = if cfg.sample_pool > 0 {
        draw_seeds(cfg.seed, "train-samples", cfg.sample_pool)
    } else {
        draw_seeds(cfg.seed, "train-samples", cfg.batch_size)
    };
    let mut seen: Vec<(ndarray::Array2<usize>, f64)> = Vec::new();
    let mut best: Option<(f64, CostMatrix)> = None;
    let consider = |costs: &CostMatrix,
                        best: &mut Option<(f64, CostMatrix)>,
                        seen: &mut Vec<(ndarray::Array2<usize>, f64)>|
     -> Result<()> {
        let sched = solve(&costs.rounded_f32(), budget, set)?;
        let loss = match seen.iter().find(|(c, _)| *c == sched.candidates) {
            Some((_, l)) => *l,
            None => {
                let losses =
                    eval_distill_loss(model, &sched, selector, cfg.loss_kind, &eval_pool)?;
                let l = losses.iter().sum::<f64>() / losses.len() as f64;
                seen.push((sched.candidates.clone(), l));
                l
            }
        };
        if best.as_ref().map_or(true, |(bl, _)| loss < *bl) {
            *best = Some((loss, costs.clone()));
        }
        Ok(())
    };

    // early stopping spans the whole run: score the initialization's
    // schedule first so fine-tuning can never end worse than where stage 1
    // started
    let mut explore_rng = SeededRng::for_component(cfg.seed, "stage2-explore");
    if cfg.keep_best {
        let tp = model.config.schedulable_steps();
        let ld = model.config.sub_layer_count();
        let init_sched = SparsitySchedule::uniform_spread(budget, tp, ld, set.clone());
        let init = init_costs(cfg.seed, tp, ld, set.len(), Some(&init_sched));
        consider(&init, &mut best, &mut seen)?;
    }

    for iter in 0..cfg.iterations_stage2 {
        let started = Instant::now();
        if iter % cfg.dp_resolve_period == 0 {
            hard = solve(&layer_costs, budget, set)?;
        }
        if cfg.keep_best {
            consider(&layer_costs, &mut best, &mut seen)?;
            // gradient-guided exploration: also score the schedule solved
            // from a noisy copy of the current costs, alternating a local
            // and a global noise scale relative to the cost spread
            let lo = layer_costs.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = layer_costs.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sigma = (hi - lo).max(1e-3) * if iter % 2 == 0 { 0.25 } else { 4.0 };
            let mut probe = layer_costs.clone();
            probe.values.mapv_inplace(|v| v + sigma * explore_rng.normal());
            consider(&probe, &mut best, &mut seen)?;
        }
        let (loss, grad) = layer_batch_grad(
            model,
            &layer_costs,
            &hard,
            selector,
            cfg,
            &sample_seeds[seed_cursor..seed_cursor + cfg.batch_size],
        )?;
        seed_cursor += cfg.batch_size;
        guard_finite(loss, "stage-2")?;
        opt.step(&mut layer_costs.values, &grad);
        log.push(TrainLogRow {
            iteration: iter,
            stage: 2,
            loss,
            budget_units: hard.total_units(),
            dp_total_cost: hard.achieved_cost,
            wall_ms: started.elapsed().as_millis(),
        });
    }

    // final schedule from the f32-rounded costs: matches what a checkpoint
    // reader will solve
    if cfg.keep_best {
        consider(&layer_costs, &mut best, &mut seen)?;
        if let Some((_, snapshot)) = best {
            layer_costs = snapshot;
        }
    }
    let schedule = solve(&layer_costs.rounded_f32(), budget, set)?;
    Ok(TrainOutput {
        layer_costs,
        step_costs,
        schedule,
        full_steps,
        log,
        evaluated_schedules: seen.len(),
    })
}

fn layer_batch_grad(
    model: &ToyDiTModel,
    costs: &CostMatrix,
    hard: &SparsitySchedule,
    selector: &SelectorWeights,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(costs.values.dim());
    let mut loss_sum = 0.0;
    for &s in seeds {
        let cond = crate::model::make_condition(&model.config, s);
        let noise = crate::model::make_noise(&model.config, s);
        let teacher = model.sample(&cond, &noise)?;
        let mut g = crate::autodiff::Graph::new();
        let leaf = g.leaf(costs.values.clone());
        let out = scheduled_forward_diff(
            &mut g,
            model,
            leaf,
            hard,
            selector,
            &cond,
            &noise,
            GateMode::Hard,
            cfg.temperature,
        )?;
        let l = distill_loss_diff(&mut g, cfg.loss_kind, out, &teacher)?;
        loss_sum += g.value(l)[[0, 0]];
        g.backward(l)?;
        grad += g.grad(leaf).expect("leaf reachable from loss");
    }
    let scale = 1.0 / seeds.len() as f64;
    grad *= scale;
    Ok((loss_sum * scale, grad))
}

#[allow(clippy::too_many_arguments)]
fn step_batch_grad(
    model: &ToyDiTModel,
    step_costs: &StepCostMatrix,
    hard_full: &[bool],
    accel: &SparsitySchedule,
    selector: &SelectorWeights,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(step_costs.values.dim());
    let mut loss_sum = 0.0;
    for &s in seeds {
        let cond = crate::model::make_condition(&model.config, s);
        let noise = crate::model::make_noise(&model.config, s);
        let teacher = model.sample(&cond, &noise)?;
        let mut g = crate::autodiff::Graph::new();
        let leaf = g.leaf(step_costs.values.clone());
        let out = step_mixture_forward_diff(
            &mut g,
            model,
            leaf,
            hard_full,
            accel,
            selector,
            &cond,
            &noise,
            GateMode::Hard,
            cfg.temperature,
        )?;
        let l = distill_loss_diff(&mut g, cfg.loss_kind, out, &teacher)?;
        loss_sum += g.value(l)[[0, 0]];
        g.backward(l)?;
        grad += g.grad(leaf).expect("leaf reachable from loss");
    }
    let scale = 1.0 / seeds.len() as f64;
    grad *= scale;
    Ok((loss_sum * scale, grad))
}

/// Per-sample distill loss of a hard scheduled run against the teacher.
pub fn eval_distill_loss(
    model: &ToyDiTModel,
    schedule: &SparsitySchedule,
    selector: &SelectorWeights,
    kind: LossKind,
    sample_seeds: &[u64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sample_seeds.len());
    for &s in sample_seeds {
        let cond = crate::model::make_condition(&model.config, s);
        let noise = crate::model::make_noise(&model.config, s);
        let teacher = model.sample(&cond, &noise)?;
        let mut exec = CacheExecutor::new(model, schedule.clone(), *selector)?;
        let student = exec.run_scheduled_sample(model, &cond, &noise)?;
        out.push(distill_loss(kind, &student, &teacher)?);
    }
    Ok(out)
}

/// Per-sample SSIM of a hard scheduled run against the teacher (unit range).
pub fn eval_ssim(
    model: &ToyDiTModel,
    schedule: &SparsitySchedule,
    selector: &SelectorWeights,
    sample_seeds: &[u64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sample_seeds.len());
    for &s in sample_seeds {
        let cond = crate::model::make_condition(&model.config, s);
        let noise = crate::model::make_noise(&model.config, s);
        let teacher = model.sample(&cond, &noise)?;
        let mut exec = CacheExecutor::new(model, schedule.clone(), *selector)?;
        let student = exec.run_scheduled_sample(model, &cond, &noise)?;
        let max = teacher.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = teacher.iter().cloned().fold(f64::INFINITY, f64::min);
        let range = if max > min { max - min } else { 1.0 };
        out.push(ssim_mean(&teacher, &student, range));
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// search baselines

#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// schedules evaluated (random) or generations (GA)
    pub iterations: usize,
    pub population: usize,
    pub mutation_rate: f64,
    pub seed: u64,
    pub eval_seeds: Vec<u64>,
    pub loss_kind: LossKind,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 20,
            population: 50,
            mutation_rate: 0.01,
            seed: 0,
            eval_seeds: vec![1],
            loss_kind: LossKind::FeatureProxy,
        }
    }
}

/// Random budget-exact genome: uniform per-slot candidates followed by
/// budget repair at random slots.
fn random_genome(rng: &mut SeededRng, slots: usize, u: usize, b: usize) -> Vec<usize> {
    let mut genome: Vec<usize> = (0..slots).map(|_| rng.below(u + 1)).collect();
    repair(rng, &mut genome, u, b);
    genome
}

/// In-place budget repair: move single units at random slots until the
/// genome spends exactly `b`.
fn repair(rng: &mut SeededRng, genome: &mut [usize], u: usize, b: usize) {
    let mut total: usize = genome.iter().sum();
    while total > b {
        let i = rng.below(genome.len());
        if genome[i] > 0 {
            genome[i] -= 1;
            total -= 1;
        }
    }
    while total < b {
        let i = rng.below(genome.len());
        if genome[i] < u {
            genome[i] += 1;
            total += 1;
        }
    }
}

fn genome_to_schedule(genome: &[usize], tp: usize, ld: usize, set: &CandidateSet) -> SparsitySchedule {
    let candidates = Array2::from_shape_fn((tp, ld), |(t, l)| genome[t * ld + l]);
    SparsitySchedule::new(candidates, set.clone())
}

fn fitness(
    model: &ToyDiTModel,
    schedule: &SparsitySchedule,
    selector: &SelectorWeights,
    sc: &SearchConfig,
) -> Result<f64> {
    let losses = eval_distill_loss(model, schedule, selector, sc.loss_kind, &sc.eval_seeds)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Random search: best of `iterations` uniformly drawn budget-exact
/// schedules by mean distill loss.
pub fn random_search(
    model: &ToyDiTModel,
    budget: &Budget,
    set: &CandidateSet,
    selector: &SelectorWeights,
    sc: &SearchConfig,
) -> Result<(SparsitySchedule, f64)> {
    let tp = model.config.schedulable_steps();
    let ld = model.config.sub_layer_count();
    let u = set.units_per_slot();
    let mut rng = SeededRng::for_component(sc.seed, "random-search");
    let mut best: Option<(SparsitySchedule, f64)> = None;
    for _ in 0..sc.iterations {
        let genome = random_genome(&mut rng, tp * ld, u, budget.total_units);
        let sched = genome_to_schedule(&genome, tp, ld, set);
        let f = fitness(model, &sched, selector, sc)?;
        if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best = Some((sched, f));
        }
    }
    Ok(best.expect("at least one iteration"))
}

/// Elitist GA: tournament selection, single-point crossover with budget
/// repair, per-slot mutation with repair.
pub fn ga_search(
    model: &ToyDiTModel,
    budget: &Budget,
    set: &CandidateSet,
    selector: &SelectorWeights,
    sc: &SearchConfig,
) -> Result<(SparsitySchedule, f64)> {
    let tp = model.config.schedulable_steps();
    let ld = model.config.sub_layer_count();
    let slots = tp * ld;
    let u = set.units_per_slot();
    let b = budget.total_units;
    let mut rng = SeededRng::for_component(sc.seed, "ga-search");

    let mut pop: Vec<Vec<usize>> = (0..sc.population)
        .map(|_| random_genome(&mut rng, slots, u, b))
        .collect();
    let mut scores: Vec<f64> = Vec::with_capacity(pop.len());
    for genome in &pop {
        let sched = genome_to_schedule(genome, tp, ld, set);
        scores.push(fitness(model, &sched, selector, sc)?);
    }

    for _ in 0..sc.iterations {
        let best_idx = (0..pop.len())
            .min_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
            .unwrap();
        let mut next = vec![pop[best_idx].clone()]; // elitism
        while next.len() < sc.population {
            let pa = tournament(&mut rng, &scores);
            let pb = tournament(&mut rng, &scores);
            let cut = 1 + rng.below(slots - 1);
            let mut child: Vec<usize> = pop[pa][..cut]
                .iter()
                .chain(&pop[pb][cut..])
                .cloned()
                .collect();
            for slot in child.iter_mut() {
                if rng.uniform() < sc.mutation_rate {
                    *slot = rng.below(u + 1);
                }
            }
            repair(&mut rng, &mut child, u, b);
            next.push(child);
        }
        pop = next;
        scores.clear();
        for genome in &pop {
            let sched = genome_to_schedule(genome, tp, ld, set);
            scores.push(fitness(model, &sched, selector, sc)?);
        }
    }
    let best_idx = (0..pop.len())
        .min_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
        .unwrap();
    Ok((
        genome_to_schedule(&pop[best_idx], tp, ld, set),
        scores[best_idx],
    ))
}

fn tournament(rng: &mut SeededRng, scores: &[f64]) -> usize {
    let a = rng.below(scores.len());
    let b = rng.below(scores.len());
    if scores[a] <= scores[b] {
        a
    } else {
        b
    }
}
