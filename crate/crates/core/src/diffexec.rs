//! Differentiable cached sampling.
//!
//! Rebuilds the scheduled sampler on the autodiff tape so gradients reach the
//! cost tensors. Each schedulable slot forms softmax gates over its cost row
//! and emits a gate-weighted mixture over all candidate merges of one dense
//! fresh compute with the running cache node; the cache update is that same
//! mixture node, so gradients flow across steps. Discrete bookkeeping (token
//! selection, reuse counters, stored attention) follows the hard schedule and
//! is detached.

use crate::autodiff::{Graph, NodeId};
use crate::cache::{retained_tokens, select_tokens};
use crate::dp::SparsitySchedule;
use crate::error::Result;
use crate::model::{SubLayerKind, ToyDiTModel};
use crate::selector::SelectorWeights;
use ndarray::{Array1, Array2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Straight-through: hard one-hot forward, relaxed backward.
    Hard,
    /// Fully relaxed mixture, forward and backward.
    Relaxed,
}

struct BlockConsts {
    ln_sa_g: Array2<f64>,
    ln_sa_b: Array2<f64>,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln_ca_g: Option<Array2<f64>>,
    ln_ca_b: Option<Array2<f64>>,
    cq: Option<NodeId>,
    co: Option<NodeId>,
    ctx_k: Option<NodeId>,
    ctx_v: Option<NodeId>,
    ln_mlp_g: Array2<f64>,
    ln_mlp_b: Array2<f64>,
    w1: NodeId,
    w2: NodeId,
}

struct ModelConsts {
    w_in: NodeId,
    /// per execution step: pos_embed + broadcast time embedding, N x D
    embed_bias: Vec<NodeId>,
    blocks: Vec<BlockConsts>,
    ln_f_g: Array2<f64>,
    ln_f_b: Array2<f64>,
    w_out: NodeId,
}

fn row_matrix(a: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((1, a.len()), |(_, j)| a[j])
}

fn load_consts(g: &mut Graph, model: &ToyDiTModel, condition: &Array2<f64>) -> ModelConsts {
    let cfg = &model.config;
    let w_in = g.constant(model.w_in.clone());
    let embed_bias = (0..cfg.num_steps)
        .map(|step| {
            let t = model.time_of_step(step);
            let mut b = model.pos_embed.clone();
            let te = model.time_embed.row(t);
            for mut row in b.rows_mut() {
                row += &te;
            }
            g.constant(b)
        })
        .collect();
    let blocks = model
        .blocks
        .iter()
        .map(|b| {
            let (cq, co, ctx_k, ctx_v) = if cfg.has_cross_attn() {
                (
                    Some(g.constant(b.cq.clone().unwrap())),
                    Some(g.constant(b.co.clone().unwrap())),
                    Some(g.constant(condition.dot(b.ck.as_ref().unwrap()))),
                    Some(g.constant(condition.dot(b.cv.as_ref().unwrap()))),
                )
            } else {
                (None, None, None, None)
            };
            BlockConsts {
                ln_sa_g: row_matrix(&b.ln_sa_g),
                ln_sa_b: row_matrix(&b.ln_sa_b),
                wq: g.constant(b.wq.clone()),
                wk: g.constant(b.wk.clone()),
                wv: g.constant(b.wv.clone()),
                wo: g.constant(b.wo.clone()),
                ln_ca_g: b.ln_ca_g.as_ref().map(row_matrix),
                ln_ca_b: b.ln_ca_b.as_ref().map(row_matrix),
                cq,
                co,
                ctx_k,
                ctx_v,
                ln_mlp_g: row_matrix(&b.ln_mlp_g),
                ln_mlp_b: row_matrix(&b.ln_mlp_b),
                w1: g.constant(b.w1.clone()),
                w2: g.constant(b.w2.clone()),
            }
        })
        .collect();
    ModelConsts {
        w_in,
        embed_bias,
        blocks,
        ln_f_g: row_matrix(&model.ln_f_g),
        ln_f_b: row_matrix(&model.ln_f_b),
        w_out: g.constant(model.w_out.clone()),
    }
}

/// Dense (all tokens fresh) sub-layer evaluation on the tape. Also returns
/// the head-averaged attention map values for the detached selector state.
fn sublayer_diff(
    g: &mut Graph,
    model: &ToyDiTModel,
    consts: &ModelConsts,
    block: usize,
    kind: SubLayerKind,
    stream: NodeId,
) -> (NodeId, Option<Array2<f64>>) {
    let cfg = &model.config;
    let heads = cfg.num_heads;
    let dh = cfg.model_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let bc = &consts.blocks[block];
    match kind {
        SubLayerKind::SelfAttn => {
            let ln = g.layer_norm(stream, &bc.ln_sa_g, &bc.ln_sa_b);
            let q = g.matmul(ln, bc.wq);
            let k = g.matmul(ln, bc.wk);
            let v = g.matmul(ln, bc.wv);
            let mut parts = Vec::with_capacity(heads);
            let mut attn: Option<Array2<f64>> = None;
            for h in 0..heads {
                let cs = h * dh;
                let qh = g.slice_cols(q, cs, dh);
                let kh = g.slice_cols(k, cs, dh);
                let vh = g.slice_cols(v, cs, dh);
                let scores = g.matmul_nt(qh, kh);
                let scaled = g.scale(scores, scale);
                let sm = g.softmax_rows(scaled);
                match &mut attn {
                    Some(a) => *a += g.value(sm),
                    slot @ None => *slot = Some(g.value(sm).clone()),
                }
                parts.push(g.matmul(sm, vh));
            }
            let ctx = g.concat_cols(&parts);
            let out = g.matmul(ctx, bc.wo);
            (out, attn.map(|a| a / heads as f64))
        }
        SubLayerKind::CrossAttn => {
            let ln = g.layer_norm(stream, bc.ln_ca_g.as_ref().unwrap(), bc.ln_ca_b.as_ref().unwrap());
            let q = g.matmul(ln, bc.cq.unwrap());
            let key = bc.ctx_k.unwrap();
            let val = bc.ctx_v.unwrap();
            let mut parts = Vec::with_capacity(heads);
            let mut attn: Option<Array2<f64>> = None;
            for h in 0..heads {
                let cs = h * dh;
                let qh = g.slice_cols(q, cs, dh);
                let kh = g.slice_cols(key, cs, dh);
                let vh = g.slice_cols(val, cs, dh);
                let scores = g.matmul_nt(qh, kh);
                let scaled = g.scale(scores, scale);
                let sm = g.softmax_rows(scaled);
                match &mut attn {
                    Some(a) => *a += g.value(sm),
                    slot @ None => *slot = Some(g.value(sm).clone()),
                }
                parts.push(g.matmul(sm, vh));
            }
            let ctx = g.concat_cols(&parts);
            let out = g.matmul(ctx, bc.co.unwrap());
            (out, attn.map(|a| a / heads as f64))
        }
        SubLayerKind::Mlp => {
            let ln = g.layer_norm(stream, &bc.ln_mlp_g, &bc.ln_mlp_b);
            let hidden = g.matmul(ln, bc.w1);
            let act = g.silu(hidden);
            (g.matmul(act, bc.w2), None)
        }
    }
}

fn head_diff(g: &mut Graph, consts: &ModelConsts, h: NodeId) -> NodeId {
    let ln = g.layer_norm(h, &consts.ln_f_g, &consts.ln_f_b);
    g.matmul(ln, consts.w_out)
}

fn ddim_diff(g: &mut Graph, x: NodeId, eps: NodeId, alpha_bar: f64, alpha_bar_prev: f64) -> NodeId {
    let noise_in = g.scale(eps, (1.0 - alpha_bar).sqrt());
    let num = g.sub(x, noise_in);
    let x0 = g.scale(num, 1.0 / alpha_bar.sqrt());
    let carried = g.scale(x0, alpha_bar_prev.sqrt());
    let noise_out = g.scale(eps, (1.0 - alpha_bar_prev).sqrt());
    g.add(carried, noise_out)
}

/// Detached selector state, mirrored from the hard execution path.
struct AuxLayer {
    last_attention: Option<Array2<f64>>,
    reuse: Vec<u32>,
}

fn store_attention_rows(aux: &mut AuxLayer, attn: &Array2<f64>, selected: &[usize], n: usize) {
    match &mut aux.last_attention {
        Some(stored) if stored.ncols() == attn.ncols() => {
            for &i in selected {
                stored.row_mut(i).assign(&attn.row(i));
            }
        }
        _ => {
            let mut full = Array2::zeros((n, attn.ncols()));
            for &i in selected {
                full.row_mut(i).assign(&attn.row(i));
            }
            aux.last_attention = Some(full);
        }
    }
}

/// Differentiable scheduled sampler. `cost_leaf` is the (T' * L_d) x |S|
/// layer-cost leaf; `hard` supplies the committed candidate per slot. Returns
/// the final latent node.
#[allow(clippy::too_many_arguments)]
pub fn scheduled_forward_diff(
    g: &mut Graph,
    model: &ToyDiTModel,
    cost_leaf: NodeId,
    hard: &SparsitySchedule,
    selector: &SelectorWeights,
    condition: &Array2<f64>,
    noise: &Array2<f64>,
    mode: GateMode,
    temperature: f64,
) -> Result<NodeId> {
    let cfg = &model.config;
    let n = cfg.token_count;
    let ld = cfg.sub_layer_count();
    let grid = cfg.grid_shape();
    let consts = load_consts(g, model, condition);
    let fractions = &hard.candidate_set.fractions;

    let mut cache: Vec<Option<NodeId>> = vec![None; ld];
    let mut aux: Vec<AuxLayer> = (0..ld)
        .map(|_| AuxLayer {
            last_attention: None,
            reuse: vec![0; n],
        })
        .collect();

    let mut x = g.constant(noise.clone());
    for step in 0..cfg.num_steps {
        let xin = g.matmul(x, consts.w_in);
        let mut h = g.add(xin, consts.embed_bias[step]);
        for flat in 0..ld {
            let (block, kind) = cfg.kind_of_flat(flat);
            let (fresh, attn) = sublayer_diff(g, model, &consts, block, kind, h);
            let slot_out = if step == 0 {
                cache[flat] = Some(fresh);
                aux[flat].reuse.iter_mut().for_each(|c| *c = 0);
                if let Some(a) = &attn {
                    let all: Vec<usize> = (0..n).collect();
                    store_attention_rows(&mut aux[flat], a, &all, n);
                }
                fresh
            } else {
                let t = step - 1;
                let slot = t * ld + flat;
                let s_hard = hard.candidate(t, flat);
                let row = g.gather_rows(cost_leaf, &[slot]);
                let neg = g.scale(row, -1.0 / temperature);
                let gates = g.softmax_rows(neg);
                let gate_node = match mode {
                    GateMode::Hard => g.ste_onehot(gates, s_hard),
                    GateMode::Relaxed => gates,
                };
                let cache_node = cache[flat].expect("step 0 filled every cache slot");
                let stream_vals = g.value(h).clone();
                let cache_vals = g.value(cache_node).clone();
                let mut out: Option<NodeId> = None;
                let mut hard_selected: Vec<usize> = Vec::new();
                for (s, &rho) in fractions.iter().enumerate() {
                    let k = retained_tokens(rho, n);
                    let m_s = if k == n {
                        if s == s_hard {
                            hard_selected = (0..n).collect();
                        }
                        fresh
                    } else if k == 0 {
                        cache_node
                    } else {
                        let mask = select_tokens(
                            selector,
                            kind,
                            aux[flat].last_attention.as_ref(),
                            &aux[flat].reuse,
                            &stream_vals,
                            &cache_vals,
                            grid,
                            k,
                        )?;
                        let idx: Vec<usize> = mask
                            .iter()
                            .enumerate()
                            .filter_map(|(i, &m)| m.then_some(i))
                            .collect();
                        if s == s_hard {
                            hard_selected = idx.clone();
                        }
                        let picked = g.gather_rows(fresh, &idx);
                        g.scatter_rows(cache_node, picked, &idx)
                    };
                    let gs = g.slice_cols(gate_node, s, 1);
                    let term = g.scale_by(m_s, gs);
                    out = Some(match out {
                        Some(acc) => g.add(acc, term),
                        None => term,
                    });
                }
                let mixed = out.expect("candidate set is non-empty");
                cache[flat] = Some(mixed);
                // detached bookkeeping follows the hard candidate
                let selected_set: Vec<bool> = {
                    let mut m = vec![false; n];
                    for &i in &hard_selected {
                        m[i] = true;
                    }
                    m
                };
                for (i, &sel) in selected_set.iter().enumerate() {
                    if sel {
                        aux[flat].reuse[i] = 0;
                    } else {
                        aux[flat].reuse[i] += 1;
                    }
                }
                if !hard_selected.is_empty() {
                    if let Some(a) = &attn {
                        store_attention_rows(&mut aux[flat], a, &hard_selected, n);
                    }
                }
                mixed
            };
            h = g.add(h, slot_out);
        }
        let eps = head_diff(g, &consts, h);
        let t = model.time_of_step(step);
        x = ddim_diff(
            g,
            x,
            eps,
            model.schedule.alpha_bars[t],
            model.schedule.alpha_bar_prev(t),
        );
    }
    Ok(x)
}

/// Differentiable two-way step mixture for step-cost training: at every
/// schedulable step the latent advances as a gate-weighted blend of an
/// accelerated (cached, `accel` schedule) step and a full-compute step.
/// Column 0 of `step_cost_leaf` scores the accelerated variant, column 1 the
/// full one; the cache follows whichever variant `hard_full` commits to.
#[allow(clippy::too_many_arguments)]
pub fn step_mixture_forward_diff(
    g: &mut Graph,
    model: &ToyDiTModel,
    step_cost_leaf: NodeId,
    hard_full: &[bool],
    accel: &SparsitySchedule,
    selector: &SelectorWeights,
    condition: &Array2<f64>,
    noise: &Array2<f64>,
    mode: GateMode,
    temperature: f64,
) -> Result<NodeId> {
    let cfg = &model.config;
    let n = cfg.token_count;
    let ld = cfg.sub_layer_count();
    let grid = cfg.grid_shape();
    if hard_full.len() != cfg.schedulable_steps() {
        return Err(crate::error::Error::Contract(format!(
            "hard_full has {} entries, expected {}",
            hard_full.len(),
            cfg.schedulable_steps()
        )));
    }
    let consts = load_consts(g, model, condition);
    let fractions = &accel.candidate_set.fractions;

    let mut cache: Vec<Option<NodeId>> = vec![None; ld];
    let mut aux: Vec<AuxLayer> = (0..ld)
        .map(|_| AuxLayer {
            last_attention: None,
            reuse: vec![0; n],
        })
        .collect();

    let mut x = g.constant(noise.clone());
    for step in 0..cfg.num_steps {
        let t = model.time_of_step(step);
        let (ab, abp) = (
            model.schedule.alpha_bars[t],
            model.schedule.alpha_bar_prev(t),
        );
        if step == 0 {
            let xin = g.matmul(x, consts.w_in);
            let mut h = g.add(xin, consts.embed_bias[step]);
            for flat in 0..ld {
                let (block, kind) = cfg.kind_of_flat(flat);
                let (fresh, attn) = sublayer_diff(g, model, &consts, block, kind, h);
                cache[flat] = Some(fresh);
                if let Some(a) = &attn {
                    let all: Vec<usize> = (0..n).collect();
                    store_attention_rows(&mut aux[flat], a, &all, n);
                }
                h = g.add(h, fresh);
            }
            let eps = head_diff(g, &consts, h);
            x = ddim_diff(g, x, eps, ab, abp);
            continue;
        }

        let tprime = step - 1;
        let is_full = hard_full[tprime];

        // accelerated branch: cached execution under the accel schedule
        let xin = g.matmul(x, consts.w_in);
        let mut h_acc = g.add(xin, consts.embed_bias[step]);
        let mut acc_updates: Vec<(NodeId, Vec<usize>, Option<Array2<f64>>)> =
            Vec::with_capacity(ld);
        for flat in 0..ld {
            let (block, kind) = cfg.kind_of_flat(flat);
            let rho = fractions[accel.candidate(tprime, flat)];
            let k = retained_tokens(rho, n);
            let cache_node = cache[flat].expect("step 0 filled every cache slot");
            let (merged, selected, attn) = if k == 0 {
                (cache_node, Vec::new(), None)
            } else {
                let (fresh, attn) = sublayer_diff(g, model, &consts, block, kind, h_acc);
                if k == n {
                    (fresh, (0..n).collect(), attn)
                } else {
                    let stream_vals = g.value(h_acc).clone();
                    let cache_vals = g.value(cache_node).clone();
                    let mask = select_tokens(
                        selector,
                        kind,
                        aux[flat].last_attention.as_ref(),
                        &aux[flat].reuse,
                        &stream_vals,
                        &cache_vals,
                        grid,
                        k,
                    )?;
                    let idx: Vec<usize> = mask
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &m)| m.then_some(i))
                        .collect();
                    let picked = g.gather_rows(fresh, &idx);
                    (g.scatter_rows(cache_node, picked, &idx), idx, attn)
                }
            };
            acc_updates.push((merged, selected, attn));
            h_acc = g.add(h_acc, merged);
        }
        let eps_acc = head_diff(g, &consts, h_acc);
        let x_acc = ddim_diff(g, x, eps_acc, ab, abp);

        // full branch: dense step from the same entry latent
        let xin = g.matmul(x, consts.w_in);
        let mut h_full = g.add(xin, consts.embed_bias[step]);
        let mut full_updates: Vec<(NodeId, Option<Array2<f64>>)> = Vec::with_capacity(ld);
        for flat in 0..ld {
            let (block, kind) = cfg.kind_of_flat(flat);
            let (fresh, attn) = sublayer_diff(g, model, &consts, block, kind, h_full);
            full_updates.push((fresh, attn));
            h_full = g.add(h_full, fresh);
        }
        let eps_full = head_diff(g, &consts, h_full);
        let x_full = ddim_diff(g, x, eps_full, ab, abp);

        let row = g.gather_rows(step_cost_leaf, &[tprime]);
        let neg = g.scale(row, -1.0 / temperature);
        let gates = g.softmax_rows(neg);
        let gate_node = match mode {
            GateMode::Hard => g.ste_onehot(gates, usize::from(is_full)),
            GateMode::Relaxed => gates,
        };
        let g_acc = g.slice_cols(gate_node, 0, 1);
        let g_full = g.slice_cols(gate_node, 1, 1);
        let term_acc = g.scale_by(x_acc, g_acc);
        let term_full = g.scale_by(x_full, g_full);
        x = g.add(term_acc, term_full);

        // cache and counters follow the committed variant
        if is_full {
            for (flat, (fresh, attn)) in full_updates.into_iter().enumerate() {
                cache[flat] = Some(fresh);
                aux[flat].reuse.iter_mut().for_each(|c| *c = 0);
                if let Some(a) = &attn {
                    let all: Vec<usize> = (0..n).collect();
                    store_attention_rows(&mut aux[flat], a, &all, n);
                }
            }
        } else {
            for (flat, (merged, selected, attn)) in acc_updates.into_iter().enumerate() {
                cache[flat] = Some(merged);
                let mut sel = vec![false; n];
                for &i in &selected {
                    sel[i] = true;
                }
                for (i, &m) in sel.iter().enumerate() {
                    if m {
                        aux[flat].reuse[i] = 0;
                    } else {
                        aux[flat].reuse[i] += 1;
                    }
                }
                if !selected.is_empty() {
                    if let Some(a) = &attn {
                        store_attention_rows(&mut aux[flat], a, &selected, n);
                    }
                }
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheExecutor;
    use crate::cost::{init_costs, CandidateSet, CostMatrix, StepCostMatrix};
    use crate::model::{init_model, make_condition, make_noise, ToyDiTConfig};
    use crate::rng::SeededRng;

    fn tiny_config() -> ToyDiTConfig {
        ToyDiTConfig {
            num_blocks: 1,
            token_count: 16,
            model_dim: 8,
            mlp_hidden: 16,
            context_tokens: 2,
            num_heads: 2,
            num_steps: 3,
            seed: 13,
        }
    }

    fn mixed_schedule(cfg: &ToyDiTConfig) -> SparsitySchedule {
        let set = CandidateSet::new(0.25).unwrap();
        let mut sched =
            SparsitySchedule::uniform(cfg.schedulable_steps(), cfg.sub_layer_count(), set, 2);
        sched.candidates[[0, 0]] = 0;
        sched.candidates[[0, 2]] = 4;
        sched.candidates[[1, 1]] = 1;
        sched
    }

    #[test]
    fn hard_mode_matches_sampler_executor() {
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let sched = mixed_schedule(&cfg);
        let selector = SelectorWeights::pixart_preset();

        let mut exec = CacheExecutor::new(&model, sched.clone(), selector).unwrap();
        let reference = exec.run_scheduled_sample(&model, &cond, &noise).unwrap();

        let costs = init_costs(5, cfg.schedulable_steps(), cfg.sub_layer_count(), 5, None);
        let mut g = Graph::new();
        let leaf = g.leaf(costs.values.clone());
        let out = scheduled_forward_diff(
            &mut g, &model, leaf, &sched, &selector, &cond, &noise, GateMode::Hard, 1.0,
        )
        .unwrap();
        let got = g.value(out);
        for (a, b) in got.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn relaxed_gradient_matches_finite_difference() {
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let target = model.sample(&cond, &noise).unwrap();
        let sched = mixed_schedule(&cfg);
        let selector = SelectorWeights::pixart_preset();
        let costs = init_costs(5, cfg.schedulable_steps(), cfg.sub_layer_count(), 5, None);

        let loss_of = |values: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let leaf = g.leaf(values.clone());
            let out = scheduled_forward_diff(
                &mut g, &model, leaf, &sched, &selector, &cond, &noise, GateMode::Relaxed, 1.0,
            )
            .unwrap();
            let tgt = g.constant(target.clone());
            let diff = g.sub(out, tgt);
            let sq = g.mul(diff, diff);
            let l = g.mean_all(sq);
            g.value(l)[[0, 0]]
        };

        let mut g = Graph::new();
        let leaf = g.leaf(costs.values.clone());
        let out = scheduled_forward_diff(
            &mut g, &model, leaf, &sched, &selector, &cond, &noise, GateMode::Relaxed, 1.0,
        )
        .unwrap();
        let tgt = g.constant(target.clone());
        let diff = g.sub(out, tgt);
        let sq = g.mul(diff, diff);
        let l = g.mean_all(sq);
        g.backward(l).unwrap();
        let analytic = g.grad(leaf).unwrap().clone();

        let eps = 1e-5;
        let mut rng = SeededRng::new(77);
        let mut checked = 0;
        for _ in 0..8 {
            let r = rng.below(costs.values.nrows());
            let c = rng.below(costs.values.ncols());
            let mut vp = costs.values.clone();
            vp[[r, c]] += eps;
            let mut vm = costs.values.clone();
            vm[[r, c]] -= eps;
            let fd = (loss_of(&vp) - loss_of(&vm)) / (2.0 * eps);
            let an = analytic[[r, c]];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom < 1e-3,
                "entry ({r}, {c}): analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn hard_backward_approaches_relaxed_for_peaked_costs() {
        // with near-deterministic gates the STE surrogate and the relaxed
        // forward coincide up to O(off-gate mass)
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let target = model.sample(&cond, &noise).unwrap();
        let sched = mixed_schedule(&cfg);
        let selector = SelectorWeights::pixart_preset();

        // peak each row at the hard candidate: gap ~ 9 in cost units
        let mut costs = CostMatrix::zeros(cfg.schedulable_steps(), cfg.sub_layer_count(), 5);
        costs.values.fill(4.5);
        for t in 0..cfg.schedulable_steps() {
            for l in 0..cfg.sub_layer_count() {
                let slot = costs.slot(t, l);
                costs.values[[slot, sched.candidate(t, l)]] = -4.5;
            }
        }

        let grad_of = |mode: GateMode| {
            let mut g = Graph::new();
            let leaf = g.leaf(costs.values.clone());
            let out = scheduled_forward_diff(
                &mut g, &model, leaf, &sched, &selector, &cond, &noise, mode, 1.0,
            )
            .unwrap();
            let tgt = g.constant(target.clone());
            let diff = g.sub(out, tgt);
            let sq = g.mul(diff, diff);
            let l = g.mean_all(sq);
            g.backward(l).unwrap();
            g.grad(leaf).unwrap().clone()
        };
        let hard = grad_of(GateMode::Hard);
        let relaxed = grad_of(GateMode::Relaxed);
        let scale = relaxed.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(scale > 0.0);
        for (a, b) in hard.iter().zip(relaxed.iter()) {
            assert!(
                (a - b).abs() <= 1e-3 * scale + 1e-12,
                "hard {a} vs relaxed {b} (scale {scale})"
            );
        }
    }

    #[test]
    fn step_mixture_all_full_matches_teacher() {
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let teacher = model.sample(&cond, &noise).unwrap();
        let set = CandidateSet::new(0.25).unwrap();
        let accel =
            SparsitySchedule::uniform(cfg.schedulable_steps(), cfg.sub_layer_count(), set, 2);
        let sc = StepCostMatrix::init(3, cfg.schedulable_steps());
        let mut g = Graph::new();
        let leaf = g.leaf(sc.values.clone());
        let out = step_mixture_forward_diff(
            &mut g,
            &model,
            leaf,
            &vec![true; cfg.schedulable_steps()],
            &accel,
            &SelectorWeights::pixart_preset(),
            &cond,
            &noise,
            GateMode::Hard,
            1.0,
        )
        .unwrap();
        for (a, b) in g.value(out).iter().zip(teacher.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn step_mixture_relaxed_gradient_matches_fd() {
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let target = model.sample(&cond, &noise).unwrap();
        let set = CandidateSet::new(0.25).unwrap();
        let accel =
            SparsitySchedule::uniform(cfg.schedulable_steps(), cfg.sub_layer_count(), set, 2);
        let selector = SelectorWeights::pixart_preset();
        let hard_full = vec![false, true];
        let sc = StepCostMatrix::init(3, cfg.schedulable_steps());

        let loss_of = |values: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let leaf = g.leaf(values.clone());
            let out = step_mixture_forward_diff(
                &mut g, &model, leaf, &hard_full, &accel, &selector, &cond, &noise,
                GateMode::Relaxed, 1.0,
            )
            .unwrap();
            let tgt = g.constant(target.clone());
            let diff = g.sub(out, tgt);
            let sq = g.mul(diff, diff);
            let l = g.mean_all(sq);
            g.value(l)[[0, 0]]
        };

        let mut g = Graph::new();
        let leaf = g.leaf(sc.values.clone());
        let out = step_mixture_forward_diff(
            &mut g, &model, leaf, &hard_full, &accel, &selector, &cond, &noise,
            GateMode::Relaxed, 1.0,
        )
        .unwrap();
        let tgt = g.constant(target.clone());
        let diff = g.sub(out, tgt);
        let sq = g.mul(diff, diff);
        let l = g.mean_all(sq);
        g.backward(l).unwrap();
        let analytic = g.grad(leaf).unwrap().clone();

        let eps = 1e-5;
        for r in 0..sc.values.nrows() {
            for c in 0..2 {
                let mut vp = sc.values.clone();
                vp[[r, c]] += eps;
                let mut vm = sc.values.clone();
                vm[[r, c]] -= eps;
                let fd = (loss_of(&vp) - loss_of(&vm)) / (2.0 * eps);
                let an = analytic[[r, c]];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (an - fd).abs() / denom < 1e-3,
                    "({r}, {c}): analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
