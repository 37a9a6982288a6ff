//! Minimal diffusion transformer testbed.
//!
//! Token embedding, stacked blocks of self-attention / optional
//! cross-attention / MLP with pre-layernorm residuals, timestep conditioning,
//! and a deterministic DDIM sampler (eta = 0, linear beta schedule). Every
//! sub-layer accepts an external compute mask so that token caching can be
//! injected from the outside.

use crate::error::{Error, Result};
use crate::checkpoint::NamedArrays;
use crate::rng::SeededRng;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubLayerKind {
    SelfAttn,
    CrossAttn,
    Mlp,
}

impl SubLayerKind {
    pub fn name(self) -> &'static str {
        match self {
            SubLayerKind::SelfAttn => "self_attn",
            SubLayerKind::CrossAttn => "cross_attn",
            SubLayerKind::Mlp => "mlp",
        }
    }
}

/// Identifies one sub-layer instance at one sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubLayerId {
    pub step: usize,
    pub block: usize,
    pub kind: SubLayerKind,
    pub flat_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDiTConfig {
    pub num_blocks: usize,
    pub token_count: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub context_tokens: usize,
    pub num_heads: usize,
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        ToyDiTConfig {
            num_blocks: 4,
            token_count: 64,
            model_dim: 64,
            mlp_hidden: 256,
            context_tokens: 16,
            num_heads: 4,
            num_steps: 8,
            seed: 0,
        }
    }
}

impl ToyDiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0
            || self.token_count == 0
            || self.model_dim == 0
            || self.mlp_hidden == 0
            || self.num_heads == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_steps < 2 {
            return Err(Error::Config("num_steps must be at least 2".into()));
        }
        Ok(())
    }

    pub fn has_cross_attn(&self) -> bool {
        self.context_tokens > 0
    }

    pub fn kinds_per_block(&self) -> usize {
        if self.has_cross_attn() {
            3
        } else {
            2
        }
    }

    /// Number of sub-layers per step, L_d.
    pub fn sub_layer_count(&self) -> usize {
        self.num_blocks * self.kinds_per_block()
    }

    /// Schedulable steps T' (step 0 is always fully computed).
    pub fn schedulable_steps(&self) -> usize {
        self.num_steps - 1
    }

    /// Token grid shape used by the spatial selector bonus: the most square
    /// (rows, cols) factorization of the token count.
    pub fn grid_shape(&self) -> (usize, usize) {
        let n = self.token_count;
        let mut r = (n as f64).sqrt() as usize;
        while r > 1 && n % r != 0 {
            r -= 1;
        }
        (r, n / r)
    }

    pub fn kind_rank(&self, kind: SubLayerKind) -> usize {
        match kind {
            SubLayerKind::SelfAttn => 0,
            SubLayerKind::CrossAttn => 1,
            SubLayerKind::Mlp => self.kinds_per_block() - 1,
        }
    }

    pub fn kind_of_flat(&self, flat_index: usize) -> (usize, SubLayerKind) {
        let kpb = self.kinds_per_block();
        let block = flat_index / kpb;
        let kind = match flat_index % kpb {
            0 => SubLayerKind::SelfAttn,
            1 if self.has_cross_attn() => SubLayerKind::CrossAttn,
            _ => SubLayerKind::Mlp,
        };
        (block, kind)
    }

    pub fn sub_layer_id(&self, step: usize, flat_index: usize) -> SubLayerId {
        let (block, kind) = self.kind_of_flat(flat_index);
        SubLayerId {
            step,
            block,
            kind,
            flat_index,
        }
    }

    /// Names of all sub-layers in flat-index order.
    pub fn sub_layer_names(&self) -> Vec<String> {
        (0..self.sub_layer_count())
            .map(|f| {
                let (block, kind) = self.kind_of_flat(f);
                format!("block{}.{}", block, kind.name())
            })
            .collect()
    }
}

/// Linear beta schedule and its cumulative alpha products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_steps: usize) -> Self {
        let (b0, b1) = (0.05, 0.45);
        let mut betas = Vec::with_capacity(num_steps);
        let mut alpha_bars = Vec::with_capacity(num_steps);
        let mut prod = 1.0;
        for t in 0..num_steps {
            let frac = if num_steps > 1 {
                t as f64 / (num_steps - 1) as f64
            } else {
                0.0
            };
            let beta = b0 + (b1 - b0) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        NoiseSchedule { betas, alpha_bars }
    }

    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// One DDIM update (eta = 0): predict x0 from (x_t, eps) and move to the
/// previous noise level.
pub fn ddim_update(x: &Array2<f64>, eps: &Array2<f64>, alpha_bar: f64, alpha_bar_prev: f64) -> Array2<f64> {
    let x0 = (x - &(eps * (1.0 - alpha_bar).sqrt())) / alpha_bar.sqrt();
    &x0 * alpha_bar_prev.sqrt() + eps * (1.0 - alpha_bar_prev).sqrt()
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln_sa_g: Array1<f64>,
    pub ln_sa_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    // present iff context_tokens > 0
    pub ln_ca_g: Option<Array1<f64>>,
    pub ln_ca_b: Option<Array1<f64>>,
    pub cq: Option<Array2<f64>>,
    pub ck: Option<Array2<f64>>,
    pub cv: Option<Array2<f64>>,
    pub co: Option<Array2<f64>>,
    pub ln_mlp_g: Array1<f64>,
    pub ln_mlp_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyDiTModel {
    pub config: ToyDiTConfig,
    pub w_in: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub time_embed: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_g: Array1<f64>,
    pub ln_f_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub schedule: NoiseSchedule,
}

fn init_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        f64::from((rng.normal() * scale) as f32)
    })
}

/// Deterministic weight initialization from the config seed. Projection
/// matrices are scaled 1/sqrt(fan_in) so pre-activations stay near unit
/// variance on unit-variance input. All values are f32-representable so the
/// checkpoint container round-trips bit-exactly.
pub fn init_model(config: &ToyDiTConfig) -> Result<ToyDiTModel> {
    config.validate()?;
    let d = config.model_dim;
    let h = config.mlp_hidden;
    let n = config.token_count;
    let t = config.num_steps;
    let sd = 1.0 / (d as f64).sqrt();
    let sh = 1.0 / (h as f64).sqrt();

    let mut rng = SeededRng::for_component(config.seed, "model-weights");
    let w_in = init_matrix(&mut rng, d, d, sd);
    let pos_embed = init_matrix(&mut rng, n, d, 0.1);
    let time_embed = init_matrix(&mut rng, t, d, 0.1);
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for _ in 0..config.num_blocks {
        let ln = |_rng: &mut SeededRng, dim: usize| {
            (Array1::ones(dim), Array1::zeros(dim))
        };
        let (ln_sa_g, ln_sa_b) = ln(&mut rng, d);
        let wq = init_matrix(&mut rng, d, d, sd);
        let wk = init_matrix(&mut rng, d, d, sd);
        let wv = init_matrix(&mut rng, d, d, sd);
        let wo = init_matrix(&mut rng, d, d, sd);
        let (ln_ca_g, ln_ca_b, cq, ck, cv, co) = if config.has_cross_attn() {
            let (g, b) = ln(&mut rng, d);
            (
                Some(g),
                Some(b),
                Some(init_matrix(&mut rng, d, d, sd)),
                Some(init_matrix(&mut rng, d, d, sd)),
                Some(init_matrix(&mut rng, d, d, sd)),
                Some(init_matrix(&mut rng, d, d, sd)),
            )
        } else {
            (None, None, None, None, None, None)
        };
        let (ln_mlp_g, ln_mlp_b) = ln(&mut rng, d);
        let w1 = init_matrix(&mut rng, d, h, sd);
        let w2 = init_matrix(&mut rng, h, d, sh);
        blocks.push(BlockWeights {
            ln_sa_g,
            ln_sa_b,
            wq,
            wk,
            wv,
            wo,
            ln_ca_g,
            ln_ca_b,
            cq,
            ck,
            cv,
            co,
            ln_mlp_g,
            ln_mlp_b,
            w1,
            w2,
        });
    }
    let ln_f_g = Array1::ones(d);
    let ln_f_b = Array1::zeros(d);
    let w_out = init_matrix(&mut rng, d, d, sd);
    Ok(ToyDiTModel {
        config: *config,
        w_in,
        pos_embed,
        time_embed,
        blocks,
        ln_f_g,
        ln_f_b,
        w_out,
        schedule: NoiseSchedule::linear(t),
    })
}

pub fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let d = row.len() as f64;
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[i] + beta[i];
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Pre-computed cross-attention key/value projections of the static context.
/// Computed once per sample at step 0 and reused at every later step; the
/// 2*M*D^2 MACs are charged to the step-0 cross-attention slots.
#[derive(Debug, Clone)]
pub struct ContextKv {
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
    /// MACs spent per block on the context projections.
    pub macs_per_block: u64,
}

impl ContextKv {
    pub fn new(model: &ToyDiTModel, condition: &Array2<f64>) -> Self {
        let d = model.config.model_dim as u64;
        let m = model.config.context_tokens as u64;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for b in &model.blocks {
            if let (Some(ck), Some(cv)) = (&b.ck, &b.cv) {
                keys.push(condition.dot(ck));
                values.push(condition.dot(cv));
            }
        }
        ContextKv {
            keys,
            values,
            macs_per_block: 2 * m * d * d,
        }
    }

    pub fn empty() -> Self {
        ContextKv {
            keys: Vec::new(),
            values: Vec::new(),
            macs_per_block: 0,
        }
    }
}

/// Output of one masked sub-layer evaluation.
pub struct SubLayerOut {
    /// N x D; rows where the mask is false are zero and unspecified.
    pub out: Array2<f64>,
    /// Row-normalized attention map restricted to the computed query rows
    /// (SelfAttn: K x N, CrossAttn: K x M), averaged over heads.
    pub attn: Option<Array2<f64>>,
    /// Multiply-accumulates actually executed.
    pub macs: u64,
}

fn selected_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| if m { Some(i) } else { None })
        .collect()
}

fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let d = x.ncols();
    let mut out = Array2::zeros((idx.len(), d));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Evaluate one sub-layer on the residual stream, computing fresh outputs
/// only for mask-true tokens. Key/value projections in self-attention always
/// run on the full stream (the residual stream is fresh for all tokens);
/// cross-attention reads the pre-computed context K/V.
pub fn sublayer_forward(
    model: &ToyDiTModel,
    block: usize,
    kind: SubLayerKind,
    stream: &Array2<f64>,
    ctx: &ContextKv,
    mask: &[bool],
) -> Result<SubLayerOut> {
    let cfg = &model.config;
    let n = cfg.token_count;
    let d = cfg.model_dim;
    if stream.nrows() != n || stream.ncols() != d {
        return Err(Error::Contract(format!(
            "stream shape {:?} != ({n}, {d})",
            stream.dim()
        )));
    }
    if mask.len() != n {
        return Err(Error::Contract(format!(
            "mask length {} != token count {n}",
            mask.len()
        )));
    }
    if kind == SubLayerKind::CrossAttn && !cfg.has_cross_attn() {
        return Err(Error::Contract("model has no cross-attention".into()));
    }
    let idx = selected_indices(mask);
    let k = idx.len();
    let mut out = Array2::zeros((n, d));
    if k == 0 {
        return Ok(SubLayerOut {
            out,
            attn: None,
            macs: 0,
        });
    }
    let bw = &model.blocks[block];
    let heads = cfg.num_heads;
    let dh = d / heads;

    match kind {
        SubLayerKind::SelfAttn => {
            let x_ln = layer_norm(stream, &bw.ln_sa_g, &bw.ln_sa_b);
            let q = gather_rows(&x_ln, &idx).dot(&bw.wq); // K x D
            let key = x_ln.dot(&bw.wk); // N x D
            let val = x_ln.dot(&bw.wv); // N x D
            let mut ctx_rows = Array2::zeros((k, d));
            let mut attn_mean = Array2::zeros((k, n));
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..heads {
                let cs = h * dh;
                let qh = q.slice(ndarray::s![.., cs..cs + dh]);
                let kh = key.slice(ndarray::s![.., cs..cs + dh]);
                let vh = val.slice(ndarray::s![.., cs..cs + dh]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                softmax_rows_inplace(&mut scores);
                let mixed = scores.dot(&vh);
                ctx_rows
                    .slice_mut(ndarray::s![.., cs..cs + dh])
                    .assign(&mixed);
                attn_mean += &scores;
            }
            attn_mean /= heads as f64;
            let o = ctx_rows.dot(&bw.wo);
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(i).assign(&o.row(r));
            }
            let (ku, nu, du) = (k as u64, n as u64, d as u64);
            let macs = ku * du * du + 2 * nu * du * du + 2 * ku * nu * du + ku * du * du;
            Ok(SubLayerOut {
                out,
                attn: Some(attn_mean),
                macs,
            })
        }
        SubLayerKind::CrossAttn => {
            let m = cfg.context_tokens;
            let x_ln = layer_norm(stream, bw.ln_ca_g.as_ref().unwrap(), bw.ln_ca_b.as_ref().unwrap());
            let q = gather_rows(&x_ln, &idx).dot(bw.cq.as_ref().unwrap()); // K x D
            let key = &ctx.keys[block]; // M x D
            let val = &ctx.values[block];
            let mut ctx_rows = Array2::zeros((k, d));
            let mut attn_mean = Array2::zeros((k, m));
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..heads {
                let cs = h * dh;
                let qh = q.slice(ndarray::s![.., cs..cs + dh]);
                let kh = key.slice(ndarray::s![.., cs..cs + dh]);
                let vh = val.slice(ndarray::s![.., cs..cs + dh]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                softmax_rows_inplace(&mut scores);
                let mixed = scores.dot(&vh);
                ctx_rows
                    .slice_mut(ndarray::s![.., cs..cs + dh])
                    .assign(&mixed);
                attn_mean += &scores;
            }
            attn_mean /= heads as f64;
            let o = ctx_rows.dot(bw.co.as_ref().unwrap());
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(i).assign(&o.row(r));
            }
            let (ku, mu, du) = (k as u64, m as u64, d as u64);
            let macs = ku * du * du + 2 * ku * mu * du + ku * du * du;
            Ok(SubLayerOut {
                out,
                attn: Some(attn_mean),
                macs,
            })
        }
        SubLayerKind::Mlp => {
            let hdim = cfg.mlp_hidden;
            let x_ln = layer_norm(stream, &bw.ln_mlp_g, &bw.ln_mlp_b);
            let mut hidden = gather_rows(&x_ln, &idx).dot(&bw.w1);
            hidden.mapv_inplace(silu);
            let o = hidden.dot(&bw.w2);
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(i).assign(&o.row(r));
            }
            let (ku, du, hu) = (k as u64, d as u64, hdim as u64);
            Ok(SubLayerOut {
                out,
                attn: None,
                macs: ku * du * hu + ku * hu * du,
            })
        }
    }
}

pub fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl ToyDiTModel {
    /// Embed the latent for one denoising step: input projection plus
    /// positional and timestep embeddings. `t` is the diffusion time index.
    pub fn embed(&self, latent: &Array2<f64>, t: usize) -> Array2<f64> {
        let mut h = latent.dot(&self.w_in);
        h += &self.pos_embed;
        let te = self.time_embed.row(t);
        for mut row in h.axis_iter_mut(Axis(0)) {
            row += &te;
        }
        h
    }

    /// Final head: layernorm plus output projection, predicting noise.
    pub fn head(&self, h: &Array2<f64>) -> Array2<f64> {
        layer_norm(h, &self.ln_f_g, &self.ln_f_b).dot(&self.w_out)
    }

    /// Diffusion time index for execution step `step` (steps run from high
    /// noise to low noise).
    pub fn time_of_step(&self, step: usize) -> usize {
        self.config.num_steps - 1 - step
    }

    /// Full-compute noise prediction at one step. Returns eps and MACs spent
    /// in sub-layers.
    pub fn forward_dense(
        &self,
        latent: &Array2<f64>,
        t: usize,
        ctx: &ContextKv,
    ) -> Result<(Array2<f64>, u64)> {
        let mask = vec![true; self.config.token_count];
        let mut h = self.embed(latent, t);
        let mut macs = 0;
        for block in 0..self.config.num_blocks {
            let sa = sublayer_forward(self, block, SubLayerKind::SelfAttn, &h, ctx, &mask)?;
            h += &sa.out;
            macs += sa.macs;
            if self.config.has_cross_attn() {
                let ca = sublayer_forward(self, block, SubLayerKind::CrossAttn, &h, ctx, &mask)?;
                h += &ca.out;
                macs += ca.macs;
            }
            let mlp = sublayer_forward(self, block, SubLayerKind::Mlp, &h, ctx, &mask)?;
            h += &mlp.out;
            macs += mlp.macs;
        }
        Ok((self.head(&h), macs))
    }

    /// Teacher sampler: T full-compute DDIM steps. Deterministic and
    /// referentially transparent. Returns the final latent x0.
    pub fn sample(&self, condition: &Array2<f64>, initial_noise: &Array2<f64>) -> Result<Array2<f64>> {
        let ctx = if self.config.has_cross_attn() {
            ContextKv::new(self, condition)
        } else {
            ContextKv::empty()
        };
        let mut x = initial_noise.clone();
        for step in 0..self.config.num_steps {
            let t = self.time_of_step(step);
            let (eps, _) = self.forward_dense(&x, t, &ctx)?;
            x = ddim_update(
                &x,
                &eps,
                self.schedule.alpha_bars[t],
                self.schedule.alpha_bar_prev(t),
            );
        }
        Ok(x)
    }

    pub fn to_named_arrays(&self) -> NamedArrays {
        let mut out = NamedArrays::new();
        let push2 = |o: &mut NamedArrays, name: &str, a: &Array2<f64>| {
            o.push(name, &[a.nrows(), a.ncols()], a.iter().cloned().collect());
        };
        let push1 = |o: &mut NamedArrays, name: &str, a: &Array1<f64>| {
            o.push(name, &[a.len()], a.iter().cloned().collect());
        };
        push2(&mut out, "w_in", &self.w_in);
        push2(&mut out, "pos_embed", &self.pos_embed);
        push2(&mut out, "time_embed", &self.time_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            push1(&mut out, &format!("{p}.sa.ln.gamma"), &b.ln_sa_g);
            push1(&mut out, &format!("{p}.sa.ln.beta"), &b.ln_sa_b);
            push2(&mut out, &format!("{p}.sa.wq"), &b.wq);
            push2(&mut out, &format!("{p}.sa.wk"), &b.wk);
            push2(&mut out, &format!("{p}.sa.wv"), &b.wv);
            push2(&mut out, &format!("{p}.sa.wo"), &b.wo);
            if let (Some(g), Some(bb)) = (&b.ln_ca_g, &b.ln_ca_b) {
                push1(&mut out, &format!("{p}.ca.ln.gamma"), g);
                push1(&mut out, &format!("{p}.ca.ln.beta"), bb);
                push2(&mut out, &format!("{p}.ca.wq"), b.cq.as_ref().unwrap());
                push2(&mut out, &format!("{p}.ca.wk"), b.ck.as_ref().unwrap());
                push2(&mut out, &format!("{p}.ca.wv"), b.cv.as_ref().unwrap());
                push2(&mut out, &format!("{p}.ca.wo"), b.co.as_ref().unwrap());
            }
            push1(&mut out, &format!("{p}.mlp.ln.gamma"), &b.ln_mlp_g);
            push1(&mut out, &format!("{p}.mlp.ln.beta"), &b.ln_mlp_b);
            push2(&mut out, &format!("{p}.mlp.w1"), &b.w1);
            push2(&mut out, &format!("{p}.mlp.w2"), &b.w2);
        }
        push1(&mut out, "ln_f.gamma", &self.ln_f_g);
        push1(&mut out, "ln_f.beta", &self.ln_f_b);
        push2(&mut out, "w_out", &self.w_out);
        out
    }

    /// Checksum over all weight bits, for determinism tests.
    pub fn weights_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let arrays = self.to_named_arrays();
        let mut hasher = Sha256::new();
        for name in arrays.names() {
            let (_, data) = arrays.get(name).unwrap();
            hasher.update(name.as_bytes());
            for v in data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Deterministic stand-in for a text-embedding condition: M context tokens
/// drawn from a generator seeded by the sample seed.
pub fn make_condition(config: &ToyDiTConfig, sample_seed: u64) -> Array2<f64> {
    let mut rng = SeededRng::for_component(sample_seed, "condition");
    Array2::from_shape_fn((config.context_tokens, config.model_dim), |_| rng.normal_f32())
}

/// Deterministic initial noise for one sample.
pub fn make_noise(config: &ToyDiTConfig, sample_seed: u64) -> Array2<f64> {
    let mut rng = SeededRng::for_component(sample_seed, "noise");
    Array2::from_shape_fn((config.token_count, config.model_dim), |_| rng.normal_f32())
}
