//! Distillation losses between student and teacher final latents.
//!
//! The latent (N x D) is treated as a 2-D image. Three losses: plain MSE,
//! 1 - mean SSIM over non-overlapping 8 x 8 windows, and an LPIPS stand-in
//! that compares features from a frozen, seeded 3-layer random conv stack.
//! The teacher side enters as constants, so gradients reach the student only.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    Ssim,
    FeatureProxy,
}

pub const SSIM_WINDOW: usize = 8;

/// Stabilizers for unit dynamic range: (0.01 L)^2 and (0.03 L)^2 with L = 1.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Differentiable distillation loss; `teacher` is detached.
pub fn distill_loss_diff(
    g: &mut Graph,
    kind: LossKind,
    student: NodeId,
    teacher: &Array2<f64>,
) -> Result<NodeId> {
    if g.value(student).dim() != teacher.dim() {
        return Err(Error::Contract(format!(
            "student {:?} vs teacher {:?}",
            g.value(student).dim(),
            teacher.dim()
        )));
    }
    match kind {
        LossKind::L2 => {
            let t = g.constant(teacher.clone());
            let d = g.sub(student, t);
            let sq = g.mul(d, d);
            Ok(g.mean_all(sq))
        }
        LossKind::Ssim => ssim_loss_diff(g, student, teacher),
        LossKind::FeatureProxy => feature_proxy_diff(g, student, teacher),
    }
}

/// Plain (non-differentiable) evaluation of the same losses.
pub fn distill_loss(kind: LossKind, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(a.clone());
    let l = distill_loss_diff(&mut g, kind, s, b)?;
    Ok(g.value(l)[[0, 0]])
}

fn tile_ranges(extent: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < extent {
        let len = SSIM_WINDOW.min(extent - start);
        out.push((start, len));
        start += SSIM_WINDOW;
    }
    out
}

fn ssim_loss_diff(g: &mut Graph, student: NodeId, teacher: &Array2<f64>) -> Result<NodeId> {
    let (rows, cols) = teacher.dim();
    let mut acc: Option<NodeId> = None;
    let mut count = 0usize;
    for &(r0, h) in &tile_ranges(rows) {
        for &(c0, w) in &tile_ranges(cols) {
            let x = g.slice_block(student, r0, c0, h, w);
            let yv = teacher.slice(ndarray::s![r0..r0 + h, c0..c0 + w]).to_owned();
            let npix = (h * w) as f64;
            let my = yv.sum() / npix;
            let sy2 = yv.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / npix;
            let y = g.constant(yv);

            let mx = g.mean_all(x);
            let xx = g.mul(x, x);
            let ex2 = g.mean_all(xx);
            let mx2 = g.mul(mx, mx);
            let sx2 = g.sub(ex2, mx2);
            let xy = g.mul(x, y);
            let exy = g.mean_all(xy);
            let mxmy = g.scale(mx, my);
            let sxy = g.sub(exy, mxmy);

            // ((2 mx my + C1)(2 sxy + C2)) / ((mx^2 + my^2 + C1)(sx^2 + sy^2 + C2))
            let t = g.scale(mx, 2.0 * my);
            let c1 = g.scalar(SSIM_C1);
            let num_l = g.add(t, c1);
            let t = g.scale(sxy, 2.0);
            let c2 = g.scalar(SSIM_C2);
            let num_r = g.add(t, c2);
            let num = g.mul(num_l, num_r);
            let t = g.scalar(my * my + SSIM_C1);
            let den_l = g.add(mx2, t);
            let t = g.scalar(sy2 + SSIM_C2);
            let den_r = g.add(sx2, t);
            let den = g.mul(den_l, den_r);
            let ssim = g.div(num, den);
            acc = Some(match acc {
                Some(a) => g.add(a, ssim),
                None => ssim,
            });
            count += 1;
        }
    }
    let total = acc.expect("at least one tile");
    let mean = g.scale(total, 1.0 / count as f64);
    let one = g.scalar(1.0);
    Ok(g.sub(one, mean))
}

/// Frozen random conv stack: 3 layers of 3 x 3 convs over the latent-as-image
/// with channels 1 -> 4 -> 4 -> 4 and ReLU between layers.
struct ConvStack {
    /// per layer: (9 * c_in) x c_out
    weights: Vec<Array2<f64>>,
    channels: Vec<usize>,
}

impl ConvStack {
    fn frozen() -> Self {
        let channels = vec![1usize, 4, 4, 4];
        let mut rng = SeededRng::for_component(0, "feature-proxy");
        let weights = channels
            .windows(2)
            .map(|w| {
                let fan_in = 9 * w[0];
                let scale = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_fn((fan_in, w[1]), |_| {
                    f64::from((rng.normal() * scale) as f32)
                })
            })
            .collect();
        ConvStack { weights, channels }
    }
}

/// Indices for a 3 x 3 same-padding im2col over a (rows x cols) grid whose
/// activations are laid out (rows * cols) x c_in row-major. -1 marks padding.
fn im2col_indices(rows: usize, cols: usize, c_in: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(rows * cols * 9 * c_in);
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    let (nr, nc) = (r + dr, c + dc);
                    let base = if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        -1
                    } else {
                        nr * cols as i64 + nc
                    };
                    for ch in 0..c_in as i64 {
                        idx.push(if base < 0 { -1 } else { base * c_in as i64 + ch });
                    }
                }
            }
        }
    }
    idx
}

fn conv_features(g: &mut Graph, input: NodeId, rows: usize, cols: usize, stack: &ConvStack) -> NodeId {
    let p = rows * cols;
    // reshape (rows x cols) -> (P x 1) via identity gather
    let ident: Vec<i64> = (0..p as i64).collect();
    let mut act = g.gather_flat(input, &ident, (p, 1));
    let layers = stack.weights.len();
    for (li, w) in stack.weights.iter().enumerate() {
        let c_in = stack.channels[li];
        let idx = im2col_indices(rows, cols, c_in);
        let patches = g.gather_flat(act, &idx, (p, 9 * c_in));
        let wc = g.constant(w.clone());
        let z = g.matmul(patches, wc);
        act = if li + 1 < layers { g.relu(z) } else { z };
    }
    act
}

fn feature_proxy_diff(g: &mut Graph, student: NodeId, teacher: &Array2<f64>) -> Result<NodeId> {
    let (rows, cols) = teacher.dim();
    let stack = ConvStack::frozen();
    let fs = conv_features(g, student, rows, cols, &stack);
    let tc = g.constant(teacher.clone());
    let ft = conv_features(g, tc, rows, cols, &stack);
    let d = g.sub(fs, ft);
    let sq = g.mul(d, d);
    Ok(g.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = SeededRng::new(seed);
        Array2::from_shape_fn((r, c), |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn identical_inputs_give_zero_loss() {
        let a = random(1, 16, 16);
        for kind in [LossKind::L2, LossKind::Ssim, LossKind::FeatureProxy] {
            let l = distill_loss(kind, &a, &a).unwrap();
            assert!(l.abs() < 1e-9, "{kind:?} loss {l}");
        }
    }

    #[test]
    fn l2_constant_offset() {
        let a = random(2, 8, 8);
        let b = &a + 0.5;
        let l = distill_loss(LossKind::L2, &a, &b).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ssim_negation_of_zero_mean_data_near_two() {
        let mut a = random(3, 16, 16);
        // zero-mean per 8x8 tile so mu terms vanish
        for &(r0, h) in &tile_ranges(16) {
            for &(c0, w) in &tile_ranges(16) {
                let mut tile = a.slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w]);
                let m = tile.sum() / (h * w) as f64;
                tile.mapv_inplace(|v| v - m);
            }
        }
        let b = a.mapv(|v| -v);
        let l = distill_loss(LossKind::Ssim, &a, &b).unwrap();
        assert!((l - 2.0).abs() < 0.02, "loss {l}");
    }

    #[test]
    fn ragged_tiles_are_covered() {
        // 11 x 13 exercises edge tiles; identity must still be exactly 0 loss
        let a = random(4, 11, 13);
        let l = distill_loss(LossKind::Ssim, &a, &a).unwrap();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn feature_proxy_is_frozen_and_seeded() {
        let a = random(5, 16, 16);
        let b = random(6, 16, 16);
        let l1 = distill_loss(LossKind::FeatureProxy, &a, &b).unwrap();
        let l2 = distill_loss(LossKind::FeatureProxy, &a, &b).unwrap();
        assert_eq!(l1, l2);
        assert!(l1 > 0.0);
    }

    #[test]
    fn losses_match_finite_differences() {
        let a0 = random(7, 16, 16);
        let b = random(8, 16, 16);
        for kind in [LossKind::L2, LossKind::Ssim, LossKind::FeatureProxy] {
            let mut g = Graph::new();
            let s = g.leaf(a0.clone());
            let l = distill_loss_diff(&mut g, kind, s, &b).unwrap();
            g.backward(l).unwrap();
            let analytic = g.grad(s).unwrap().clone();

            let eps = 1e-6;
            let mut rng = SeededRng::new(99);
            for _ in 0..6 {
                let r = rng.below(16);
                let c = rng.below(16);
                let mut ap = a0.clone();
                ap[[r, c]] += eps;
                let mut am = a0.clone();
                am[[r, c]] -= eps;
                let fd = (distill_loss(kind, &ap, &b).unwrap()
                    - distill_loss(kind, &am, &b).unwrap())
                    / (2.0 * eps);
                let an = analytic[[r, c]];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "{kind:?} ({r}, {c}): analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = random(1, 8, 8);
        let b = random(2, 8, 9);
        assert!(distill_loss(LossKind::L2, &a, &b).is_err());
    }
}
