//! MACs accounting, speedup estimation, schedule statistics, and desk-scale
//! quality metrics.
//!
//! MACs count matrix multiplies only (no norms, softmax, or elementwise ops).
//! The central contract: instrumented counts from a traced run equal the
//! analytic prediction exactly, slot by slot.

use crate::cache::{retained_tokens, TraceEntry};
use crate::dp::SparsitySchedule;
use crate::error::{Error, Result};
use crate::model::{SubLayerKind, ToyDiTConfig};
use crate::selector::{ScoreKind, SelectorWeights};
use ndarray::Array2;
use serde::Serialize;
use std::collections::BTreeMap;

/// Analytic MACs for one sub-layer with `k` freshly computed tokens.
/// Zero retention skips the whole layer, key/value projections included.
pub fn analytic_macs(config: &ToyDiTConfig, kind: SubLayerKind, k: usize) -> Result<u64> {
    let n = config.token_count;
    if k > n {
        return Err(Error::Contract(format!("retained {k} > token count {n}")));
    }
    if k == 0 {
        return Ok(0);
    }
    let (ku, nu, du) = (k as u64, n as u64, config.model_dim as u64);
    Ok(match kind {
        SubLayerKind::SelfAttn => ku * du * du + 2 * nu * du * du + 2 * ku * nu * du + ku * du * du,
        SubLayerKind::CrossAttn => {
            let mu = config.context_tokens as u64;
            ku * du * du + 2 * ku * mu * du + ku * du * du
        }
        SubLayerKind::Mlp => {
            let hu = config.mlp_hidden as u64;
            ku * (du * hu + hu * du)
        }
    })
}

/// One-time context key/value projection cost, charged to the step-0
/// cross-attention slot of each block.
pub fn context_kv_macs(config: &ToyDiTConfig) -> u64 {
    2 * (config.context_tokens as u64) * (config.model_dim as u64) * (config.model_dim as u64)
}

/// Selector scoring cost for a partially retained slot; zero for full or
/// skipped slots (no selection runs).
pub fn selector_macs_analytic(
    config: &ToyDiTConfig,
    kind: SubLayerKind,
    selector: &SelectorWeights,
    k: usize,
) -> u64 {
    let n = config.token_count as u64;
    if k == 0 || k == config.token_count {
        return 0;
    }
    match selector.score_kind {
        ScoreKind::Attention => {
            let mut macs = 4 * n;
            match kind {
                SubLayerKind::SelfAttn => macs += n * n,
                SubLayerKind::CrossAttn => macs += n * config.context_tokens as u64,
                SubLayerKind::Mlp => {}
            }
            macs
        }
        ScoreKind::Similarity => 3 * n * config.model_dim as u64 + 4 * n,
        ScoreKind::Norm => n * config.model_dim as u64 + 4 * n,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlotMacs {
    pub step: usize,
    pub flat_index: usize,
    pub rho: f64,
    pub analytic: u64,
    pub selector: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MacsReport {
    pub per_slot: Vec<SlotMacs>,
    pub total: u64,
    pub selector_total: u64,
    /// all-full run of the same config, context projections included
    pub baseline_total: u64,
    pub speedup: f64,
}

/// Analytic MACs prediction for a full scheduled run (step 0 forced full).
pub fn predict_macs(
    config: &ToyDiTConfig,
    schedule: &SparsitySchedule,
    selector: &SelectorWeights,
) -> Result<MacsReport> {
    if schedule.schedulable_steps() != config.schedulable_steps()
        || schedule.sub_layers() != config.sub_layer_count()
    {
        return Err(Error::Contract("schedule does not match config".into()));
    }
    let n = config.token_count;
    let mut per_slot = Vec::new();
    let mut total = 0u64;
    let mut selector_total = 0u64;
    for step in 0..config.num_steps {
        for flat in 0..config.sub_layer_count() {
            let (_, kind) = config.kind_of_flat(flat);
            let rho = if step == 0 {
                1.0
            } else {
                schedule.rho(step - 1, flat)
            };
            let k = retained_tokens(rho, n);
            let mut analytic = analytic_macs(config, kind, k)?;
            if step == 0 && kind == SubLayerKind::CrossAttn {
                analytic += context_kv_macs(config);
            }
            let sel = if step == 0 {
                0
            } else {
                selector_macs_analytic(config, kind, selector, k)
            };
            total += analytic;
            selector_total += sel;
            per_slot.push(SlotMacs {
                step,
                flat_index: flat,
                rho,
                analytic,
                selector: sel,
            });
        }
    }
    let baseline_total = baseline_macs(config)?;
    let denom = total + selector_total;
    let speedup = if denom > 0 {
        baseline_total as f64 / denom as f64
    } else {
        f64::INFINITY
    };
    Ok(MacsReport {
        per_slot,
        total,
        selector_total,
        baseline_total,
        speedup,
    })
}

/// Full-compute MACs over all steps.
pub fn baseline_macs(config: &ToyDiTConfig) -> Result<u64> {
    let n = config.token_count;
    let mut total = 0u64;
    for step in 0..config.num_steps {
        for flat in 0..config.sub_layer_count() {
            let (_, kind) = config.kind_of_flat(flat);
            let mut m = analytic_macs(config, kind, n)?;
            if step == 0 && kind == SubLayerKind::CrossAttn {
                m += context_kv_macs(config);
            }
            total += m;
        }
    }
    Ok(total)
}

/// Check a sampler trace against the analytic prediction; exact integer
/// equality is required on every slot.
pub fn verify_trace(
    config: &ToyDiTConfig,
    schedule: &SparsitySchedule,
    selector: &SelectorWeights,
    trace: &[TraceEntry],
) -> Result<MacsReport> {
    let report = predict_macs(config, schedule, selector)?;
    if trace.len() != report.per_slot.len() {
        return Err(Error::Contract(format!(
            "trace has {} entries, expected {}",
            trace.len(),
            report.per_slot.len()
        )));
    }
    for (t, p) in trace.iter().zip(&report.per_slot) {
        if t.step != p.step || t.flat_index != p.flat_index {
            return Err(Error::Contract(format!(
                "trace order mismatch at step {} slot {}",
                t.step, t.flat_index
            )));
        }
        if t.macs != p.analytic {
            return Err(Error::Contract(format!(
                "step {} slot {}: instrumented {} MACs, analytic {}",
                t.step, t.flat_index, t.macs, p.analytic
            )));
        }
        if t.selector_macs != p.selector {
            return Err(Error::Contract(format!(
                "step {} slot {}: instrumented selector {} MACs, analytic {}",
                t.step, t.flat_index, t.selector_macs, p.selector
            )));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct QualityMetrics {
    /// dB over the reference dynamic range; +inf when identical
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean SSIM over non-overlapping 8 x 8 windows with standard stabilizers
/// scaled by the dynamic range `l`.
pub fn ssim_mean(a: &Array2<f64>, b: &Array2<f64>, l: f64) -> f64 {
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    let (rows, cols) = a.dim();
    let win = crate::loss::SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut r0 = 0;
    while r0 < rows {
        let h = win.min(rows - r0);
        let mut c0 = 0;
        while c0 < cols {
            let w = win.min(cols - c0);
            let x = a.slice(ndarray::s![r0..r0 + h, c0..c0 + w]);
            let y = b.slice(ndarray::s![r0..r0 + h, c0..c0 + w]);
            let npix = (h * w) as f64;
            let mx = x.sum() / npix;
            let my = y.sum() / npix;
            let mut sx2 = 0.0;
            let mut sy2 = 0.0;
            let mut sxy = 0.0;
            for (u, v) in x.iter().zip(y.iter()) {
                sx2 += (u - mx) * (u - mx);
                sy2 += (v - my) * (v - my);
                sxy += (u - mx) * (v - my);
            }
            sx2 /= npix;
            sy2 /= npix;
            sxy /= npix;
            total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sx2 + sy2 + c2));
            count += 1;
            c0 += win;
        }
        r0 += win;
    }
    total / count as f64
}

/// PSNR and SSIM of a candidate against a reference; the dynamic range comes
/// from the reference (1.0 fallback for a constant reference).
pub fn quality_metrics(reference: &Array2<f64>, candidate: &Array2<f64>) -> Result<QualityMetrics> {
    if reference.dim() != candidate.dim() {
        return Err(Error::Contract(format!(
            "reference {:?} vs candidate {:?}",
            reference.dim(),
            candidate.dim()
        )));
    }
    let max = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = if max > min { max - min } else { 1.0 };
    let mse = reference
        .iter()
        .zip(candidate.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };
    Ok(QualityMetrics {
        psnr,
        ssim: ssim_mean(reference, candidate, range),
    })
}

/// Presentation helper: "inf" sentinel for identical inputs.
pub fn format_psnr(psnr: f64) -> String {
    if psnr.is_infinite() {
        "inf".to_string()
    } else {
        format!("{psnr:.4}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleStats {
    pub mean_retention: f64,
    /// per sub-layer kind: count of slots at each candidate index
    pub per_kind_histogram: BTreeMap<String, Vec<usize>>,
    pub zero_skip_count: usize,
    /// T' x L_d retention fractions
    pub heatmap: Vec<Vec<f64>>,
}

pub fn schedule_stats(config: &ToyDiTConfig, schedule: &SparsitySchedule) -> ScheduleStats {
    let cands = schedule.candidate_set.len();
    let mut hist: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut zero = 0usize;
    for t in 0..schedule.schedulable_steps() {
        for l in 0..schedule.sub_layers() {
            let (_, kind) = config.kind_of_flat(l);
            let s = schedule.candidate(t, l);
            hist.entry(kind.name().to_string())
                .or_insert_with(|| vec![0; cands])[s] += 1;
            if s == 0 {
                zero += 1;
            }
        }
    }
    let heatmap = (0..schedule.schedulable_steps())
        .map(|t| (0..schedule.sub_layers()).map(|l| schedule.rho(t, l)).collect())
        .collect();
    ScheduleStats {
        mean_retention: schedule.mean_retention(),
        per_kind_histogram: hist,
        zero_skip_count: zero,
        heatmap,
    }
}

/// Per-slot CSV of a MACs report.
pub fn macs_csv(config: &ToyDiTConfig, report: &MacsReport) -> String {
    let names = config.sub_layer_names();
    let mut out = String::from("step,flat_index,sub_layer,rho,macs,selector_macs\n");
    for s in &report.per_slot {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.step, s.flat_index, names[s.flat_index], s.rho, s.analytic, s.selector
        ));
    }
    out
}

/// Self-contained SVG heatmap of retention fractions: one row per
/// schedulable step, one column per sub-layer, linear blue-to-yellow ramp.
pub fn heatmap_svg(schedule: &SparsitySchedule) -> String {
    const CELL: usize = 16;
    const MARGIN: usize = 4;
    let tp = schedule.schedulable_steps();
    let ld = schedule.sub_layers();
    let width = ld * CELL + 2 * MARGIN;
    let height = tp * CELL + 2 * MARGIN;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    );
    svg.push_str(&format!(
        "  <title>retention per (step, sub-layer), {tp} steps x {ld} sub-layers</title>\n"
    ));
    for t in 0..tp {
        for l in 0..ld {
            let rho = schedule.rho(t, l);
            let r = (255.0 * rho).round() as u8;
            let g = (255.0 * rho).round() as u8;
            let b = (255.0 * (1.0 - rho)).round() as u8;
            svg.push_str(&format!(
                "  <rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"rgb({r},{g},{b})\"><title>step {} layer {}: rho={rho}</title></rect>\n",
                MARGIN + l * CELL,
                MARGIN + t * CELL,
                t + 1,
                l
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheExecutor;
    use crate::cost::CandidateSet;
    use crate::model::{init_model, make_condition, make_noise, sublayer_forward, ContextKv};
    use crate::rng::SeededRng;

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

    #[test]
    fn mlp_worked_example() {
        let cfg = ToyDiTConfig::default();
        assert_eq!(
            analytic_macs(&cfg, SubLayerKind::Mlp, 32).unwrap(),
            1_048_576
        );
    }

    #[test]
    fn zero_retention_is_free_and_range_checked() {
        let cfg = small_config();
        for kind in [SubLayerKind::SelfAttn, SubLayerKind::CrossAttn, SubLayerKind::Mlp] {
            assert_eq!(analytic_macs(&cfg, kind, 0).unwrap(), 0);
        }
        assert!(analytic_macs(&cfg, SubLayerKind::Mlp, 17).is_err());
    }

    #[test]
    fn analytic_matches_instrumented_sublayer() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let ctx = ContextKv::new(&model, &cond);
        let stream = make_noise(&cfg, 2);
        for kind in [SubLayerKind::SelfAttn, SubLayerKind::CrossAttn, SubLayerKind::Mlp] {
            for k in [1usize, 5, 16] {
                let mut mask = vec![false; 16];
                for m in mask.iter_mut().take(k) {
                    *m = true;
                }
                let out = sublayer_forward(&model, 0, kind, &stream, &ctx, &mask).unwrap();
                assert_eq!(out.macs, analytic_macs(&cfg, kind, k).unwrap(), "{kind:?} k={k}");
            }
        }
    }

    #[test]
    fn traced_runs_match_prediction_exactly() {
        let cfg = small_config();
        let model = init_model(&cfg).unwrap();
        let cond = make_condition(&cfg, 1);
        let noise = make_noise(&cfg, 2);
        let set = CandidateSet::new(0.25).unwrap();
        let mut rng = SeededRng::new(41);
        for selector in [
            SelectorWeights::pixart_preset(),
            SelectorWeights {
                score_kind: ScoreKind::Similarity,
                ..SelectorWeights::pixart_preset()
            },
            SelectorWeights {
                score_kind: ScoreKind::Norm,
                ..SelectorWeights::pixart_preset()
            },
        ] {
            for _ in 0..10 {
                let candidates = Array2::from_shape_fn(
                    (cfg.schedulable_steps(), cfg.sub_layer_count()),
                    |_| rng.below(5),
                );
                let sched = SparsitySchedule::new(candidates, set.clone());
                let mut exec = CacheExecutor::new(&model, sched.clone(), selector).unwrap();
                exec.run_scheduled_sample(&model, &cond, &noise).unwrap();
                let report = verify_trace(&cfg, &sched, &selector, &exec.trace).unwrap();
                assert_eq!(report.total, exec.macs_total);
                assert_eq!(report.selector_total, exec.selector_macs_total);
            }
        }
    }

    #[test]
    fn speedup_monotone_in_retention() {
        let cfg = small_config();
        let set = CandidateSet::new(0.25).unwrap();
        let selector = SelectorWeights::pixart_preset();
        let mut rng = SeededRng::new(43);
        for _ in 0..20 {
            let hi = Array2::from_shape_fn(
                (cfg.schedulable_steps(), cfg.sub_layer_count()),
                |_| 1 + rng.below(4),
            );
            let lo = hi.mapv(|s| s - 1);
            let hi = SparsitySchedule::new(hi, set.clone());
            let lo = SparsitySchedule::new(lo, set.clone());
            let rh = predict_macs(&cfg, &hi, &selector).unwrap();
            let rl = predict_macs(&cfg, &lo, &selector).unwrap();
            assert!(rl.speedup >= rh.speedup);
        }
    }

    #[test]
    fn preset_budget_bound_with_skip_style_schedule() {
        // alternating skip/full slots at mean retention 0.46 stay within the
        // advertised bound on the schedulable portion (plus selector overhead,
        // which is zero here: no partial slots)
        let cfg = ToyDiTConfig::default();
        let set = CandidateSet::new(0.25).unwrap();
        let selector = SelectorWeights::pixart_preset();
        let slots = cfg.schedulable_steps() * cfg.sub_layer_count();
        let budget = crate::dp::Budget::new(0.54, slots, 4).unwrap();
        // fill with full (4 units) slots then one partial remainder slot
        let mut flat = vec![0usize; slots];
        let mut left = budget.total_units;
        for slot in flat.iter_mut() {
            let take = left.min(4);
            *slot = take;
            left -= take;
        }
        assert_eq!(left, 0);
        let candidates = Array2::from_shape_fn(
            (cfg.schedulable_steps(), cfg.sub_layer_count()),
            |(t, l)| flat[t * cfg.sub_layer_count() + l],
        );
        let sched = SparsitySchedule::new(candidates, set);
        let report = predict_macs(&cfg, &sched, &selector).unwrap();
        // strip the forced-full step 0 from both sides
        let step0: u64 = report
            .per_slot
            .iter()
            .filter(|s| s.step == 0)
            .map(|s| s.analytic)
            .sum();
        let scheduled = report.total - step0;
        let baseline = report.baseline_total - step0;
        assert!(
            scheduled as f64 <= 0.46 * baseline as f64 + report.selector_total as f64 + 1e-6,
            "{scheduled} vs 0.46 * {baseline} + {}",
            report.selector_total
        );
        // selector overhead is small at the default config
        assert!((report.selector_total as f64) < 0.02 * report.baseline_total as f64);
    }

    #[test]
    fn quality_identity_and_offset() {
        let mut rng = SeededRng::new(3);
        let a = Array2::from_shape_fn((16, 16), |_| rng.uniform_range(-1.0, 1.0));
        let q = quality_metrics(&a, &a).unwrap();
        assert!(q.psnr.is_infinite());
        assert_eq!(format_psnr(q.psnr), "inf");
        assert!((q.ssim - 1.0).abs() < 1e-12);

        // offset by one dynamic-range unit: PSNR = 0 dB by definition
        let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
        let b = &a + (max - min);
        let q = quality_metrics(&a, &b).unwrap();
        assert!(q.psnr.abs() < 1e-9);

        // constant reference: stabilizers keep SSIM defined
        let c = Array2::from_elem((16, 16), 0.7);
        let q = quality_metrics(&c, &c).unwrap();
        assert!((q.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_and_exports() {
        let cfg = small_config();
        let set = CandidateSet::new(0.25).unwrap();
        let mut sched =
            SparsitySchedule::uniform(cfg.schedulable_steps(), cfg.sub_layer_count(), set, 2);
        sched.candidates[[0, 0]] = 0;
        sched.candidates[[1, 3]] = 4;
        let stats = schedule_stats(&cfg, &sched);
        let slots = cfg.schedulable_steps() * cfg.sub_layer_count();
        assert_eq!(stats.zero_skip_count, 1);
        let units = sched.total_units();
        assert!((stats.mean_retention - units as f64 / (slots * 4) as f64).abs() < 1e-12);
        assert_eq!(stats.heatmap.len(), cfg.schedulable_steps());
        let total_hist: usize = stats.per_kind_histogram.values().flatten().sum();
        assert_eq!(total_hist, slots);

        let selector = SelectorWeights::pixart_preset();
        let report = predict_macs(&cfg, &sched, &selector).unwrap();
        let csv = macs_csv(&cfg, &report);
        assert_eq!(csv.lines().count(), 1 + cfg.num_steps * cfg.sub_layer_count());

        let svg = heatmap_svg(&sched);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), slots);
        // skipped slot renders pure blue, full slot pure yellow
        assert!(svg.contains("rgb(0,0,255)"));
        assert!(svg.contains("rgb(255,255,0)"));
    }
}
