//! Token selector: composite importance scoring and deterministic top-K
//! selection.
//!
//! The composite score combines self-attention influence (column sums of the
//! row-normalized map), cross-attention entropy, and cache-reuse age, plus a
//! spatial bonus that boosts the best token of each k x k grid tile so the
//! selection stays spatially spread out.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Attention,
    Similarity,
    Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Spatial bonus tile side.
    pub neighborhood_k: usize,
    pub score_kind: ScoreKind,
    /// When true, high cross-attention entropy raises the score (the formula
    /// as written); when false the sign flips to the "more focused implies
    /// compute" reading.
    pub entropy_raises_score: bool,
}

impl SelectorWeights {
    /// Cross-attention-driven preset (text-conditioned models).
    pub fn pixart_preset() -> Self {
        SelectorWeights {
            lambda1: 0.0,
            lambda2: 1.0,
            lambda3: 0.25 / 3.0,
            lambda4: 0.4,
            neighborhood_k: 4,
            score_kind: ScoreKind::Attention,
            entropy_raises_score: true,
        }
    }

    /// Self-attention-driven preset (class-conditioned models without
    /// cross-attention).
    pub fn dit_preset() -> Self {
        SelectorWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.25 / 3.0,
            lambda4: 0.6,
            neighborhood_k: 2,
            score_kind: ScoreKind::Attention,
            entropy_raises_score: true,
        }
    }

    pub fn validate(&self, token_count: usize) -> Result<()> {
        let k2 = self.neighborhood_k * self.neighborhood_k;
        if self.neighborhood_k == 0 || k2 > token_count {
            return Err(Error::Config(format!(
                "neighborhood k = {} invalid for {} tokens",
                self.neighborhood_k, token_count
            )));
        }
        for l in [self.lambda1, self.lambda2, self.lambda3, self.lambda4] {
            if !l.is_finite() {
                return Err(Error::Config("selector lambdas must be finite".into()));
            }
        }
        Ok(())
    }
}

impl Default for SelectorWeights {
    fn default() -> Self {
        Self::pixart_preset()
    }
}

#[derive(Debug, Clone)]
pub struct ScoreBreakdown {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub bonus: Vec<f64>,
    pub total: Vec<f64>,
}

fn check_rows_normalized(map: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in map.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "{what} map row {i} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Composite importance score per token. Missing maps contribute zero to
/// their component. `grid` must factor the token count exactly.
pub fn score_tokens(
    weights: &SelectorWeights,
    self_attn_map: Option<&Array2<f64>>,
    cross_attn_map: Option<&Array2<f64>>,
    reuse_counts: &[u32],
    grid: (usize, usize),
) -> Result<ScoreBreakdown> {
    let n = reuse_counts.len();
    if grid.0 * grid.1 != n {
        return Err(Error::Contract(format!(
            "grid {:?} does not cover {n} tokens",
            grid
        )));
    }
    weights.validate(n)?;

    let mut s1 = vec![0.0; n];
    if let Some(map) = self_attn_map {
        if map.ncols() != n {
            return Err(Error::Contract(format!(
                "self-attention map has {} columns, expected {n}",
                map.ncols()
            )));
        }
        check_rows_normalized(map, "self-attention")?;
        for row in map.rows() {
            for (j, v) in row.iter().enumerate() {
                s1[j] += v;
            }
        }
    }

    let mut s2 = vec![0.0; n];
    if let Some(map) = cross_attn_map {
        if map.nrows() != n {
            return Err(Error::Contract(format!(
                "cross-attention map has {} rows, expected {n}",
                map.nrows()
            )));
        }
        check_rows_normalized(map, "cross-attention")?;
        for (i, row) in map.rows().into_iter().enumerate() {
            let mut h = 0.0;
            for &p in row.iter() {
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            s2[i] = if weights.entropy_raises_score { h } else { -h };
        }
    }

    let s3: Vec<f64> = reuse_counts.iter().map(|&c| f64::from(c)).collect();

    let base: Vec<f64> = (0..n)
        .map(|i| weights.lambda1 * s1[i] + weights.lambda2 * s2[i] + weights.lambda3 * s3[i])
        .collect();
    let bonus = spatial_bonus(&base, grid, weights.neighborhood_k, weights.lambda4);
    let total: Vec<f64> = (0..n).map(|i| base[i] + bonus[i]).collect();
    Ok(ScoreBreakdown {
        s1,
        s2,
        s3,
        bonus,
        total,
    })
}

/// Add `lambda4` to the highest-scoring token of each non-overlapping k x k
/// tile (ties resolve to the lowest token index). Edge tiles may be ragged.
fn spatial_bonus(base: &[f64], grid: (usize, usize), k: usize, lambda4: f64) -> Vec<f64> {
    let (rows, cols) = grid;
    let mut bonus = vec![0.0; base.len()];
    if lambda4 == 0.0 {
        return bonus;
    }
    let mut tr = 0;
    while tr < rows {
        let mut tc = 0;
        while tc < cols {
            let mut best_idx = usize::MAX;
            let mut best = f64::NEG_INFINITY;
            for r in tr..(tr + k).min(rows) {
                for c in tc..(tc + k).min(cols) {
                    let i = r * cols + c;
                    if base[i] > best {
                        best = base[i];
                        best_idx = i;
                    }
                }
            }
            bonus[best_idx] = lambda4;
            tc += k;
        }
        tr += k;
    }
    bonus
}

/// Alternative (non-attention) importance signals for the score-kind
/// ablation: distance to the cached token, or plain input norm. The reuse
/// and spatial terms apply unchanged.
pub fn score_alternative(
    weights: &SelectorWeights,
    stream: &Array2<f64>,
    cached: &Array2<f64>,
    reuse_counts: &[u32],
    grid: (usize, usize),
) -> Result<ScoreBreakdown> {
    let n = reuse_counts.len();
    if grid.0 * grid.1 != n {
        return Err(Error::Contract(format!("grid {:?} does not cover {n} tokens", grid)));
    }
    weights.validate(n)?;
    let signal: Vec<f64> = match weights.score_kind {
        ScoreKind::Similarity => (0..n)
            .map(|i| {
                let a = stream.row(i);
                let b = cached.row(i);
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    1.0 - dot / (na * nb)
                } else {
                    1.0
                }
            })
            .collect(),
        ScoreKind::Norm => (0..n)
            .map(|i| stream.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect(),
        ScoreKind::Attention => {
            return Err(Error::Contract(
                "attention scoring uses score_tokens, not score_alternative".into(),
            ))
        }
    };
    let s3: Vec<f64> = reuse_counts.iter().map(|&c| f64::from(c)).collect();
    let base: Vec<f64> = (0..n)
        .map(|i| signal[i] + weights.lambda3 * s3[i])
        .collect();
    let bonus = spatial_bonus(&base, grid, weights.neighborhood_k, weights.lambda4);
    let total: Vec<f64> = (0..n).map(|i| base[i] + bonus[i]).collect();
    Ok(ScoreBreakdown {
        s1: signal,
        s2: vec![0.0; n],
        s3,
        bonus,
        total,
    })
}

/// Deterministic top-K selection: descending total score, ties broken by
/// ascending token index. Returns a boolean mask with exactly K true entries.
pub fn select_top_k(scores: &ScoreBreakdown, k: usize) -> Result<Vec<bool>> {
    let n = scores.total.len();
    if k > n {
        return Err(Error::Contract(format!("K = {k} out of range for {n} tokens")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        scores.total[b]
            .partial_cmp(&scores.total[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_weights() -> SelectorWeights {
        SelectorWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.0,
            neighborhood_k: 2,
            score_kind: ScoreKind::Attention,
            entropy_raises_score: true,
        }
    }

    #[test]
    fn uniform_self_attention_gives_unit_s1() {
        let n = 16;
        let map = Array2::from_elem((n, n), 1.0 / n as f64);
        let counts = vec![0u32; n];
        let s = score_tokens(&flat_weights(), Some(&map), None, &counts, (4, 4)).unwrap();
        for v in s.s1 {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_entropy_values() {
        let n = 16;
        let m = 16;
        let mut map = Array2::zeros((n, m));
        // token 0: one-hot row; others uniform
        map[[0, 3]] = 1.0;
        for i in 1..n {
            for j in 0..m {
                map[[i, j]] = 1.0 / m as f64;
            }
        }
        let counts = vec![0u32; n];
        let s = score_tokens(&flat_weights(), None, Some(&map), &counts, (4, 4)).unwrap();
        assert!(s.s2[0].abs() < 1e-9);
        assert!((s.s2[1] - (m as f64).ln()).abs() < 1e-9);
        assert!((s.s2[1] - 2.7725887222397811).abs() < 1e-9);
    }

    #[test]
    fn non_normalized_map_is_rejected() {
        let map = Array2::from_elem((4, 4), 0.3);
        let counts = vec![0u32; 4];
        let err = score_tokens(&flat_weights(), Some(&map), None, &counts, (2, 2));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn top_k_degenerate_and_tie_cases() {
        let totals = vec![0.1, 0.9, 0.9, 0.2, 0.5, 0.9];
        let scores = ScoreBreakdown {
            s1: vec![0.0; 6],
            s2: vec![0.0; 6],
            s3: vec![0.0; 6],
            bonus: vec![0.0; 6],
            total: totals,
        };
        assert_eq!(select_top_k(&scores, 6).unwrap(), vec![true; 6]);
        assert_eq!(select_top_k(&scores, 0).unwrap(), vec![false; 6]);
        let mask = select_top_k(&scores, 3).unwrap();
        assert_eq!(mask, vec![false, true, true, false, false, true]);
        assert!(select_top_k(&scores, 7).is_err());
    }

    #[test]
    fn selection_invariant_under_monotone_transforms() {
        let mut rng = crate::rng::SeededRng::new(11);
        for _ in 0..50 {
            let total: Vec<f64> = (0..12).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
            let base = ScoreBreakdown {
                s1: vec![0.0; 12],
                s2: vec![0.0; 12],
                s3: vec![0.0; 12],
                bonus: vec![0.0; 12],
                total: total.clone(),
            };
            let k = rng.below(13);
            let mask = select_top_k(&base, k).unwrap();
            for transform in [|v: f64| v.exp(), |v: f64| 3.0 * v + 7.0] {
                let mapped = ScoreBreakdown {
                    total: total.iter().map(|&v| transform(v)).collect(),
                    ..base.clone()
                };
                assert_eq!(select_top_k(&mapped, k).unwrap(), mask);
            }
        }
    }

    #[test]
    fn reuse_only_weights_select_oldest_first() {
        let weights = SelectorWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
            lambda4: 0.0,
            neighborhood_k: 2,
            score_kind: ScoreKind::Attention,
            entropy_raises_score: true,
        };
        let counts: Vec<u32> = vec![3, 0, 7, 1, 7, 2, 0, 5, 4, 6, 1, 2, 3, 0, 8, 5];
        let s = score_tokens(&weights, None, None, &counts, (4, 4)).unwrap();
        let mask = select_top_k(&s, 4).unwrap();
        let selected: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        // the 4 largest counts are 8 (idx 14), 7 (idx 2), 7 (idx 4), 6 (idx 9)
        assert_eq!(selected, vec![2, 4, 9, 14]);
    }

    #[test]
    fn spatial_bonus_marks_one_token_per_tile() {
        let weights = SelectorWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.5,
            neighborhood_k: 2,
            score_kind: ScoreKind::Attention,
            entropy_raises_score: true,
        };
        let n = 16;
        let mut map = Array2::zeros((n, n));
        for i in 0..n {
            map[[i, i]] = 1.0;
        }
        let s = score_tokens(&weights, Some(&map), None, &vec![0; n], (4, 4)).unwrap();
        let marked = s.bonus.iter().filter(|&&b| b > 0.0).count();
        assert_eq!(marked, 4); // 4 tiles of 2x2 on a 4x4 grid
        // all-equal base: tie resolves to the lowest index of each tile
        assert!(s.bonus[0] > 0.0);
        assert!(s.bonus[2] > 0.0);
        assert!(s.bonus[8] > 0.0);
        assert!(s.bonus[10] > 0.0);
    }
}
