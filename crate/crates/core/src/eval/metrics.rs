//! Exact top-K ranking and binary-relevance retrieval metrics.

use std::cmp::Ordering;

use crate::error::{Error, Result};

fn key(score: f64) -> f64 {
    if score.is_nan() {
        f64::NEG_INFINITY
    } else {
        score
    }
}

/// Descending score, then ascending id. NaN ranks last.
fn rank_order(scores: &[f64], a: u32, b: u32) -> Ordering {
    key(scores[b as usize])
        .total_cmp(&key(scores[a as usize]))
        .then(a.cmp(&b))
}

/// The `k` highest-scoring ids, best first. `k` is clamped to the catalog.
pub fn top_k(scores: &[f64], k: usize) -> Vec<u32> {
    let k = k.min(scores.len());
    let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        ids.truncate(k);
    }
    ids.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    ids
}

fn check_targets(targets: &[u32]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Invalid("metric needs at least one target".into()));
    }
    Ok(())
}

fn hits<'a>(ranked: &'a [u32], targets: &'a [u32], k: usize) -> impl Iterator<Item = usize> + 'a {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(move |(_, id)| targets.contains(id))
        .map(|(p, _)| p)
}

/// `|ranked[..k] ∩ targets| / |targets|`.
pub fn recall_at_k(ranked: &[u32], targets: &[u32], k: usize) -> Result<f64> {
    check_targets(targets)?;
    Ok(hits(ranked, targets, k).count() as f64 / targets.len() as f64)
}

/// Binary-relevance NDCG with the ideal DCG taken over
/// `min(k, |targets|)` leading hits.
pub fn ndcg_at_k(ranked: &[u32], targets: &[u32], k: usize) -> Result<f64> {
    check_targets(targets)?;
    let gain = |p: usize| 1.0 / ((p + 2) as f64).log2();
    let dcg = hits(ranked, targets, k).map(gain).fold(0.0, |a, g| a + g);
    let idcg = (0..k.min(targets.len())).map(gain).fold(0.0, |a, g| a + g);
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}
