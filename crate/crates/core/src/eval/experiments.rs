//! Multi-run harnesses: the rank-loss weight sweep and the data-scaling run.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport, DEFAULT_CUTOFFS};
use crate::data::{Catalog, DatasetSplit};
use crate::error::{Error, Result};
use crate::trainer::{config_hash, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Trains and evaluates one model per `alpha`, all from `cfg.seed`. A failed
/// cell is recorded and the sweep moves on.
pub fn alpha_sweep(split: &DatasetSplit, catalog: &Catalog, cfg: &TrainConfig, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Invalid("alpha sweep needs at least one alpha".into()));
    }
    Ok(alphas
        .iter()
        .map(|&alpha| {
            let mut cell = cfg.clone();
            cell.loss.alpha = alpha;
            let run = train(split, catalog, &cell, |_| {})
                .and_then(|out| evaluate(&out.model, split, &DEFAULT_CUTOFFS, &config_hash(&cell.model)));
            match run {
                Ok(report) => SweepRow {
                    alpha,
                    report: Some(report),
                    error: None,
                },
                Err(e) => {
                    warn!("alpha {alpha}: {e}");
                    SweepRow {
                        alpha,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub fraction: f64,
    pub train_items: usize,
    pub recall_at_500: Option<f64>,
    pub skipped: Option<String>,
}

/// Keeps each user's training sessions that start no later than the
/// `fraction` quantile of all training-session start times. Targets are
/// untouched.
pub fn time_prefix(split: &DatasetSplit, fraction: f64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut starts: Vec<i64> = split
        .users
        .iter()
        .flat_map(|u| u.train.iter().map(|s| s.start()))
        .collect();
    if starts.is_empty() {
        return Err(Error::Degenerate("no training sessions".into()));
    }
    starts.sort_unstable();
    let idx = ((fraction * starts.len() as f64).ceil() as usize).clamp(1, starts.len()) - 1;
    let cutoff = starts[idx];
    let mut out = split.clone();
    for u in &mut out.users {
        u.train.retain(|s| s.start() <= cutoff);
    }
    Ok(out)
}

fn train_items(split: &DatasetSplit) -> usize {
    split
        .users
        .iter()
        .flat_map(|u| &u.train)
        .map(|s| s.items.len())
        .sum()
}

/// Trains on chronological prefixes of the training data and evaluates every
/// model on the same held-out final sessions, with each user's full history
/// as context. Rows come back sorted by training-set size.
pub fn scaling_run(split: &DatasetSplit, catalog: &Catalog, cfg: &TrainConfig, fractions: &[f64]) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let prefix = time_prefix(split, fraction)?;
        let items = train_items(&prefix);
        let supervised = prefix.users.iter().any(|u| u.train.len() >= 2);
        let row = if !supervised {
            ScalingRow {
                fraction,
                train_items: items,
                recall_at_500: None,
                skipped: Some("no user has two training sessions".into()),
            }
        } else {
            let run = train(&prefix, catalog, cfg, |_| {})
                .and_then(|out| evaluate(&out.model, split, &DEFAULT_CUTOFFS, &config_hash(&cfg.model)));
            match run {
                Ok(report) => ScalingRow {
                    fraction,
                    train_items: items,
                    recall_at_500: Some(report.recall(500)),
                    skipped: None,
                },
                Err(e) => ScalingRow {
                    fraction,
                    train_items: items,
                    recall_at_500: None,
                    skipped: Some(e.to_string()),
                },
            }
        };
        rows.push(row);
    }
    rows.sort_by(|a, b| a.train_items.cmp(&b.train_items).then(a.fraction.total_cmp(&b.fraction)));
    Ok(rows)
}
