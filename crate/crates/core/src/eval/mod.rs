//! Unsampled top-K evaluation over the full catalog.

mod complexity;
mod experiments;
mod metrics;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Protocol, Session};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::score;
use crate::tensor::Scalar;

pub use complexity::{complexity_bench, ComplexityReport};
pub use experiments::{alpha_sweep, scaling_run, time_prefix, ScalingRow, SweepRow};
pub use metrics::{ndcg_at_k, recall_at_k, top_k};

pub const DEFAULT_CUTOFFS: [usize; 3] = [10, 100, 500];

pub const RECALL_DEFINITION: &str = "recall@K = |top-K ∩ targets| / |targets|";
pub const NDCG_DEFINITION: &str =
    "ndcg@K: binary relevance, DCG = Σ_{hits at rank p ≤ K} 1/log2(p+1), IDCG over min(K, |targets|) ideal hits";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub num_users: usize,
    pub metrics: Vec<CutoffMetrics>,
    pub config_hash: String,
    pub recall_definition: String,
    pub ndcg_definition: String,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.ndcg)
    }

    /// Means over users, accumulated in user order.
    pub fn from_users(protocol: Protocol, cutoffs: &[usize], users: &[UserMetrics], config_hash: &str) -> Self {
        let n = users.len().max(1) as f64;
        let metrics = cutoffs
            .iter()
            .enumerate()
            .map(|(c, &k)| CutoffMetrics {
                k,
                recall: users.iter().map(|u| u.recall[c]).sum::<f64>() / n,
                ndcg: users.iter().map(|u| u.ndcg[c]).sum::<f64>() / n,
            })
            .collect();
        Self {
            protocol,
            num_users: users.len(),
            metrics,
            config_hash: config_hash.to_string(),
            recall_definition: RECALL_DEFINITION.into(),
            ndcg_definition: NDCG_DEFINITION.into(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# protocol: {}  users: {}", self.protocol, self.num_users);
        let _ = writeln!(out, "# {}", self.recall_definition);
        let _ = writeln!(out, "# {}", self.ndcg_definition);
        let _ = writeln!(out, "{:>6}  {:>10}  {:>10}", "K", "Recall@K", "NDCG@K");
        for m in &self.metrics {
            let _ = writeln!(out, "{:>6}  {:>10.6}  {:>10.6}", m.k, m.recall, m.ndcg);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// One ranking query: the interaction history and the held-out items.
#[derive(Clone, Copy, Debug)]
pub struct EvalCase<'a> {
    pub context: &'a [Session],
    pub targets: &'a [u32],
}

/// Full-catalog scores for the user vector of `context`.
pub fn catalog_scores<T: Scalar>(model: &Model<T>, items: &crate::tensor::Tensor<T>, context: &[Session]) -> Result<Vec<f64>> {
    let user = model.user_vector(context)?;
    Ok(score(&user, items).into_iter().map(|s| s.to_f64_lossy()).collect())
}

/// Per-case metrics at each cutoff, in case order. Runs on the current
/// rayon pool.
pub fn evaluate_cases<T: Scalar>(model: &Model<T>, cases: &[EvalCase<'_>], cutoffs: &[usize]) -> Result<Vec<UserMetrics>> {
    let items = model.item_vectors()?;
    let deepest = cutoffs.iter().copied().max().unwrap_or(0);
    cases
        .par_iter()
        .map(|case| {
            let scores = catalog_scores(model, &items, case.context)?;
            let ranked = top_k(&scores, deepest);
            let recall = cutoffs
                .iter()
                .map(|&k| recall_at_k(&ranked, case.targets, k))
                .collect::<Result<_>>()?;
            let ndcg = cutoffs
                .iter()
                .map(|&k| ndcg_at_k(&ranked, case.targets, k))
                .collect::<Result<_>>()?;
            Ok(UserMetrics { recall, ndcg })
        })
        .collect()
}

/// Ranks the full catalog for every user in `split` from their training view.
pub fn evaluate<T: Scalar>(model: &Model<T>, split: &DatasetSplit, cutoffs: &[usize], config_hash: &str) -> Result<EvalReport> {
    if split.catalog_size != model.num_items() {
        return Err(Error::ConfigMismatch {
            field: "catalog_size".into(),
            expected: model.num_items().to_string(),
            found: split.catalog_size.to_string(),
        });
    }
    let cases: Vec<EvalCase<'_>> = split
        .users
        .iter()
        .map(|u| EvalCase {
            context: &u.train,
            targets: &u.targets,
        })
        .collect();
    let users = evaluate_cases(model, &cases, cutoffs)?;
    Ok(EvalReport::from_users(split.protocol, cutoffs, &users, config_hash))
}
