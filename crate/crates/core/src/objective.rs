//! Dot-product scoring, negative sampling and the training losses.
//!
//! Position `i` of a sequence encoded from sessions `0..=i` is supervised by
//! the positives of session `i + 1`. Each positive is contrasted against a
//! set of negatives with softmax cross-entropy: uniformly sampled catalog
//! items for the retrieval loss, the target session's exposure-only items
//! for the rank loss.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Session;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ForwardCtx;
use crate::tensor::{dot, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Rank-loss weight.
    pub alpha: f64,
    /// Sampled negatives per position.
    pub num_negatives: usize,
    pub sampling: Sampling,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            num_negatives: 128,
            sampling: Sampling::Uniform,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("loss.alpha = {} must be >= 0", self.alpha)));
        }
        if self.num_negatives == 0 {
            return Err(Error::Config("loss.num_negatives must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionTargets {
    pub positives: Vec<u32>,
    pub in_session_negatives: Vec<u32>,
    pub sampled_negatives: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTargets {
    pub positions: Vec<PositionTargets>,
}

impl TrainingTargets {
    /// Targets for positions `0..sessions.len() - 1`.
    pub fn from_sessions<R: Rng + ?Sized>(
        sessions: &[Session],
        cfg: &LossConfig,
        catalog_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let positions = sessions
            .iter()
            .skip(1)
            .map(|s| PositionTargets {
                positives: s.positives().collect(),
                in_session_negatives: s.negatives().collect(),
                sampled_negatives: sample_negatives(catalog_size, cfg.num_negatives, rng),
            })
            .collect();
        Ok(Self { positions })
    }

    pub fn num_positives(&self) -> usize {
        self.positions.iter().map(|p| p.positives.len()).sum()
    }

    /// Every item any position needs a score for, ascending.
    pub fn candidates(&self) -> Vec<u32> {
        let mut set = BTreeSet::new();
        for p in &self.positions {
            set.extend(&p.positives);
            set.extend(&p.in_session_negatives);
            set.extend(&p.sampled_negatives);
        }
        set.into_iter().collect()
    }
}

/// `C` ids drawn uniformly with replacement from `0..catalog_size`.
pub fn sample_negatives<R: Rng + ?Sized>(catalog_size: usize, c: usize, rng: &mut R) -> Vec<u32> {
    assert!(catalog_size >= 1, "empty catalog");
    (0..c).map(|_| rng.random_range(0..catalog_size as u32)).collect()
}

/// Dot product of `user` with every row of `items`.
pub fn score<T: Scalar>(user: &[T], items: &Tensor<T>) -> Vec<T> {
    (0..items.rows()).map(|r| dot(user, items.row(r))).collect()
}

/// Scores of every position against a candidate list.
pub struct ScoreTable {
    scores: Var,
    column: HashMap<u32, usize>,
}

impl ScoreTable {
    /// `outputs` is `m × d`, `item_vecs` holds one row per entry of `ids`.
    pub fn new<T: Scalar>(g: &mut Graph<'_, T>, outputs: Var, item_vecs: Var, ids: &[u32]) -> Result<Self> {
        let scores = g.matmul_t(outputs, item_vecs)?;
        Self::from_scores(g, scores, ids)
    }

    pub fn from_scores<T: Scalar>(g: &Graph<'_, T>, scores: Var, ids: &[u32]) -> Result<Self> {
        if g.value(scores).cols() != ids.len() {
            return Err(Error::Shape(format!(
                "score table has {} columns for {} candidates",
                g.value(scores).cols(),
                ids.len()
            )));
        }
        let column = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        Ok(Self { scores, column })
    }

    pub fn scores(&self) -> Var {
        self.scores
    }

    fn col(&self, item: u32) -> Result<usize> {
        self.column
            .get(&item)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("item {item} missing from the score table")))
    }

    /// `Σ_p -log(e^{s_p} / (e^{s_p} + Σ_n e^{s_n}))`, one logit row per
    /// positive. All rows in one call have the same number of negatives.
    fn contrast<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        rows: &[(usize, &[u32], &[u32])],
    ) -> Result<Option<Var>> {
        let Some(width) = rows.first().map(|r| 1 + r.2.len()) else {
            return Ok(None);
        };
        let mut index = Vec::new();
        let mut count = 0;
        for &(position, positives, negatives) in rows {
            debug_assert_eq!(1 + negatives.len(), width);
            let neg_cols = negatives.iter().map(|&n| self.col(n)).collect::<Result<Vec<_>>>()?;
            for &p in positives {
                index.push((position, self.col(p)?));
                index.extend(neg_cols.iter().map(|&c| (position, c)));
                count += 1;
            }
        }
        if count == 0 {
            return Ok(None);
        }
        let logits = g.gather_elements(self.scores, index, count, width)?;
        g.softmax_xent(logits, vec![0; count]).map(Some)
    }
}

fn zero<T: Scalar>(g: &mut Graph<'_, T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Sampled cross-entropy against the shared sampled negatives, summed over
/// positions and positives.
pub fn retrieval_loss<T: Scalar>(g: &mut Graph<'_, T>, table: &ScoreTable, targets: &TrainingTargets) -> Result<Var> {
    if let Some(i) = targets.positions.iter().position(|p| p.positives.is_empty()) {
        return Err(Error::Invalid(format!("supervised position {i} has no positives")));
    }
    let rows: Vec<_> = targets
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.positives.as_slice(), p.sampled_negatives.as_slice()))
        .collect();
    match table.contrast(g, &rows)? {
        Some(v) => Ok(v),
        None => Ok(zero(g)),
    }
}

/// Cross-entropy of each positive against the target session's in-session
/// negatives; positions without negatives contribute 0.
pub fn rank_loss<T: Scalar>(g: &mut Graph<'_, T>, table: &ScoreTable, targets: &TrainingTargets) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, p) in targets.positions.iter().enumerate() {
        if p.in_session_negatives.is_empty() {
            continue;
        }
        if let Some(term) = table.contrast(g, &[(i, p.positives.as_slice(), p.in_session_negatives.as_slice())])? {
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(total.unwrap_or_else(|| zero(g)))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub retrieval: Var,
    pub rank: Var,
    pub num_positives: usize,
}

/// `retrieval + alpha * rank`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    table: &ScoreTable,
    targets: &TrainingTargets,
    alpha: f64,
) -> Result<LossParts> {
    let retrieval = retrieval_loss(g, table, targets)?;
    let rank = rank_loss(g, table, targets)?;
    let weighted = g.scale(rank, alpha);
    let total = g.add(retrieval, weighted)?;
    Ok(LossParts {
        total,
        retrieval,
        rank,
        num_positives: targets.num_positives(),
    })
}

/// Loss of one user's training sessions. Returns `None` when fewer than two
/// sessions leave nothing to supervise.
pub fn sequence_loss<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    sessions: &[Session],
    cfg: &LossConfig,
    negatives_rng: &mut R,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Option<LossParts>> {
    let max = model.config.sse.max_positions;
    let window = &sessions[sessions.len().saturating_sub(max + 1)..];
    if window.len() < 2 {
        return Ok(None);
    }
    let targets = TrainingTargets::from_sessions(window, cfg, model.num_items(), negatives_rng)?;
    let outputs = model.encode_user(g, &window[..window.len() - 1], ctx)?;
    let ids = targets.candidates();
    let items = model.embedding.embed_catalog(g, &ids)?;
    let table = ScoreTable::new(g, outputs, items, &ids)?;
    total_loss(g, &table, &targets, cfg.alpha).map(Some)
}
