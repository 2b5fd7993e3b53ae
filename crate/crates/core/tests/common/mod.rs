//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use nextsession::data::{make_split, Catalog, CatalogFeature, DatasetSplit, Polarity, Protocol, Session, SessionItem};
use nextsession::synth::{self, Pattern, SynthConfig};
use nextsession::trainer::TrainConfig;
use nextsession::{Graph, ParamStore, Result, Tensor, Var};
use rand::Rng;

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences on every parameter entry. `f` must be deterministic.
pub fn check_gradients<F>(store: &ParamStore<f64>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut work = store.clone();
    let mut report = GradReport::default();
    for id in store.ids() {
        let dense = analytic.dense(store, id);
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + FD_EPS;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig - FD_EPS;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let err = rel_error(dense.data()[k], numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!(
                    "{}[{k}]: analytic {:.6e}, numeric {:.6e}",
                    store.get(id).name,
                    dense.data()[k],
                    numeric
                );
            }
        }
    }
    Ok(report)
}

pub fn uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Catalog of `n` items with one three-valued attribute.
pub fn small_catalog(n: usize) -> Catalog {
    Catalog {
        raw_ids: (0..n).map(|i| format!("item{i}")).collect(),
        features: vec![CatalogFeature {
            name: "topic".into(),
            values: vec!["a".into(), "b".into(), "c".into()],
            bin_edges: None,
        }],
        item_features: (0..n).map(|i| vec![(i % 3) as u32]).collect(),
    }
}

/// Random sessions of 1..=max_len items, each with at least one positive.
pub fn random_sessions<R: Rng>(rng: &mut R, count: usize, max_len: usize, catalog: usize) -> Vec<Session> {
    let mut ts = 0i64;
    (0..count)
        .map(|s| {
            let len = rng.random_range(1..=max_len);
            let mut items: Vec<u32> = Vec::new();
            while items.len() < len.min(catalog) {
                let it = rng.random_range(0..catalog as u32);
                if !items.contains(&it) {
                    items.push(it);
                }
            }
            Session {
                session_id: format!("s{s}"),
                items: items
                    .iter()
                    .enumerate()
                    .map(|(k, &item)| {
                        ts += 1;
                        SessionItem {
                            item,
                            polarity: if k == 0 || rng.random_bool(0.5) {
                                Polarity::Positive
                            } else {
                                Polarity::Negative
                            },
                            timestamp: ts,
                        }
                    })
                    .collect(),
            }
        })
        .collect()
}

/// A synthetic corpus split by leave-one-session-out, with its catalog.
pub fn synth_split(pattern: Pattern, users: usize, sessions: usize, catalog: usize) -> (DatasetSplit, Catalog) {
    let ds = synth::dataset(&SynthConfig {
        pattern,
        users,
        sessions,
        catalog,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus");
    (make_split(&ds, Protocol::LeaveOneSessionOut, Some(200)), ds.catalog)
}

/// A model small enough to train in milliseconds.
pub fn tiny_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 0.01,
        eval_every: 1,
        ..TrainConfig::default()
    };
    cfg.model.d = 8;
    cfg.model.feature_dim = 4;
    cfg.model.polarity_dim = 4;
    cfg.model.init_std = 0.1;
    cfg.model.sse.layers = 1;
    cfg.model.sse.max_positions = 16;
    cfg.loss.num_negatives = 8;
    cfg
}

/// Every id ranked by a full sort: descending score, ties by ascending id.
pub fn oracle_ranking(scores: &[f64]) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    ids
}

pub fn oracle_recall(scores: &[f64], targets: &[u32], k: usize) -> f64 {
    let ranked = oracle_ranking(scores);
    let top = &ranked[..k.min(ranked.len())];
    targets.iter().filter(|t| top.contains(t)).count() as f64 / targets.len() as f64
}

/// Relevance vector over the whole ranking, discounted and cut at `k`.
pub fn oracle_ndcg(scores: &[f64], targets: &[u32], k: usize) -> f64 {
    let ranked = oracle_ranking(scores);
    let rel: Vec<f64> = ranked.iter().map(|id| if targets.contains(id) { 1.0 } else { 0.0 }).collect();
    let dcg = |rel: &[f64]| -> f64 {
        rel.iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| r / (i as f64 + 2.0).log2())
            .sum()
    };
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(&ideal);
    if best == 0.0 {
        0.0
    } else {
        dcg(&rel) / best
    }
}

/// A small random instance: scores drawn from few levels so ties are
/// common, distinct targets, and a cutoff that may exceed the catalog.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<f64>, Vec<u32>, usize) {
    let n = rng.random_range(1..=30);
    let levels = rng.random_range(1..=6);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5 - 1.0).collect();
    let t = rng.random_range(1..=n);
    let mut targets: Vec<u32> = (0..n as u32).collect();
    for i in 0..t {
        let j = rng.random_range(i..n);
        targets.swap(i, j);
    }
    targets.truncate(t);
    (scores, targets, rng.random_range(1..=n + 5))
}

/// Mean Recall@k of uniformly random scores over a catalog of `n` with
/// `t` random targets.
pub fn random_ranking_recall<R: Rng>(rng: &mut R, trials: usize, n: usize, t: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for _ in 0..trials {
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut targets: Vec<u32> = Vec::with_capacity(t);
        while targets.len() < t {
            let c = rng.random_range(0..n as u32);
            if !targets.contains(&c) {
                targets.push(c);
            }
        }
        let ranked = nextsession::eval::top_k(&scores, k);
        total += nextsession::eval::recall_at_k(&ranked, &targets, k).unwrap();
    }
    total / trials as f64
}
