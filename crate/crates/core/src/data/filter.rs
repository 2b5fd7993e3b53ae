use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    Catalog, CatalogFeature, Dataset, EqualFrequencyBinner, RawLog, Session, SessionItem,
    SessionizedSequence,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Minimum feedback count (positive or negative) per item and per user.
    pub min_feedback: usize,
    pub min_sessions: usize,
    /// Bin count for continuous side features.
    pub bins: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_feedback: 5,
            min_sessions: 3,
            bins: 10,
        }
    }
}

/// Groups a sorted log by user, then by session id. Sessions are ordered by
/// their earliest timestamp and items inside a session by time.
pub fn sessionize(log: &RawLog) -> Vec<SessionizedSequence> {
    let mut out: Vec<SessionizedSequence> = Vec::new();
    let mut i = 0;
    let inter = &log.interactions;
    while i < inter.len() {
        let user = &inter[i].user_id;
        let mut j = i;
        let mut sessions: Vec<Session> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        while j < inter.len() && &inter[j].user_id == user {
            let it = &inter[j];
            let at = *index.entry(it.session_id.as_str()).or_insert_with(|| {
                sessions.push(Session {
                    session_id: it.session_id.clone(),
                    items: Vec::new(),
                });
                sessions.len() - 1
            });
            sessions[at].items.push(SessionItem {
                item: it.item_id,
                polarity: it.polarity,
                timestamp: it.timestamp,
            });
            j += 1;
        }
        for s in &mut sessions {
            s.items.sort_by_key(|x| x.timestamp);
        }
        sessions.sort_by_key(Session::start);
        out.push(SessionizedSequence {
            user_id: user.clone(),
            sessions,
        });
        i = j;
    }
    out
}

fn size(seqs: &[SessionizedSequence]) -> (usize, usize, usize) {
    (
        seqs.len(),
        seqs.iter().map(|s| s.sessions.len()).sum(),
        seqs.iter().map(|s| s.num_interactions()).sum(),
    )
}

/// Iterates the item/user/session thresholds to a fixpoint, then remaps the
/// surviving item ids densely in ascending order of their old ids.
///
/// Returns the filtered sequences and, for each new id, the old id.
pub fn filter_sequences(
    mut seqs: Vec<SessionizedSequence>,
    cfg: &FilterConfig,
) -> Result<(Vec<SessionizedSequence>, Vec<u32>)> {
    loop {
        let before = size(&seqs);

        let mut item_counts: HashMap<u32, usize> = HashMap::new();
        for s in seqs.iter().flat_map(|u| &u.sessions) {
            for it in &s.items {
                *item_counts.entry(it.item).or_default() += 1;
            }
        }
        for u in &mut seqs {
            for s in &mut u.sessions {
                s.items.retain(|it| item_counts[&it.item] >= cfg.min_feedback);
            }
        }
        seqs.retain(|u| u.num_interactions() >= cfg.min_feedback);
        for u in &mut seqs {
            u.sessions.retain(|s| s.has_positive());
        }
        seqs.retain(|u| u.sessions.len() >= cfg.min_sessions);

        if size(&seqs) == before {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::Degenerate(format!(
            "no users left after filtering (min_feedback={}, min_sessions={})",
            cfg.min_feedback, cfg.min_sessions
        )));
    }

    let kept: BTreeSet<u32> = seqs
        .iter()
        .flat_map(|u| &u.sessions)
        .flat_map(|s| s.items.iter().map(|i| i.item))
        .collect();
    let old_ids: Vec<u32> = kept.into_iter().collect();
    let remap: HashMap<u32, u32> = old_ids
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();
    for it in seqs
        .iter_mut()
        .flat_map(|u| &mut u.sessions)
        .flat_map(|s| &mut s.items)
    {
        it.item = remap[&it.item];
    }
    Ok((seqs, old_ids))
}

/// Sessionizes, filters and builds the dense catalog, including side-feature
/// vocabularies. Item attributes are taken from each item's earliest row.
pub fn filter_dataset(log: &RawLog, cfg: &FilterConfig) -> Result<Dataset> {
    let (sequences, old_ids) = filter_sequences(sessionize(log), cfg)?;

    let mut first_seen: BTreeMap<u32, &[(String, String)]> = BTreeMap::new();
    for it in &log.interactions {
        first_seen.entry(it.item_id).or_insert(&it.side_features);
    }
    let raw_values: Vec<&[(String, String)]> = old_ids.iter().map(|id| first_seen[id]).collect();

    let mut features = Vec::new();
    let mut columns: Vec<Vec<u32>> = Vec::new();
    for (f, fc) in log.feature_columns.iter().enumerate() {
        let cells: Vec<&str> = raw_values.iter().map(|v| v[f].1.as_str()).collect();
        if fc.continuous {
            let parsed: Vec<f64> = cells
                .iter()
                .map(|c| c.parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            let binner = EqualFrequencyBinner::fit(&parsed, cfg.bins);
            columns.push(parsed.iter().map(|&v| binner.bin(v) as u32).collect());
            features.push(CatalogFeature {
                name: fc.name.clone(),
                values: (0..binner.num_bins()).map(|b| format!("bin{b}")).collect(),
                bin_edges: Some(binner.edges),
            });
        } else {
            let vocab: Vec<String> = cells
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(str::to_string)
                .collect();
            let index: HashMap<&str, u32> = vocab
                .iter()
                .enumerate()
                .map(|(i, v)| (v.as_str(), i as u32))
                .collect();
            columns.push(cells.iter().map(|c| index[c]).collect());
            features.push(CatalogFeature {
                name: fc.name.clone(),
                values: vocab,
                bin_edges: None,
            });
        }
    }
    let item_features = (0..old_ids.len())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect();

    Ok(Dataset {
        sequences,
        catalog: Catalog {
            raw_ids: old_ids
                .iter()
                .map(|&id| log.items[id as usize].clone())
                .collect(),
            features,
            item_features,
        },
    })
}
