//! Interaction logs, sessionization, filtering and evaluation splits.

mod binning;
mod filter;
mod ingest;
mod split;
mod store;

use serde::{Deserialize, Serialize};

pub use binning::EqualFrequencyBinner;
pub use filter::{filter_dataset, filter_sequences, sessionize, FilterConfig};
pub use ingest::{ingest, ingest_reader, polarity_of, RawLog};
pub use split::{make_split, truncate_positives, DatasetSplit, Protocol, SplitStats, UserSplit};
pub use store::{read_dataset, write_dataset, DatasetMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn is_positive(self) -> bool {
        self == Polarity::Positive
    }
}

/// One user–item event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    /// Index into the log's item vocabulary.
    pub item_id: u32,
    pub session_id: String,
    pub timestamp: i64,
    pub polarity: Polarity,
    pub side_features: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionItem {
    pub item: u32,
    pub polarity: Polarity,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub items: Vec<SessionItem>,
}

impl Session {
    pub fn start(&self) -> i64 {
        self.items.first().map_or(i64::MAX, |i| i.timestamp)
    }

    pub fn positives(&self) -> impl Iterator<Item = u32> + '_ {
        self.items
            .iter()
            .filter(|i| i.polarity.is_positive())
            .map(|i| i.item)
    }

    pub fn negatives(&self) -> impl Iterator<Item = u32> + '_ {
        self.items
            .iter()
            .filter(|i| !i.polarity.is_positive())
            .map(|i| i.item)
    }

    pub fn has_positive(&self) -> bool {
        self.items.iter().any(|i| i.polarity.is_positive())
    }
}

/// A user's chronological interactions grouped into sessions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionizedSequence {
    pub user_id: String,
    pub sessions: Vec<Session>,
}

impl SessionizedSequence {
    pub fn num_interactions(&self) -> usize {
        self.sessions.iter().map(|s| s.items.len()).sum()
    }

    pub fn num_positives(&self) -> usize {
        self.sessions.iter().map(|s| s.positives().count()).sum()
    }
}

/// A discrete item attribute. Continuous attributes carry the bin edges used
/// to discretize them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogFeature {
    pub name: String,
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_edges: Option<Vec<f64>>,
}

/// Dense item catalog after filtering.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Catalog {
    /// Raw item key for each dense id.
    pub raw_ids: Vec<String>,
    pub features: Vec<CatalogFeature>,
    /// `item_features[item][f]` indexes `features[f].values`.
    pub item_features: Vec<Vec<u32>>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_ids.is_empty()
    }

    pub fn feature_vocab_sizes(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.values.len()).collect()
    }
}

/// Filtered, densely indexed sequences plus their catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SessionizedSequence>,
    pub catalog: Catalog,
}

impl Dataset {
    pub fn num_sessions(&self) -> usize {
        self.sequences.iter().map(|s| s.sessions.len()).sum()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.num_interactions()).sum()
    }
}
