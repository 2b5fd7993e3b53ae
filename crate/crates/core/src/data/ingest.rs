use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::{Interaction, Polarity};
use crate::error::{Error, Result};

const REQUIRED: [&str; 5] = ["user", "item", "session", "timestamp", "action"];

/// Columns ending in this suffix hold continuous values and get binned.
pub const CONTINUOUS_SUFFIX: &str = ":num";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureColumn {
    pub name: String,
    pub continuous: bool,
}

/// Parsed interaction log. Item ids index `items`, which is sorted so that
/// ids do not depend on row order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RawLog {
    pub interactions: Vec<Interaction>,
    pub items: Vec<String>,
    pub feature_columns: Vec<FeatureColumn>,
}

/// Maps an action label to a polarity: exposure-only events are negative,
/// engagement events positive.
pub fn polarity_of(label: &str) -> Option<Polarity> {
    match label.trim().to_ascii_lowercase().as_str() {
        "exposure" | "impression" | "dislike" => Some(Polarity::Negative),
        "effective_view" | "view" | "click" | "purchase" | "like" => Some(Polarity::Positive),
        _ => None,
    }
}

pub fn ingest(path: impl AsRef<Path>) -> Result<RawLog> {
    let path = path.as_ref();
    ingest_reader(File::open(path)?, path)
}

/// Reads a delimited log with a header row. Several rows for the same
/// `(user, session, item)` collapse into one interaction at the earliest
/// timestamp, positive if any row is positive; an item that was only exposed
/// stays negative.
pub fn ingest_reader<R: Read>(reader: R, origin: impl Into<PathBuf>) -> Result<RawLog> {
    let origin = origin.into();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.clone(),
        line,
        message,
    };

    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?
        .clone();
    // An empty file has no header row at all.
    if headers.is_empty() {
        return Ok(RawLog::default());
    }
    let mut col = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.insert(h.to_string(), i);
    }
    for req in REQUIRED {
        if !col.contains_key(req) {
            return Err(parse_err(1, format!("missing required column `{req}`")));
        }
    }
    let feature_idx: Vec<(usize, FeatureColumn)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !REQUIRED.contains(h))
        .map(|(i, h)| {
            let continuous = h.ends_with(CONTINUOUS_SUFFIX);
            let name = h.trim_end_matches(CONTINUOUS_SUFFIX).to_string();
            (i, FeatureColumn { name, continuous })
        })
        .collect();

    struct Row {
        user: String,
        item: String,
        session: String,
        timestamp: i64,
        polarity: Polarity,
        features: Vec<(String, String)>,
        order: usize,
    }

    let mut rows: Vec<Row> = Vec::new();
    let mut merged: HashMap<(String, String, String), usize> = HashMap::new();
    for (order, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(order + 2, |p| p.line() as usize);
            parse_err(line, format!("malformed row: {e}"))
        })?;
        let line = record.position().map_or(order + 2, |p| p.line() as usize);
        let field = |name: &str| record.get(col[name]).unwrap_or("").to_string();
        let (user, item, session) = (field("user"), field("item"), field("session"));
        if user.is_empty() || item.is_empty() || session.is_empty() {
            return Err(parse_err(line, "empty user, item or session".into()));
        }
        let timestamp: i64 = field("timestamp")
            .parse()
            .map_err(|e| parse_err(line, format!("bad timestamp: {e}")))?;
        let label = field("action");
        let polarity = polarity_of(&label).ok_or(Error::UnknownAction {
            label: label.clone(),
            line,
        })?;
        let features = feature_idx
            .iter()
            .map(|(i, fc)| (fc.name.clone(), record.get(*i).unwrap_or("").to_string()))
            .collect();

        let key = (user.clone(), session.clone(), item.clone());
        if let Some(&at) = merged.get(&key) {
            let prev = &mut rows[at];
            if polarity.is_positive() {
                prev.polarity = Polarity::Positive;
            }
            if timestamp < prev.timestamp {
                prev.timestamp = timestamp;
            }
            continue;
        }
        merged.insert(key, rows.len());
        rows.push(Row {
            user,
            item,
            session,
            timestamp,
            polarity,
            features,
            order,
        });
    }

    let vocab: BTreeSet<&str> = rows.iter().map(|r| r.item.as_str()).collect();
    let items: Vec<String> = vocab.into_iter().map(str::to_string).collect();
    let index: HashMap<&str, u32> = items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();

    rows.sort_by(|a, b| {
        (a.user.as_str(), a.timestamp, a.order).cmp(&(b.user.as_str(), b.timestamp, b.order))
    });
    let interactions = rows
        .iter()
        .map(|r| Interaction {
            user_id: r.user.clone(),
            item_id: index[r.item.as_str()],
            session_id: r.session.clone(),
            timestamp: r.timestamp,
            polarity: r.polarity,
            side_features: r.features.clone(),
        })
        .collect();

    Ok(RawLog {
        interactions,
        items,
        feature_columns: feature_idx.into_iter().map(|(_, fc)| fc).collect(),
    })
}
