//! Processed dataset directory.
//!
//! ```text
//! <dir>/interactions.bin   columnar: user u32[n] | session u32[n] | item u32[n]
//!                          | polarity u8[n] | timestamp i64[n]
//! <dir>/sessions.csv       user_index,session_index,user_id,session_id
//! <dir>/item_map.csv       dense_id,raw_item,<feature columns...>
//! <dir>/features.json      side-feature vocabularies and bin edges
//! <dir>/stats.json         SplitStats of the leave-one-session-out split
//! <dir>/meta.json          format version and preprocessing parameters
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    make_split, Catalog, CatalogFeature, Dataset, FilterConfig, Polarity, Protocol, Session,
    SessionItem, SessionizedSequence,
};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NSDATA\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub max_positive_length: Option<usize>,
    pub filter: FilterConfig,
}

impl DatasetMeta {
    pub fn new(max_positive_length: Option<usize>, filter: FilterConfig) -> Self {
        Self {
            format_version: VERSION,
            max_positive_length,
            filter,
        }
    }
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut user = Vec::new();
    let mut session = Vec::new();
    let mut item = Vec::new();
    let mut polarity = Vec::new();
    let mut timestamp = Vec::new();
    let mut sessions_csv = csv::Writer::from_path(dir.join("sessions.csv"))?;
    sessions_csv.write_record(["user_index", "session_index", "user_id", "session_id"])?;
    for (u, seq) in ds.sequences.iter().enumerate() {
        for (s, sess) in seq.sessions.iter().enumerate() {
            sessions_csv.write_record([
                u.to_string(),
                s.to_string(),
                seq.user_id.clone(),
                sess.session_id.clone(),
            ])?;
            for it in &sess.items {
                user.push(u as u32);
                session.push(s as u32);
                item.push(it.item);
                polarity.push(it.polarity.is_positive() as u8);
                timestamp.push(it.timestamp);
            }
        }
    }
    sessions_csv.flush()?;

    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(user.len() as u64);
    user.iter().for_each(|&v| w.u32(v));
    session.iter().for_each(|&v| w.u32(v));
    item.iter().for_each(|&v| w.u32(v));
    polarity.iter().for_each(|&v| w.u8(v));
    timestamp.iter().for_each(|&v| w.i64(v));
    fs::write(dir.join("interactions.bin"), w.finish())?;

    let mut items_csv = csv::Writer::from_path(dir.join("item_map.csv"))?;
    let mut header = vec!["dense_id".to_string(), "raw_item".to_string()];
    header.extend(ds.catalog.features.iter().map(|f| f.name.clone()));
    items_csv.write_record(&header)?;
    for (i, raw) in ds.catalog.raw_ids.iter().enumerate() {
        let mut row = vec![i.to_string(), raw.clone()];
        for (f, feat) in ds.catalog.features.iter().enumerate() {
            row.push(feat.values[ds.catalog.item_features[i][f] as usize].clone());
        }
        items_csv.write_record(&row)?;
    }
    items_csv.flush()?;

    fs::write(
        dir.join("features.json"),
        serde_json::to_string_pretty(&ds.catalog.features)?,
    )?;
    let split = make_split(ds, Protocol::LeaveOneSessionOut, meta.max_positive_length);
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&split.stats)?)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, DatasetMeta)> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta.format_version != VERSION {
        return Err(Error::Invalid(format!(
            "dataset format version {} unsupported (expected {VERSION})",
            meta.format_version
        )));
    }
    let features: Vec<CatalogFeature> =
        serde_json::from_slice(&fs::read(dir.join("features.json"))?)?;

    let mut raw_ids = Vec::new();
    let mut item_features = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("item_map.csv"))?;
    for rec in rdr.records() {
        let rec = rec?;
        raw_ids.push(rec.get(1).unwrap_or_default().to_string());
        let mut values = Vec::with_capacity(features.len());
        for (f, feat) in features.iter().enumerate() {
            let cell = rec.get(2 + f).unwrap_or_default();
            let idx = feat
                .values
                .iter()
                .position(|v| v == cell)
                .ok_or_else(|| Error::Invalid(format!("item_map.csv: unknown {} value {cell:?}", feat.name)))?;
            values.push(idx as u32);
        }
        item_features.push(values);
    }

    let mut sequences: Vec<SessionizedSequence> = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("sessions.csv"))?;
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<usize> {
            rec.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::Invalid(format!("sessions.csv: {e}")))
        };
        let (u, s) = (parse(0)?, parse(1)?);
        if u == sequences.len() {
            sequences.push(SessionizedSequence {
                user_id: rec.get(2).unwrap_or_default().to_string(),
                sessions: Vec::new(),
            });
        }
        let seq = sequences
            .get_mut(u)
            .filter(|q| q.sessions.len() == s)
            .ok_or_else(|| Error::Invalid("sessions.csv: rows out of order".into()))?;
        seq.sessions.push(Session {
            session_id: rec.get(3).unwrap_or_default().to_string(),
            items: Vec::new(),
        });
    }

    let bytes = fs::read(dir.join("interactions.bin"))?;
    let corrupt = |e: crate::codec::DecodeError| Error::Invalid(format!("interactions.bin: {e}"));
    let mut r = Reader::new(&bytes);
    if r.take(8, "magic").map_err(corrupt)? != MAGIC {
        return Err(Error::Invalid("interactions.bin: bad magic".into()));
    }
    let version = r.u32("version").map_err(corrupt)?;
    if version != VERSION {
        return Err(Error::Invalid(format!("interactions.bin: version {version}")));
    }
    let n = r.len_prefix(21, "row count").map_err(corrupt)?;
    let mut col_u32 = |what: &str| -> Result<Vec<u32>> {
        (0..n).map(|_| r.u32(what).map_err(corrupt)).collect()
    };
    let users = col_u32("user column")?;
    let sessions = col_u32("session column")?;
    let items = col_u32("item column")?;
    let polarity: Vec<u8> = (0..n)
        .map(|_| r.u8("polarity column").map_err(corrupt))
        .collect::<Result<_>>()?;
    let timestamps: Vec<i64> = (0..n)
        .map(|_| r.i64("timestamp column").map_err(corrupt))
        .collect::<Result<_>>()?;
    for k in 0..n {
        let sess = sequences
            .get_mut(users[k] as usize)
            .and_then(|q| q.sessions.get_mut(sessions[k] as usize))
            .ok_or_else(|| Error::Invalid(format!("interactions.bin: row {k} references unknown session")))?;
        if items[k] as usize >= raw_ids.len() {
            return Err(Error::OutOfVocabulary {
                table: "item".into(),
                id: items[k] as usize,
                size: raw_ids.len(),
            });
        }
        sess.items.push(SessionItem {
            item: items[k],
            polarity: if polarity[k] == 1 {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
            timestamp: timestamps[k],
        });
    }

    Ok((
        Dataset {
            sequences,
            catalog: Catalog {
                raw_ids,
                features,
                item_features,
            },
        },
        meta,
    ))
}
