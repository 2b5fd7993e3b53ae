//! Synthetic interaction logs with known structure, written in the same
//! delimited format that [`crate::data::ingest`] reads.
//!
//! Timestamps interleave users (`(session * users + user) * 100 + slot`), so a
//! time prefix of the log holds the same share of every user's sessions.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{filter_dataset, ingest_reader, Dataset, FilterConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    /// Every session repeats the user's first session.
    CopyLastSession,
    /// Every session is the previous one shifted by one catalog position.
    RotateCatalog,
    /// Items are grouped by topic; each user clicks a private subset of the
    /// topics they follow and is shown, without clicking, the rest of them.
    HardNegativeSessions,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::CopyLastSession => "copy-last-session",
            Pattern::RotateCatalog => "rotate-catalog",
            Pattern::HardNegativeSessions => "hard-negative-sessions",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy-last-session" => Ok(Pattern::CopyLastSession),
            "rotate-catalog" => Ok(Pattern::RotateCatalog),
            "hard-negative-sessions" => Ok(Pattern::HardNegativeSessions),
            other => Err(Error::Invalid(format!(
                "unknown pattern {other:?} (copy-last-session, rotate-catalog, hard-negative-sessions)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub pattern: Pattern,
    pub users: usize,
    pub sessions: usize,
    pub catalog: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Items per topic (hard-negative pattern).
    pub topic_size: usize,
    /// Items per followed topic a user clicks (hard-negative pattern).
    pub good_per_topic: usize,
    /// Topics each user follows (hard-negative pattern).
    pub user_topics: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pattern: Pattern::CopyLastSession,
            users: 200,
            sessions: 10,
            catalog: 500,
            positives: 5,
            negatives: 3,
            topic_size: 20,
            good_per_topic: 5,
            user_topics: 2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthRow {
    pub user: usize,
    pub session: usize,
    pub item: usize,
    pub timestamp: i64,
    pub positive: bool,
    pub topic: Option<usize>,
}

fn item_name(i: usize) -> String {
    format!("i{i:06}")
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.sessions == 0 || self.catalog == 0 || self.positives == 0 {
            return Err(Error::Invalid("users, sessions, catalog and positives must be positive".into()));
        }
        if self.positives + self.negatives >= 100 {
            return Err(Error::Invalid("at most 99 items per session".into()));
        }
        match self.pattern {
            Pattern::CopyLastSession | Pattern::RotateCatalog => {
                if self.positives + self.negatives > self.catalog {
                    return Err(Error::Invalid("a session needs more distinct items than the catalog has".into()));
                }
            }
            Pattern::HardNegativeSessions => {
                let topics = self.catalog / self.topic_size.max(1);
                if self.topic_size == 0
                    || self.good_per_topic == 0
                    || self.good_per_topic >= self.topic_size
                    || self.user_topics == 0
                    || self.user_topics > topics
                {
                    return Err(Error::Invalid(format!(
                        "hard-negative pattern needs 0 < good_per_topic < topic_size and 0 < user_topics <= {topics} topics"
                    )));
                }
                if self.positives > self.user_topics * self.good_per_topic
                    || self.negatives > self.user_topics * (self.topic_size - self.good_per_topic)
                {
                    return Err(Error::Invalid("not enough topic items for the requested session size".into()));
                }
            }
        }
        Ok(())
    }
}

/// Generates the log, ordered by timestamp.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthRow>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.users * cfg.sessions * (cfg.positives + cfg.negatives));
    // A shuffled catalog dealt out in order gives every item to some user.
    let mut deck: Vec<usize> = (0..cfg.catalog).collect();
    deck.shuffle(&mut rng);
    let per_user = cfg.positives + cfg.negatives;
    for u in 0..cfg.users {
        let base: Vec<usize> = (0..per_user).map(|j| deck[(u * per_user + j) % cfg.catalog]).collect();
        // Each user likes a private subset of every followed topic and is
        // shown the rest, so one user's distractors are another's clicks.
        let (good, bad) = if cfg.pattern == Pattern::HardNegativeSessions {
            let n_topics = cfg.catalog / cfg.topic_size;
            let all: Vec<usize> = (0..n_topics).collect();
            let (mut good, mut bad) = (Vec::new(), Vec::new());
            for &t in all.choose_multiple(&mut rng, cfg.user_topics) {
                let mut items: Vec<usize> = (t * cfg.topic_size..(t + 1) * cfg.topic_size).collect();
                items.shuffle(&mut rng);
                bad.extend_from_slice(&items[cfg.good_per_topic..]);
                items.truncate(cfg.good_per_topic);
                good.extend(items);
            }
            (good, bad)
        } else {
            (Vec::new(), Vec::new())
        };
        for s in 0..cfg.sessions {
            let (pos, neg): (Vec<usize>, Vec<usize>) = match cfg.pattern {
                Pattern::CopyLastSession => (base[..cfg.positives].to_vec(), base[cfg.positives..].to_vec()),
                Pattern::RotateCatalog => {
                    let shift = |i: &usize| (i + s) % cfg.catalog;
                    (
                        base[..cfg.positives].iter().map(shift).collect(),
                        base[cfg.positives..].iter().map(shift).collect(),
                    )
                }
                Pattern::HardNegativeSessions => (
                    good.choose_multiple(&mut rng, cfg.positives).copied().collect(),
                    bad.choose_multiple(&mut rng, cfg.negatives).copied().collect(),
                ),
            };
            let mut slots: Vec<(usize, bool)> = pos.into_iter().map(|i| (i, true)).chain(neg.into_iter().map(|i| (i, false))).collect();
            slots.shuffle(&mut rng);
            for (k, (item, positive)) in slots.into_iter().enumerate() {
                rows.push(SynthRow {
                    user: u,
                    session: s,
                    item,
                    timestamp: ((s * cfg.users + u) * 100 + k) as i64,
                    positive,
                    topic: (cfg.pattern == Pattern::HardNegativeSessions).then(|| item / cfg.topic_size),
                });
            }
        }
    }
    rows.sort_by_key(|r| r.timestamp);
    Ok(rows)
}

/// Writes rows with a `user,item,session,timestamp,action[,topic]` header.
pub fn write_csv<W: Write>(rows: &[SynthRow], out: W) -> Result<()> {
    let with_topic = rows.iter().any(|r| r.topic.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["user", "item", "session", "timestamp", "action"];
    if with_topic {
        header.push("topic");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            format!("u{:05}", r.user),
            item_name(r.item),
            format!("s{:04}", r.session),
            r.timestamp.to_string(),
            if r.positive { "click" } else { "exposure" }.to_string(),
        ];
        if with_topic {
            rec.push(format!("t{:04}", r.topic.unwrap_or(0)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// The log as an in-memory CSV document.
pub fn to_csv(cfg: &SynthConfig) -> Result<Vec<u8>> {
    let rows = generate(cfg)?;
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    Ok(buf)
}

/// Generates the log and runs it through ingestion and the default filter,
/// exactly as a file written by [`write_csv`] would be.
pub fn dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let log = ingest_reader(to_csv(cfg)?.as_slice(), format!("synth:{}", cfg.pattern))?;
    filter_dataset(&log, &FilterConfig::default())
}
