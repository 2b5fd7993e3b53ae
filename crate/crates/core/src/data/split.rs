use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Dataset, Session};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Targets are all positives of the user's last session.
    LeaveOneSessionOut,
    /// Target is the single last positive item.
    LeaveOneItemOut,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::LeaveOneSessionOut => "leave_one_session_out",
            Protocol::LeaveOneItemOut => "leave_one_item_out",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "session" | "leave_one_session_out" => Ok(Protocol::LeaveOneSessionOut),
            "item" | "leave_one_item_out" => Ok(Protocol::LeaveOneItemOut),
            other => Err(Error::Invalid(format!(
                "unknown protocol {other:?} (expected `session` or `item`)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub num_sessions: usize,
    pub avg_length: f64,
    pub avg_positive_length: f64,
    /// Mean interactions per session (M).
    pub avg_session_length: f64,
    /// Users that could not be split under the protocol.
    pub skipped_users: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    /// Index into `Dataset::sequences`.
    pub user_index: usize,
    pub user_id: String,
    pub train: Vec<Session>,
    pub targets: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub protocol: Protocol,
    pub users: Vec<UserSplit>,
    pub catalog_size: usize,
    pub stats: SplitStats,
}

/// Keeps the most recent `max_positives` positive interactions and everything
/// after the oldest kept positive. Sessions left empty are dropped.
pub fn truncate_positives(sessions: Vec<Session>, max_positives: usize) -> Vec<Session> {
    let mut seen = 0;
    let mut cut: Option<(usize, usize)> = None;
    'outer: for (si, s) in sessions.iter().enumerate().rev() {
        for (ii, it) in s.items.iter().enumerate().rev() {
            if it.polarity.is_positive() {
                seen += 1;
                if seen == max_positives {
                    cut = Some((si, ii));
                    break 'outer;
                }
            }
        }
    }
    let Some((si, ii)) = cut else {
        return sessions;
    };
    let mut out: Vec<Session> = sessions.into_iter().skip(si).collect();
    out[0].items.drain(..ii);
    out.retain(|s| !s.items.is_empty());
    out
}

/// Splits every user under `protocol`; users violating the protocol's
/// precondition are skipped and counted in `stats.skipped_users`.
pub fn make_split(
    dataset: &Dataset,
    protocol: Protocol,
    max_positive_length: Option<usize>,
) -> DatasetSplit {
    let mut users = Vec::new();
    let mut skipped = 0;
    for (user_index, seq) in dataset.sequences.iter().enumerate() {
        let split = match protocol {
            Protocol::LeaveOneSessionOut => {
                if seq.sessions.len() < 2 {
                    None
                } else {
                    let (last, earlier) = seq.sessions.split_last().unwrap();
                    let targets: Vec<u32> = last.positives().collect();
                    (!targets.is_empty()).then(|| (earlier.to_vec(), targets))
                }
            }
            Protocol::LeaveOneItemOut => split_last_item(&seq.sessions),
        };
        match split {
            Some((mut train, targets)) => {
                if let Some(max) = max_positive_length {
                    train = truncate_positives(train, max);
                }
                users.push(UserSplit {
                    user_index,
                    user_id: seq.user_id.clone(),
                    train,
                    targets,
                });
            }
            None => skipped += 1,
        }
    }

    let num_users = dataset.sequences.len();
    let num_sessions = dataset.num_sessions();
    let num_interactions = dataset.num_interactions();
    let num_positive: usize = dataset.sequences.iter().map(|s| s.num_positives()).sum();
    let per = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    DatasetSplit {
        protocol,
        users,
        catalog_size: dataset.catalog.len(),
        stats: SplitStats {
            num_users,
            num_items: dataset.catalog.len(),
            num_interactions,
            num_sessions,
            avg_length: per(num_interactions, num_users),
            avg_positive_length: per(num_positive, num_users),
            avg_session_length: per(num_interactions, num_sessions),
            skipped_users: skipped,
        },
    }
}

fn split_last_item(sessions: &[Session]) -> Option<(Vec<Session>, Vec<u32>)> {
    let positives: usize = sessions.iter().map(|s| s.positives().count()).sum();
    if positives < 2 {
        return None;
    }
    let si = sessions.iter().rposition(Session::has_positive)?;
    let ii = sessions[si].items.iter().rposition(|i| i.polarity.is_positive())?;
    let target = sessions[si].items[ii].item;
    let mut train: Vec<Session> = sessions[..si].to_vec();
    if ii > 0 {
        train.push(Session {
            session_id: sessions[si].session_id.clone(),
            items: sessions[si].items[..ii].to_vec(),
        });
    }
    Some((train, vec![target]))
}
