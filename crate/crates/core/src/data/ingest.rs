use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::Deserialize;

use super::{Event, EventKind, Timeline, TimelineSet, Vocabulary};
use crate::error::{Error, Result};

/// ML20M preprocessing thresholds.
#[derive(Clone, Copy, Debug)]
pub struct Ml20mFilter {
    /// Ratings strictly below this are dropped.
    pub min_rating: f64,
    /// Users with fewer retained ratings are dropped.
    pub min_events: usize,
}

impl Default for Ml20mFilter {
    fn default() -> Self {
        Self {
            min_rating: 4.0,
            min_events: 5,
        }
    }
}

struct RawEvent {
    user: u32,
    item: u32,
    kind: EventKind,
    timestamp: u64,
}

/// Interns ids in first-appearance order and defers grouping until all rows
/// are in, so that filtering can happen before final indices are assigned.
#[derive(Default)]
struct Builder {
    users: Vec<String>,
    user_index: HashMap<String, u32>,
    items: Vec<String>,
    item_index: HashMap<String, u32>,
    rows: Vec<RawEvent>,
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, u32>, name: &str) -> u32 {
    if let Some(&i) = index.get(name) {
        return i;
    }
    let i = names.len() as u32;
    names.push(name.to_owned());
    index.insert(name.to_owned(), i);
    i
}

impl Builder {
    fn push(&mut self, user: &str, item: &str, kind: EventKind, timestamp: u64) {
        let user = intern(&mut self.users, &mut self.user_index, user);
        let item = intern(&mut self.items, &mut self.item_index, item);
        self.rows.push(RawEvent {
            user,
            item,
            kind,
            timestamp,
        });
    }

    fn finish(self, min_events: usize) -> Result<TimelineSet> {
        let mut per_user = vec![0usize; self.users.len()];
        for r in &self.rows {
            per_user[r.user as usize] += 1;
        }
        let keep: Vec<bool> = per_user.iter().map(|&n| n > 0 && n >= min_events).collect();

        // Final item indices: first appearance among retained rows, file order.
        let mut remap = vec![u32::MAX; self.items.len()];
        let mut ids = Vec::new();
        for r in self.rows.iter().filter(|r| keep[r.user as usize]) {
            if remap[r.item as usize] == u32::MAX {
                remap[r.item as usize] = ids.len() as u32;
                ids.push(self.items[r.item as usize].clone());
            }
        }

        let mut slot = vec![usize::MAX; self.users.len()];
        let mut timelines: Vec<Timeline> = Vec::new();
        for r in self.rows.iter().filter(|r| keep[r.user as usize]) {
            let u = r.user as usize;
            if slot[u] == usize::MAX {
                slot[u] = timelines.len();
                timelines.push(Timeline {
                    user: self.users[u].clone(),
                    events: Vec::with_capacity(per_user[u]),
                });
            }
            timelines[slot[u]].events.push(Event {
                item: remap[r.item as usize],
                kind: r.kind,
                timestamp: r.timestamp,
            });
        }
        if timelines.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no user kept out of {} ({} rows read)",
                self.users.len(),
                self.rows.len()
            )));
        }
        for t in &mut timelines {
            // Stable: equal timestamps keep file order.
            t.events.sort_by_key(|e| e.timestamp);
        }
        let set = TimelineSet::new(Vocabulary::from_ids(ids)?, timelines)?;
        let s = set.stats();
        tracing::info!(users = s.users, items = s.items, events = s.events, "ingested dataset");
        Ok(set)
    }
}

/// Reads an ML20M `ratings.csv` (`userId,movieId,rating,timestamp`), keeping
/// ratings of at least `min_rating` as view events and users with at least
/// `min_events` of them.
pub fn ingest_ml20m(path: &Path, filter: Ml20mFilter) -> Result<TimelineSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_ml20m_reader(BufReader::new(file), filter)
}

pub fn ingest_ml20m_reader<R: Read>(reader: R, filter: Ml20mFilter) -> Result<TimelineSet> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name:?}"),
        })
    };
    let (cu, cm, cr, ct) = (column("userId")?, column("movieId")?, column("rating")?, column("timestamp")?);

    let mut b = Builder::default();
    let mut record = csv::StringRecord::new();
    loop {
        match csv.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(Error::Parse { line, message: e.to_string() });
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| {
            record.get(i).map(str::trim).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field {i}"),
            })
        };
        let rating: f64 = field(cr)?.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad rating {:?}", record.get(cr).unwrap_or("")),
        })?;
        let ts: i64 = field(ct)?.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad timestamp {:?}", record.get(ct).unwrap_or("")),
        })?;
        if ts < 0 || !rating.is_finite() {
            return Err(Error::Parse { line, message: "negative timestamp or non-finite rating".into() });
        }
        let (user, movie) = (field(cu)?, field(cm)?);
        if user.is_empty() || movie.is_empty() {
            return Err(Error::Parse { line, message: "empty user or movie id".into() });
        }
        if rating >= filter.min_rating {
            b.push(user, movie, EventKind::View, ts as u64);
        }
    }
    b.finish(filter.min_events)
}

#[derive(Deserialize)]
struct JsonEvent {
    user: serde_json::Value,
    item: serde_json::Value,
    kind: String,
    ts: serde_json::Value,
}

fn id_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) if !s.is_empty() => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads one JSON object per line: `{"user", "item", "kind": "view"|"click", "ts"}`.
/// Blank lines are skipped; duplicate rows are kept.
pub fn ingest_jsonl(path: &Path) -> Result<TimelineSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_jsonl_reader(BufReader::new(file))
}

pub fn ingest_jsonl_reader<R: BufRead>(reader: R) -> Result<TimelineSet> {
    let mut b = Builder::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: JsonEvent = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let kind = match ev.kind.as_str() {
            "view" => EventKind::View,
            "click" => EventKind::Click,
            other => return Err(parse_err(format!("unknown event kind {other:?}"))),
        };
        let user = id_string(&ev.user).ok_or_else(|| parse_err("user must be a non-empty string or number".into()))?;
        let item = id_string(&ev.item).ok_or_else(|| parse_err("item must be a non-empty string or number".into()))?;
        let ts = ev
            .ts
            .as_u64()
            .ok_or_else(|| parse_err(format!("ts must be a non-negative integer, got {}", ev.ts)))?;
        b.push(&user, &item, kind, ts);
    }
    b.finish(1)
}
