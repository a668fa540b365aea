//! User timelines, the item vocabulary, ingestion and train/validation/test
//! splitting.

mod format;
mod ingest;
mod split;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_jsonl, ingest_jsonl_reader, ingest_ml20m, ingest_ml20m_reader, Ml20mFilter};
pub use split::{split_timeline, split_users, Skip, SplitSpec, TargetKinds, TimelineSplit, UserSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    View,
    Click,
}

impl EventKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            EventKind::View => 0,
            EventKind::Click => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(EventKind::View),
            1 => Some(EventKind::Click),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Dense vocabulary index.
    pub item: u32,
    pub kind: EventKind,
    /// Seconds.
    pub timestamp: u64,
}

/// One user's events, sorted by timestamp (ties keep input order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Timeline {
    pub user: String,
    pub events: Vec<Event>,
}

impl Timeline {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = u32> + '_ {
        self.events.iter().map(|e| e.item)
    }

    pub fn has_clicks(&self) -> bool {
        self.events.iter().any(|e| e.kind == EventKind::Click)
    }
}

/// Bijection between external item ids and dense indices, with per-item
/// view and click counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, u32>,
    views: Vec<u64>,
    clicks: Vec<u64>,
}

impl Vocabulary {
    /// Builds a vocabulary from ids in index order. Duplicate ids are rejected.
    pub fn from_ids(ids: Vec<String>) -> crate::Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i as u32).is_some() {
                return Err(crate::Error::format("vocabulary", format!("duplicate item id {id:?}")));
            }
        }
        let n = ids.len();
        Ok(Self {
            ids,
            index,
            views: vec![0; n],
            clicks: vec![0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: u32) -> Option<&str> {
        self.ids.get(index as usize).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn views(&self) -> &[u64] {
        &self.views
    }

    pub fn clicks(&self) -> &[u64] {
        &self.clicks
    }

    pub(crate) fn set_counts(&mut self, views: Vec<u64>, clicks: Vec<u64>) {
        debug_assert_eq!(views.len(), self.ids.len());
        debug_assert_eq!(clicks.len(), self.ids.len());
        self.views = views;
        self.clicks = clicks;
    }

    fn recount<'a>(&mut self, timelines: impl Iterator<Item = &'a Timeline>) {
        let mut views = vec![0u64; self.len()];
        let mut clicks = vec![0u64; self.len()];
        for t in timelines {
            for e in &t.events {
                match e.kind {
                    EventKind::View => views[e.item as usize] += 1,
                    EventKind::Click => clicks[e.item as usize] += 1,
                }
            }
        }
        self.set_counts(views, clicks);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub events: usize,
}

/// Timelines plus the vocabulary their item indices refer to. Vocabulary
/// counts always describe exactly the timelines in the set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimelineSet {
    vocab: Vocabulary,
    timelines: Vec<Timeline>,
}

impl TimelineSet {
    /// Validates item indices and ordering, then recomputes vocabulary counts.
    pub fn new(mut vocab: Vocabulary, timelines: Vec<Timeline>) -> crate::Result<Self> {
        let n = vocab.len() as u64;
        for t in &timelines {
            if t.events.is_empty() {
                return Err(crate::Error::format("timelines", format!("user {:?} has no events", t.user)));
            }
            for w in t.events.windows(2) {
                if w[1].timestamp < w[0].timestamp {
                    return Err(crate::Error::format(
                        "timelines",
                        format!("user {:?} events not sorted by timestamp", t.user),
                    ));
                }
            }
            if let Some(e) = t.events.iter().find(|e| e.item as u64 >= n) {
                return Err(crate::Error::OutOfRange { index: e.item as u64, len: n });
            }
        }
        vocab.recount(timelines.iter());
        Ok(Self { vocab, timelines })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn timelines(&self) -> &[Timeline] {
        &self.timelines
    }

    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_users(&self) -> usize {
        self.timelines.len()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.timelines.len(),
            items: self.vocab.len(),
            events: self.timelines.iter().map(Timeline::len).sum(),
        }
    }

    pub fn has_clicks(&self) -> bool {
        self.vocab.clicks.iter().any(|&c| c > 0)
    }

    /// The users at `indices` (in that order), sharing this vocabulary.
    pub fn subset(&self, indices: &[usize]) -> TimelineSet {
        let timelines: Vec<Timeline> = indices.iter().map(|&i| self.timelines[i].clone()).collect();
        let mut vocab = self.vocab.clone();
        vocab.recount(timelines.iter());
        TimelineSet { vocab, timelines }
    }
}
