//! `LEDT` (timeline set) and `LEDV` (vocabulary) binary formats.
//!
//! ```text
//! LEDT: magic "LEDT" | version u32 | vocabulary table | n_users u64 |
//!       per user: id str | n_events u64 | per event: item u32, kind u8, Δts u64
//! LEDV: magic "LEDV" | version u32 | vocabulary table
//! vocabulary table: n_items u64 | per item: id str, views u64, clicks u64
//! ```
//! Strings are u32-length-prefixed UTF-8; Δts is relative to the previous
//! event of the same user (the first event is relative to zero).

use std::path::Path;

use super::{Event, EventKind, Timeline, TimelineSet, Vocabulary};
use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::Result;

const TIMELINES: &[u8; 4] = b"LEDT";
const VOCAB: &[u8; 4] = b"LEDV";

fn write_vocab(w: &mut ByteWriter, v: &Vocabulary) {
    w.u64(v.len() as u64);
    for i in 0..v.len() {
        w.str(&v.ids[i]);
        w.u64(v.views[i]);
        w.u64(v.clicks[i]);
    }
}

fn read_vocab(r: &mut ByteReader<'_>) -> Result<Vocabulary> {
    // id length prefix + two counters
    let n = r.count(4 + 16)?;
    let mut ids = Vec::with_capacity(n);
    let mut views = Vec::with_capacity(n);
    let mut clicks = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(r.str()?);
        views.push(r.u64()?);
        clicks.push(r.u64()?);
    }
    let mut v = Vocabulary::from_ids(ids)?;
    v.set_counts(views, clicks);
    Ok(v)
}

impl Vocabulary {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(VOCAB);
        write_vocab(&mut w, self);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::header(bytes, VOCAB, "vocabulary")?;
        let v = read_vocab(&mut r)?;
        r.finish()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

impl TimelineSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(TIMELINES);
        write_vocab(&mut w, &self.vocab);
        w.u64(self.timelines.len() as u64);
        for t in &self.timelines {
            w.str(&t.user);
            w.u64(t.events.len() as u64);
            let mut prev = 0u64;
            for e in &t.events {
                w.u32(e.item);
                w.u8(e.kind.code());
                w.u64(e.timestamp - prev);
                prev = e.timestamp;
            }
        }
        w.into_bytes()
    }

    /// Decodes and re-validates; the stored counts must match the timelines.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::header(bytes, TIMELINES, "timelines")?;
        let vocab = read_vocab(&mut r)?;
        let n_users = r.count(4 + 8)?;
        let mut timelines = Vec::with_capacity(n_users);
        for _ in 0..n_users {
            let user = r.str()?;
            let n = r.count(13)?;
            let mut events = Vec::with_capacity(n);
            let mut ts = 0u64;
            for _ in 0..n {
                let item = r.u32()?;
                let code = r.u8()?;
                let kind = EventKind::from_code(code).ok_or_else(|| r.err(format!("bad event kind {code}")))?;
                ts = ts.checked_add(r.u64()?).ok_or_else(|| r.err("timestamp overflow"))?;
                events.push(Event { item, kind, timestamp: ts });
            }
            timelines.push(Timeline { user, events });
        }
        r.finish()?;
        let (views, clicks) = (vocab.views.clone(), vocab.clicks.clone());
        let set = TimelineSet::new(vocab, timelines)?;
        if set.vocab.views != views || set.vocab.clicks != clicks {
            return Err(crate::Error::format("timelines", "vocabulary counts disagree with timelines"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}
