//! Streaming latency histogram with fixed log-spaced buckets from 1 µs to
//! 1 s. Recording is a single relaxed atomic increment.

use std::sync::atomic::{AtomicU64, Ordering};

const DECADES: usize = 6;
const PER_DECADE: usize = 20;
/// Bucket 0 holds everything below 1 µs, the last bucket everything at or
/// above 1 s.
pub const BUCKETS: usize = DECADES * PER_DECADE + 2;

pub struct LatencyHistogram {
    counts: Vec<AtomicU64>,
    total: AtomicU64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self { counts: (0..BUCKETS).map(|_| AtomicU64::new(0)).collect(), total: AtomicU64::new(0) }
    }

    /// Index of the bucket holding `micros`.
    pub fn bucket_of(micros: f64) -> usize {
        if !(micros >= 1.0) {
            return 0;
        }
        let b = (micros.log10() * PER_DECADE as f64).floor() as usize + 1;
        b.min(BUCKETS - 1)
    }

    /// `[lower, upper)` edges of a bucket in microseconds.
    pub fn bounds(bucket: usize) -> (f64, f64) {
        match bucket {
            0 => (0.0, 1.0),
            b if b == BUCKETS - 1 => (1e6, f64::INFINITY),
            b => {
                let e = |k: usize| 10f64.powf(k as f64 / PER_DECADE as f64);
                (e(b - 1), e(b))
            }
        }
    }

    pub fn record(&self, micros: f64) {
        self.counts[Self::bucket_of(micros)].fetch_add(1, Ordering::Relaxed);
        self.total.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    /// Upper edge of the bucket containing the `q`-quantile (`None` when
    /// empty). The true quantile lies in that bucket.
    pub fn percentile(&self, q: f64) -> Option<f64> {
        let snapshot: Vec<u64> = self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect();
        let n: u64 = snapshot.iter().sum();
        if n == 0 {
            return None;
        }
        let rank = ((q.clamp(0.0, 1.0) * n as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (b, &c) in snapshot.iter().enumerate() {
            seen += c;
            if seen >= rank {
                let (lo, hi) = Self::bounds(b);
                return Some(if hi.is_finite() { hi } else { lo });
            }
        }
        unreachable!("rank never exceeds the total")
    }
}
