use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EventKind, Timeline, TimelineSet};
use crate::error::{Error, Result};
use crate::seed;

/// User-level split fractions plus the input/target fraction applied to each
/// timeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub input_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
            input_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.validation, self.test];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0 || *f > 1.0) {
            return Err(Error::Config(format!("split fractions must lie in [0, 1], got {fr:?}")));
        }
        if self.train <= 0.0 {
            return Err(Error::Config("train fraction must be positive".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {fr:?}")));
        }
        if !(self.input_fraction > 0.0 && self.input_fraction < 1.0) {
            return Err(Error::Config(format!(
                "input_fraction must lie in (0, 1), got {}",
                self.input_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UserSplit {
    pub train: TimelineSet,
    pub validation: TimelineSet,
    pub test: TimelineSet,
}

/// Partitions users (not events) into train, validation and test. Users keep
/// their original relative order inside each part.
pub fn split_users(ts: &TimelineSet, spec: &SplitSpec) -> Result<UserSplit> {
    spec.validate()?;
    let n = ts.n_users();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(spec.seed));

    let n_train = ((spec.train * n as f64).round() as usize).min(n);
    let n_val = ((spec.validation * n as f64).round() as usize).min(n - n_train);
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    for (name, p) in ["validation", "test"].iter().zip(&parts[1..]) {
        if p.is_empty() {
            tracing::warn!(split = name, users = n, "split is empty");
        }
    }
    Ok(UserSplit {
        train: ts.subset(&parts[0]),
        validation: ts.subset(&parts[1]),
        test: ts.subset(&parts[2]),
    })
}

/// Which event kinds may serve as targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKinds {
    All,
    ClicksOnly,
}

impl TargetKinds {
    /// Clicks only when the dataset has any click event at all.
    pub fn for_set(ts: &TimelineSet) -> Self {
        if ts.has_clicks() {
            TargetKinds::ClicksOnly
        } else {
            TargetKinds::All
        }
    }

    fn admits(self, kind: EventKind) -> bool {
        match self {
            TargetKinds::All => true,
            TargetKinds::ClicksOnly => kind == EventKind::Click,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimelineSplit {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Why a timeline produced no training/evaluation example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skip {
    TooShort,
    NoTarget,
}

/// Splits a timeline into input and target items.
///
/// `round(input_fraction * T)` positions (clamped to `1..T`) become input; the
/// remaining positions become target, restricted to the kinds `targets`
/// admits. With `shuffle` the positions are drawn at random, otherwise the
/// split is temporal. Both halves keep timeline order.
pub fn split_timeline<R: Rng + ?Sized>(
    t: &Timeline,
    input_fraction: f64,
    rng: &mut R,
    shuffle: bool,
    targets: TargetKinds,
) -> std::result::Result<TimelineSplit, Skip> {
    let n = t.len();
    if n < 2 {
        return Err(Skip::TooShort);
    }
    let n_input = ((input_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut is_input = vec![false; n];
    if shuffle {
        let mut pos: Vec<usize> = (0..n).collect();
        pos.shuffle(rng);
        for &p in &pos[..n_input] {
            is_input[p] = true;
        }
    } else {
        is_input[..n_input].iter_mut().for_each(|b| *b = true);
    }
    let mut input = Vec::with_capacity(n_input);
    let mut target = Vec::with_capacity(n - n_input);
    for (e, inp) in t.events.iter().zip(is_input) {
        if inp {
            input.push(e.item);
        } else if targets.admits(e.kind) {
            target.push(e.item);
        }
    }
    if target.is_empty() {
        return Err(Skip::NoTarget);
    }
    Ok(TimelineSplit { input, target })
}
