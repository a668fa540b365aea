//! The LED model: a user is the normalized sum of their items' embeddings,
//! and an item scores `⟨u, v_i⟩ + b_i`.
//!
//! In [`TuningMode::Project`] the item embeddings are `v_i = P·base_i` for a
//! trainable `d × d` matrix `P` over frozen pre-trained `base` embeddings.
//! The projected embeddings are materialized once (`effective`), so serving
//! costs the same in both modes. For batch scoring in project mode the
//! projection can instead be moved to the user side:
//! `s(u, i) = ⟨PᵀP·u_base, base_i⟩ + b_i`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rsvd::EmbeddingMatrix;
use crate::seed;
use crate::vecmath::{dot, matvec, matvec_t};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    /// Item embeddings are trained directly.
    Full,
    /// Only a `d × d` projection of frozen embeddings is trained.
    Project,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `u = (1/T) Σ v`
    #[default]
    OverT,
    /// `u = (1/√T) Σ v`
    OverSqrtT,
}

impl NormMode {
    pub fn factor(self, t: usize) -> f64 {
        match self {
            NormMode::OverT => 1.0 / t as f64,
            NormMode::OverSqrtT => 1.0 / (t as f64).sqrt(),
        }
    }
}

/// A user representation in the model's embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct UserVector(pub Vec<f32>);

impl UserVector {
    pub fn zeros(dim: usize) -> Self {
        UserVector(vec![0.0; dim])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub trainable: u64,
    pub frozen: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedModel {
    mode: TuningMode,
    norm: NormMode,
    n_items: usize,
    dim: usize,
    /// Frozen pre-trained embeddings (project mode only).
    base: Option<Vec<f32>>,
    /// Row-major `d × d` (project mode only).
    projection: Option<Vec<f32>>,
    biases: Vec<f32>,
    /// `P·base_i` in project mode; the trainable embeddings in full mode.
    effective: Vec<f32>,
}

impl LedModel {
    pub fn full(embeddings: EmbeddingMatrix, biases: Vec<f32>, norm: NormMode) -> Result<Self> {
        if biases.len() != embeddings.rows() {
            return Err(Error::Shape(format!("{} biases for {} items", biases.len(), embeddings.rows())));
        }
        codec::ensure_finite(&biases, "bias")?;
        Ok(Self {
            mode: TuningMode::Full,
            norm,
            n_items: embeddings.rows(),
            dim: embeddings.dim(),
            base: None,
            projection: None,
            biases,
            effective: embeddings.into_data(),
        })
    }

    pub fn project(base: EmbeddingMatrix, projection: Vec<f32>, biases: Vec<f32>, norm: NormMode) -> Result<Self> {
        let d = base.dim();
        if projection.len() != d * d {
            return Err(Error::Shape(format!("projection has {} entries, expected {d}×{d}", projection.len())));
        }
        if biases.len() != base.rows() {
            return Err(Error::Shape(format!("{} biases for {} items", biases.len(), base.rows())));
        }
        codec::ensure_finite(&projection, "projection")?;
        codec::ensure_finite(&biases, "bias")?;
        let mut m = Self {
            mode: TuningMode::Project,
            norm,
            n_items: base.rows(),
            dim: d,
            base: None,
            projection: Some(projection),
            biases,
            effective: vec![0.0; base.rows() * d],
        };
        m.base = Some(base.into_data());
        m.refresh_effective();
        Ok(m)
    }

    /// Full-mode model with embeddings ~ U(−1/√d, 1/√d) and zero biases.
    pub fn random_full(n_items: usize, dim: usize, norm: NormMode, seed_value: u64) -> Result<Self> {
        if dim == 0 || n_items == 0 {
            return Err(Error::Config("model needs at least one item and one dimension".into()));
        }
        let mut rng = seed::rng(seed_value);
        let a = 1.0 / (dim as f32).sqrt();
        let data = (0..n_items * dim).map(|_| rng.random_range(-a..a)).collect();
        Self::full(EmbeddingMatrix::new(n_items, dim, data)?, vec![0.0; n_items], norm)
    }

    /// Project-mode model with `P = I + N(0, 0.01²)` and zero biases.
    pub fn init_project(base: EmbeddingMatrix, norm: NormMode, seed_value: u64) -> Result<Self> {
        let d = base.dim();
        let mut rng = seed::rng(seed_value);
        let noise = Normal::new(0.0f32, 0.01).unwrap();
        let mut p: Vec<f32> = (0..d * d).map(|_| noise.sample(&mut rng)).collect();
        for i in 0..d {
            p[i * d + i] += 1.0;
        }
        let n = base.rows();
        Self::project(base, p, vec![0.0; n], norm)
    }

    pub fn mode(&self) -> TuningMode {
        self.mode
    }

    pub fn norm(&self) -> NormMode {
        self.norm
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn projection(&self) -> Option<&[f32]> {
        self.projection.as_deref()
    }

    pub fn base(&self) -> Option<&[f32]> {
        self.base.as_deref()
    }

    pub fn effective(&self) -> &[f32] {
        &self.effective
    }

    /// Effective embedding of item `i`.
    pub fn item(&self, i: usize) -> &[f32] {
        &self.effective[i * self.dim..(i + 1) * self.dim]
    }

    pub fn base_item(&self, i: usize) -> Option<&[f32]> {
        self.base.as_ref().map(|b| &b[i * self.dim..(i + 1) * self.dim])
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [f32] {
        &mut self.biases
    }

    /// Trainable embeddings (full mode).
    pub(crate) fn effective_mut(&mut self) -> &mut [f32] {
        &mut self.effective
    }

    pub(crate) fn projection_mut(&mut self) -> Option<&mut [f32]> {
        self.projection.as_deref_mut()
    }

    /// Recomputes `effective = base·Pᵀ` after the projection changed.
    pub fn refresh_effective(&mut self) {
        let (Some(base), Some(p)) = (&self.base, &self.projection) else {
            return;
        };
        let d = self.dim;
        self.effective
            .chunks_mut(d)
            .zip(base.chunks(d))
            .for_each(|(out, b)| matvec(p, d, b, out));
    }

    fn check_item(&self, i: u32) -> Result<()> {
        if i as usize >= self.n_items {
            return Err(Error::OutOfRange { index: i as u64, len: self.n_items as u64 });
        }
        Ok(())
    }

    fn average(&self, history: &[u32], table: &[f32]) -> Result<UserVector> {
        if history.is_empty() {
            return Ok(UserVector::zeros(self.dim));
        }
        let d = self.dim;
        let mut acc = vec![0.0f64; d];
        for &i in history {
            self.check_item(i)?;
            for (a, v) in acc.iter_mut().zip(&table[i as usize * d..(i as usize + 1) * d]) {
                *a += *v as f64;
            }
        }
        let f = self.norm.factor(history.len());
        Ok(UserVector(acc.into_iter().map(|a| (a * f) as f32).collect()))
    }

    /// Normalized sum of the history's effective embeddings; an empty history
    /// gives the zero vector.
    pub fn encode_user(&self, history: &[u32]) -> Result<UserVector> {
        self.average(history, &self.effective)
    }

    /// Like [`encode_user`](Self::encode_user) but over the frozen base embeddings.
    pub fn encode_user_base(&self, history: &[u32]) -> Result<UserVector> {
        let base = self
            .base
            .as_deref()
            .ok_or_else(|| Error::Config("model has no base embeddings (not in project mode)".into()))?;
        self.average(history, base)
    }

    /// `⟨u, v_item⟩ + b_item`.
    pub fn score(&self, u: &UserVector, item: u32) -> Result<f32> {
        self.check_item(item)?;
        Ok(dot(&u.0, self.item(item as usize)) + self.biases[item as usize])
    }

    /// Scores every item from an effective-space user vector.
    pub fn score_all(&self, u: &UserVector) -> Vec<f32> {
        self.effective
            .chunks(self.dim)
            .zip(&self.biases)
            .map(|(v, b)| dot(&u.0, v) + b)
            .collect()
    }

    /// `PᵀP·u_base`, the user side of the transposition trick.
    pub fn project_user(&self, u_base: &UserVector) -> Result<UserVector> {
        let p = self
            .projection
            .as_deref()
            .ok_or_else(|| Error::Config("transposition trick requires project mode".into()))?;
        let d = self.dim;
        let mut pu = vec![0.0; d];
        matvec(p, d, &u_base.0, &mut pu);
        let mut w = vec![0.0; d];
        matvec_t(p, d, &pu, &mut w);
        Ok(UserVector(w))
    }

    /// Scores every item with `⟨PᵀP·u_base, base_i⟩ + b_i`: one pair of
    /// `d × d` products per user instead of one per item.
    pub fn score_all_trick(&self, u_base: &UserVector) -> Result<Vec<f32>> {
        let w = self.project_user(u_base)?;
        let base = self
            .base
            .as_deref()
            .ok_or_else(|| Error::Config("model has no base embeddings".into()))?;
        Ok(base
            .chunks(self.dim)
            .zip(&self.biases)
            .map(|(v, b)| dot(&w.0, v) + b)
            .collect())
    }

    /// Item rows `[v_i ; b_i]`, so that `⟨[u ; 1], [v_i ; b_i]⟩ = s(u, i)`.
    pub fn augment_for_mips(&self) -> EmbeddingMatrix {
        let d = self.dim;
        let mut data = Vec::with_capacity(self.n_items * (d + 1));
        for i in 0..self.n_items {
            data.extend_from_slice(self.item(i));
            data.push(self.biases[i]);
        }
        EmbeddingMatrix::new(self.n_items, d + 1, data).expect("model parameters are finite")
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let (n, d) = (self.n_items as u64, self.dim as u64);
        match self.mode {
            TuningMode::Full => ParameterCount { trainable: n * d + n, frozen: 0 },
            TuningMode::Project => ParameterCount { trainable: d * d + n, frozen: n * d },
        }
    }

    /// ```text
    /// magic "LEDM" | version u32 | mode u8 | norm u8 | n u64 | d u64 |
    /// [P f32 × d² if project] | biases f32 × n | effective f32 × n·d |
    /// has_base u8 | [base f32 × n·d]
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(b"LEDM");
        w.u8(match self.mode {
            TuningMode::Full => 0,
            TuningMode::Project => 1,
        });
        w.u8(match self.norm {
            NormMode::OverT => 0,
            NormMode::OverSqrtT => 1,
        });
        w.u64(self.n_items as u64);
        w.u64(self.dim as u64);
        if let Some(p) = &self.projection {
            w.f32s(p);
        }
        w.f32s(&self.biases);
        w.f32s(&self.effective);
        match &self.base {
            Some(b) => {
                w.u8(1);
                w.f32s(b);
            }
            None => w.u8(0),
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::header(bytes, b"LEDM", "model")?;
        let mode = match r.u8()? {
            0 => TuningMode::Full,
            1 => TuningMode::Project,
            c => return Err(r.err(format!("bad tuning mode {c}"))),
        };
        let norm = match r.u8()? {
            0 => NormMode::OverT,
            1 => NormMode::OverSqrtT,
            c => return Err(r.err(format!("bad norm mode {c}"))),
        };
        let n = r.u64()?;
        let d = r.u64()?;
        if n == 0 || d == 0 {
            return Err(r.err("empty model"));
        }
        let square = d.checked_mul(d).ok_or_else(|| r.err("d² overflows"))?;
        let projection = match mode {
            TuningMode::Project => Some(r.f32s(r.check_count(square, 4)?)?),
            TuningMode::Full => None,
        };
        let biases = r.f32s(r.check_count(n, 4)?)?;
        let nd = n.checked_mul(d).ok_or_else(|| r.err("n × d overflows"))?;
        let effective = r.f32s(r.check_count(nd, 4)?)?;
        let base = match r.u8()? {
            0 => None,
            1 => Some(r.f32s(r.check_count(nd, 4)?)?),
            c => return Err(r.err(format!("bad base flag {c}"))),
        };
        r.finish()?;
        if base.is_some() && mode == TuningMode::Full {
            return Err(Error::format("model", "full-mode model cannot carry base embeddings"));
        }
        for (what, v) in [("projection", projection.as_deref()), ("base", base.as_deref())] {
            if let Some(v) = v {
                codec::ensure_finite(v, what)?;
            }
        }
        codec::ensure_finite(&biases, "bias")?;
        codec::ensure_finite(&effective, "embedding")?;
        Ok(Self {
            mode,
            norm,
            n_items: n as usize,
            dim: d as usize,
            base,
            projection,
            biases,
            effective,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, dim: usize, seed_value: u64) -> EmbeddingMatrix {
        let mut rng = seed::rng(seed_value);
        EmbeddingMatrix::new(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn project_model(n: usize, d: usize, seed_value: u64) -> LedModel {
        let mut rng = seed::rng(seed_value ^ 0xff);
        let p = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        LedModel::project(random_matrix(n, d, seed_value), p, b, NormMode::OverT).unwrap()
    }

    #[test]
    fn single_item_history_is_its_embedding() {
        for norm in [NormMode::OverT, NormMode::OverSqrtT] {
            let m = LedModel::random_full(5, 4, norm, 1).unwrap();
            assert_eq!(m.encode_user(&[3]).unwrap().0, m.item(3));
        }
    }

    #[test]
    fn homogeneous_histories() {
        let m = LedModel::random_full(5, 7, NormMode::OverT, 2).unwrap();
        let one = m.encode_user(&[2]).unwrap();
        for k in 2..50 {
            assert_eq!(m.encode_user(&vec![2; k]).unwrap(), one);
        }
        let s = LedModel::random_full(5, 7, NormMode::OverSqrtT, 2).unwrap();
        let nine = s.encode_user(&[2; 9]).unwrap();
        for (a, b) in nine.0.iter().zip(s.item(2)) {
            assert!((a - 3.0 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_history_and_out_of_range() {
        let m = LedModel::random_full(5, 3, NormMode::OverT, 0).unwrap();
        assert!(m.encode_user(&[]).unwrap().is_zero());
        assert!(matches!(m.encode_user(&[5]), Err(Error::OutOfRange { .. })));
        assert!(m.score(&UserVector::zeros(3), 9).is_err());
    }

    #[test]
    fn zero_user_scores_bias() {
        let mut m = LedModel::random_full(4, 3, NormMode::OverT, 0).unwrap();
        m.biases_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        for i in 0..4 {
            assert_eq!(m.score(&UserVector::zeros(3), i).unwrap(), m.biases()[i as usize]);
        }
    }

    #[test]
    fn unit_basis_scores_one() {
        let e = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = LedModel::full(e, vec![0.0, 0.0], NormMode::OverT).unwrap();
        let u = m.encode_user(&[0]).unwrap();
        assert_eq!(m.score(&u, 0).unwrap(), 1.0);
        assert_eq!(m.score(&u, 1).unwrap(), 0.0);
    }

    #[test]
    fn score_against_scalar_oracle() {
        let mut rng = seed::rng(9);
        let m = LedModel::full(
            random_matrix(3, 4, 4),
            (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            NormMode::OverT,
        )
        .unwrap();
        let u = UserVector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        for i in 0..3u32 {
            let v = m.item(i as usize);
            let oracle = u.0[0] as f64 * v[0] as f64
                + u.0[1] as f64 * v[1] as f64
                + u.0[2] as f64 * v[2] as f64
                + u.0[3] as f64 * v[3] as f64
                + m.biases()[i as usize] as f64;
            assert!((m.score(&u, i).unwrap() as f64 - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn trick_with_identity_projection() {
        let base = random_matrix(20, 5, 1);
        let mut p = vec![0.0; 25];
        (0..5).for_each(|i| p[i * 5 + i] = 1.0);
        let b: Vec<f32> = (0..20).map(|i| i as f32 * 0.1).collect();
        let m = LedModel::project(base.clone(), p, b.clone(), NormMode::OverT).unwrap();
        let u = m.encode_user_base(&[1, 4]).unwrap();
        let trick = m.score_all_trick(&u).unwrap();
        for i in 0..20 {
            let direct = dot(&u.0, base.row(i)) + b[i];
            assert!((trick[i] - direct).abs() < 1e-6);
        }
        assert_eq!(m.score_all_trick(&UserVector::zeros(5)).unwrap(), b);
        let full = LedModel::random_full(3, 2, NormMode::OverT, 0).unwrap();
        assert!(full.score_all_trick(&UserVector::zeros(2)).is_err());
    }

    #[test]
    fn trick_matches_direct_scoring() {
        let m = project_model(1000, 32, 5);
        let hist = [3u32, 77, 512, 999];
        let direct = m.score_all(&m.encode_user(&hist).unwrap());
        let trick = m.score_all_trick(&m.encode_user_base(&hist).unwrap()).unwrap();
        let scale = direct.iter().fold(0f32, |a, x| a.max(x.abs()));
        for (a, b) in direct.iter().zip(&trick) {
            assert!((a - b).abs() <= 1e-5 * scale.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn parameter_counts() {
        let full = LedModel::random_full(1, 1, NormMode::OverT, 0).unwrap();
        assert_eq!(full.parameter_count(), ParameterCount { trainable: 2, frozen: 0 });
        let proj = LedModel::init_project(random_matrix(5, 3, 0), NormMode::OverT, 0).unwrap();
        assert_eq!(proj.parameter_count(), ParameterCount { trainable: 14, frozen: 15 });
    }

    #[test]
    fn augmentation_cold_start_ranks_by_bias() {
        let mut m = LedModel::random_full(6, 3, NormMode::OverT, 0).unwrap();
        m.biases_mut().copy_from_slice(&[0.1, 0.9, -0.3, 0.5, 0.0, 0.7]);
        let aug = m.augment_for_mips();
        let q = augment_query(&UserVector::zeros(3));
        assert_eq!(q, vec![0.0, 0.0, 0.0, 1.0]);
        let scores: Vec<f32> = (0..6).map(|i| dot(&q, aug.row(i))).collect();
        assert_eq!(scores, m.biases());
    }

    #[test]
    fn model_bytes_round_trip() {
        let m = project_model(7, 3, 1);
        let bytes = m.to_bytes();
        assert_eq!(LedModel::from_bytes(&bytes).unwrap(), m);
        assert!(LedModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let f = LedModel::random_full(4, 2, NormMode::OverSqrtT, 3).unwrap();
        assert_eq!(LedModel::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    proptest! {
        #[test]
        fn augmented_inner_product_equals_score(seed_v in any::<u64>(), n in 1usize..30, d in 1usize..20) {
            let m = project_model(n, d, seed_v);
            let aug = m.augment_for_mips();
            let mut rng = seed::rng(seed_v.wrapping_add(1));
            let u = UserVector((0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
            let q = augment_query(&u);
            for i in 0..n {
                let s = m.score(&u, i as u32).unwrap();
                let a = dot(&q, aug.row(i));
                // exact in f64
                let s64: f64 = u.0.iter().zip(m.item(i)).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>() + m.biases()[i] as f64;
                let a64: f64 = q.iter().zip(aug.row(i)).map(|(x, y)| *x as f64 * *y as f64).sum();
                prop_assert_eq!(s64, a64);
                // f32 summation error bound; terms may cancel, so it scales with Σ|term|
                let mag: f64 = q.iter().zip(aug.row(i)).map(|(x, y)| (*x as f64 * *y as f64).abs()).sum();
                let bound = (d + 2) as f64 * f32::EPSILON as f64 * mag;
                prop_assert!((s as f64 - s64).abs() <= bound, "score {s} vs exact {s64}");
                prop_assert!((a as f64 - a64).abs() <= bound, "augmented {a} vs exact {a64}");
            }
        }
    }
}

/// `[u ; 1]`, the query matching [`LedModel::augment_for_mips`].
pub fn augment_query(u: &UserVector) -> Vec<f32> {
    let mut q = Vec::with_capacity(u.0.len() + 1);
    q.extend_from_slice(&u.0);
    q.push(1.0);
    q
}
