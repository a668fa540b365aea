//! Randomized SVD of a sparse square matrix.
//!
//! A Gaussian sketch `Y = A·Ω` (with `rank + oversampling` columns) captures
//! the dominant range of `A`; power iterations sharpen it, re-orthonormalizing
//! after every multiply. With `Q` an orthonormal basis of that range, the thin
//! matrix `Bᵀ = Aᵀ·Q` is factored as `Q₂·R` and the small `R` decomposed
//! exactly: `B = Rᵀ·Q₂ᵀ = V_R·Σ·U_Rᵀ·Q₂ᵀ`, so `A ≈ (Q·V_R)·Σ·(Q₂·U_R)ᵀ`.
//!
//! Dense work is done in f64; embeddings are stored as f32.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::pmi::PmiMatrix;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsvdConfig {
    /// Embedding dimension `d`.
    pub rank: usize,
    pub oversampling: usize,
    pub power_iters: usize,
    pub seed: u64,
    /// Embeddings are `U·diag(S^gamma)`; 0 gives plain left singular vectors.
    pub gamma: f64,
}

impl Default for RsvdConfig {
    fn default() -> Self {
        Self {
            rank: 600,
            oversampling: 10,
            power_iters: 2,
            seed: 0,
            gamma: 0.0,
        }
    }
}

impl RsvdConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rsvd rank must be at least 1".into()));
        }
        if self.rank + self.oversampling > n {
            return Err(Error::Config(format!(
                "rank {} + oversampling {} exceeds matrix size {n}",
                self.rank, self.oversampling
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Dense `rows × dim` row-major f32 matrix; row `i` is item `i`'s embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    singular_values: Option<Vec<f32>>,
    gamma: f32,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape(format!("{} values for a {rows}×{dim} matrix", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("item {} has non-finite component {}", i / dim.max(1), data[i])));
        }
        Ok(Self { rows, dim, data, singular_values: None, gamma: 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn singular_values(&self) -> Option<&[f32]> {
        self.singular_values.as_deref()
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    /// ```text
    /// magic "LEDE" | version u32 | rows u64 | dim u64 | gamma f32 |
    /// n_singular u64 | singular f32 × n_singular | data f32 × rows·dim
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(b"LEDE");
        w.u64(self.rows as u64);
        w.u64(self.dim as u64);
        w.f32(self.gamma);
        let sv = self.singular_values.as_deref().unwrap_or(&[]);
        w.u64(sv.len() as u64);
        w.f32s(sv);
        w.f32s(&self.data);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::header(bytes, b"LEDE", "embeddings")?;
        let rows = r.u64()?;
        let dim = r.u64()?;
        let gamma = r.f32()?;
        let n_sv = r.count(4)?;
        if n_sv != 0 && n_sv as u64 != dim {
            return Err(r.err(format!("{n_sv} singular values for dimension {dim}")));
        }
        let sv = r.f32s(n_sv)?;
        let total = rows.checked_mul(dim).ok_or_else(|| r.err("rows × dim overflows"))?;
        let total = r.check_count(total, 4)?;
        let data = r.f32s(total)?;
        r.finish()?;
        if !gamma.is_finite() {
            return Err(Error::format("embeddings", "non-finite gamma"));
        }
        codec::ensure_finite(&sv, "singular value")?;
        let mut m = Self::new(rows as usize, dim as usize, data)?;
        m.gamma = gamma;
        m.singular_values = (n_sv > 0).then_some(sv);
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

/// Truncated factors `A ≈ U·diag(S)·Vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// Exact sparse × dense product, parallel over output rows.
pub fn spmm(m: &PmiMatrix, dense: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if dense.nrows() != m.n() {
        return Err(Error::Shape(format!(
            "sparse {}×{} times dense {}×{}",
            m.n(),
            m.n(),
            dense.nrows(),
            dense.ncols()
        )));
    }
    let k = dense.ncols();
    // Row-major copy so each sparse entry touches one contiguous row.
    let rows: Vec<f64> = dense.transpose().as_slice().to_vec();
    let mut out = vec![0.0f64; m.n() * k];
    out.par_chunks_mut(k.max(1)).enumerate().for_each(|(i, o)| {
        let (cols, vals) = m.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            let v = v as f64;
            let src = &rows[j as usize * k..(j as usize + 1) * k];
            for (x, y) in o.iter_mut().zip(src) {
                *x += v * y;
            }
        }
    });
    Ok(DMatrix::from_row_slice(m.n(), k, &out))
}

fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

/// Randomized truncated SVD with singular values sorted non-increasing.
pub fn randomized_svd_factors(m: &PmiMatrix, cfg: &RsvdConfig) -> Result<SvdFactors> {
    let n = m.n();
    cfg.validate(n)?;
    codec::ensure_finite(m.values(), "matrix value")?;
    let k = cfg.rank + cfg.oversampling;
    let mt = m.transpose();

    let mut rng = seed::rng(cfg.seed);
    let omega = DMatrix::<f64>::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(spmm(m, &omega)?);
    for _ in 0..cfg.power_iters {
        let z = orthonormalize(spmm(&mt, &q)?);
        q = orthonormalize(spmm(m, &z)?);
    }

    // Bᵀ = Aᵀ·Q = Q₂·R
    let bt = spmm(&mt, &q)?;
    let qr = bt.qr();
    let (q2, r) = (qr.q(), qr.r());
    let svd = r.svd(true, true);
    let (u_r, v_rt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let order = &order[..cfg.rank];

    let v_r = DMatrix::from_fn(k, cfg.rank, |i, c| v_rt[(order[c], i)]);
    let u_r = DMatrix::from_fn(k, cfg.rank, |i, c| u_r[(i, order[c])]);
    let s = DVector::from_fn(cfg.rank, |c, _| svd.singular_values[order[c]]);
    Ok(SvdFactors { u: q * v_r, s, v: q2 * u_r })
}

/// Pre-trained item embeddings: the top `rank` left singular vectors, scaled
/// by `S^gamma`. Also returns the singular values.
pub fn randomized_svd(m: &PmiMatrix, cfg: &RsvdConfig) -> Result<(EmbeddingMatrix, Vec<f64>)> {
    let f = randomized_svd_factors(m, cfg)?;
    let (n, d) = (m.n(), cfg.rank);
    let scale: Vec<f64> = f.s.iter().map(|s| s.powf(cfg.gamma)).collect();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for c in 0..d {
            data.push((f.u[(i, c)] * scale[c]) as f32);
        }
    }
    let mut e = EmbeddingMatrix::new(n, d, data)?;
    e.gamma = cfg.gamma as f32;
    e.singular_values = Some(f.s.iter().map(|&s| s as f32).collect());
    Ok((e, f.s.iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rank: usize, oversampling: usize) -> RsvdConfig {
        RsvdConfig { rank, oversampling, power_iters: 2, seed: 3, gamma: 0.0 }
    }

    fn diag(values: &[f64]) -> PmiMatrix {
        let n = values.len();
        let t: Vec<_> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, &v)| (i as u32, i as u32, v as f32))
            .collect();
        PmiMatrix::from_triplets(n, &t).unwrap()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let (_, s) = randomized_svd(&diag(&[1.0; 8]), &cfg(3, 2)).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn diagonal_case() {
        let mut d = vec![3.0, 2.0, 1.0];
        d.extend([0.0; 7]);
        let (u, s) = randomized_svd(&diag(&d), &cfg(2, 3)).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-9 && (s[1] - 2.0).abs() < 1e-9);
        // column c is ±e_c
        for c in 0..2 {
            for i in 0..10 {
                let want = if i == c { 1.0 } else { 0.0 };
                assert!((u.row(i)[c].abs() - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spmm_identity_zero_and_dense() {
        let dense = DMatrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 2.0);
        let id = diag(&[1.0; 6]);
        assert_eq!(spmm(&id, &dense).unwrap(), dense);
        let zero = PmiMatrix::from_triplets(6, &[]).unwrap();
        assert_eq!(spmm(&zero, &dense).unwrap(), DMatrix::zeros(6, 3));
        let bad = DMatrix::zeros(5, 3);
        assert!(spmm(&id, &bad).is_err());
    }

    #[test]
    fn spmm_against_dense_product() {
        let mut rng = seed::rng(11);
        use rand::Rng;
        let n = 20;
        let t: Vec<_> = (0..60)
            .map(|_| (rng.random_range(0..n) as u32, rng.random_range(0..n) as u32, rng.random_range(-1.0f32..1.0)))
            .collect();
        let m = PmiMatrix::from_triplets(n, &t).unwrap();
        let x = DMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let dense = DMatrix::from_row_slice(n, n, &m.to_dense());
        let diff = (spmm(&m, &x).unwrap() - dense * &x).abs().max();
        assert!(diff <= 1e-5, "max abs diff {diff}");
    }

    #[test]
    fn config_errors() {
        let m = diag(&[1.0; 8]);
        assert!(randomized_svd(&m, &cfg(3, 10)).is_err());
        assert!(randomized_svd(&m, &cfg(0, 1)).is_err());
        let nan = PmiMatrix::from_triplets(8, &[(0, 0, f32::NAN)]).unwrap();
        assert!(matches!(randomized_svd(&nan, &cfg(2, 2)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gamma_scales_columns() {
        let d = [4.0, 1.0, 0.5, 0.25, 0.1, 0.0];
        let mut c = cfg(2, 2);
        let (plain, s) = randomized_svd(&diag(&d), &c).unwrap();
        c.gamma = 1.0;
        let (scaled, _) = randomized_svd(&diag(&d), &c).unwrap();
        for i in 0..6 {
            for k in 0..2 {
                assert!((scaled.row(i)[k] as f64 - plain.row(i)[k] as f64 * s[k]).abs() < 1e-5);
            }
        }
        assert_eq!(scaled.gamma(), 1.0);
    }

    #[test]
    fn embedding_bytes_round_trip() {
        let (e, _) = randomized_svd(&diag(&[2.0, 1.0, 0.5, 0.2]), &cfg(2, 1)).unwrap();
        let bytes = e.to_bytes();
        assert_eq!(EmbeddingMatrix::from_bytes(&bytes).unwrap(), e);
        assert!(EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
