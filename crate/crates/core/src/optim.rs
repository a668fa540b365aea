//! Adam, dense and lazy.
//!
//! Moments are kept in `f64` whatever the parameter precision. The lazy
//! variant only touches the rows named in a step; its bias correction still
//! uses the global step count, as in LazyAdam.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Parameter element types the optimizer can update.
pub trait Param: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Param for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Param for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(x: f64) -> Self {
        x
    }
}

struct Corrections {
    lr_t: f64,
    c2: f64,
}

impl AdamConfig {
    fn corrections(&self, t: u64) -> Corrections {
        let t = t as i32;
        Corrections { lr_t: self.lr / (1.0 - self.beta1.powi(t)), c2: 1.0 / (1.0 - self.beta2.powi(t)) }
    }

    #[inline]
    fn update<P: Param>(&self, c: &Corrections, p: &mut P, m: &mut f64, v: &mut f64, g: f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let step = c.lr_t * *m / ((*v * c.c2).sqrt() + self.eps);
        *p = P::from_f64(p.to_f64() - step);
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter.
    pub fn step<P: Param>(&mut self, params: &mut [P], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.t += 1;
        let c = self.cfg.corrections(self.t);
        for (((p, m), v), &g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            self.cfg.update(&c, p, m, v, g);
        }
    }
}

/// Adam over a table of rows where each step touches only a few rows.
#[derive(Clone, Debug)]
pub struct LazyAdam {
    cfg: AdamConfig,
    row_len: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl LazyAdam {
    pub fn new(rows: usize, row_len: usize, cfg: AdamConfig) -> Self {
        Self { cfg, row_len, m: vec![0.0; rows * row_len], v: vec![0.0; rows * row_len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates the listed rows. `grads` holds one row per index, in the same
    /// order; indices must be distinct.
    pub fn step<P: Param>(&mut self, params: &mut [P], indices: &[u32], grads: &[f64]) {
        let r = self.row_len;
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), indices.len() * r, "gradient length");
        self.t += 1;
        let c = self.cfg.corrections(self.t);
        for (&i, g) in indices.iter().zip(grads.chunks(r)) {
            let range = i as usize * r..(i as usize + 1) * r;
            for (((p, m), v), &g) in params[range.clone()]
                .iter_mut()
                .zip(&mut self.m[range.clone()])
                .zip(&mut self.v[range])
                .zip(g)
            {
                self.cfg.update(&c, p, m, v, g);
            }
        }
    }
}
