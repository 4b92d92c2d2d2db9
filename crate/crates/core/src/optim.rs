//! First-order optimizers over [`PolicyParams`].
//!
//! The Adam variant keeps dense moments for `W` and `b` and tracks the n-gram
//! rows that have ever received a gradient. Untouched rows have zero moments
//! and would receive a zero update, so skipping them is exact.

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent: `theta <- theta - lr * g`.
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("optim.kind must be adam or sgd, got {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig<T> {
    pub kind: OptimizerKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for OptimizerConfig<T> {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: T::lit(1e-2),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig<T>,
    step: u64,
    m_w: Vec<T>,
    v_w: Vec<T>,
    m_b: Vec<T>,
    v_b: Vec<T>,
    m_ng: Vec<T>,
    v_ng: Vec<T>,
    active_rows: BTreeSet<usize>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig<T>, params: &PolicyParams<T>) -> Self {
        let adam = config.kind == OptimizerKind::Adam;
        let sized = |n: usize| if adam { vec![T::zero(); n] } else { Vec::new() };
        Self {
            config,
            step: 0,
            m_w: sized(params.w().len()),
            v_w: sized(params.w().len()),
            m_b: sized(params.b().len()),
            v_b: sized(params.b().len()),
            m_ng: sized(params.ngram().len()),
            v_ng: sized(params.ngram().len()),
            active_rows: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig<T> {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and increments the parameter version. Returns the
    /// gradient norm; aborts without touching `params` if it is not finite.
    pub fn step(&mut self, params: &mut PolicyParams<T>, grad: &Gradient<T>) -> Result<T> {
        let norm = grad.norm();
        if !norm.is_finite() {
            return Err(Error::NonFiniteGradient(norm.as_f64()));
        }
        let v = params.vocab_size();
        let lr = self.config.lr;
        self.step += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                let (w, b, ng) = params.parts_mut();
                for (p, &g) in w.iter_mut().zip(&grad.w) {
                    *p = *p - lr * g;
                }
                for (p, &g) in b.iter_mut().zip(&grad.b) {
                    *p = *p - lr * g;
                }
                for (&r, row) in &grad.ngram {
                    for (p, &g) in ng[r * v..(r + 1) * v].iter_mut().zip(row) {
                        *p = *p - lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c = self.config;
                let t = self.step as i32;
                let bc1 = T::one() - c.beta1.powi(t);
                let bc2 = T::one() - c.beta2.powi(t);
                let adam = |p: &mut T, m: &mut T, s: &mut T, g: T| {
                    *m = c.beta1 * *m + (T::one() - c.beta1) * g;
                    *s = c.beta2 * *s + (T::one() - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *s / bc2;
                    *p = *p - lr * mh / (vh.sqrt() + c.eps);
                };
                let (w, b, ng) = params.parts_mut();
                for i in 0..w.len() {
                    adam(&mut w[i], &mut self.m_w[i], &mut self.v_w[i], grad.w[i]);
                }
                for i in 0..b.len() {
                    adam(&mut b[i], &mut self.m_b[i], &mut self.v_b[i], grad.b[i]);
                }
                self.active_rows.extend(grad.ngram.keys().copied());
                for &r in &self.active_rows {
                    let row = grad.ngram.get(&r);
                    for j in 0..v {
                        let i = r * v + j;
                        let g = row.map_or(T::zero(), |x| x[j]);
                        adam(&mut ng[i], &mut self.m_ng[i], &mut self.v_ng[i], g);
                    }
                }
            }
        }
        params.bump_version();
        Ok(norm)
    }
}
