//! Adam and limited-memory BFGS over flat parameter vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over the flat parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_slices(vec![params], vec![grads])
    }

    /// Same update applied tensor by tensor; the concatenation of `params`
    /// must be as long as the state.
    pub fn step_slices(&mut self, mut params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        let np: usize = params.iter().map(|p| p.len()).sum();
        let ng: usize = grads.iter().map(|g| g.len()).sum();
        if np != self.m.len() || ng != self.m.len() || params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                self.m.len(),
                format!("{np} params / {ng} grads"),
            ));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at Adam step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(&grads) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for (((theta, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += p.len();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub history: usize,
    pub armijo_c: f64,
    pub max_line_search: usize,
    pub fallback_lr: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            armijo_c: 1e-4,
            max_line_search: 20,
            fallback_lr: 1e-3,
        }
    }
}

/// What a single L-BFGS step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LbfgsOutcome {
    /// Gradient was exactly zero; nothing moved.
    Stationary { loss: f64 },
    /// Line search accepted step length `t`.
    Accepted { loss: f64, new_loss: f64, t: f64 },
    /// Line search exhausted; a plain gradient step was taken instead.
    Fallback { loss: f64 },
}

impl LbfgsOutcome {
    /// Loss at the parameters the step started from.
    pub fn loss(&self) -> f64 {
        match *self {
            LbfgsOutcome::Stationary { loss }
            | LbfgsOutcome::Accepted { loss, .. }
            | LbfgsOutcome::Fallback { loss } => loss,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsState {
    pub config: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl LbfgsState {
    pub fn new(config: LbfgsConfig) -> Self {
        LbfgsState {
            config,
            s: VecDeque::new(),
            y: VecDeque::new(),
            rho: VecDeque::new(),
        }
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    pub fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    /// Stores `(s, y)` when the curvature `sᵀy` is positive. Returns whether
    /// the pair was kept.
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 0.0 && sy.is_finite()) || self.config.history == 0 {
            return false;
        }
        if self.s.len() == self.config.history {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        self.rho.push_back(1.0 / sy);
        true
    }

    /// `−H·g` from the two-loop recursion with initial scaling `sᵀy / yᵀy`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let n = self.s.len();
        let mut alpha = vec![0.0; n];
        for i in (0..n).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..n {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One L-BFGS step. `oracle` returns loss and gradient at a point and must
    /// be deterministic for the duration of the call.
    pub fn step<F>(&mut self, params: &mut [f64], mut oracle: F) -> Result<LbfgsOutcome>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (f0, g0) = oracle(params)?;
        if g0.len() != params.len() {
            return Err(Error::shape("lbfgs_step", params.len(), g0.len()));
        }
        if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite loss or gradient in L-BFGS".into()));
        }
        let gnorm = norm(&g0);
        if gnorm == 0.0 {
            return Ok(LbfgsOutcome::Stationary { loss: f0 });
        }

        let mut d = self.direction(&g0);
        let mut slope = dot(&g0, &d);
        if !(slope < 0.0) {
            self.clear();
            d = g0.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut t = if self.s.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };

        let mut trial = vec![0.0; params.len()];
        for _ in 0..self.config.max_line_search {
            for ((xt, x), di) in trial.iter_mut().zip(params.iter()).zip(&d) {
                *xt = x + t * di;
            }
            let (f1, g1) = oracle(&trial)?;
            if f1.is_finite() && f1 <= f0 + self.config.armijo_c * t * slope && g1.iter().all(|v| v.is_finite()) {
                let s: Vec<f64> = trial.iter().zip(params.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
                self.push_pair(s, y);
                params.copy_from_slice(&trial);
                return Ok(LbfgsOutcome::Accepted {
                    loss: f0,
                    new_loss: f1,
                    t,
                });
            }
            t *= 0.5;
        }

        for (x, g) in params.iter_mut().zip(&g0) {
            *x -= self.config.fallback_lr * g;
        }
        Ok(LbfgsOutcome::Fallback { loss: f0 })
    }
}
