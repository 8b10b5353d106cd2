//! Parameter update rules.
//!
//! [`Adafactor`] follows the factored second-moment recipe of Shazeer & Stern
//! (2018) without first moment, with an explicit learning rate (no relative
//! step, no parameter scaling) and RMS update clipping:
//!
//! ```text
//! ρ_t  = 1 − t^c                                   (c = decay_exponent, −0.8)
//! matrices:  R_t = ρ_t R_{t−1} + (1−ρ_t) rowmean(G² + ε₁)
//!            C_t = ρ_t C_{t−1} + (1−ρ_t) colmean(G² + ε₁)
//!            V̂_t = R_t C_tᵀ / mean(R_t)
//! vectors:   V̂_t = ρ_t V̂_{t−1} + (1−ρ_t)(G² + ε₁)
//! U_t  = G / √V̂_t
//! Û_t  = U_t / max(1, RMS(U_t) / clip_threshold)
//! θ_t  = θ_{t−1} − lr·Û_t − lr·weight_decay·θ_{t−1}
//! ```
//!
//! Row/column *means* are used instead of sums; the ratio `R Cᵀ / ΣR` is the
//! same either way.

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdafactorConfig {
    pub decay_exponent: f64,
    pub eps1: f64,
    pub clip_threshold: f64,
    pub weight_decay: f64,
    /// Factor the second moment of rank-2 parameters.
    pub factored: bool,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            decay_exponent: -0.8,
            eps1: 1e-30,
            clip_threshold: 1.0,
            weight_decay: 0.0,
            factored: true,
        }
    }
}

/// Second-moment accumulator for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SecondMoment<T> {
    Factored { rows: Vec<T>, cols: Vec<T> },
    Full(Vec<T>),
}

impl<T: Scalar> SecondMoment<T> {
    fn for_shape(shape: &[usize], factored: bool) -> Self {
        match shape {
            [r, c] if factored && *r > 1 && *c > 1 => SecondMoment::Factored {
                rows: vec![T::zero(); *r],
                cols: vec![T::zero(); *c],
            },
            _ => SecondMoment::Full(vec![T::zero(); shape.iter().product()]),
        }
    }

    fn matches(&self, shape: &[usize]) -> bool {
        match (self, shape) {
            (SecondMoment::Factored { rows, cols }, [r, c]) => rows.len() == *r && cols.len() == *c,
            (SecondMoment::Full(v), s) => v.len() == s.iter().product::<usize>(),
            _ => false,
        }
    }

    /// Dense reconstruction of the second-moment estimate.
    pub fn estimate(&self) -> Vec<T> {
        match self {
            SecondMoment::Full(v) => v.clone(),
            SecondMoment::Factored { rows, cols } => {
                let mean_r = rows.iter().copied().sum::<T>() / T::lit(rows.len() as f64);
                let mut out = Vec::with_capacity(rows.len() * cols.len());
                for &r in rows {
                    for &c in cols {
                        out.push(r * c / mean_r);
                    }
                }
                out
            }
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        match self {
            SecondMoment::Full(v) => v.iter().all(|&x| x >= T::zero()),
            SecondMoment::Factored { rows, cols } => {
                rows.iter().chain(cols).all(|&x| x >= T::zero())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: Vec<SecondMoment<T>>,
}

fn check_shapes<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "optimizer",
            expected: vec![params.len()],
            got: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "optimizer",
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// One Adafactor update of `params` in place.
pub fn adafactor_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdafactorConfig,
    lr: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    if !(lr >= 0.0) {
        return Err(NumericsError::InvalidArgument(format!("learning rate {lr}")));
    }
    if state.moments.is_empty() && state.step == 0 {
        state.moments = params
            .iter()
            .map(|p| SecondMoment::for_shape(p.shape(), cfg.factored))
            .collect();
    }
    if state.moments.len() != params.len()
        || state.moments.iter().zip(params.iter()).any(|(m, p)| !m.matches(p.shape()))
    {
        return Err(NumericsError::InvalidArgument(
            "optimizer state does not match parameter shapes".into(),
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let rho = T::lit(1.0 - t.powf(cfg.decay_exponent));
    let one_minus = T::one() - rho;
    let eps1 = T::lit(cfg.eps1);
    let lr_t = T::lit(lr);
    let wd = T::lit(cfg.weight_decay);
    let clip = T::lit(cfg.clip_threshold);

    for ((param, grad), moment) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        let g = grad.data();
        let mut update: Vec<T> = match moment {
            SecondMoment::Full(v) => {
                for (vi, &gi) in v.iter_mut().zip(g) {
                    *vi = rho * *vi + one_minus * (gi * gi + eps1);
                }
                g.iter().zip(v.iter()).map(|(&gi, &vi)| gi / vi.sqrt()).collect()
            }
            SecondMoment::Factored { rows, cols } => {
                let (r, c) = (rows.len(), cols.len());
                let mut col_acc = vec![T::zero(); c];
                for i in 0..r {
                    let row = &g[i * c..(i + 1) * c];
                    let mut s = T::zero();
                    for (j, &gi) in row.iter().enumerate() {
                        let sq = gi * gi + eps1;
                        s += sq;
                        col_acc[j] += sq;
                    }
                    rows[i] = rho * rows[i] + one_minus * s / T::lit(c as f64);
                }
                for j in 0..c {
                    cols[j] = rho * cols[j] + one_minus * col_acc[j] / T::lit(r as f64);
                }
                let mean_r = rows.iter().copied().sum::<T>() / T::lit(r as f64);
                let mut u = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let v = rows[i] * cols[j] / mean_r;
                        u.push(g[i * c + j] / v.sqrt());
                    }
                }
                u
            }
        };
        let n = T::lit(update.len().max(1) as f64);
        let rms = (update.iter().map(|&u| u * u).sum::<T>() / n).sqrt();
        let denom = T::one().max(rms / clip);
        for u in update.iter_mut() {
            *u /= denom;
        }
        for (p, u) in param.data_mut().iter_mut().zip(&update) {
            *p = *p - lr_t * *u - lr_t * wd * *p;
        }
    }
    Ok(())
}

/// Common interface of the update rules used by the training loops.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()>;
    fn steps_taken(&self) -> u64;
}

#[derive(Clone, Debug, Default)]
pub struct Adafactor<T> {
    pub config: AdafactorConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Adafactor<T> {
    pub fn new(config: AdafactorConfig) -> Self {
        Self {
            config,
            state: OptimizerState {
                step: 0,
                moments: Vec::new(),
            },
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adafactor<T> {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        adafactor_step(params, grads, &mut self.state, &self.config, lr)
    }

    fn steps_taken(&self) -> u64 {
        self.state.step
    }
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    steps: u64,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        check_shapes(params, grads)?;
        let lr = T::lit(lr);
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                *pi -= lr * gi;
            }
        }
        self.steps += 1;
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }
}
