use serde::{Deserialize, Serialize};

use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running per-channel moments of a batch-norm layer.
///
/// A fresh state holds the identity moments (mean 0, variance 1), so eval
/// mode is always defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Normalization statistics source.
pub enum BnMode<'a> {
    /// Batch statistics; running moments are updated in place.
    Train(&'a mut BnState),
    /// Running moments.
    Eval(&'a BnState),
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

pub(crate) struct BnGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Tape {
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels but gamma/beta have {}/{}", self.value(gamma).len(), self.value(beta).len()),
            ));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = self.value(input).data();
        let (mean, var, train) = match &mode {
            BnMode::Train(_) => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let values = || (0..n).flat_map(|b| x[(b * c + ch) * plane..][..plane].iter());
                    let rough = values().sum::<f64>() / count;
                    *m = rough + values().map(|x| x - rough).sum::<f64>() / count;
                    *v = values().map(|x| (x - *m) * (x - *m)).sum::<f64>() / count;
                }
                (mean, var, true)
            }
            BnMode::Eval(state) => {
                if state.mean.len() != c || state.var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running moments sized {} for {c} channels", state.mean.len()),
                    ));
                }
                (state.mean.clone(), state.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        if let BnMode::Train(state) = mode {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                state.mean[ch] = BN_MOMENTUM * state.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                state.var[ch] = BN_MOMENTUM * state.var[ch] + (1.0 - BN_MOMENTUM) * var[ch] * unbias;
            }
        }
        let shape = self.value(input).shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved: BnSaved { xhat, inv_std, train },
            },
        ))
    }
}

pub(crate) fn batch_norm_backward(shape: &[usize], saved: &BnSaved, gamma: &[f64], g: &[f64]) -> BnGrads {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * plane) as f64;
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in idx() {
            sum_g += g[i];
            sum_gx += g[i] * saved.xhat[i];
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let scale = gamma[ch] * saved.inv_std[ch];
        if saved.train {
            for i in idx() {
                dx[i] = scale * (g[i] - sum_g / count - saved.xhat[i] * sum_gx / count);
            }
        } else {
            for i in idx() {
                dx[i] = scale * g[i];
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
