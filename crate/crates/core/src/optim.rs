//! Momentum SGD with global gradient-norm clipping, coupled weight decay
//! and optional per-tensor trust-ratio scaling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 clipping threshold; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Scale each tensor's update by `||p|| / ||update||` (LAMB-style).
    pub trust_ratio: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4, max_grad_norm: Some(5.0), trust_ratio: false }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub buffers: BTreeMap<ParamId, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to all gradients by clipping (1 when not clipped).
    pub clip_scale: f64,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step: 0, buffers: BTreeMap::new() }
    }

    /// Apply one update to every trainable parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) -> Result<StepInfo> {
        let ids = params.trainable_ids();
        for &id in &ids {
            match grads.get(&id) {
                None => {
                    return Err(Error::InvalidArgument(format!("missing gradient for parameter {}", params.name(id))))
                }
                Some(g) if g.shape() != params.get(id).shape() => {
                    return Err(Error::Shape {
                        op: "optimizer_step",
                        detail: format!("{}: grad {:?} vs param {:?}", params.name(id), g.shape(), params.get(id).shape()),
                    })
                }
                Some(g) if !g.all_finite() => {
                    return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
                }
                _ => {}
            }
        }
        let sq: f64 = ids.iter().map(|id| grads[id].data().iter().map(|v| v * v).sum::<f64>()).sum();
        let grad_norm = sq.sqrt();
        let clip_scale = match self.cfg.max_grad_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };

        for &id in &ids {
            let p = params.get(id);
            let g = &grads[&id];
            let mut d: Vec<f64> = g
                .data()
                .iter()
                .zip(p.data())
                .map(|(g, p)| g * clip_scale + self.cfg.weight_decay * p)
                .collect();
            let buf = self.buffers.entry(id).or_insert_with(|| Tensor::zeros(p.shape()));
            for (b, di) in buf.data_mut().iter_mut().zip(d.iter_mut()) {
                *b = self.cfg.momentum * *b + *di;
                *di = *b;
            }
            let ratio = if self.cfg.trust_ratio {
                let pn = p.norm();
                let un = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if pn > 0.0 && un > 0.0 {
                    pn / un
                } else {
                    1.0
                }
            } else {
                1.0
            };
            let p = params.get_mut(id);
            for (pv, di) in p.data_mut().iter_mut().zip(&d) {
                *pv -= lr * ratio * di;
            }
        }
        self.step += 1;
        Ok(StepInfo { grad_norm, clip_scale })
    }
}
