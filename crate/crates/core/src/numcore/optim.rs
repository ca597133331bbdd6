use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{CastleError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warm-up from `init_scale·peak`, a hold at `peak`, then
    /// exponential decay to `final_scale·peak` over the remaining steps.
    TriState {
        peak: f64,
        warmup_frac: f64,
        hold_frac: f64,
        init_scale: f64,
        final_scale: f64,
    },
    /// Linear decay from `lr` to zero.
    LinearDecay {
        lr: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::TriState {
            peak: 3e-3,
            warmup_frac: 0.1,
            hold_frac: 0.4,
            init_scale: 0.05,
            final_scale: 0.05,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let s = step as f64;
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::LinearDecay { lr } => lr * (1.0 - s / total).max(0.0),
            LrSchedule::TriState {
                peak,
                warmup_frac,
                hold_frac,
                init_scale,
                final_scale,
            } => {
                let warm = warmup_frac * total;
                let hold = hold_frac * total;
                if s < warm {
                    peak * (init_scale + (1.0 - init_scale) * s / warm)
                } else if s < warm + hold {
                    peak
                } else {
                    let decay_len = (total - warm - hold).max(1.0);
                    let progress = ((s - warm - hold) / decay_len).min(1.0);
                    peak * final_scale.powf(progress)
                }
            }
        }
    }
}

/// Which parameter groups an optimizer step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Trainable {
    pub layer1: bool,
    pub layer2: bool,
    pub main_head: bool,
    pub aux_head: bool,
    pub ssl_head: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self::fine_tune(false)
    }
}

impl Trainable {
    /// Encoder and CTC heads; the first layer optionally frozen.
    pub fn fine_tune(freeze_layer1: bool) -> Self {
        Self {
            layer1: !freeze_layer1,
            layer2: true,
            main_head: true,
            aux_head: true,
            ssl_head: false,
        }
    }

    /// Encoder and the reconstruction head.
    pub fn pretrain() -> Self {
        Self {
            layer1: true,
            layer2: true,
            main_head: false,
            aux_head: false,
            ssl_head: true,
        }
    }

    fn by_tensor(&self) -> [bool; 10] {
        let g = [self.layer1, self.layer2, self.main_head, self.aux_head, self.ssl_head];
        std::array::from_fn(|i| g[i / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimHyper {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub clip_norm: Option<f64>,
    pub total_steps: usize,
    pub trainable: Trainable,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::default(),
            schedule: LrSchedule::default(),
            clip_norm: Some(5.0),
            total_steps: 1000,
            trainable: Trainable::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: usize,
    first: Option<ModelParams>,
    second: Option<ModelParams>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Applies one update. Gradients are checked for finiteness, then clipped
/// to `clip_norm` (global L2 norm over trainable tensors).
pub fn backprop_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    hyper: &OptimHyper,
) -> Result<()> {
    let mask = hyper.trainable.by_tensor();
    let mut sq = 0.0;
    for (i, (name, g)) in grads.tensors().into_iter().enumerate() {
        if !mask[i] {
            continue;
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(CastleError::Numeric(format!("non-finite gradient in {name}")));
        }
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = match hyper.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let lr = hyper.schedule.lr_at(state.step, hyper.total_steps);
    state.step += 1;
    match hyper.optimizer {
        OptimizerKind::Sgd => {
            for (i, ((_, p), (_, g))) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
                if !mask[i] {
                    continue;
                }
                for (w, d) in p.iter_mut().zip(g) {
                    *w -= lr * scale * d;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let first = state.first.get_or_insert_with(|| grads.zeros_like());
            let second = state.second.get_or_insert_with(|| grads.zeros_like());
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let tensors = params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(first.tensors_mut())
                .zip(second.tensors_mut());
            for (i, ((((_, p), (_, g)), (_, m)), (_, v))) in tensors.enumerate() {
                if !mask[i] {
                    continue;
                }
                for (((w, d), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let d = d * scale;
                    *m = beta1 * *m + (1.0 - beta1) * d;
                    *v = beta2 * *v + (1.0 - beta2) * d * d;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(CastleError::Numeric(format!("parameter {name} became non-finite")));
    }
    Ok(())
}
