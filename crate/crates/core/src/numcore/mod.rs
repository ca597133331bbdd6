//! Fixed small network with hand-written gradients.
//!
//! The encoder maps a `(2c+1)·F` context window around each frame through two
//! tanh layers to an `H`-dimensional latent; three affine heads read that
//! latent: the main and auxiliary CTC heads (`H → V`) and a reconstruction
//! head (`H → F`) used only for self-supervised pre-training.

mod augment;
mod checkpoint;
mod forward;
mod gradcheck;
mod optim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CastleError, Result};
use crate::rng::{self, tag, Rng};

pub use augment::{apply_mask_plan, apply_masking_augment, sample_mask_plan, AugmentSpec, MaskPlan};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{backward, encode, head_backward, project, ForwardCache, Mode};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use optim::{backprop_step, LrSchedule, OptimHyper, OptimizerKind, OptimizerState, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arch {
    pub feat_dim: usize,
    /// Frames of context on each side.
    pub context: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            context: 2,
            hidden: 64,
            vocab_size: 12,
            dropout_rate: 0.1,
        }
    }
}

impl Arch {
    pub fn window_dim(&self) -> usize {
        (2 * self.context + 1) * self.feat_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.hidden == 0 || self.vocab_size < 2 {
            return Err(CastleError::Validation(format!("degenerate architecture {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CastleError::Validation(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Dense affine map `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let a = gain * (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    /// Applies the map to `rows` row-major inputs.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                y.push(self.bias[o] + dot(w, xr));
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the
    /// input gradient into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear, dx: Option<&mut [f64]>) {
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let dyr = &dy[r * self.out_dim..(r + 1) * self.out_dim];
            for (o, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let gw = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (w, &xi) in gw.iter_mut().zip(xr) {
                    *w += g * xi;
                }
            }
        }
        if let Some(dx) = dx {
            for r in 0..rows {
                let dyr = &dy[r * self.out_dim..(r + 1) * self.out_dim];
                let dxr = &mut dx[r * self.in_dim..(r + 1) * self.in_dim];
                for (o, &g) in dyr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                    for (d, &wi) in dxr.iter_mut().zip(w) {
                        *d += g * wi;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Which CTC head to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Main,
    Aux,
}

/// Encoder φ (two layers) plus heads ψ_m, ψ_a and the reconstruction head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub layer1: Linear,
    pub layer2: Linear,
    pub main_head: Linear,
    pub aux_head: Linear,
    pub ssl_head: Linear,
}

pub const TENSOR_NAMES: [&str; 10] = [
    "layer1.weight",
    "layer1.bias",
    "layer2.weight",
    "layer2.bias",
    "main_head.weight",
    "main_head.bias",
    "aux_head.weight",
    "aux_head.bias",
    "ssl_head.weight",
    "ssl_head.bias",
];

impl ModelParams {
    /// Randomly initialized encoder and heads.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let (d, h, v, f) = (arch.window_dim(), arch.hidden, arch.vocab_size, arch.feat_dim);
        let layer1 = Linear::random(d, h, 1.0, &mut rng);
        let layer2 = Linear::random(h, h, 1.0, &mut rng);
        let ssl_head = Linear::random(h, f, 1.0, &mut rng);
        let mut p = Self {
            layer1,
            layer2,
            main_head: Linear::zeros(h, v),
            aux_head: Linear::zeros(h, v),
            ssl_head,
            arch,
        };
        p.reinit_heads(seed);
        Ok(p)
    }

    /// Gradient accumulator of the same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.in_dim, l.out_dim);
        Self {
            arch: self.arch.clone(),
            layer1: z(&self.layer1),
            layer2: z(&self.layer2),
            main_head: z(&self.main_head),
            aux_head: z(&self.aux_head),
            ssl_head: z(&self.ssl_head),
        }
    }

    /// Fresh random CTC heads on top of the current encoder.
    pub fn reinit_heads(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, &[tag::HEADS]);
        let (h, v) = (self.arch.hidden, self.arch.vocab_size);
        self.main_head = Linear::random(h, v, 0.5, &mut rng);
        self.aux_head = Linear::random(h, v, 0.5, &mut rng);
    }

    pub fn head(&self, head: Head) -> &Linear {
        match head {
            Head::Main => &self.main_head,
            Head::Aux => &self.aux_head,
        }
    }

    pub fn head_mut(&mut self, head: Head) -> &mut Linear {
        match head {
            Head::Main => &mut self.main_head,
            Head::Aux => &mut self.aux_head,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 10] {
        let l = [&self.layer1, &self.layer2, &self.main_head, &self.aux_head, &self.ssl_head];
        let mut out: [(&'static str, &[f64]); 10] = [("", &[]); 10];
        for (i, lin) in l.iter().enumerate() {
            out[2 * i] = (TENSOR_NAMES[2 * i], &lin.weight);
            out[2 * i + 1] = (TENSOR_NAMES[2 * i + 1], &lin.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 10] {
        let [a, b, c, d, e] = [
            &mut self.layer1,
            &mut self.layer2,
            &mut self.main_head,
            &mut self.aux_head,
            &mut self.ssl_head,
        ];
        [
            (TENSOR_NAMES[0], &mut a.weight),
            (TENSOR_NAMES[1], &mut a.bias),
            (TENSOR_NAMES[2], &mut b.weight),
            (TENSOR_NAMES[3], &mut b.bias),
            (TENSOR_NAMES[4], &mut c.weight),
            (TENSOR_NAMES[5], &mut c.bias),
            (TENSOR_NAMES[6], &mut d.weight),
            (TENSOR_NAMES[7], &mut d.bias),
            (TENSOR_NAMES[8], &mut e.weight),
            (TENSOR_NAMES[9], &mut e.bias),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// `self = (1 − rate)·self + rate·other`.
    pub fn ema_towards(&mut self, other: &ModelParams, rate: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (1.0 - rate) * *d + rate * s;
            }
        }
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    /// SHA-256 over every tensor's bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for x in t {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Frozen parameter snapshot used to generate pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams(ModelParams);

impl TeacherParams {
    pub fn snapshot(student: &ModelParams) -> Self {
        Self(student.clone())
    }

    pub fn params(&self) -> &ModelParams {
        &self.0
    }
}

/// Row-wise log-softmax, stabilized by subtracting the row maximum.
pub fn log_softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let top = super::ctc::argmax(row);
        let m = row[top];
        // ln(1 + Σ_{i≠top} e^(x_i − m)) keeps precision for tiny tails
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, x)| (x - m).exp())
            .sum();
        let lse = rest.ln_1p();
        out.extend(row.iter().map(|x| (x - m) - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_softmax_cases() {
        let out = log_softmax(&[0.0; 4], 4);
        for x in out {
            assert!((x - 0.25f64.ln()).abs() < 1e-15);
        }
        let out = log_softmax(&[1000.0, 0.0], 2);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], -1000.0);
    }

    proptest! {
        #[test]
        fn log_softmax_normalizes_and_is_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 2..8), k in -100.0f64..100.0) {
            let a = log_softmax(&row, row.len());
            let s: f64 = a.iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = row.iter().map(|x| x + k).collect();
            let b = log_softmax(&shifted, row.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn extreme_logits_match_extended_precision() {
        // log(1 + e^-d) computed as a series for large d.
        for d in [30.0f64, 100.0, 745.0, 1000.0] {
            let out = log_softmax(&[d, 0.0], 2);
            let tail = (-d).exp();
            // log(1 + t) = t − t²/2 + … ; t < 1e-13 here so two terms suffice
            let exact = tail - tail * tail / 2.0;
            assert!((out[0] + exact).abs() <= exact * 1e-12, "d = {d}");
            assert!((out[1] + d + exact).abs() <= d * 1e-15);
        }
    }

    #[test]
    fn linear_projection_cases() {
        let mut head = Linear::zeros(3, 3);
        for i in 0..3 {
            head.weight[i * 3 + i] = 1.0;
        }
        let z = vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25];
        assert_eq!(head.forward(&z, 2), z);
        assert_eq!(Linear::zeros(3, 4).forward(&z, 2), vec![0.0; 8]);
    }

    #[test]
    fn params_are_seeded() {
        let a = ModelParams::new(Arch::default(), 1).unwrap();
        let b = ModelParams::new(Arch::default(), 1).unwrap();
        let c = ModelParams::new(Arch::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.main_head.weight.len(), a.aux_head.weight.len());
        assert!(a.first_non_finite().is_none());
    }

    #[test]
    fn ema_rate_one_copies_student() {
        let mut t = ModelParams::new(Arch::default(), 1).unwrap();
        let s = ModelParams::new(Arch::default(), 2).unwrap();
        t.ema_towards(&s, 1.0);
        assert_eq!(t, s);
    }
}
