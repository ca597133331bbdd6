//! Connectionist temporal classification: loss, gradients and decoders.
//!
//! Symbol 0 is the blank. All probabilities are handled in log space.

mod decode;
mod loss;

use crate::error::{CastleError, Result};
use crate::numcore::log_softmax;

pub use decode::{
    best_path, collapse, greedy_decode, prefix_beam_search, read_decode_dump, write_decode_dump, DecodeConfig,
    DecodeDumpRecord, Hypothesis,
};
pub use loss::{ctc_loss, ctc_loss_and_grad, ctc_nll_from_log_probs, repeat_count};

/// `frames × classes` matrix of per-frame log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Posteriors {
    /// Normalizes raw logits row by row.
    pub fn from_logits(logits: &[f64], frames: usize, classes: usize) -> Self {
        Self {
            frames,
            classes,
            data: log_softmax(logits, classes),
        }
    }

    /// Wraps log-probabilities, checking that each row sums to one.
    pub fn from_log_probs(data: Vec<f64>, frames: usize, classes: usize) -> Result<Self> {
        if data.len() != frames * classes || classes < 2 {
            return Err(CastleError::Validation(format!(
                "posterior buffer of {} values is not {frames}×{classes}",
                data.len()
            )));
        }
        for t in 0..frames {
            let s: f64 = data[t * classes..(t + 1) * classes].iter().map(|x| x.exp()).sum();
            if !((s.ln()).abs() <= 1e-6) {
                return Err(CastleError::Validation(format!("row {t} is not normalized")));
            }
        }
        Ok(Self { frames, classes, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-frame argmax, ties to the lowest index.
    pub fn argmax(&self, t: usize) -> usize {
        argmax(self.row(t))
    }

    /// Fraction of frames whose argmax is the blank.
    pub fn blank_ratio(&self) -> f64 {
        let blanks = (0..self.frames).filter(|&t| self.argmax(t) == 0).count();
        blanks as f64 / self.frames.max(1) as f64
    }

    /// Returns a copy with an extra frame appended.
    pub fn with_frame(&self, row: &[f64]) -> Self {
        assert_eq!(row.len(), self.classes);
        let mut data = self.data.clone();
        data.extend_from_slice(row);
        Self {
            frames: self.frames + 1,
            classes: self.classes,
            data,
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// log(exp(a) + exp(b)) without overflow.
#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
