//! Pseudo-label scoring and selection: online confidence, offline
//! confidence, MC-dropout uncertainty and the uncertainty-aware rule.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::BLANK;
use crate::ctc::{prefix_beam_search, DecodeConfig, Hypothesis, Posteriors};
use crate::error::{CastleError, Result};
use crate::lm::NgramLM;
use crate::metrics::{edit_distance, error_rate, Unit};
use crate::numcore::{Head, Mode, TeacherParams};
use crate::rng::{self, tag};
use crate::training::posteriors;

/// C_on: exp of the mean row maximum over frames whose argmax is not blank;
/// 0 when every frame is blank.
pub fn online_confidence(p: &Posteriors) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in 0..p.frames() {
        let k = p.argmax(t);
        if k != BLANK {
            sum += p.row(t)[k];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineFilterConfig {
    pub c_on: f64,
}

impl OnlineFilterConfig {
    pub fn new(c_on: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c_on) {
            return Err(CastleError::Validation(format!("c_on must lie in [0, 1], got {c_on}")));
        }
        Ok(Self { c_on })
    }

    pub fn accepts(&self, confidence: f64) -> bool {
        confidence >= self.c_on
    }
}

/// C_off: fused decode score per output symbol.
pub fn offline_confidence(hyp: &Hypothesis) -> f64 {
    hyp.fused_score / hyp.labels.len().max(1) as f64
}

/// U: mean edit distance of the variants from `hyp`, per symbol of `hyp`.
pub fn uncertainty<T: PartialEq, V: AsRef<[T]>>(hyp: &[T], variants: &[V]) -> f64 {
    let total: usize = variants.iter().map(|v| edit_distance(v.as_ref(), hyp)).sum();
    total as f64 / (variants.len().max(1) * hyp.len().max(1)) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct McDropoutResult {
    pub hypothesis: Hypothesis,
    pub variants: Vec<Vec<usize>>,
    pub u: f64,
}

/// Decodes once in inference mode and `k` times with independent dropout
/// masks from the `(seed, k)` streams.
pub fn mc_dropout_uncertainty(
    teacher: &TeacherParams,
    x: &[f64],
    frames: usize,
    lm: Option<&NgramLM>,
    k: usize,
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<McDropoutResult> {
    if k == 0 {
        return Err(CastleError::Validation("K must be at least 1".into()));
    }
    let params = teacher.params();
    let top = |mode| -> Result<Hypothesis> {
        let p = posteriors(params, x, frames, Head::Main, mode)?;
        let mut hyps = prefix_beam_search(&p, lm, cfg)?;
        Ok(hyps.swap_remove(0))
    };
    let hypothesis = top(Mode::Inference)?;
    let variants = (0..k)
        .map(|i| {
            let mode = Mode::Train {
                dropout_seed: rng::derive_seed(seed, &[tag::MC_DROPOUT, i as u64]),
                augment: None,
            };
            top(mode).map(|h| h.labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let u = uncertainty(&hypothesis.labels, &variants);
    Ok(McDropoutResult {
        hypothesis,
        variants,
        u,
    })
}

/// One decoded unlabeled utterance. Carries no reference transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub hypothesis: String,
    pub c_off: f64,
    pub u: f64,
    pub length: usize,
    pub variants: Vec<String>,
}

/// A dev-set record paired with its reference, for parameter estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub record: PseudoLabelRecord,
    pub reference: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStrategy {
    ConfidenceOnly,
    UncertaintyOnly,
    Ucf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcfParams {
    pub gamma: f64,
    pub eta: f64,
    /// Selection threshold on the strategy's score.
    pub threshold: f64,
    pub k: usize,
    pub strategy: FilterStrategy,
}

impl UcfParams {
    pub fn confidence_only(threshold: f64, k: usize) -> Self {
        Self {
            gamma: 0.0,
            eta: 0.0,
            threshold,
            k,
            strategy: FilterStrategy::ConfidenceOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() || !self.eta.is_finite() || self.threshold.is_nan() {
            return Err(CastleError::Validation(format!("invalid filter parameters {self:?}")));
        }
        if self.k == 0 {
            return Err(CastleError::Validation("K must be at least 1".into()));
        }
        Ok(())
    }

    /// Score compared against the threshold.
    pub fn score(&self, r: &PseudoLabelRecord) -> f64 {
        match self.strategy {
            FilterStrategy::ConfidenceOnly => r.c_off,
            FilterStrategy::UncertaintyOnly => -r.u,
            FilterStrategy::Ucf => ucf_score(r, self.gamma, self.eta),
        }
    }
}

/// C_off − γ·U + η·ln(max(|Ŷ|, 1)).
pub fn ucf_value(c_off: f64, u: f64, length: f64, gamma: f64, eta: f64) -> f64 {
    c_off - gamma * u + eta * length.max(1.0).ln()
}

pub fn ucf_score(r: &PseudoLabelRecord, gamma: f64, eta: f64) -> f64 {
    ucf_value(r.c_off, r.u, r.length as f64, gamma, eta)
}

pub fn ucf_select<'a>(records: &'a [PseudoLabelRecord], params: &UcfParams) -> Vec<&'a PseudoLabelRecord> {
    records.iter().filter(|r| params.score(r) >= params.threshold).collect()
}

/// Indices of the `n` best scores, ties to the earlier record.
fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

fn selection_wer(dev: &[DevRecord], chosen: &[usize], separator: char) -> Result<f64> {
    let refs: Vec<&str> = chosen.iter().map(|&i| dev[i].reference.as_str()).collect();
    let hyps: Vec<&str> = chosen.iter().map(|&i| dev[i].record.hypothesis.as_str()).collect();
    Ok(error_rate(&refs, &hyps, Unit::Word, separator)?.rate)
}

/// Number of records a fraction selects: `round(fraction·n)`, at least 1.
pub fn selection_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

pub const GAMMA_GRID: (f64, f64, f64) = (0.0, 4.0, 0.25);
pub const ETA_GRID: (f64, f64, f64) = (-1.0, 1.0, 0.25);

fn grid((lo, hi, step): (f64, f64, f64)) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

/// Picks (γ, η) minimizing the word error rate of the top `target_fraction`
/// of dev records, then sets the threshold to the score at the cut.
pub fn estimate_ucf_params(
    dev: &[DevRecord],
    target_fraction: f64,
    strategy: FilterStrategy,
    k: usize,
    separator: char,
) -> Result<UcfParams> {
    if dev.is_empty() {
        return Err(CastleError::Validation("no dev records with references".into()));
    }
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(CastleError::Validation(format!(
            "target fraction must lie in (0, 1), got {target_fraction}"
        )));
    }
    let n = selection_size(dev.len(), target_fraction);
    let mut candidates = match strategy {
        FilterStrategy::Ucf => {
            let mut etas = grid(ETA_GRID);
            etas.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
            grid(GAMMA_GRID)
                .into_iter()
                .flat_map(|g| etas.iter().map(move |&e| (g, e)))
                .collect()
        }
        _ => vec![(0.0, 0.0)],
    };
    let mut best: Option<(f64, UcfParams)> = None;
    for (gamma, eta) in candidates.drain(..) {
        let params = UcfParams {
            gamma,
            eta,
            threshold: f64::NEG_INFINITY,
            k,
            strategy,
        };
        let scores: Vec<f64> = dev.iter().map(|d| params.score(&d.record)).collect();
        let chosen = top_n(&scores, n);
        let wer = selection_wer(dev, &chosen, separator)?;
        if best.as_ref().is_none_or(|(w, _)| wer < *w) {
            let threshold = scores[*chosen.last().expect("n ≥ 1")];
            best = Some((wer, UcfParams { threshold, ..params }));
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

/// Word error rate of the records `params` selects on the dev set.
pub fn dev_selection_wer(dev: &[DevRecord], params: &UcfParams, separator: char) -> Result<f64> {
    let chosen: Vec<usize> = (0..dev.len())
        .filter(|&i| params.score(&dev[i].record) >= params.threshold)
        .collect();
    selection_wer(dev, &chosen, separator)
}

pub fn write_records(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| CastleError::io(path, e))?;
    f.write_all(&out).map_err(|e| CastleError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CastleError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CastleError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
