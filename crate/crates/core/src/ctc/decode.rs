use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{log_add, Posteriors};
use crate::corpus::{Vocab, BLANK};
use crate::error::{CastleError, Result};
use crate::lm::NgramLM;

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax path and its log-probability.
pub fn best_path(p: &Posteriors) -> (Vec<usize>, f64) {
    let path: Vec<usize> = (0..p.frames()).map(|t| p.argmax(t)).collect();
    let lp = path.iter().enumerate().map(|(t, &k)| p.row(t)[k]).sum();
    (path, lp)
}

pub fn greedy_decode(p: &Posteriors) -> Vec<usize> {
    collapse(&best_path(p).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub length_bonus: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            lm_weight: 1.0,
            length_bonus: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub acoustic_logp: f64,
    pub lm_logp: f64,
    pub fused_score: f64,
}

#[derive(Clone)]
struct Prefix {
    labels: Vec<usize>,
    blank: f64,
    non_blank: f64,
    lm: f64,
}

impl Prefix {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

fn slot(next: &mut Vec<Prefix>, index: &mut HashMap<Vec<usize>, usize>, labels: &[usize], lm: f64) -> usize {
    if let Some(&i) = index.get(labels) {
        return i;
    }
    next.push(Prefix {
        labels: labels.to_vec(),
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
        lm,
    });
    index.insert(labels.to_vec(), next.len() - 1);
    next.len() - 1
}

/// Orders by descending score, then lexicographically smaller labels (so a
/// prefix precedes its extensions).
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// CTC prefix beam search with optional n-gram shallow fusion.
///
/// A prefix is scored by `log p_ctc(prefix) + λ·log p_lm(prefix) + β·|prefix|`;
/// finished hypotheses additionally include the LM end-of-sequence term.
pub fn prefix_beam_search(p: &Posteriors, lm: Option<&NgramLM>, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    if p.frames() == 0 {
        return Err(CastleError::Validation("cannot decode an empty posterior".into()));
    }
    if cfg.beam_width < 1 {
        return Err(CastleError::Validation("beam width must be at least 1".into()));
    }
    if !(cfg.lm_weight >= 0.0) {
        return Err(CastleError::Validation(format!("LM weight must be nonnegative, got {}", cfg.lm_weight)));
    }
    if let Some(lm) = lm {
        if lm.outcomes() != p.classes() {
            return Err(CastleError::Validation("language model vocabulary does not match posteriors".into()));
        }
    }
    let use_lm = lm.filter(|_| cfg.lm_weight > 0.0);
    let classes = p.classes();
    let score = |x: &Prefix| x.total() + cfg.lm_weight * x.lm + cfg.length_bonus * x.labels.len() as f64;

    let mut beams = vec![Prefix {
        labels: Vec::new(),
        blank: 0.0,
        non_blank: f64::NEG_INFINITY,
        lm: 0.0,
    }];
    for t in 0..p.frames() {
        let row = p.row(t);
        let mut next: Vec<Prefix> = Vec::with_capacity(beams.len() * classes);
        let mut index: HashMap<Vec<usize>, usize> = HashMap::with_capacity(beams.len() * classes);
        for b in &beams {
            let total = b.total();
            let i = slot(&mut next, &mut index, &b.labels, b.lm);
            next[i].blank = log_add(next[i].blank, total + row[BLANK]);
            let lm_next = use_lm.map(|m| m.next_logprobs(&b.labels));
            let mut extended = b.labels.clone();
            extended.push(0);
            for c in 1..classes {
                let y = row[c];
                *extended.last_mut().unwrap() = c;
                let lm_c = b.lm + lm_next.as_ref().map_or(0.0, |l| l[c - 1]);
                let j = slot(&mut next, &mut index, &extended, lm_c);
                if b.labels.last() == Some(&c) {
                    next[j].non_blank = log_add(next[j].non_blank, b.blank + y);
                    next[i].non_blank = log_add(next[i].non_blank, b.non_blank + y);
                } else {
                    next[j].non_blank = log_add(next[j].non_blank, total + y);
                }
            }
        }
        next.retain(|x| x.total() > f64::NEG_INFINITY);
        next.sort_by(|a, b| rank((score(a), &a.labels), (score(b), &b.labels)));
        next.truncate(cfg.beam_width);
        beams = next;
    }

    let mut hyps: Vec<Hypothesis> = beams
        .into_iter()
        .map(|b| {
            let lm_logp = use_lm.map_or(0.0, |m| b.lm + m.end_logprob(&b.labels));
            let acoustic_logp = b.total();
            Hypothesis {
                fused_score: acoustic_logp + cfg.lm_weight * lm_logp + cfg.length_bonus * b.labels.len() as f64,
                labels: b.labels,
                acoustic_logp,
                lm_logp,
            }
        })
        .collect();
    hyps.sort_by(|a, b| rank((a.fused_score, &a.labels), (b.fused_score, &b.labels)));
    Ok(hyps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHypothesis {
    pub text: String,
    pub acoustic_logp: f64,
    pub lm_logp: f64,
    pub fused_score: f64,
}

/// One line of a decode dump: an utterance id with its ranked hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeDumpRecord {
    pub id: String,
    pub hypotheses: Vec<DumpHypothesis>,
}

impl DecodeDumpRecord {
    pub fn new(id: impl Into<String>, hyps: &[Hypothesis], vocab: &Vocab) -> Self {
        Self {
            id: id.into(),
            hypotheses: hyps
                .iter()
                .map(|h| DumpHypothesis {
                    text: vocab.decode(&h.labels),
                    acoustic_logp: h.acoustic_logp,
                    lm_logp: h.lm_logp,
                    fused_score: h.fused_score,
                })
                .collect(),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_decode_dump(path: &Path, records: &[DecodeDumpRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| CastleError::format(path, e.to_string()))?;
        out.write_all(b"\n").unwrap();
    }
    fs::write(path, out).map_err(|e| CastleError::io(path, e))
}

pub fn read_decode_dump(path: &Path) -> Result<Vec<DecodeDumpRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CastleError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CastleError::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::train_ngram;
    use crate::numcore::log_softmax;
    use proptest::prelude::*;

    fn post(rows: &[&[f64]]) -> Posteriors {
        let classes = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Posteriors::from_logits(&flat, rows.len(), classes)
    }

    fn onehot(k: usize, classes: usize) -> Vec<f64> {
        (0..classes).map(|i| if i == k { 5.0 } else { 0.0 }).collect()
    }

    #[test]
    fn greedy_collapse_rules() {
        let (a, b) = (1, 2);
        let rows: Vec<Vec<f64>> = [a, a, 0, b, b].iter().map(|&k| onehot(k, 3)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert_eq!(greedy_decode(&post(&refs)), vec![a, b]);

        let rows: Vec<Vec<f64>> = [0, 0, 0].iter().map(|&k| onehot(k, 3)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert!(greedy_decode(&post(&refs)).is_empty());

        let rows: Vec<Vec<f64>> = [a, 0, a].iter().map(|&k| onehot(k, 3)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert_eq!(greedy_decode(&post(&refs)), vec![a, a]);
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        assert!(greedy_decode(&post(&[&[0.0, 0.0, 0.0]])).is_empty());
        assert_eq!(greedy_decode(&post(&[&[0.0, 1.0, 1.0]])), vec![1]);
    }

    #[test]
    fn single_frame_beam() {
        let cfg = DecodeConfig {
            beam_width: 4,
            lm_weight: 0.0,
            length_bonus: 0.0,
        };
        let top = &prefix_beam_search(&post(&[&[0.1, 2.0, 1.0]]), None, &cfg).unwrap()[0];
        assert_eq!(top.labels, vec![1]);
        let top = &prefix_beam_search(&post(&[&[3.0, 2.0, 1.0]]), None, &cfg).unwrap()[0];
        assert!(top.labels.is_empty());
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = post(&[&[0.0, 0.0]]);
        let cfg = DecodeConfig {
            beam_width: 0,
            ..DecodeConfig::default()
        };
        assert!(prefix_beam_search(&p, None, &cfg).is_err());
        let empty = Posteriors::from_log_probs(Vec::new(), 0, 2).unwrap();
        assert!(prefix_beam_search(&empty, None, &DecodeConfig::default()).is_err());
    }

    #[test]
    fn strong_lm_dominates_uniform_acoustics() {
        let vocab = Vocab::desk(3); // _ | a b c
        let texts = vec!["ab"; 50];
        let lm = train_ngram(&texts, &vocab, 3, 0.01).unwrap();
        let frames = 4;
        let p = Posteriors::from_logits(&vec![0.0; frames * vocab.size()], frames, vocab.size());
        let cfg = DecodeConfig {
            beam_width: 16,
            lm_weight: 10.0,
            length_bonus: 0.0,
        };
        let top = &prefix_beam_search(&p, Some(&lm), &cfg).unwrap()[0];
        assert_eq!(vocab.decode(&top.labels), "ab");
        let h = &top;
        let expected = h.acoustic_logp + cfg.lm_weight * h.lm_logp;
        assert!((h.fused_score - expected).abs() < 1e-12);
        assert!((h.lm_logp - lm.logprob(&h.labels).unwrap()).abs() < 1e-12);
    }

    /// p(labels | X) by summing every alignment.
    fn exhaustive_label_probs(p: &Posteriors) -> HashMap<Vec<usize>, f64> {
        let (frames, classes) = (p.frames(), p.classes());
        let mut out: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut path = vec![0usize; frames];
        loop {
            let s: f64 = path.iter().enumerate().map(|(t, &k)| p.row(t)[k]).sum();
            let e = out.entry(collapse(&path)).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, s);
            let mut i = 0;
            loop {
                if i == frames {
                    return out;
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn small_posteriors(max_frames: usize, classes: usize) -> impl Strategy<Value = Posteriors> {
        (1..=max_frames).prop_flat_map(move |frames| {
            prop::collection::vec(-3.0f64..3.0, frames * classes)
                .prop_map(move |l| Posteriors::from_logits(&l, frames, classes))
        })
    }

    proptest! {
        #[test]
        fn unbounded_beam_finds_most_probable_labelling(p in small_posteriors(4, 3)) {
            let oracle = exhaustive_label_probs(&p);
            let best = oracle.values().copied().fold(f64::NEG_INFINITY, f64::max);
            let cfg = DecodeConfig { beam_width: oracle.len() + 50, lm_weight: 0.0, length_bonus: 0.0 };
            let hyps = prefix_beam_search(&p, None, &cfg).unwrap();
            prop_assert!((hyps[0].acoustic_logp - best).abs() < 1e-9);
            for h in &hyps {
                prop_assert!((h.acoustic_logp - oracle[&h.labels]).abs() < 1e-9);
            }
        }

        #[test]
        fn finite_beams_never_beat_the_exhaustive_beam(p in small_posteriors(6, 4)) {
            let exact = DecodeConfig { beam_width: 1 << 12, lm_weight: 0.0, length_bonus: 0.0 };
            let best = prefix_beam_search(&p, None, &exact).unwrap()[0].fused_score;
            for width in [1, 2, 4, 8, 16] {
                let cfg = DecodeConfig { beam_width: width, ..exact };
                let top = prefix_beam_search(&p, None, &cfg).unwrap()[0].fused_score;
                prop_assert!(top <= best + 1e-12);
            }
        }

        #[test]
        fn greedy_path_bounds_exhaustive_top(p in small_posteriors(6, 4)) {
            let (_, path_lp) = best_path(&p);
            let cfg = DecodeConfig { beam_width: 1 << 12, lm_weight: 0.0, length_bonus: 0.0 };
            let top = &prefix_beam_search(&p, None, &cfg).unwrap()[0];
            prop_assert!(path_lp <= top.acoustic_logp + 1e-12);
        }
    }

    #[test]
    fn dump_round_trip() {
        let vocab = Vocab::desk(3);
        let lp = log_softmax(&[0.2, 0.1, 0.4, -1.0, 0.3, 0.0, 1.2, 0.1, 0.0, 0.0, 0.5, 0.9], 4);
        let p = Posteriors::from_log_probs(lp, 3, 4).unwrap();
        let hyps = prefix_beam_search(&p, None, &DecodeConfig::default()).unwrap();
        let recs = vec![DecodeDumpRecord::new("u1", &hyps[..3], &vocab)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        write_decode_dump(&path, &recs).unwrap();
        assert_eq!(read_decode_dump(&path).unwrap(), recs);
    }
}
