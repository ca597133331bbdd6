//! Shared training plumbing: prepared examples, CTC forward/backward on the
//! heads, seeded batch sampling and supervised fine-tuning.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Vocab};
use crate::ctc::{ctc_loss_and_grad, greedy_decode, Posteriors};
use crate::error::{CastleError, Result};
use crate::metrics::{error_rate, Unit};
use crate::numcore::{
    backprop_step, backward, encode, head_backward, log_softmax, project, AugmentSpec, Head, Mode, ModelParams,
    OptimHyper, OptimizerState,
};
use crate::rng::{self, tag};

/// Features in f64 with an integer label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub x: Vec<f64>,
    pub frames: usize,
    pub labels: Vec<usize>,
}

impl Example {
    pub fn new(u: &Utterance, labels: Vec<usize>) -> Self {
        Self {
            id: u.id.clone(),
            x: u.features_f64(),
            frames: u.frames,
            labels,
        }
    }
}

/// Features of an unlabeled utterance. The hidden transcript is not copied.
#[derive(Debug, Clone, PartialEq)]
pub struct Unlabeled {
    pub id: String,
    pub x: Vec<f64>,
    pub frames: usize,
}

pub fn unlabeled_inputs(utts: &[Utterance]) -> Vec<Unlabeled> {
    utts.iter()
        .map(|u| Unlabeled {
            id: u.id.clone(),
            x: u.features_f64(),
            frames: u.frames,
        })
        .collect()
}

/// Encodes transcripts; every utterance must carry one.
pub fn labeled_examples(utts: &[Utterance], vocab: &Vocab) -> Result<Vec<Example>> {
    utts.iter()
        .map(|u| {
            let text = u
                .transcript
                .as_deref()
                .ok_or_else(|| CastleError::Validation(format!("utterance {} has no transcript", u.id)))?;
            Ok(Example::new(u, vocab.encode(text)?))
        })
        .collect()
}

pub fn posteriors(params: &ModelParams, x: &[f64], frames: usize, head: Head, mode: Mode) -> Result<Posteriors> {
    let cache = encode(params, x, frames, mode)?;
    let logits = project(params.head(head), &cache.z, frames)?;
    Posteriors::from_log_probs(log_softmax(&logits, params.arch.vocab_size), frames, params.arch.vocab_size)
}

/// One CTC objective read from `head`, scaled by `weight`.
#[derive(Debug, Clone, Copy)]
pub struct CtcTerm<'a> {
    pub head: Head,
    pub labels: &'a [usize],
    pub weight: f64,
}

/// Runs one shared encoder pass and accumulates the weighted gradients of
/// every term into `grads`. Returns each term's unweighted loss, or `None`
/// where the target is infeasible for the frame count.
pub fn ctc_terms_grad(
    params: &ModelParams,
    x: &[f64],
    frames: usize,
    mode: Mode,
    terms: &[CtcTerm],
    grads: &mut ModelParams,
    train_layer1: bool,
) -> Result<Vec<Option<f64>>> {
    let cache = encode(params, x, frames, mode)?;
    let v = params.arch.vocab_size;
    let mut dz = vec![0.0; cache.z.len()];
    let mut losses = Vec::with_capacity(terms.len());
    for term in terms {
        let head = params.head(term.head);
        let logits = project(head, &cache.z, frames)?;
        match ctc_loss_and_grad(&logits, frames, v, term.labels) {
            Ok((loss, mut g)) => {
                g.iter_mut().for_each(|d| *d *= term.weight);
                head_backward(head, &cache.z, &g, frames, grads.head_mut(term.head), &mut dz);
                losses.push(Some(loss));
            }
            Err(CastleError::Infeasible { .. }) => losses.push(None),
            Err(e) => return Err(e),
        }
    }
    if losses.iter().any(Option::is_some) {
        backward(params, &cache, &dz, grads, train_layer1);
    }
    Ok(losses)
}

/// Draws `size` distinct indices below `n` (all of them when `size ≥ n`).
pub fn sample_batch(n: usize, size: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    let mut r = rng::stream(seed, tags);
    index::sample(&mut r, n, size.min(n)).into_vec()
}

/// Seed for the per-sample dropout and masking streams of one update.
pub fn sample_seed(seed: u64, update: usize, group: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &[tag::DROPOUT, update as u64, group, i as u64])
}

pub fn train_mode(seed: u64, augment: Option<AugmentSpec>) -> Mode {
    Mode::Train {
        dropout_seed: seed,
        augment: augment.map(|a| a.with_seed(rng::derive_seed(seed, &[tag::AUGMENT]))),
    }
}

/// Outcome of a batch of per-sample CTC passes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutcome {
    pub loss_sum: f64,
    pub counted: usize,
    pub skipped: usize,
}

/// Per-sample jobs evaluated in parallel, reduced in input order.
pub(crate) fn accumulate<F>(jobs: usize, like: &ModelParams, grads: &mut ModelParams, f: F) -> Result<BatchOutcome>
where
    F: Fn(usize, &mut ModelParams) -> Result<Vec<Option<f64>>> + Sync,
{
    let parts: Vec<Result<(ModelParams, Vec<Option<f64>>)>> = (0..jobs)
        .into_par_iter()
        .map(|i| {
            let mut g = like.zeros_like();
            let losses = f(i, &mut g)?;
            Ok((g, losses))
        })
        .collect();
    let mut out = BatchOutcome::default();
    for part in parts {
        let (g, losses) = part?;
        grads.add_scaled(&g, 1.0);
        for l in losses {
            match l {
                Some(l) => {
                    out.loss_sum += l;
                    out.counted += 1;
                }
                None => out.skipped += 1,
            }
        }
    }
    Ok(out)
}

/// Which heads a supervised update trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSet {
    Main,
    Both,
}

/// Gradients of the mean supervised CTC loss over `batch`, with one shared
/// augmented view per sample feeding every trained head.
pub fn supervised_grads(
    params: &ModelParams,
    examples: &[Example],
    batch: &[usize],
    heads: HeadSet,
    augment: Option<AugmentSpec>,
    seed: u64,
    update: usize,
    train_layer1: bool,
    grads: &mut ModelParams,
) -> Result<BatchOutcome> {
    let scale = 1.0 / batch.len().max(1) as f64;
    accumulate(batch.len(), params, grads, |i, g| {
        let ex = &examples[batch[i]];
        let mode = train_mode(sample_seed(seed, update, tag::SUPERVISED, i), augment);
        let main = CtcTerm {
            head: Head::Main,
            labels: &ex.labels,
            weight: scale,
        };
        let terms = match heads {
            HeadSet::Main => vec![main],
            HeadSet::Both => vec![
                CtcTerm {
                    head: Head::Aux,
                    ..main
                },
                main,
            ],
        };
        ctc_terms_grad(params, &ex.x, ex.frames, mode, &terms, g, train_layer1)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub updates: usize,
    pub batch_size: usize,
    pub heads: HeadSet,
    pub augment: Option<AugmentSpec>,
    pub freeze_layer1: bool,
    pub hyper: OptimHyper,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            updates: 500,
            batch_size: 8,
            heads: HeadSet::Both,
            augment: Some(AugmentSpec::default()),
            freeze_layer1: true,
            hyper: OptimHyper::default(),
            seed: 0,
        }
    }
}

/// One supervised update; the batch comes from the `SUPERVISED` stream.
pub fn supervised_update(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    examples: &[Example],
    cfg: &SupervisedConfig,
    update: usize,
) -> Result<BatchOutcome> {
    let batch = sample_batch(examples.len(), cfg.batch_size, cfg.seed, &[tag::SUPERVISED, update as u64]);
    let mut grads = params.zeros_like();
    let out = supervised_grads(
        params,
        examples,
        &batch,
        cfg.heads,
        cfg.augment,
        cfg.seed,
        update,
        !cfg.freeze_layer1,
        &mut grads,
    )?;
    let hyper = hyper_for(&cfg.hyper, cfg.updates, cfg.freeze_layer1);
    backprop_step(params, &grads, state, &hyper)?;
    Ok(out)
}

pub(crate) fn hyper_for(base: &OptimHyper, total_steps: usize, freeze_layer1: bool) -> OptimHyper {
    let mut h = *base;
    h.total_steps = total_steps;
    h.trainable.layer1 = h.trainable.layer1 && !freeze_layer1;
    h
}

/// Plain supervised fine-tuning on labeled examples.
pub fn fine_tune_supervised(params: &ModelParams, examples: &[Example], cfg: &SupervisedConfig) -> Result<ModelParams> {
    if examples.is_empty() && cfg.updates > 0 {
        return Err(CastleError::Validation("no labeled examples to fine-tune on".into()));
    }
    let mut p = params.clone();
    let mut state = OptimizerState::new();
    for update in 0..cfg.updates {
        supervised_update(&mut p, &mut state, examples, cfg, update)?;
    }
    Ok(p)
}

/// Greedy CER of `head` and its blank-argmax frame ratio over `utts`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyEval {
    pub cer: f64,
    pub blank_ratio: f64,
}

pub fn greedy_eval(params: &ModelParams, utts: &[Utterance], head: Head, vocab: &Vocab) -> Result<GreedyEval> {
    let decoded: Vec<Result<(String, usize, usize)>> = utts
        .par_iter()
        .map(|u| {
            let p = posteriors(params, &u.features_f64(), u.frames, head, Mode::Inference)?;
            let blanks = (0..p.frames()).filter(|&t| p.argmax(t) == 0).count();
            Ok((vocab.decode(&greedy_decode(&p)), blanks, p.frames()))
        })
        .collect();
    let mut hyps = Vec::with_capacity(utts.len());
    let (mut blanks, mut frames) = (0, 0);
    for d in decoded {
        let (h, b, f) = d?;
        hyps.push(h);
        blanks += b;
        frames += f;
    }
    let refs: Vec<&str> = utts.iter().map(|u| u.reference()).collect();
    let cer = error_rate(&refs, &hyps, Unit::Char, vocab.separator())?.rate;
    Ok(GreedyEval {
        cer,
        blank_ratio: blanks as f64 / frames.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};
    use crate::numcore::{finite_diff_check, Arch, GradCheckConfig};

    fn tiny() -> (ModelParams, Vec<Example>, Vocab) {
        let corpus = build_corpus(&CorpusConfig {
            labeled_source: 6,
            unlabeled_source: 6,
            unlabeled_target: 2,
            dev: 2,
            test: 2,
            lm_texts: 5,
            ..CorpusConfig::default()
        })
        .unwrap();
        let arch = Arch {
            hidden: 12,
            ..Arch::default()
        };
        let p = ModelParams::new(arch, 3).unwrap();
        let ex = labeled_examples(&corpus.labeled_source, &corpus.vocab).unwrap();
        (p, ex, corpus.vocab)
    }

    #[test]
    fn dual_head_ctc_gradient_matches_finite_differences() {
        let (p, ex, _) = tiny();
        let e = &ex[0];
        let loss = |q: &ModelParams| {
            let mut g = q.zeros_like();
            let terms = [
                CtcTerm {
                    head: Head::Aux,
                    labels: &e.labels,
                    weight: 1.0,
                },
                CtcTerm {
                    head: Head::Main,
                    labels: &e.labels,
                    weight: 0.5,
                },
            ];
            let l = ctc_terms_grad(q, &e.x, e.frames, Mode::Inference, &terms, &mut g, true).unwrap();
            (l[0].unwrap() + 0.5 * l[1].unwrap(), g)
        };
        let r = finite_diff_check(&p, loss, &GradCheckConfig::default());
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn aux_only_terms_leave_main_head_gradient_zero() {
        let (p, ex, _) = tiny();
        let mut g = p.zeros_like();
        let terms = [CtcTerm {
            head: Head::Aux,
            labels: &ex[1].labels,
            weight: 1.0,
        }];
        ctc_terms_grad(&p, &ex[1].x, ex[1].frames, Mode::Inference, &terms, &mut g, true).unwrap();
        assert!(g.main_head.weight.iter().chain(&g.main_head.bias).all(|&x| x == 0.0));
        assert!(g.aux_head.weight.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn infeasible_targets_are_skipped() {
        let (p, ex, _) = tiny();
        let e = &ex[0];
        let long = vec![1usize; e.frames + 1];
        let mut g = p.zeros_like();
        let terms = [CtcTerm {
            head: Head::Main,
            labels: &long,
            weight: 1.0,
        }];
        let l = ctc_terms_grad(&p, &e.x, e.frames, Mode::Inference, &terms, &mut g, true).unwrap();
        assert_eq!(l, vec![None]);
        assert_eq!(g, p.zeros_like());
    }

    #[test]
    fn batches_are_distinct_and_seeded() {
        let a = sample_batch(20, 8, 5, &[1, 2]);
        assert_eq!(a, sample_batch(20, 8, 5, &[1, 2]));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 8);
        assert_eq!(sample_batch(3, 8, 5, &[1]).len(), 3);
    }

    #[test]
    fn fine_tuning_reduces_training_cer() {
        let (_, ex, vocab) = tiny();
        let p = ModelParams::new(Arch::default(), 3).unwrap();
        let corpus = build_corpus(&CorpusConfig {
            labeled_source: 6,
            unlabeled_source: 6,
            unlabeled_target: 2,
            dev: 2,
            test: 2,
            lm_texts: 5,
            ..CorpusConfig::default()
        })
        .unwrap();
        let before = greedy_eval(&p, &corpus.labeled_source, Head::Main, &vocab).unwrap();
        let cfg = SupervisedConfig {
            updates: 200,
            batch_size: 6,
            augment: None,
            freeze_layer1: false,
            ..SupervisedConfig::default()
        };
        let q = fine_tune_supervised(&p, &ex, &cfg).unwrap();
        let after = greedy_eval(&q, &corpus.labeled_source, Head::Main, &vocab).unwrap();
        assert!(after.cer < before.cer, "{before:?} -> {after:?}");
        assert!(after.cer < 0.5);
    }

    #[test]
    fn frozen_layer1_is_untouched() {
        let (p, ex, _) = tiny();
        let cfg = SupervisedConfig {
            updates: 5,
            freeze_layer1: true,
            ..SupervisedConfig::default()
        };
        let q = fine_tune_supervised(&p, &ex, &cfg).unwrap();
        assert_eq!(q.layer1, p.layer1);
        assert_ne!(q.layer2, p.layer2);
        assert_eq!(q.ssl_head, p.ssl_head);
    }
}
