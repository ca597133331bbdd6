use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Vocab};
use crate::ctc::{prefix_beam_search, DecodeConfig};
use crate::error::{CastleError, Result};
use crate::lm::NgramLM;
use crate::metrics::{error_rate, ErrorBreakdown, Unit};
use crate::numcore::{Head, Mode, ModelParams};
use crate::training::posteriors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub cer: ErrorBreakdown,
    pub wer: ErrorBreakdown,
}

/// Beam-search decodes every utterance with the main head and scores the
/// hypotheses against the references.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &[Utterance],
    lm: Option<&NgramLM>,
    cfg: &DecodeConfig,
    vocab: &Vocab,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(CastleError::Validation("cannot evaluate on an empty dataset".into()));
    }
    if params.arch.vocab_size != vocab.size() {
        return Err(CastleError::Validation(format!(
            "model outputs {} symbols but the vocabulary has {}",
            params.arch.vocab_size,
            vocab.size()
        )));
    }
    if let Some(lm) = lm {
        if lm.vocab() != vocab {
            return Err(CastleError::Validation("language model vocabulary does not match".into()));
        }
    }
    let hyps = dataset
        .par_iter()
        .map(|u| {
            let p = posteriors(params, &u.features_f64(), u.frames, Head::Main, Mode::Inference)?;
            let top = prefix_beam_search(&p, lm, cfg)?;
            Ok(vocab.decode(&top[0].labels))
        })
        .collect::<Result<Vec<String>>>()?;
    let refs = dataset
        .iter()
        .map(|u| {
            u.transcript
                .as_deref()
                .ok_or_else(|| CastleError::Validation(format!("utterance {} has no reference", u.id)))
        })
        .collect::<Result<Vec<&str>>>()?;
    Ok(Evaluation {
        cer: error_rate(&refs, &hyps, Unit::Char, vocab.separator())?,
        wer: error_rate(&refs, &hyps, Unit::Word, vocab.separator())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};
    use crate::numcore::Arch;
    use crate::training::{fine_tune_supervised, labeled_examples, SupervisedConfig};

    fn corpus() -> crate::corpus::Corpus {
        build_corpus(&CorpusConfig {
            labeled_source: 10,
            unlabeled_source: 10,
            unlabeled_target: 2,
            dev: 2,
            test: 2,
            lm_texts: 20,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn overfit_model_scores_well_on_its_training_set() {
        let c = corpus();
        let ex = labeled_examples(&c.labeled_source, &c.vocab).unwrap();
        let p = ModelParams::new(Arch::default(), 1).unwrap();
        let cfg = SupervisedConfig {
            updates: 600,
            batch_size: 10,
            augment: None,
            freeze_layer1: false,
            hyper: crate::numcore::OptimHyper {
                schedule: crate::numcore::LrSchedule::Constant { lr: 3e-3 },
                ..Default::default()
            },
            ..SupervisedConfig::default()
        };
        let q = fine_tune_supervised(&p, &ex, &cfg).unwrap();
        let dc = DecodeConfig {
            lm_weight: 0.0,
            ..DecodeConfig::default()
        };
        let e = evaluate_model(&q, &c.labeled_source, None, &dc, &c.vocab).unwrap();
        assert!(e.cer.rate < 0.05, "{:?}", e.cer);
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        let c = corpus();
        let p = ModelParams::new(Arch::default(), 1).unwrap();
        let dc = DecodeConfig::default();
        assert!(matches!(evaluate_model(&p, &[], None, &dc, &c.vocab), Err(CastleError::Validation(_))));
        let small = Vocab::desk(3);
        assert!(matches!(
            evaluate_model(&p, &c.test, None, &dc, &small),
            Err(CastleError::Validation(_))
        ));
        let lm = crate::lm::train_ngram(&["ab"], &small, 2, 1.0).unwrap();
        assert!(matches!(
            evaluate_model(&p, &c.test, Some(&lm), &dc, &c.vocab),
            Err(CastleError::Validation(_))
        ));
    }
}
