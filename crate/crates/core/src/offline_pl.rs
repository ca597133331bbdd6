//! Iterative offline pseudo-labeling: a frozen teacher decodes the target
//! pool with the LM, the uncertainty-aware filter selects, the student
//! fine-tunes on the selection, and the student becomes the next teacher.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance, Vocab};
use crate::ctc::DecodeConfig;
use crate::error::{CastleError, Result};
use crate::filtering::{
    estimate_ucf_params, mc_dropout_uncertainty, offline_confidence, ucf_select, write_records, DevRecord,
    FilterStrategy, PseudoLabelRecord, UcfParams,
};
use crate::lm::NgramLM;
use crate::metrics::{error_rate, Unit};
use crate::numcore::{save_checkpoint, AugmentSpec, Head, ModelParams, OptimHyper, TeacherParams};
use crate::rng::{self, tag};
use crate::training::{fine_tune_supervised, greedy_eval, unlabeled_inputs, Example, HeadSet, SupervisedConfig, Unlabeled};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UcfSource {
    EstimateOnDev,
    Fixed { params: UcfParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    pub iterations: usize,
    pub updates_per_iteration: usize,
    pub batch_size: usize,
    pub decode: DecodeConfig,
    pub k: usize,
    pub strategy: FilterStrategy,
    pub ucf_source: UcfSource,
    pub selection_fraction: f64,
    pub augment: Option<AugmentSpec>,
    pub freeze_layer1: bool,
    pub hyper: OptimHyper,
    pub seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            updates_per_iteration: 500,
            batch_size: 8,
            decode: DecodeConfig::default(),
            k: 3,
            strategy: FilterStrategy::Ucf,
            ucf_source: UcfSource::EstimateOnDev,
            selection_fraction: 0.5,
            augment: Some(AugmentSpec::default()),
            freeze_layer1: false,
            hyper: OptimHyper::default(),
            seed: 0,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CastleError::Validation("offline PL needs at least one iteration".into()));
        }
        if self.k == 0 {
            return Err(CastleError::Validation("K must be at least 1".into()));
        }
        if self.decode.beam_width == 0 || self.decode.lm_weight < 0.0 {
            return Err(CastleError::Validation(format!("bad decode config {:?}", self.decode)));
        }
        Ok(())
    }

    fn iteration_seed(&self, iteration: usize, what: u64) -> u64 {
        rng::derive_seed(self.seed, &[tag::OFFLINE, iteration as u64, what])
    }
}

/// Decodes every input with the teacher: an inference-mode beam search
/// gives Ŷ and C_off, `k` dropout decodes give U.
pub fn generate_pseudo_labels(
    teacher: &TeacherParams,
    inputs: &[Unlabeled],
    lm: Option<&NgramLM>,
    vocab: &Vocab,
    cfg: &OfflineConfig,
    seed: u64,
) -> Result<Vec<PseudoLabelRecord>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let s = rng::derive_seed(seed, &[tag::MC_DROPOUT, i as u64]);
            let r = mc_dropout_uncertainty(teacher, &u.x, u.frames, lm, cfg.k, &cfg.decode, s)?;
            Ok(PseudoLabelRecord {
                id: u.id.clone(),
                hypothesis: vocab.decode(&r.hypothesis.labels),
                c_off: offline_confidence(&r.hypothesis),
                u: r.u,
                length: r.hypothesis.labels.len(),
                variants: r.variants.iter().map(|v| vocab.decode(v)).collect(),
            })
        })
        .collect()
}

/// Pairs dev records with their references.
pub fn attach_references(records: Vec<PseudoLabelRecord>, dev: &[Utterance]) -> Result<Vec<DevRecord>> {
    let refs: HashMap<&str, &str> = dev
        .iter()
        .filter_map(|u| Some((u.id.as_str(), u.transcript.as_deref()?)))
        .collect();
    records
        .into_iter()
        .map(|record| {
            let reference = refs
                .get(record.id.as_str())
                .ok_or_else(|| CastleError::Validation(format!("dev record {} has no reference", record.id)))?
                .to_string();
            Ok(DevRecord { record, reference })
        })
        .collect()
}

/// Selected target inputs paired with their pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub items: Vec<Example>,
}

impl PseudoLabeledSet {
    pub fn build(selected: &[&PseudoLabelRecord], inputs: &[Unlabeled], vocab: &Vocab) -> Result<Self> {
        let by_id: HashMap<&str, &Unlabeled> = inputs.iter().map(|u| (u.id.as_str(), u)).collect();
        let items = selected
            .iter()
            .map(|r| {
                let u = by_id
                    .get(r.id.as_str())
                    .ok_or_else(|| CastleError::Validation(format!("record {} has no input", r.id)))?;
                Ok(Example {
                    id: r.id.clone(),
                    x: u.x.clone(),
                    frames: u.frames,
                    labels: vocab.encode(&r.hypothesis)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|e| e.id.as_str()).collect()
    }
}

/// Main-head-only fine-tuning on the selected pseudo-labels.
pub fn run_offline_iteration(
    student: &ModelParams,
    selected: &PseudoLabeledSet,
    cfg: &OfflineConfig,
    iteration: usize,
) -> Result<ModelParams> {
    if cfg.updates_per_iteration == 0 {
        return Ok(student.clone());
    }
    if selected.items.is_empty() {
        return Err(CastleError::Config(
            "the filter selected no pseudo-labels; lower the threshold or raise the selection fraction".into(),
        ));
    }
    let sup = SupervisedConfig {
        updates: cfg.updates_per_iteration,
        batch_size: cfg.batch_size,
        heads: HeadSet::Main,
        augment: cfg.augment,
        freeze_layer1: cfg.freeze_layer1,
        hyper: cfg.hyper,
        seed: cfg.iteration_seed(iteration, tag::SUPERVISED),
    };
    fine_tune_supervised(student, &selected.items, &sup)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub params: UcfParams,
    pub decoded: usize,
    pub selected: usize,
    /// CER of the selected pseudo-labels against the hidden transcripts.
    pub selected_cer: f64,
    /// CER of all pseudo-labels against the hidden transcripts.
    pub all_cer: f64,
    pub dev_cer: f64,
    pub teacher_fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OfflineLog {
    pub iterations: Vec<IterationLog>,
}

pub const OFFLINE_LOG_COLUMNS: &str = "iteration,gamma,eta,threshold,decoded,selected,selected_cer,all_cer,dev_cer";

impl OfflineLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{OFFLINE_LOG_COLUMNS}\n");
        for it in &self.iterations {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                it.iteration,
                it.params.gamma,
                it.params.eta,
                it.params.threshold,
                it.decoded,
                it.selected,
                it.selected_cer,
                it.all_cer,
                it.dev_cer
            ));
        }
        s
    }
}

fn hidden_cer(records: &[&PseudoLabelRecord], refs: &HashMap<&str, &str>, separator: char) -> Result<f64> {
    let (r, h): (Vec<&str>, Vec<&str>) = records
        .iter()
        .filter_map(|rec| Some((*refs.get(rec.id.as_str())?, rec.hypothesis.as_str())))
        .unzip();
    Ok(error_rate(&r, &h, Unit::Char, separator)?.rate)
}

/// Filter parameters for one iteration, estimated on dev records or fixed.
pub fn iteration_params(cfg: &OfflineConfig, dev_records: &[DevRecord], separator: char) -> Result<UcfParams> {
    match cfg.ucf_source {
        UcfSource::Fixed { params } => {
            params.validate()?;
            Ok(params)
        }
        UcfSource::EstimateOnDev => estimate_ucf_params(dev_records, cfg.selection_fraction, cfg.strategy, cfg.k, separator),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CastleError::io(path, e))
}

/// Alternates teacher snapshot, decode, filter estimation, selection and
/// student fine-tuning for `cfg.iterations` rounds.
pub fn run_offline_pl(
    params: &ModelParams,
    corpus: &Corpus,
    lm: Option<&NgramLM>,
    dev: &[Utterance],
    cfg: &OfflineConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, OfflineLog)> {
    cfg.validate()?;
    let vocab = &corpus.vocab;
    let sep = vocab.separator();
    let targets = unlabeled_inputs(&corpus.unlabeled_target);
    let dev_inputs = unlabeled_inputs(dev);
    let hidden: HashMap<&str, &str> = corpus
        .unlabeled_target
        .iter()
        .filter_map(|u| Some((u.id.as_str(), u.transcript.as_deref()?)))
        .collect();
    let mut student = params.clone();
    let mut log = OfflineLog::default();
    for it in 0..cfg.iterations {
        let teacher = TeacherParams::snapshot(&student);
        let records = generate_pseudo_labels(&teacher, &targets, lm, vocab, cfg, cfg.iteration_seed(it, 0))?;
        let dev_records = generate_pseudo_labels(&teacher, &dev_inputs, lm, vocab, cfg, cfg.iteration_seed(it, 1))?;
        let dev_records = attach_references(dev_records, dev)?;
        let ucf = iteration_params(cfg, &dev_records, sep)?;
        let chosen = ucf_select(&records, &ucf);
        let selected = PseudoLabeledSet::build(&chosen, &targets, vocab)?;
        student = run_offline_iteration(&student, &selected, cfg, it)?;
        let all: Vec<&PseudoLabelRecord> = records.iter().collect();
        log.iterations.push(IterationLog {
            iteration: it + 1,
            params: ucf,
            decoded: records.len(),
            selected: chosen.len(),
            selected_cer: hidden_cer(&chosen, &hidden, sep)?,
            all_cer: hidden_cer(&all, &hidden, sep)?,
            dev_cer: greedy_eval(&student, dev, Head::Main, vocab)?.cer,
            teacher_fingerprint: teacher.params().fingerprint(),
        });
        if let Some(dir) = out_dir {
            let n = it + 1;
            write_records(&dir.join(format!("offline-{n}-records.jsonl")), &records)?;
            let dev_only: Vec<PseudoLabelRecord> = dev_records.iter().map(|d| d.record.clone()).collect();
            write_records(&dir.join(format!("offline-{n}-dev-records.jsonl")), &dev_only)?;
            write_json(&dir.join(format!("offline-{n}-ucf.json")), &ucf)?;
            let list = selected.ids().join("\n");
            let path = dir.join(format!("offline-{n}-selected.txt"));
            fs::write(&path, list + "\n").map_err(|e| CastleError::io(&path, e))?;
            save_checkpoint(&student, &dir.join(format!("offline-{n}.ckpt")))?;
            let path = dir.join("offline_log.csv");
            fs::write(&path, log.to_csv()).map_err(|e| CastleError::io(&path, e))?;
        }
    }
    Ok((student, log))
}
