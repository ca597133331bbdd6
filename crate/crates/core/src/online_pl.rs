//! Online pseudo-labeling with a dual-branch head (DPL), plus the vanilla
//! self-labeling and EMA-teacher baselines.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};
use crate::ctc::greedy_decode;
use crate::error::{CastleError, Result};
use crate::filtering::online_confidence;
use crate::metrics::edit_distance;
use crate::numcore::{backprop_step, save_checkpoint, AugmentSpec, Head, Mode, ModelParams, OptimHyper, OptimizerState};
use crate::rng::tag;
use crate::training::{
    accumulate, greedy_eval, hyper_for, labeled_examples, posteriors, sample_batch, sample_seed, supervised_grads,
    train_mode, unlabeled_inputs, CtcTerm, Example, HeadSet, Unlabeled,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineStrategy {
    /// Auxiliary head labels, main head learns.
    Dpl,
    /// Main head labels itself.
    Vanilla,
    /// A moving average of the student labels.
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineTrainerConfig {
    pub alpha: f64,
    pub c_on: f64,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub max_updates: usize,
    pub eval_interval: usize,
    pub strategy: OnlineStrategy,
    pub ema_discount: f64,
    /// Update from which the pseudo-label loss is switched on.
    pub two_stage_start: Option<usize>,
    pub augment: Option<AugmentSpec>,
    pub freeze_layer1: bool,
    pub hyper: OptimHyper,
    /// Checkpoint period in updates; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for OnlineTrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            c_on: 0.8,
            batch_size_source: 8,
            batch_size_target: 8,
            max_updates: 2000,
            eval_interval: 100,
            strategy: OnlineStrategy::Dpl,
            ema_discount: 0.001,
            two_stage_start: None,
            augment: Some(AugmentSpec::default()),
            freeze_layer1: false,
            hyper: OptimHyper::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl OnlineTrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CastleError::Validation(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.c_on.is_nan() {
            return Err(CastleError::Validation("c_on is NaN".into()));
        }
        if self.batch_size_source == 0 || self.batch_size_target == 0 {
            return Err(CastleError::Validation("batch sizes must be positive".into()));
        }
        if self.strategy == OnlineStrategy::Ema && !(self.ema_discount > 0.0 && self.ema_discount <= 1.0) {
            return Err(CastleError::Validation(format!(
                "EMA discount must lie in (0, 1], got {}",
                self.ema_discount
            )));
        }
        Ok(())
    }

    fn pl_active(&self, update: usize) -> bool {
        self.two_stage_start.is_none_or(|s| update >= s)
    }
}

/// A pseudo-label admitted into the online loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedLabel {
    pub batch_index: usize,
    pub labels: Vec<usize>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub targets: usize,
    pub selected: Vec<SelectedLabel>,
    pub l_sup: f64,
    pub l_pl: f64,
    pub skipped: usize,
}

/// Trainer state. Only the EMA strategy keeps a second parameter copy.
#[derive(Debug, Clone)]
pub struct OnlineState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub teacher: Option<ModelParams>,
}

impl OnlineState {
    pub fn new(params: ModelParams, strategy: OnlineStrategy) -> Self {
        let teacher = (strategy == OnlineStrategy::Ema).then(|| params.clone());
        Self {
            params,
            optimizer: OptimizerState::new(),
            teacher,
        }
    }
}

/// Greedy pseudo-labels from the generating branch in inference mode, each
/// with its online confidence. Nothing here is differentiated.
pub fn generate_online_labels(
    state: &OnlineState,
    strategy: OnlineStrategy,
    batch: &[&Unlabeled],
) -> Result<Vec<(Vec<usize>, f64)>> {
    let (model, head) = match strategy {
        OnlineStrategy::Dpl => (&state.params, Head::Aux),
        OnlineStrategy::Vanilla => (&state.params, Head::Main),
        OnlineStrategy::Ema => (state.teacher.as_ref().unwrap_or(&state.params), Head::Main),
    };
    batch
        .iter()
        .map(|u| {
            let p = posteriors(model, &u.x, u.frames, head, Mode::Inference)?;
            Ok((greedy_decode(&p), online_confidence(&p)))
        })
        .collect()
}

/// One update of L_SUP + α·L_PL. L_SUP is the mean over the source batch of
/// the auxiliary plus main CTC losses; L_PL sums the main-head CTC losses of
/// the admitted pseudo-labels and divides by the target batch size.
pub fn dpl_update(
    state: &mut OnlineState,
    b_s: &[&Example],
    b_t: &[&Unlabeled],
    update: usize,
    cfg: &OnlineTrainerConfig,
) -> Result<UpdateStats> {
    let source: Vec<Example> = b_s.iter().map(|e| (*e).clone()).collect();
    let all: Vec<usize> = (0..source.len()).collect();
    let mut grads = state.params.zeros_like();
    let train_layer1 = !cfg.freeze_layer1;
    let sup = supervised_grads(
        &state.params,
        &source,
        &all,
        HeadSet::Both,
        cfg.augment,
        cfg.seed,
        update,
        train_layer1,
        &mut grads,
    )?;
    let mut stats = UpdateStats {
        targets: b_t.len(),
        l_sup: sup.loss_sum / source.len().max(1) as f64,
        skipped: sup.skipped,
        ..UpdateStats::default()
    };
    if cfg.alpha > 0.0 && cfg.pl_active(update) {
        let labels = generate_online_labels(state, cfg.strategy, b_t)?;
        stats.selected = labels
            .into_iter()
            .enumerate()
            .filter(|(_, (_, c))| *c >= cfg.c_on)
            .map(|(i, (labels, confidence))| SelectedLabel {
                batch_index: i,
                labels,
                confidence,
            })
            .collect();
        let weight = cfg.alpha / b_t.len() as f64;
        let params = &state.params;
        let selected = &stats.selected;
        let pl = accumulate(selected.len(), params, &mut grads, |j, g| {
            let s = &selected[j];
            let u = b_t[s.batch_index];
            let mode = train_mode(sample_seed(cfg.seed, update, tag::ONLINE, s.batch_index), cfg.augment);
            let term = CtcTerm {
                head: Head::Main,
                labels: &s.labels,
                weight,
            };
            crate::training::ctc_terms_grad(params, &u.x, u.frames, mode, &[term], g, train_layer1)
        })?;
        stats.l_pl = pl.loss_sum / b_t.len() as f64;
        stats.skipped += pl.skipped;
    }
    if !(stats.l_sup.is_finite() && stats.l_pl.is_finite()) {
        return Err(CastleError::Numeric(format!(
            "non-finite loss at update {update} (sup {}, pl {})",
            stats.l_sup, stats.l_pl
        )));
    }
    let hyper = hyper_for(&cfg.hyper, cfg.max_updates, cfg.freeze_layer1);
    backprop_step(&mut state.params, &grads, &mut state.optimizer, &hyper)?;
    if let Some(t) = state.teacher.as_mut() {
        t.ema_towards(&state.params, cfg.ema_discount);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: usize,
    pub selected_fraction: f64,
    pub selected_cer: f64,
    pub dev_cer: f64,
    pub blank_ratio: f64,
    pub l_sup: f64,
    pub l_pl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_COLUMNS: [&str; 7] = [
    "update",
    "selected_fraction",
    "selected_cer",
    "dev_cer",
    "blank_ratio",
    "l_sup",
    "l_pl",
];

impl TrainingLog {
    pub fn push(&mut self, r: LogRecord) {
        assert!(self.records.last().is_none_or(|l| l.update < r.update), "log updates must increase");
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn max_blank_ratio(&self) -> f64 {
        self.records.iter().map(|r| r.blank_ratio).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = LOG_COLUMNS.join(",");
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.update, r.selected_fraction, r.selected_cer, r.dev_cer, r.blank_ratio, r.l_sup, r.l_pl
            ));
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_COLUMNS.join(",").as_str()) {
            return Err(CastleError::format(path, "unexpected training log header"));
        }
        let mut log = TrainingLog::default();
        for (i, line) in lines.enumerate() {
            let bad = || CastleError::format(path, format!("row {}: malformed", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            let r = LogRecord {
                update: f[0].parse().map_err(|_| bad())?,
                selected_fraction: num(1)?,
                selected_cer: num(2)?,
                dev_cer: num(3)?,
                blank_ratio: num(4)?,
                l_sup: num(5)?,
                l_pl: num(6)?,
            };
            if log.last().is_some_and(|l| l.update >= r.update) {
                return Err(CastleError::format(path, format!("row {}: updates not increasing", i + 1)));
            }
            log.records.push(r);
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| CastleError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CastleError::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

#[derive(Default)]
struct Interval {
    targets: usize,
    selected: usize,
    errors: usize,
    ref_len: usize,
    l_sup: f64,
    l_pl: f64,
    updates: usize,
}

/// Runs `max_updates` online updates over same-size source and target
/// batches, logging every `eval_interval` updates and after the last one.
/// Hidden target transcripts are read only to log the selected-label CER.
pub fn run_online_pl(
    params: &ModelParams,
    corpus: &Corpus,
    cfg: &OnlineTrainerConfig,
    dev: &[Utterance],
    out_dir: Option<&Path>,
) -> Result<(ModelParams, TrainingLog)> {
    cfg.validate()?;
    let mut log = TrainingLog::default();
    if cfg.max_updates == 0 {
        return Ok((params.clone(), log));
    }
    let source = labeled_examples(&corpus.labeled_source, &corpus.vocab)?;
    let target = unlabeled_inputs(&corpus.unlabeled_target);
    if source.is_empty() || target.is_empty() {
        return Err(CastleError::Validation("online PL needs labeled source and unlabeled target data".into()));
    }
    let hidden: HashMap<&str, Vec<usize>> = corpus
        .unlabeled_target
        .iter()
        .filter_map(|u| Some((u.id.as_str(), corpus.vocab.encode(u.transcript.as_deref()?).ok()?)))
        .collect();
    let mut state = OnlineState::new(params.clone(), cfg.strategy);
    let mut acc = Interval::default();
    for update in 0..cfg.max_updates {
        let bs = sample_batch(source.len(), cfg.batch_size_source, cfg.seed, &[tag::ONLINE, tag::BATCH, 0, update as u64]);
        let bt = sample_batch(target.len(), cfg.batch_size_target, cfg.seed, &[tag::ONLINE, tag::BATCH, 1, update as u64]);
        let b_s: Vec<&Example> = bs.iter().map(|&i| &source[i]).collect();
        let b_t: Vec<&Unlabeled> = bt.iter().map(|&i| &target[i]).collect();
        let last_good = out_dir.map(|_| state.params.clone());
        let stats = match dpl_update(&mut state, &b_s, &b_t, update, cfg) {
            Ok(s) => s,
            Err(e) => {
                if let (Some(dir), Some(p)) = (out_dir, last_good) {
                    save_checkpoint(&p, &dir.join("online-last-good.ckpt"))?;
                }
                return Err(e);
            }
        };
        acc.targets += stats.targets;
        acc.selected += stats.selected.len();
        for s in &stats.selected {
            if let Some(r) = hidden.get(b_t[s.batch_index].id.as_str()) {
                acc.errors += edit_distance(r, &s.labels);
                acc.ref_len += r.len();
            }
        }
        acc.l_sup += stats.l_sup;
        acc.l_pl += stats.l_pl;
        acc.updates += 1;
        let done = update + 1;
        if done % cfg.eval_interval.max(1) == 0 || done == cfg.max_updates {
            let ev = greedy_eval(&state.params, dev, Head::Main, &corpus.vocab)?;
            let n = acc.updates as f64;
            log.push(LogRecord {
                update: done,
                selected_fraction: acc.selected as f64 / acc.targets.max(1) as f64,
                selected_cer: acc.errors as f64 / acc.ref_len.max(1) as f64,
                dev_cer: ev.cer,
                blank_ratio: ev.blank_ratio,
                l_sup: acc.l_sup / n,
                l_pl: acc.l_pl / n,
            });
            acc = Interval::default();
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_checkpoint(&state.params, &dir.join(format!("online-{done:06}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        log.write_csv(&dir.join("online_log.csv"))?;
    }
    Ok((state.params, log))
}
