use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::{RunConfig, Variant};
use super::evaluate::evaluate_model;
use super::report::{write_run_files, ExperimentReport, OfflineRow, OnlineSummary, StageReport, Timing};
use crate::corpus::{build_corpus, read_dataset, Corpus};
use crate::error::{CastleError, Result};
use crate::lm::{train_ngram, NgramLM};
use crate::numcore::{save_checkpoint, ModelParams};
use crate::offline_pl::{run_offline_pl, OfflineLog};
use crate::online_pl::{run_online_pl, OnlineTrainerConfig, TrainingLog};
use crate::pretrain::continued_pretrain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    SourcePretrain,
    ContinuedPretrain,
    Initial,
    Online,
    SourceFinetune,
    Offline,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::SourcePretrain => "source_pretrain",
            Stage::ContinuedPretrain => "continued_pretrain",
            Stage::Initial => "initial",
            Stage::Online => "online",
            Stage::SourceFinetune => "source_finetune",
            Stage::Offline => "offline",
        }
    }
}

fn staged<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| CastleError::Stage {
        stage: stage.as_str().into(),
        source: Box::new(e),
    })
}

/// Corpus, language model and the pre-trained encoder with fresh heads.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub lm: NgramLM,
    pub source_pretrained: ModelParams,
    pub pretrained: ModelParams,
}

/// The configured dataset directory, or a freshly generated corpus.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data_dir {
        Some(dir) => read_dataset(dir),
        None => build_corpus(&cfg.corpus),
    }
}

pub fn train_lm(cfg: &RunConfig, corpus: &Corpus) -> Result<NgramLM> {
    train_ngram(&corpus.lm_text, &corpus.vocab, cfg.lm.order, cfg.lm.k)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let corpus = staged(Stage::Data, load_corpus(&cfg))?;
    let lm = staged(Stage::Data, train_lm(&cfg, &corpus))?;
    let init = staged(Stage::SourcePretrain, ModelParams::new(cfg.arch.clone(), cfg.init_seed()))?;
    let (source_pretrained, _) = staged(
        Stage::SourcePretrain,
        continued_pretrain(&init, &corpus.unlabeled_source, &[], &cfg.source_pretrain),
    )?;
    let (mut pretrained, _) = staged(
        Stage::ContinuedPretrain,
        continued_pretrain(&source_pretrained, &corpus.unlabeled_target, &corpus.unlabeled_source, &cfg.pretrain),
    )?;
    pretrained.reinit_heads(cfg.heads_seed());
    Ok(Prepared {
        corpus,
        lm,
        source_pretrained,
        pretrained,
    })
}

#[derive(Debug, Clone)]
pub struct CastleRun {
    pub report: ExperimentReport,
    pub params: ModelParams,
    pub online_log: Option<TrainingLog>,
    pub offline_log: Option<OfflineLog>,
}

/// Marks a run directory as in use; released on drop.
#[derive(Debug)]
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CastleError::io(dir, e))?;
        let path = dir.join("castle.lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    CastleError::Validation(format!("{} is locked by another run", dir.display()))
                }
                _ => CastleError::io(&path, e),
            })?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = None;
    let digest = Sha256::digest(c.to_json().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct Runner<'a> {
    prep: &'a Prepared,
    cfg: &'a RunConfig,
    dir: Option<&'a Path>,
    stages: Vec<StageReport>,
    timing: Timing,
    last_good: ModelParams,
}

impl Runner<'_> {
    fn evaluate(&mut self, stage: Stage, params: &ModelParams) -> Result<()> {
        let c = &self.prep.corpus;
        let lm = Some(&self.prep.lm);
        let dev = staged(stage, evaluate_model(params, &c.dev, lm, &self.cfg.decode, &c.vocab))?;
        let test = staged(stage, evaluate_model(params, &c.test, lm, &self.cfg.decode, &c.vocab))?;
        let row = self.stages.len() + 1;
        self.stages.push(StageReport {
            stage: stage.as_str().into(),
            dev_cer: dev.cer.rate,
            dev_wer: dev.wer.rate,
            test_cer: test.cer.rate,
            test_wer: test.wer.rate,
            source: format!("{}:{row}", super::report::STAGES_FILE),
        });
        self.last_good = params.clone();
        Ok(())
    }

    fn fail<T>(&self, stage: Stage, e: CastleError) -> Result<T> {
        if let Some(dir) = self.dir {
            save_checkpoint(&self.last_good, &dir.join("last-good.ckpt"))?;
        }
        staged(stage, Err(e))
    }

    fn online(&mut self, stage: Stage, params: &ModelParams, cfg: &OnlineTrainerConfig) -> Result<(ModelParams, TrainingLog)> {
        let t = Instant::now();
        let c = &self.prep.corpus;
        let out = match run_online_pl(params, c, cfg, &c.dev, self.dir) {
            Ok(out) => out,
            Err(e) => return self.fail(stage, e),
        };
        self.timing.push(stage.as_str(), t.elapsed().as_secs_f64());
        self.evaluate(stage, &out.0)?;
        Ok(out)
    }

    fn offline(&mut self, params: &ModelParams) -> Result<(ModelParams, OfflineLog)> {
        let t = Instant::now();
        let c = &self.prep.corpus;
        let out = match run_offline_pl(params, c, Some(&self.prep.lm), &c.dev, &self.cfg.offline, self.dir) {
            Ok(out) => out,
            Err(e) => return self.fail(Stage::Offline, e),
        };
        self.timing.push(Stage::Offline.as_str(), t.elapsed().as_secs_f64());
        self.evaluate(Stage::Offline, &out.0)?;
        Ok(out)
    }
}

/// Runs the fine-tuning stages of `variant` from the prepared model.
pub fn run_variant(prep: &Prepared, cfg: &RunConfig, variant: Variant) -> Result<CastleRun> {
    let cfg = RunConfig {
        variant,
        ..cfg.resolved()
    };
    let _lock = cfg.output_dir.as_deref().map(RunLock::acquire).transpose()?;
    let dir = cfg.output_dir.as_deref();
    if let Some(dir) = dir {
        let path = dir.join("config.json");
        fs::write(&path, cfg.to_json() + "\n").map_err(|e| CastleError::io(&path, e))?;
        save_checkpoint(&prep.pretrained, &dir.join("pretrained.ckpt"))?;
    }
    let mut run = Runner {
        prep,
        cfg: &cfg,
        dir,
        stages: Vec::new(),
        timing: Timing::default(),
        last_good: prep.pretrained.clone(),
    };
    run.evaluate(Stage::Initial, &prep.pretrained)?;
    let source_only = OnlineTrainerConfig {
        alpha: 0.0,
        ..cfg.online.clone()
    };
    let (mut params, log) = match variant {
        Variant::TwoStep | Variant::OnlineOnly => run.online(Stage::Online, &prep.pretrained, &cfg.online)?,
        Variant::OfflineOnly | Variant::SourceOnly => run.online(Stage::SourceFinetune, &prep.pretrained, &source_only)?,
    };
    let online_log = Some(log);
    let mut offline_log = None;
    if matches!(variant, Variant::TwoStep | Variant::OfflineOnly) {
        let (p, log) = run.offline(&params)?;
        params = p;
        offline_log = Some(log);
    }
    let online = online_log.as_ref().and_then(|log| {
        let last = log.last()?;
        Some(OnlineSummary {
            final_selected_fraction: last.selected_fraction,
            final_dev_cer: last.dev_cer,
            max_blank_ratio: log.max_blank_ratio(),
            source: format!("online_log.csv:{}", log.records.len()),
        })
    });
    let offline = offline_log
        .as_ref()
        .map(|log| {
            log.iterations
                .iter()
                .enumerate()
                .map(|(i, it)| OfflineRow {
                    iteration: it.iteration,
                    gamma: it.params.gamma,
                    eta: it.params.eta,
                    threshold: it.params.threshold,
                    decoded: it.decoded,
                    selected: it.selected,
                    selected_cer: it.selected_cer,
                    source: format!("offline_log.csv:{}", i + 1),
                })
                .collect()
        })
        .unwrap_or_default();
    let report = ExperimentReport {
        variant,
        seed: cfg.seed,
        config_hash: config_hash(&cfg),
        stages: run.stages,
        online,
        offline,
    };
    if let Some(dir) = dir {
        save_checkpoint(&params, &dir.join("final.ckpt"))?;
        write_run_files(dir, &report, &run.timing)?;
    }
    Ok(CastleRun {
        report,
        params,
        online_log,
        offline_log,
    })
}

/// Pre-training, head attachment and the stages of `cfg.variant`.
pub fn run_castle(cfg: &RunConfig) -> Result<CastleRun> {
    let prep = prepare(cfg)?;
    run_variant(&prep, cfg, cfg.variant)
}
