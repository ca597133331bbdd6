use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use castle_core::corpus::{write_dataset, Utterance};
use castle_core::ctc::prefix_beam_search;
use castle_core::numcore::{load_checkpoint, save_checkpoint, Head, Mode};
use castle_core::offline_pl::run_offline_pl;
use castle_core::online_pl::run_online_pl;
use castle_core::pipeline::{
    emit_comparison, emit_report, evaluate_model, load_corpus, prepare, run_castle, train_lm, RunConfig, RunLock,
};
use castle_core::training::posteriors;
use castle_core::{CastleError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cross-domain self-training for CTC recognizers on synthetic corpora.
#[derive(Parser)]
#[command(name = "castle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set online.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Dev,
    Test,
    Target,
    Source,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into a dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on source and target audio, attach fresh heads, save a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online pseudo-labeling from a checkpoint.
    TrainOnline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline pseudo-labeling from a checkpoint.
    TrainOffline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The full pipeline: pre-training, online and offline pseudo-labeling, evaluation.
    RunCastle {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beam-search decode a split and print `id<TAB>hypothesis` lines.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Character and word error rates of a checkpoint on a labeled split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Summary tables and plot series for run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write a one-row-per-run comparison table here.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn split<'a>(corpus: &'a castle_core::corpus::Corpus, s: Split) -> &'a [Utterance] {
    match s {
        Split::Dev => &corpus.dev,
        Split::Test => &corpus.test,
        Split::Target => &corpus.unlabeled_target,
        Split::Source => &corpus.unlabeled_source,
    }
}

fn exit_code(e: &CastleError) -> u8 {
    match e.root() {
        CastleError::Config(_) => 2,
        CastleError::Numeric(_) => 4,
        _ => 3,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CastleError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let corpus = load_corpus(&cfg)?;
            write_dataset(&corpus, &out)?;
            println!(
                "wrote {} utterances to {}",
                corpus.all().count(),
                out.display()
            );
        }
        Command::Pretrain { cfg, out } => {
            let prep = prepare(&cfg.load()?)?;
            save_checkpoint(&prep.pretrained, &out)?;
            println!("saved {}", out.display());
        }
        Command::TrainOnline { cfg, init, out } => {
            let cfg = cfg.load()?.resolved();
            let _lock = RunLock::acquire(&out)?;
            let corpus = load_corpus(&cfg)?;
            let params = load_checkpoint(&init)?;
            let (params, log) = run_online_pl(&params, &corpus, &cfg.online, &corpus.dev, Some(&out))?;
            save_checkpoint(&params, &out.join("final.ckpt"))?;
            if let Some(r) = log.last() {
                println!("update {}: dev CER {:.4}, selected {:.3}", r.update, r.dev_cer, r.selected_fraction);
            }
        }
        Command::TrainOffline { cfg, init, out } => {
            let cfg = cfg.load()?.resolved();
            let _lock = RunLock::acquire(&out)?;
            let corpus = load_corpus(&cfg)?;
            let lm = train_lm(&cfg, &corpus)?;
            let params = load_checkpoint(&init)?;
            let (params, log) = run_offline_pl(&params, &corpus, Some(&lm), &corpus.dev, &cfg.offline, Some(&out))?;
            save_checkpoint(&params, &out.join("final.ckpt"))?;
            for it in &log.iterations {
                println!(
                    "iteration {}: selected {}/{}, dev CER {:.4}",
                    it.iteration, it.selected, it.decoded, it.dev_cer
                );
            }
        }
        Command::RunCastle { cfg, out } => {
            let mut cfg = cfg.load()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let run = run_castle(&cfg)?;
            for s in &run.report.stages {
                println!(
                    "{:<18} dev CER {:.4}  test CER {:.4}  test WER {:.4}",
                    s.stage, s.dev_cer, s.test_cer, s.test_wer
                );
            }
        }
        Command::Decode { cfg, checkpoint, split: which, out } => {
            let cfg = cfg.load()?;
            let corpus = load_corpus(&cfg)?;
            let lm = train_lm(&cfg, &corpus)?;
            let params = load_checkpoint(&checkpoint)?;
            let mut text = String::new();
            for u in split(&corpus, which) {
                let p = posteriors(&params, &u.features_f64(), u.frames, Head::Main, Mode::Inference)?;
                let hyps = prefix_beam_search(&p, Some(&lm), &cfg.decode)?;
                text.push_str(&format!("{}\t{}\n", u.id, corpus.vocab.decode(&hyps[0].labels)));
            }
            match out {
                Some(path) => write_text(&path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Evaluate { cfg, checkpoint, split: which } => {
            let cfg = cfg.load()?;
            let corpus = load_corpus(&cfg)?;
            let lm = train_lm(&cfg, &corpus)?;
            let params = load_checkpoint(&checkpoint)?;
            let e = evaluate_model(&params, split(&corpus, which), Some(&lm), &cfg.decode, &corpus.vocab)?;
            println!("{}", serde_json::to_string_pretty(&e).expect("evaluation serializes"));
        }
        Command::Report { runs, compare } => {
            for dir in &runs {
                for w in emit_report(dir)? {
                    eprintln!("warning: {}: {w}", dir.display());
                }
            }
            if let Some(out) = compare {
                emit_comparison(&runs, &out)?;
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CASTLE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CastleError::Config(format!("CASTLE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CastleError::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
