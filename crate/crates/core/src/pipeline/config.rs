use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::CorpusConfig;
use crate::ctc::DecodeConfig;
use crate::error::{CastleError, Result};
use crate::numcore::Arch;
use crate::offline_pl::OfflineConfig;
use crate::online_pl::OnlineTrainerConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Online PL followed by offline PL.
    TwoStep,
    OnlineOnly,
    /// Source fine-tuning followed by offline PL.
    OfflineOnly,
    /// Source fine-tuning alone.
    SourceOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TwoStep => "two_step",
            Variant::OnlineOnly => "online_only",
            Variant::OfflineOnly => "offline_only",
            Variant::SourceOnly => "source_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub k: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { order: 3, k: 0.5 }
    }
}

/// Everything a run needs. Stage seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    /// Read the corpus from this dataset directory instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub arch: Arch,
    /// Self-supervised pre-training on unlabeled source data.
    pub source_pretrain: PretrainConfig,
    /// Continued pre-training on target data with replay.
    pub pretrain: PretrainConfig,
    pub online: OnlineTrainerConfig,
    pub offline: OfflineConfig,
    pub lm: LmConfig,
    /// Decoding used for evaluation.
    pub decode: DecodeConfig,
    pub variant: Variant,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            data_dir: None,
            arch: Arch::default(),
            source_pretrain: PretrainConfig {
                replay_ratio: 0.0,
                ..PretrainConfig::default()
            },
            pretrain: PretrainConfig {
                replay_ratio: 0.0,
                ..PretrainConfig::default()
            },
            online: OnlineTrainerConfig::default(),
            offline: OfflineConfig::default(),
            lm: LmConfig::default(),
            decode: DecodeConfig::default(),
            variant: Variant::TwoStep,
            seed: 1,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CastleError::Config(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CastleError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CastleError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            apply_override(&mut v, o.as_ref())?;
        }
        serde_json::from_value(v).map_err(|e| CastleError::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: CastleError| CastleError::Config(e.to_string());
        self.arch.validate().map_err(wrap)?;
        self.source_pretrain.validate().map_err(wrap)?;
        self.pretrain.validate().map_err(wrap)?;
        self.online.validate().map_err(wrap)?;
        self.offline.validate().map_err(wrap)?;
        if self.arch.vocab_size != self.corpus.shape.n_chars + 1 {
            return Err(CastleError::Config(format!(
                "arch.vocab_size {} must equal corpus.shape.n_chars + 1 = {}",
                self.arch.vocab_size,
                self.corpus.shape.n_chars + 1
            )));
        }
        if self.arch.feat_dim != self.corpus.shape.feat_dim {
            return Err(CastleError::Config(format!(
                "arch.feat_dim {} must equal corpus.shape.feat_dim {}",
                self.arch.feat_dim, self.corpus.shape.feat_dim
            )));
        }
        Ok(())
    }

    /// Copy with every stage seed derived from the run seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = |t: u64| rng::derive_seed(self.seed, &[t]);
        c.source_pretrain.seed = s(tag::PRETRAIN);
        c.pretrain.seed = s(tag::PRETRAIN + 1);
        c.online.seed = s(tag::ONLINE);
        c.offline.seed = s(tag::OFFLINE);
        c
    }

    pub fn init_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &[tag::INIT])
    }

    pub fn heads_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &[tag::HEADS])
    }
}

/// Sets the JSON value at a dotted path. The value is parsed as JSON when
/// possible and taken as a string otherwise. Unknown keys are rejected.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CastleError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CastleError::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(CastleError::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}
