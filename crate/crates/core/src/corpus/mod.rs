//! Synthetic two-domain corpora.
//!
//! A domain is a first-order Markov chain over characters (the "linguistics")
//! plus an emission model: every character is held for a random number of
//! frames, each frame being `channel_scale ⊙ prototype + channel_bias + noise`
//! (the "acoustics"). The target domain is derived from the source by
//! interpolating the transition matrix towards a relabelled copy of itself and
//! by perturbing the channel away from identity.

mod io;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CastleError, Result};
use crate::rng::{self, tag, Rng};

pub use io::{read_dataset, write_dataset};

pub const BLANK: usize = 0;

/// Output alphabet. Index 0 is the CTC blank, which never appears in text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<char>,
    separator: char,
}

impl Vocab {
    pub fn new(symbols: Vec<char>, separator: char) -> Result<Self> {
        if symbols.len() < 3 {
            return Err(CastleError::Validation(format!(
                "vocabulary needs at least 3 symbols, got {}",
                symbols.len()
            )));
        }
        let unique: HashSet<char> = symbols.iter().copied().collect();
        if unique.len() != symbols.len() {
            return Err(CastleError::Validation("duplicate vocabulary symbol".into()));
        }
        if !symbols[1..].contains(&separator) {
            return Err(CastleError::Validation(format!(
                "word separator {separator:?} is not a writable symbol"
            )));
        }
        Ok(Self { symbols, separator })
    }

    /// `_` blank, `|` word separator, then `n_letters` letters from `a`.
    pub fn desk(n_letters: usize) -> Self {
        let mut symbols = vec!['_', '|'];
        symbols.extend((0..n_letters as u8).map(|i| (b'a' + i) as char));
        Self::new(symbols, '|').expect("desk vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn blank_index(&self) -> usize {
        BLANK
    }

    pub fn blank_symbol(&self) -> char {
        self.symbols[BLANK]
    }

    pub fn separator(&self) -> char {
        self.separator
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of writable (non-blank) symbols.
    pub fn n_chars(&self) -> usize {
        self.symbols.len() - 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).filter(|&i| i != BLANK)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| CastleError::Validation(format!("symbol {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().map(|&l| self.symbols[l]).collect()
    }

    /// Short content hash used to tie serialized artifacts to a vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.symbols {
            h.update(c.to_string().as_bytes());
            h.update([0u8]);
        }
        h.update(self.separator.to_string().as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Row-stochastic, indexed by writable symbol (vocab index − 1).
    pub transition: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
    pub duration_range: (usize, usize),
    pub channel_scale: Vec<f64>,
    pub channel_bias: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn feat_dim(&self) -> usize {
        self.channel_scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(CastleError::Validation(format!("transition row {i} is not stochastic")));
            }
        }
        if (self.start.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CastleError::Validation("start distribution is not stochastic".into()));
        }
        if self.duration_range.0 < 1 || self.duration_range.0 > self.duration_range.1 {
            return Err(CastleError::Validation(format!("bad duration range {:?}", self.duration_range)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CastleError::Validation("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Noiseless emission of writable symbol `c` (vocab index).
    pub fn emit_mean(&self, c: usize) -> Vec<f64> {
        let proto = &self.prototypes[c - 1];
        proto
            .iter()
            .zip(&self.channel_scale)
            .zip(&self.channel_bias)
            .map(|((p, s), b)| s * p + b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub acoustic_strength: f64,
    pub linguistic_strength: f64,
}

impl Shift {
    pub fn new(acoustic_strength: f64, linguistic_strength: f64) -> Self {
        Self {
            acoustic_strength,
            linguistic_strength,
        }
    }
}

/// Knobs shared by both domains of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShape {
    pub n_chars: usize,
    pub feat_dim: usize,
    pub duration_range: (usize, usize),
    pub noise_std: f64,
    /// Strongly preferred successors per character.
    pub successors: usize,
    /// Probability mass spread uniformly over all successors.
    pub transition_floor: f64,
    /// Allow a character to follow itself.
    pub repeats: bool,
    /// Number of character pairs whose prototypes are close to each other.
    pub confusable_pairs: usize,
    /// Prototype distance scale within a confusable pair.
    pub pair_distance: f64,
    pub channel_scale_amp: f64,
    pub channel_bias_amp: f64,
    /// Relative noise increase at full acoustic shift.
    pub noise_gain: f64,
}

impl Default for DomainShape {
    fn default() -> Self {
        Self {
            n_chars: 11,
            feat_dim: 8,
            duration_range: (2, 4),
            noise_std: 0.35,
            successors: 2,
            transition_floor: 0.08,
            repeats: false,
            confusable_pairs: 3,
            pair_distance: 0.45,
            channel_scale_amp: 0.6,
            channel_bias_amp: 0.8,
            noise_gain: 0.5,
        }
    }
}

fn check_strength(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CastleError::Validation(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Builds the (source, target) pair of domain specs.
pub fn make_domain_spec(base_seed: u64, shift: Shift, shape: &DomainShape) -> Result<(DomainSpec, DomainSpec)> {
    check_strength("acoustic_strength", shift.acoustic_strength)?;
    check_strength("linguistic_strength", shift.linguistic_strength)?;
    let n = shape.n_chars;
    let f = shape.feat_dim;
    if n < 2 || f < 1 {
        return Err(CastleError::Validation("domain needs at least 2 characters and 1 feature".into()));
    }
    let mut rng = rng::stream(base_seed, &[tag::SPEC]);

    // One random permutation per preferred-successor slot.
    let mut order: Vec<usize> = (0..n).collect();
    let mut favoured: Vec<Vec<usize>> = vec![Vec::new(); n];
    for _ in 0..shape.successors.min(n - usize::from(!shape.repeats)) {
        let mut tries = 0;
        loop {
            order.shuffle(&mut rng);
            if (0..n).all(|i| (shape.repeats || order[i] != i) && !favoured[i].contains(&order[i])) {
                break;
            }
            tries += 1;
            if tries > 100_000 {
                return Err(CastleError::Validation(format!(
                    "cannot place {} preferred successors among {n} characters",
                    shape.successors
                )));
            }
        }
        for (f, &j) in favoured.iter_mut().zip(&order) {
            f.push(j);
        }
    }
    let mut transition = Vec::with_capacity(n);
    for (i, fav) in favoured.iter().enumerate() {
        let allowed = n - usize::from(!shape.repeats);
        let mut row: Vec<f64> = (0..n)
            .map(|j| if shape.repeats || j != i { shape.transition_floor / allowed as f64 } else { 0.0 })
            .collect();
        let mut weights: Vec<f64> = fav.iter().map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w *= (1.0 - shape.transition_floor) / total);
        for (&j, w) in fav.iter().zip(weights) {
            row[j] += w;
        }
        normalize(&mut row);
        transition.push(row);
    }
    let mut start: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    normalize(&mut start);

    let mut prototypes: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..f).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    // Writable index 0 is the separator; pairs start at the first letter.
    for p in 0..shape.confusable_pairs {
        let (a, b) = (1 + 2 * p, 2 + 2 * p);
        if b >= n {
            break;
        }
        let offset: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
        prototypes[b] = prototypes[a]
            .iter()
            .zip(&offset)
            .map(|(x, o)| x + shape.pair_distance * o)
            .collect();
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let scale_dir: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias_dir: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();

    let source = DomainSpec {
        transition: transition.clone(),
        start: start.clone(),
        prototypes: prototypes.clone(),
        duration_range: shape.duration_range,
        channel_scale: vec![1.0; f],
        channel_bias: vec![0.0; f],
        noise_std: shape.noise_std,
        seed: base_seed,
    };

    let ls = shift.linguistic_strength;
    let acs = shift.acoustic_strength;
    let target_transition = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (1.0 - ls) * transition[i][j] + ls * transition[perm[i]][perm[j]])
                .collect()
        })
        .collect();
    let target_start = (0..n).map(|i| (1.0 - ls) * start[i] + ls * start[perm[i]]).collect();
    let target = DomainSpec {
        transition: target_transition,
        start: target_start,
        prototypes,
        duration_range: shape.duration_range,
        channel_scale: scale_dir.iter().map(|u| 1.0 + acs * shape.channel_scale_amp * u).collect(),
        channel_bias: bias_dir.iter().map(|b| acs * shape.channel_bias_amp * b).collect(),
        noise_std: shape.noise_std * (1.0 + acs * shape.noise_gain),
        seed: base_seed,
    };
    source.validate()?;
    target.validate()?;
    Ok((source, target))
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn draw(dist: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Draws `length` writable symbols (vocab indices) from the domain's chain.
pub fn sample_text(spec: &DomainSpec, length: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(length);
    let mut cur = draw(&spec.start, rng);
    for _ in 0..length {
        out.push(cur + 1);
        cur = draw(&spec.transition[cur], rng);
    }
    out
}

/// One utterance: a feature matrix (`frames × feat_dim`, row-major) with an
/// optional transcript.
///
/// Utterances in the unlabeled splits keep their transcript as a hidden
/// reference for oracle measurements; training code never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<f32>,
    pub frames: usize,
    pub feat_dim: usize,
    pub transcript: Option<String>,
    pub domain: Domain,
}

impl Utterance {
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&x| x as f64).collect()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.feat_dim..(t + 1) * self.feat_dim]
    }

    pub fn reference(&self) -> &str {
        self.transcript.as_deref().unwrap_or("")
    }
}

pub fn sample_utterance(
    spec: &DomainSpec,
    vocab: &Vocab,
    length_chars: usize,
    rng: &mut Rng,
    id: impl Into<String>,
    domain: Domain,
) -> Result<Utterance> {
    if length_chars < 1 {
        return Err(CastleError::Validation("length_chars must be at least 1".into()));
    }
    let text = sample_text(spec, length_chars, rng);
    emit_utterance(spec, vocab, &text, rng, id, domain)
}

/// Renders a given character sequence through the domain's emission model.
pub fn emit_utterance(
    spec: &DomainSpec,
    vocab: &Vocab,
    text: &[usize],
    rng: &mut Rng,
    id: impl Into<String>,
    domain: Domain,
) -> Result<Utterance> {
    let f = spec.feat_dim();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| CastleError::Validation(format!("noise distribution: {e}")))?;
    let (dmin, dmax) = spec.duration_range;
    let mut features = Vec::new();
    let mut frames = 0;
    for &c in text {
        if c == BLANK || c >= vocab.size() {
            return Err(CastleError::Validation(format!("symbol index {c} is not writable")));
        }
        let mean = spec.emit_mean(c);
        let d = rng.random_range(dmin..=dmax);
        for _ in 0..d {
            for m in mean.iter().take(f) {
                let x = if spec.noise_std > 0.0 { m + noise.sample(rng) } else { *m };
                features.push(x as f32);
            }
        }
        frames += d;
    }
    Ok(Utterance {
        id: id.into(),
        features,
        frames,
        feat_dim: f,
        transcript: Some(vocab.decode(text)),
        domain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub labeled_source: usize,
    pub unlabeled_source: usize,
    pub unlabeled_target: usize,
    pub dev: usize,
    pub test: usize,
    pub lm_texts: usize,
    pub length_range: (usize, usize),
    pub shift: Shift,
    pub shape: DomainShape,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            labeled_source: 50,
            unlabeled_source: 200,
            unlabeled_target: 1000,
            dev: 40,
            test: 200,
            lm_texts: 2000,
            length_range: (6, 14),
            shift: Shift::new(0.5, 0.5),
            shape: DomainShape::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    /// 𝕃^S: the first `labeled_source` utterances of 𝕌^S, with transcripts.
    pub labeled_source: Vec<Utterance>,
    pub unlabeled_source: Vec<Utterance>,
    pub unlabeled_target: Vec<Utterance>,
    /// Small labeled target-domain set.
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Target-style text for LM training, never containing training transcripts by construction.
    pub lm_text: Vec<String>,
}

impl Corpus {
    pub fn feat_dim(&self) -> usize {
        self.unlabeled_source
            .first()
            .or(self.unlabeled_target.first())
            .map_or(0, |u| u.feat_dim)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.labeled_source.len() > self.unlabeled_source.len() {
            return Err(CastleError::Validation("more labeled than unlabeled source utterances".into()));
        }
        let train: HashSet<&str> = self
            .unlabeled_source
            .iter()
            .chain(&self.unlabeled_target)
            .chain(&self.labeled_source)
            .map(|u| u.id.as_str())
            .collect();
        for u in self.dev.iter().chain(&self.test) {
            if train.contains(u.id.as_str()) {
                return Err(CastleError::Validation(format!("evaluation id {} overlaps training", u.id)));
            }
        }
        for u in self.all() {
            if u.frames < 1 {
                return Err(CastleError::Validation(format!("{} has no frames", u.id)));
            }
            if let Some(t) = &u.transcript {
                self.vocab.encode(t)?;
                if t.chars().count() > u.frames {
                    return Err(CastleError::Validation(format!("{} is shorter than its transcript", u.id)));
                }
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.labeled_source
            .iter()
            .chain(&self.unlabeled_source)
            .chain(&self.unlabeled_target)
            .chain(&self.dev)
            .chain(&self.test)
    }

    /// Fraction of 𝕌^T transcripts that occur verbatim in the LM text.
    pub fn lm_overlap_fraction(&self) -> f64 {
        let lm: HashSet<&str> = self.lm_text.iter().map(String::as_str).collect();
        let hits = self
            .unlabeled_target
            .iter()
            .filter(|u| lm.contains(u.reference()))
            .count();
        hits as f64 / self.unlabeled_target.len().max(1) as f64
    }
}

/// Samples `count` utterances from `spec`, each from its own stream.
pub fn sample_split(
    spec: &DomainSpec,
    vocab: &Vocab,
    config: &CorpusConfig,
    split_tag: u64,
    prefix: &str,
    count: usize,
    domain: Domain,
) -> Result<Vec<Utterance>> {
    let (lo, hi) = config.length_range;
    if lo < 1 || lo > hi {
        return Err(CastleError::Validation(format!("bad length range {:?}", config.length_range)));
    }
    (0..count)
        .map(|i| {
            let mut rng = rng::stream(config.seed, &[tag::CORPUS, split_tag, i as u64]);
            let len = rng.random_range(lo..=hi);
            sample_utterance(spec, vocab, len, &mut rng, format!("{prefix}-{i:05}"), domain)
        })
        .collect()
}

pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.labeled_source > config.unlabeled_source {
        return Err(CastleError::Validation(format!(
            "labeled source count {} exceeds unlabeled source count {}",
            config.labeled_source, config.unlabeled_source
        )));
    }
    let vocab = Vocab::desk(config.shape.n_chars - 1);
    let (source, target) = make_domain_spec(config.seed, config.shift, &config.shape)?;
    let unlabeled_source = sample_split(
        &source,
        &vocab,
        config,
        tag::UNLABELED_SOURCE,
        "us",
        config.unlabeled_source,
        Domain::Source,
    )?;
    let labeled_source = unlabeled_source[..config.labeled_source].to_vec();
    let unlabeled_target = sample_split(
        &target,
        &vocab,
        config,
        tag::UNLABELED_TARGET,
        "ut",
        config.unlabeled_target,
        Domain::Target,
    )?;
    let dev = sample_split(&target, &vocab, config, tag::DEV, "dev", config.dev, Domain::Target)?;
    let test = sample_split(&target, &vocab, config, tag::TEST, "test", config.test, Domain::Target)?;
    let (lo, hi) = config.length_range;
    let lm_text = (0..config.lm_texts)
        .map(|i| {
            let mut rng = rng::stream(config.seed, &[tag::LM_TEXT, i as u64]);
            let len = rng.random_range(lo..=hi);
            vocab.decode(&sample_text(&target, len, &mut rng))
        })
        .collect();
    let corpus = Corpus {
        vocab,
        labeled_source,
        unlabeled_source,
        unlabeled_target,
        dev,
        test,
        lm_text,
    };
    corpus.validate()?;
    Ok(corpus)
}
