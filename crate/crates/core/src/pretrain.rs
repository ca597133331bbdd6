//! Continued self-supervised pre-training with source replay.
//!
//! The objective is masked-frame reconstruction: masked input frames are
//! zeroed and the reconstruction head must regress their original values.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{CastleError, Result};
use crate::numcore::{backprop_step, backward, encode, head_backward, LrSchedule, Mode, ModelParams, OptimHyper,
    OptimizerState, Trainable};
use crate::rng::{self, tag};
use crate::training::accumulate;

/// Marks about `fraction·frames` frames (at least one, never all) in spans
/// of up to `span` consecutive frames.
pub fn sample_frame_mask(frames: usize, fraction: f64, span: usize, rng: &mut rng::Rng) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CastleError::Validation(format!("mask fraction must lie in (0, 1), got {fraction}")));
    }
    if frames < 2 {
        return Err(CastleError::Validation("masking needs at least two frames".into()));
    }
    let want = ((fraction * frames as f64).round() as usize).clamp(1, frames - 1);
    let mut mask = vec![false; frames];
    let mut count = 0;
    while count < want {
        let start = rng.random_range(0..frames);
        for m in mask.iter_mut().skip(start).take(span.max(1)) {
            if count < want && !*m {
                *m = true;
                count += 1;
            }
        }
    }
    Ok(mask)
}

/// Mean squared reconstruction error over masked frames and its gradient.
pub fn masked_reconstruction_loss(
    params: &ModelParams,
    x: &[f64],
    frames: usize,
    mask: &[bool],
    mode: Mode,
) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let loss = reconstruction_into(params, x, frames, mask, mode, 1.0, &mut grads)?;
    Ok((loss, grads))
}

fn reconstruction_into(
    params: &ModelParams,
    x: &[f64],
    frames: usize,
    mask: &[bool],
    mode: Mode,
    weight: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let f = params.arch.feat_dim;
    if mask.len() != frames {
        return Err(CastleError::Validation(format!("mask covers {} of {frames} frames", mask.len())));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 || masked == frames {
        return Err(CastleError::Validation(format!(
            "reconstruction needs some but not all frames masked ({masked} of {frames})"
        )));
    }
    let mut input = x.to_vec();
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        input[t * f..(t + 1) * f].iter_mut().for_each(|v| *v = 0.0);
    }
    let cache = encode(params, &input, frames, mode)?;
    let pred = params.ssl_head.forward(&cache.z, frames);
    let norm = (masked * f) as f64;
    let mut loss = 0.0;
    let mut dpred = vec![0.0; pred.len()];
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for j in t * f..(t + 1) * f {
            let d = pred[j] - x[j];
            loss += d * d;
            dpred[j] = weight * 2.0 * d / norm;
        }
    }
    let mut dz = vec![0.0; cache.z.len()];
    head_backward(&params.ssl_head, &cache.z, &dpred, frames, &mut grads.ssl_head, &mut dz);
    backward(params, &cache, &dz, grads, true);
    Ok(loss / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_updates: usize,
    /// p_s/t: expected source samples per target sample.
    pub replay_ratio: f64,
    pub mask_fraction: f64,
    pub mask_span: usize,
    pub batch_size: usize,
    pub hyper: OptimHyper,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_updates: 400,
            replay_ratio: 0.5,
            mask_fraction: 0.3,
            mask_span: 3,
            batch_size: 8,
            hyper: OptimHyper {
                schedule: LrSchedule::Constant { lr: 2e-3 },
                trainable: Trainable::pretrain(),
                ..OptimHyper::default()
            },
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(CastleError::Validation(format!(
                "replay ratio must lie in [0, 1], got {}",
                self.replay_ratio
            )));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(CastleError::Validation(format!(
                "mask fraction must lie in (0, 1), got {}",
                self.mask_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(CastleError::Validation("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Probability that one batch slot draws a source sample.
    pub fn source_probability(&self) -> f64 {
        self.replay_ratio / (1.0 + self.replay_ratio)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub source_draws: usize,
    pub target_draws: usize,
    pub skipped: usize,
    pub mean_loss: Vec<f64>,
}

/// Which pool one batch slot draws from, and the index within it.
pub fn replay_draw(cfg: &PretrainConfig, update: usize, slot: usize, n_target: usize, n_source: usize) -> (bool, usize) {
    let mut r = rng::stream(cfg.seed, &[tag::PRETRAIN, tag::REPLAY, update as u64, slot as u64]);
    let source = n_source > 0 && r.random::<f64>() < cfg.source_probability();
    let i = r.random_range(0..if source { n_source } else { n_target });
    (source, i)
}

/// Self-supervised training of the encoder and reconstruction head on
/// `targets`, replaying `sources` at ratio `replay_ratio : 1`.
pub fn continued_pretrain(
    params: &ModelParams,
    targets: &[Utterance],
    sources: &[Utterance],
    cfg: &PretrainConfig,
) -> Result<(ModelParams, PretrainStats)> {
    cfg.validate()?;
    let mut p = params.clone();
    let mut stats = PretrainStats::default();
    if cfg.max_updates == 0 {
        return Ok((p, stats));
    }
    if targets.is_empty() {
        return Err(CastleError::Validation("continued pre-training needs target data".into()));
    }
    if cfg.replay_ratio > 0.0 && sources.is_empty() {
        return Err(CastleError::Validation("replay requested without source data".into()));
    }
    let data: Vec<(Vec<f64>, usize)> = targets.iter().map(|u| (u.features_f64(), u.frames)).collect();
    let replay: Vec<(Vec<f64>, usize)> = sources.iter().map(|u| (u.features_f64(), u.frames)).collect();
    let mut hyper = cfg.hyper;
    hyper.trainable = Trainable::pretrain();
    hyper.total_steps = cfg.max_updates;
    let mut state = OptimizerState::new();
    let scale = 1.0 / cfg.batch_size as f64;
    for update in 0..cfg.max_updates {
        let draws: Vec<(bool, usize)> = (0..cfg.batch_size)
            .map(|slot| replay_draw(cfg, update, slot, data.len(), replay.len()))
            .collect();
        for &(source, _) in &draws {
            if source {
                stats.source_draws += 1;
            } else {
                stats.target_draws += 1;
            }
        }
        let mut grads = p.zeros_like();
        let current = &p;
        let out = accumulate(draws.len(), current, &mut grads, |slot, g| {
            let (source, i) = draws[slot];
            let (x, frames) = if source { &replay[i] } else { &data[i] };
            let mut r = rng::stream(cfg.seed, &[tag::PRETRAIN, tag::MASK, update as u64, slot as u64]);
            let Ok(mask) = sample_frame_mask(*frames, cfg.mask_fraction, cfg.mask_span, &mut r) else {
                return Ok(vec![None]);
            };
            let mode = Mode::Train {
                dropout_seed: rng::derive_seed(cfg.seed, &[tag::PRETRAIN, tag::DROPOUT, update as u64, slot as u64]),
                augment: None,
            };
            reconstruction_into(current, x, *frames, &mask, mode, scale, g).map(|l| vec![Some(l)])
        })?;
        stats.skipped += out.skipped;
        stats.mean_loss.push(out.loss_sum / out.counted.max(1) as f64);
        backprop_step(&mut p, &grads, &mut state, &hyper)?;
    }
    Ok((p, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};
    use crate::numcore::{finite_diff_check, Arch, GradCheckConfig, Linear};

    fn small_arch() -> Arch {
        Arch {
            hidden: 10,
            feat_dim: 4,
            context: 1,
            ..Arch::default()
        }
    }

    fn features(frames: usize, f: usize) -> Vec<f64> {
        (0..frames * f).map(|i| ((i * 37 % 17) as f64 - 8.0) / 6.0).collect()
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        // Z = tanh(bias) is constant, so a head with zero weights and the
        // right bias predicts a constant signal exactly.
        let mut p = ModelParams::new(small_arch(), 1).unwrap();
        let f = 4;
        let x: Vec<f64> = (0..6).flat_map(|_| [0.5, -1.0, 2.0, 0.0]).collect();
        p.ssl_head = Linear {
            bias: vec![0.5, -1.0, 2.0, 0.0],
            ..Linear::zeros(10, f)
        };
        let mask = [false, true, true, false, true, false];
        let (loss, _) = masked_reconstruction_loss(&p, &x, 6, &mask, Mode::Inference).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn constant_latent_gives_variance_around_prediction() {
        let mut p = ModelParams::new(small_arch(), 1).unwrap();
        p.layer1 = Linear::zeros(p.layer1.in_dim, 10);
        p.layer2 = Linear::zeros(10, 10);
        let x = features(7, 4);
        let mask = [true, false, true, true, false, false, true];
        let (loss, _) = masked_reconstruction_loss(&p, &x, 7, &mask, Mode::Inference).unwrap();
        // Z = 0, so the prediction is the head bias
        let c = &p.ssl_head.bias;
        let mut want = 0.0;
        for t in [0, 2, 3, 6] {
            for j in 0..4 {
                want += (x[t * 4 + j] - c[j]).powi(2);
            }
        }
        assert!((loss - want / 16.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let p = ModelParams::new(small_arch(), seed).unwrap();
            let x = features(9, 4);
            let mut r = rng::stream(seed, &[1]);
            let mask = sample_frame_mask(9, 0.4, 2, &mut r).unwrap();
            let report = finite_diff_check(
                &p,
                |q| masked_reconstruction_loss(q, &x, 9, &mask, Mode::Inference).unwrap(),
                &GradCheckConfig {
                    seed,
                    ..GradCheckConfig::default()
                },
            );
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let p = ModelParams::new(small_arch(), 1).unwrap();
        let x = features(3, 4);
        assert!(masked_reconstruction_loss(&p, &x, 3, &[false; 3], Mode::Inference).is_err());
        assert!(masked_reconstruction_loss(&p, &x, 3, &[true; 3], Mode::Inference).is_err());
        let mut r = rng::stream(0, &[]);
        assert!(sample_frame_mask(5, 0.0, 2, &mut r).is_err());
        assert!(sample_frame_mask(5, 1.0, 2, &mut r).is_err());
    }

    #[test]
    fn sampled_masks_hit_the_requested_count() {
        let mut r = rng::stream(4, &[]);
        for frames in 2..30 {
            let m = sample_frame_mask(frames, 0.3, 3, &mut r).unwrap();
            let n = m.iter().filter(|&&b| b).count();
            assert_eq!(n, ((0.3 * frames as f64).round() as usize).clamp(1, frames - 1));
        }
    }

    fn corpus() -> crate::corpus::Corpus {
        build_corpus(&CorpusConfig {
            labeled_source: 4,
            unlabeled_source: 12,
            unlabeled_target: 12,
            dev: 2,
            test: 2,
            lm_texts: 4,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn replay_zero_never_draws_source() {
        let c = corpus();
        let cfg = PretrainConfig {
            max_updates: 20,
            replay_ratio: 0.0,
            ..PretrainConfig::default()
        };
        let p = ModelParams::new(Arch::default(), 2).unwrap();
        let (_, stats) = continued_pretrain(&p, &c.unlabeled_target, &c.unlabeled_source, &cfg).unwrap();
        assert_eq!(stats.source_draws, 0);
        assert_eq!(stats.target_draws, 160);
    }

    #[test]
    fn replay_half_draws_a_third_source() {
        let cfg = PretrainConfig {
            replay_ratio: 0.5,
            ..PretrainConfig::default()
        };
        let source = (0..3000).filter(|&i| replay_draw(&cfg, i / 8, i % 8, 10, 10).0).count();
        assert!((source as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.03);
    }

    #[test]
    fn heads_are_isolated_and_zero_updates_is_identity() {
        let c = corpus();
        let p = ModelParams::new(Arch::default(), 2).unwrap();
        let cfg = PretrainConfig {
            max_updates: 10,
            ..PretrainConfig::default()
        };
        let (q, stats) = continued_pretrain(&p, &c.unlabeled_target, &c.unlabeled_source, &cfg).unwrap();
        assert_eq!(q.main_head, p.main_head);
        assert_eq!(q.aux_head, p.aux_head);
        assert_ne!(q.layer1, p.layer1);
        assert_ne!(q.ssl_head, p.ssl_head);
        assert_eq!(stats.mean_loss.len(), 10);
        let none = PretrainConfig {
            max_updates: 0,
            ..cfg
        };
        assert_eq!(continued_pretrain(&p, &c.unlabeled_target, &[], &none).unwrap().0, p);
    }

    #[test]
    fn reconstruction_loss_falls() {
        let c = corpus();
        let p = ModelParams::new(Arch::default(), 2).unwrap();
        let cfg = PretrainConfig {
            max_updates: 150,
            replay_ratio: 0.0,
            ..PretrainConfig::default()
        };
        let (_, stats) = continued_pretrain(&p, &c.unlabeled_target, &[], &cfg).unwrap();
        let head: f64 = stats.mean_loss[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = stats.mean_loss[130..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }

    #[test]
    fn replay_without_sources_is_an_error() {
        let c = corpus();
        let p = ModelParams::new(Arch::default(), 2).unwrap();
        let cfg = PretrainConfig {
            max_updates: 1,
            ..PretrainConfig::default()
        };
        assert!(continued_pretrain(&p, &c.unlabeled_target, &[], &cfg).is_err());
        let bad = PretrainConfig {
            replay_ratio: 1.5,
            ..cfg
        };
        assert!(continued_pretrain(&p, &c.unlabeled_target, &c.unlabeled_source, &bad).is_err());
    }
}
