//! Time and channel masking of feature matrices.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub time_mask_count: usize,
    pub time_mask_width: usize,
    pub channel_mask_count: usize,
    pub channel_mask_width: usize,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            time_mask_count: 2,
            time_mask_width: 3,
            channel_mask_count: 1,
            channel_mask_width: 2,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            time_mask_count: 0,
            time_mask_width: 0,
            channel_mask_count: 0,
            channel_mask_width: 0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Concrete masked row and column ranges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskPlan {
    pub time: Vec<Range<usize>>,
    pub channel: Vec<Range<usize>>,
}

fn sample_ranges(count: usize, max_width: usize, extent: usize, rng: &mut rng::Rng) -> Vec<Range<usize>> {
    (0..count)
        .filter_map(|_| {
            let w = rng.random_range(0..=max_width).min(extent);
            if w == 0 {
                return None;
            }
            let start = rng.random_range(0..=extent - w);
            Some(start..start + w)
        })
        .collect()
}

pub fn sample_mask_plan(spec: &AugmentSpec, frames: usize, feat_dim: usize) -> MaskPlan {
    let mut r = rng::stream(spec.seed, &[rng::tag::AUGMENT]);
    MaskPlan {
        time: sample_ranges(spec.time_mask_count, spec.time_mask_width, frames, &mut r),
        channel: sample_ranges(spec.channel_mask_count, spec.channel_mask_width, feat_dim, &mut r),
    }
}

/// Zeroes the planned cells; ranges beyond the matrix are clipped.
pub fn apply_mask_plan(x: &[f64], frames: usize, feat_dim: usize, plan: &MaskPlan) -> Vec<f64> {
    let mut out = x.to_vec();
    for r in &plan.time {
        for t in r.start.min(frames)..r.end.min(frames) {
            out[t * feat_dim..(t + 1) * feat_dim].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for r in &plan.channel {
        for t in 0..frames {
            for c in r.start.min(feat_dim)..r.end.min(feat_dim) {
                out[t * feat_dim + c] = 0.0;
            }
        }
    }
    out
}

pub fn apply_masking_augment(x: &[f64], frames: usize, feat_dim: usize, spec: &AugmentSpec) -> Vec<f64> {
    apply_mask_plan(x, frames, feat_dim, &sample_mask_plan(spec, frames, feat_dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(frames: usize, f: usize) -> Vec<f64> {
        (0..frames * f).map(|i| i as f64 + 1.0).collect()
    }

    #[test]
    fn no_masks_is_identity() {
        let v = x(6, 4);
        assert_eq!(apply_masking_augment(&v, 6, 4, &AugmentSpec::none()), v);
    }

    #[test]
    fn full_width_time_mask_zeroes_row() {
        let v = x(6, 4);
        let plan = MaskPlan {
            time: vec![2..3],
            channel: vec![],
        };
        let out = apply_mask_plan(&v, 6, 4, &plan);
        assert!(out[8..12].iter().all(|&c| c == 0.0));
        assert_eq!(&out[..8], &v[..8]);
        assert_eq!(&out[12..], &v[12..]);
    }

    #[test]
    fn oversized_masks_are_clipped() {
        let v = x(3, 2);
        let plan = MaskPlan {
            time: vec![2..10],
            channel: vec![1..5],
        };
        let out = apply_mask_plan(&v, 3, 2, &plan);
        assert_eq!(out, vec![1.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sampled_masks_are_bounded_and_seeded() {
        let spec = AugmentSpec {
            time_mask_count: 2,
            time_mask_width: 4,
            channel_mask_count: 1,
            channel_mask_width: 2,
            seed: 11,
        };
        for seed in 0..200 {
            let s = spec.with_seed(seed);
            let plan = sample_mask_plan(&s, 9, 5);
            assert_eq!(plan, sample_mask_plan(&s, 9, 5));
            assert!(plan.time.len() <= 2 && plan.channel.len() <= 1);
            assert!(plan.time.iter().all(|r| r.end <= 9 && r.len() <= 4));
            assert!(plan.channel.iter().all(|r| r.end <= 5 && r.len() <= 2));
            let v = x(9, 5);
            let out = apply_mask_plan(&v, 9, 5, &plan);
            for (i, (a, b)) in v.iter().zip(&out).enumerate() {
                let (t, c) = (i / 5, i % 5);
                let masked = plan.time.iter().any(|r| r.contains(&t)) || plan.channel.iter().any(|r| r.contains(&c));
                assert_eq!(*b, if masked { 0.0 } else { *a });
            }
        }
    }
}
