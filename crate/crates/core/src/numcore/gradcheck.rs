use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Parameters probed, drawn uniformly over all tensors.
    pub samples: usize,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples: 60,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
    pub passed: bool,
}

/// Compares analytic gradients with central differences on a random subset
/// of parameters. `loss_fn` must be deterministic.
pub fn finite_diff_check<F>(params: &ModelParams, loss_fn: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&ModelParams) -> (f64, ModelParams),
{
    let (_, analytic) = loss_fn(params);
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rng::stream(cfg.seed, &[rng::tag::MASK]);
    let mut worst = (0.0f64, String::new());
    let mut probe = params.clone();
    for _ in 0..cfg.samples {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let original = params.tensors()[tensor].1[flat];
        probe.tensors_mut()[tensor].1[flat] = original + cfg.epsilon;
        let up = loss_fn(&probe).0;
        probe.tensors_mut()[tensor].1[flat] = original - cfg.epsilon;
        let down = loss_fn(&probe).0;
        probe.tensors_mut()[tensor].1[flat] = original;
        let numeric = (up - down) / (2.0 * cfg.epsilon);
        let a = analytic.tensors()[tensor].1[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{}[{flat}]", params.tensors()[tensor].0));
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_parameter: worst.1,
        checked: cfg.samples,
        passed: worst.0 <= cfg.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Arch;

    fn quadratic(p: &ModelParams) -> (f64, ModelParams) {
        let mut g = p.zeros_like();
        let mut loss = 0.0;
        for ((_, t), (_, gt)) in p.tensors().into_iter().zip(g.tensors_mut()) {
            for (i, (x, d)) in t.iter().zip(gt.iter_mut()).enumerate() {
                let c = 1.0 + (i % 3) as f64;
                loss += 0.5 * c * x * x;
                *d = c * x;
            }
        }
        (loss, g)
    }

    #[test]
    fn exact_on_quadratics() {
        let p = ModelParams::new(Arch::default(), 1).unwrap();
        let r = finite_diff_check(&p, quadratic, &GradCheckConfig::default());
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn detects_corrupted_gradient() {
        let p = ModelParams::new(Arch::default(), 1).unwrap();
        let corrupted = |p: &ModelParams| {
            let (l, mut g) = quadratic(p);
            for (_, t) in g.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= 1.1);
            }
            (l, g)
        };
        let r = finite_diff_check(&p, corrupted, &GradCheckConfig::default());
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.05);
    }
}
