use rand::Rng as _;

use super::{apply_masking_augment, AugmentSpec, Linear, ModelParams};
use crate::error::{CastleError, Result};
use crate::rng::{self, Rng};

/// Inference disables dropout and augmentation; training enables dropout
/// and, when `augment` is set, input masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Inference,
    Train {
        dropout_seed: u64,
        augment: Option<AugmentSpec>,
    },
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub frames: usize,
    window: Vec<f64>,
    h1: Vec<f64>,
    mask1: Option<Vec<f64>>,
    h1_dropped: Vec<f64>,
    h2: Vec<f64>,
    mask2: Option<Vec<f64>>,
    /// Latent `frames × hidden` matrix Z.
    pub z: Vec<f64>,
}

fn context_window(x: &[f64], frames: usize, feat_dim: usize, context: usize) -> Vec<f64> {
    let width = 2 * context + 1;
    let mut out = vec![0.0; frames * width * feat_dim];
    for t in 0..frames {
        for k in 0..width {
            let src = t as isize + k as isize - context as isize;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let src = src as usize;
            let dst = (t * width + k) * feat_dim;
            out[dst..dst + feat_dim].copy_from_slice(&x[src * feat_dim..(src + 1) * feat_dim]);
        }
    }
    out
}

fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Encoder g: features (`frames × feat_dim`) to latent Z (`frames × hidden`).
pub fn encode(params: &ModelParams, x: &[f64], frames: usize, mode: Mode) -> Result<ForwardCache> {
    let arch = &params.arch;
    if x.len() != frames * arch.feat_dim {
        return Err(CastleError::Validation(format!(
            "feature buffer of {} values is not {frames}×{}",
            x.len(),
            arch.feat_dim
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(CastleError::Numeric(format!("non-finite input feature at index {i}")));
    }
    let (dropout_rng, augmented) = match mode {
        Mode::Inference => (None, None),
        Mode::Train { dropout_seed, augment } => {
            let aug = augment.map(|spec| apply_masking_augment(x, frames, arch.feat_dim, &spec));
            let rng = (arch.dropout_rate > 0.0).then(|| rng::stream(dropout_seed, &[]));
            (rng, aug)
        }
    };
    let input = augmented.as_deref().unwrap_or(x);
    let window = context_window(input, frames, arch.feat_dim, arch.context);

    let mut h1 = params.layer1.forward(&window, frames);
    h1.iter_mut().for_each(|v| *v = v.tanh());
    let mut rng = dropout_rng;
    let mask1 = rng.as_mut().map(|r| dropout_mask(h1.len(), arch.dropout_rate, r));
    let h1_dropped = match &mask1 {
        Some(m) => h1.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => h1.clone(),
    };
    let mut h2 = params.layer2.forward(&h1_dropped, frames);
    h2.iter_mut().for_each(|v| *v = v.tanh());
    let mask2 = rng.as_mut().map(|r| dropout_mask(h2.len(), arch.dropout_rate, r));
    let z = match &mask2 {
        Some(m) => h2.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => h2.clone(),
    };
    Ok(ForwardCache {
        frames,
        window,
        h1,
        mask1,
        h1_dropped,
        h2,
        mask2,
        z,
    })
}

/// Head h: row-wise affine map of Z to logits.
pub fn project(head: &Linear, z: &[f64], frames: usize) -> Result<Vec<f64>> {
    if z.len() != frames * head.in_dim {
        return Err(CastleError::Validation(format!(
            "latent of {} values does not match a head expecting {frames}×{}",
            z.len(),
            head.in_dim
        )));
    }
    Ok(head.forward(z, frames))
}

/// Accumulates head gradients and adds the latent gradient into `dz`.
pub fn head_backward(head: &Linear, z: &[f64], dlogits: &[f64], frames: usize, grad: &mut Linear, dz: &mut [f64]) {
    head.backward(z, dlogits, frames, grad, Some(dz));
}

/// Back-propagates a latent gradient through the encoder.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dz: &[f64], grads: &mut ModelParams, train_layer1: bool) {
    let frames = cache.frames;
    let mut da2: Vec<f64> = match &cache.mask2 {
        Some(m) => dz.iter().zip(m).map(|(g, k)| g * k).collect(),
        None => dz.to_vec(),
    };
    for (g, h) in da2.iter_mut().zip(&cache.h2) {
        *g *= 1.0 - h * h;
    }
    let mut dh1 = vec![0.0; cache.h1.len()];
    params
        .layer2
        .backward(&cache.h1_dropped, &da2, frames, &mut grads.layer2, Some(&mut dh1));
    if !train_layer1 {
        return;
    }
    if let Some(m) = &cache.mask1 {
        dh1.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
    }
    for (g, h) in dh1.iter_mut().zip(&cache.h1) {
        *g *= 1.0 - h * h;
    }
    params
        .layer1
        .backward(&cache.window, &dh1, frames, &mut grads.layer1, None);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Arch;

    fn arch() -> Arch {
        Arch {
            feat_dim: 3,
            context: 2,
            hidden: 5,
            vocab_size: 4,
            dropout_rate: 0.2,
        }
    }

    fn input(frames: usize, f: usize) -> Vec<f64> {
        (0..frames * f).map(|i| ((i * 7 % 13) as f64 - 6.0) / 4.0).collect()
    }

    #[test]
    fn zero_weights_propagate_bias() {
        let mut p = ModelParams::new(arch(), 0).unwrap();
        p.layer1 = Linear::zeros(arch().window_dim(), 5);
        p.layer2 = Linear::zeros(5, 5);
        p.layer2.bias = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let c = encode(&p, &input(4, 3), 4, Mode::Inference).unwrap();
        let row: Vec<f64> = p.layer2.bias.iter().map(|b: &f64| b.tanh()).collect();
        for t in 0..4 {
            assert_eq!(&c.z[t * 5..(t + 1) * 5], row.as_slice());
        }
    }

    #[test]
    fn inference_is_pure() {
        let p = ModelParams::new(arch(), 3).unwrap();
        let x = input(7, 3);
        let a = encode(&p, &x, 7, Mode::Inference).unwrap();
        let b = encode(&p, &x, 7, Mode::Inference).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn train_mode_without_dropout_matches_inference() {
        let mut a = arch();
        a.dropout_rate = 0.0;
        let p = ModelParams::new(a, 3).unwrap();
        let x = input(7, 3);
        let inf = encode(&p, &x, 7, Mode::Inference).unwrap();
        let tr = encode(
            &p,
            &x,
            7,
            Mode::Train {
                dropout_seed: 9,
                augment: None,
            },
        )
        .unwrap();
        assert_eq!(inf.z, tr.z);
    }

    #[test]
    fn receptive_field_is_the_context_window() {
        let p = ModelParams::new(arch(), 5).unwrap();
        let (frames, f) = (12, 3);
        let x = input(frames, f);
        let base = encode(&p, &x, frames, Mode::Inference).unwrap();
        let probe = 6;
        let mut y = x.clone();
        for j in 0..f {
            y[probe * f + j] += 0.7;
        }
        let moved = encode(&p, &y, frames, Mode::Inference).unwrap();
        for t in 0..frames {
            let changed = base.z[t * 5..(t + 1) * 5] != moved.z[t * 5..(t + 1) * 5];
            assert_eq!(changed, (probe - 2..=probe + 2).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = ModelParams::new(arch(), 5).unwrap();
        let mut x = input(4, 3);
        x[5] = f64::NAN;
        assert!(matches!(encode(&p, &x, 4, Mode::Inference), Err(CastleError::Numeric(_))));
        assert!(encode(&p, &x[..5], 4, Mode::Inference).is_err());
        assert!(project(&p.main_head, &[0.0; 3], 1).is_err());
    }

    #[test]
    fn projection_is_linear() {
        let p = ModelParams::new(arch(), 5).unwrap();
        let z1 = input(3, 5);
        let z2: Vec<f64> = z1.iter().map(|v| v * -0.3 + 0.1).collect();
        let (a, b) = (1.7, -0.4);
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
        let lhs = project(&p.main_head, &mix, 3).unwrap();
        let l1 = project(&p.main_head, &z1, 3).unwrap();
        let l2 = project(&p.main_head, &z2, 3).unwrap();
        // the bias enters once on the left and a + b times on the right
        for (i, v) in lhs.iter().enumerate() {
            let bias = p.main_head.bias[i % 4];
            let rhs = a * (l1[i] - bias) + b * (l2[i] - bias) + bias;
            assert!((v - rhs).abs() < 1e-6);
        }
    }
}
