use crate::corpus::BLANK;
use crate::error::{CastleError, Result};
use crate::numcore::log_softmax;

use super::log_add;

/// Number of adjacent equal label pairs; each needs a separating blank frame.
pub fn repeat_count(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(frames: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if frames == 0 {
        return Err(CastleError::Validation("CTC input has no frames".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(CastleError::Validation(format!("label {l} is not a non-blank class")));
    }
    let repeats = repeat_count(labels);
    if frames < labels.len() + repeats {
        return Err(CastleError::Infeasible {
            frames,
            label_len: labels.len(),
            repeats,
        });
    }
    Ok(())
}

struct Lattice {
    ext: Vec<usize>,
    alpha: Vec<f64>,
    log_likelihood: f64,
}

fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn forward(lp: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Lattice {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_allowed(&ext, s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = a + row[ext[s]];
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let mut ll = last[s_len - 1];
    if s_len > 1 {
        ll = log_add(ll, last[s_len - 2]);
    }
    Lattice {
        ext,
        alpha,
        log_likelihood: ll,
    }
}

/// Negative log-likelihood of `labels` given per-frame log-probabilities.
pub fn ctc_nll_from_log_probs(log_probs: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Result<f64> {
    check(frames, classes, labels)?;
    Ok(-forward(log_probs, frames, classes, labels).log_likelihood)
}

/// Loss only, from unnormalized logits.
pub fn ctc_loss(logits: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Result<f64> {
    check(frames, classes, labels)?;
    let lp = log_softmax(logits, classes);
    Ok(-forward(&lp, frames, classes, labels).log_likelihood)
}

/// CTC loss and its gradient with respect to the pre-softmax logits.
pub fn ctc_loss_and_grad(logits: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check(frames, classes, labels)?;
    if logits.len() != frames * classes {
        return Err(CastleError::Validation(format!(
            "{} logits for a {frames}×{classes} input",
            logits.len()
        )));
    }
    let lp = log_softmax(logits, classes);
    let Lattice {
        ext,
        alpha,
        log_likelihood,
    } = forward(&lp, frames, classes, labels);
    if !log_likelihood.is_finite() {
        return Err(CastleError::Numeric(format!("CTC log-likelihood is {log_likelihood}")));
    }
    let s_len = ext.len();
    // beta[t][s]: log-probability of finishing from state s at t, emissions after t only.
    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let row = &lp[(t + 1) * classes..(t + 2) * classes];
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s] + row[ext[s]];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1] + row[ext[s + 1]]);
            }
            if s + 2 < s_len && skip_allowed(&ext, s + 2) {
                b = log_add(b, next[s + 2] + row[ext[s + 2]]);
            }
            cur[s] = b;
        }
    }
    let mut grad = vec![0.0; frames * classes];
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], v);
        }
        for k in 0..classes {
            grad[t * classes + k] = lp[t * classes + k].exp() - (occupancy[k] - log_likelihood).exp();
        }
    }
    Ok((-log_likelihood, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::collapse;
    use proptest::prelude::*;

    /// Sums path probabilities over every alignment in `classes^frames`.
    fn brute_force_nll(lp: &[f64], frames: usize, classes: usize, labels: &[usize]) -> f64 {
        let mut total = f64::NEG_INFINITY;
        let mut path = vec![0usize; frames];
        loop {
            if collapse(&path) == labels {
                let s: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum();
                total = log_add(total, s);
            }
            let mut i = 0;
            loop {
                if i == frames {
                    return -total;
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn single_frame_single_path() {
        let (loss, _) = ctc_loss_and_grad(&[0.0, 0.0], 1, 2, &[1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        let (loss, _) = ctc_loss_and_grad(&[0.0; 4], 2, 2, &[1]).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let logits = [0.3, -0.2, 1.0, 0.1, 0.0, 0.5];
        let lp = log_softmax(&logits, 3);
        let (loss, _) = ctc_loss_and_grad(&logits, 2, 3, &[]).unwrap();
        assert!((loss + lp[0] + lp[3]).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_are_reported() {
        assert!(matches!(
            ctc_loss_and_grad(&[0.0; 4], 2, 2, &[1, 1]),
            Err(CastleError::Infeasible { repeats: 1, .. })
        ));
        assert!(ctc_loss_and_grad(&[0.0; 6], 3, 2, &[1, 1]).is_ok());
        assert!(matches!(ctc_loss_and_grad(&[0.0; 4], 2, 2, &[0]), Err(CastleError::Validation(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (frames, classes) = (6, 4);
        let logits: Vec<f64> = (0..frames * classes).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let labels = [1, 2, 2];
        let (_, grad) = ctc_loss_and_grad(&logits, frames, classes, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let num = (ctc_loss(&plus, frames, classes, &labels).unwrap()
                - ctc_loss(&minus, frames, classes, &labels).unwrap())
                / (2.0 * eps);
            assert!((num - grad[i]).abs() < 1e-7, "logit {i}: {num} vs {}", grad[i]);
        }
    }

    fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
        (2usize..=4, 1usize..=6).prop_flat_map(|(classes, frames)| {
            (
                Just(classes),
                Just(frames),
                prop::collection::vec(-3.0f64..3.0, frames * classes),
                prop::collection::vec(1..classes, 0..=3),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_alignment_enumeration((classes, frames, logits, labels) in instance()) {
            let lp = log_softmax(&logits, classes);
            let feasible = frames >= labels.len() + repeat_count(&labels);
            match ctc_loss_and_grad(&logits, frames, classes, &labels) {
                Ok((loss, grad)) => {
                    prop_assert!(feasible);
                    prop_assert!(loss >= 0.0);
                    prop_assert!((loss - brute_force_nll(&lp, frames, classes, &labels)).abs() < 1e-6);
                    for t in 0..frames {
                        let s: f64 = grad[t * classes..(t + 1) * classes].iter().sum();
                        prop_assert!(s.abs() < 1e-6);
                    }
                }
                Err(CastleError::Infeasible { .. }) => prop_assert!(!feasible),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
