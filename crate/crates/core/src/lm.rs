//! Character n-gram language model with add-k smoothing.
//!
//! Outcomes are the writable symbols plus an end-of-sequence event, so the
//! effective outcome count is `V' = vocab.size()` (blank removed, end added).
//! Histories are padded on the left with a begin marker.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{Vocab, BLANK};
use crate::error::{CastleError, Result};

/// History element used for left padding. Shares the blank's index because
/// blank never occurs in text.
const BEGIN: usize = BLANK;

#[derive(Debug, Clone)]
pub struct NgramLM {
    order: usize,
    k: f64,
    vocab: Vocab,
    /// Packed history → (outcome counts, total).
    counts: HashMap<u64, (Vec<u32>, u32)>,
}

impl PartialEq for NgramLM {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order && self.k == other.k && self.vocab == other.vocab && self.counts == other.counts
    }
}

impl NgramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Number of outcomes: writable symbols plus end.
    pub fn outcomes(&self) -> usize {
        self.vocab.size()
    }

    /// Outcome slot of the end event.
    pub fn end_slot(&self) -> usize {
        self.vocab.size() - 1
    }

    fn slot(&self, symbol: usize) -> usize {
        symbol - 1
    }

    fn pack(&self, history: &[usize]) -> u64 {
        let base = self.vocab.size() as u64;
        history.iter().fold(0u64, |acc, &h| acc * base + h as u64)
    }

    /// Last `order − 1` symbols of `prefix`, begin-padded.
    pub fn history(&self, prefix: &[usize]) -> Vec<usize> {
        let n = self.order - 1;
        let mut h = vec![BEGIN; n.saturating_sub(prefix.len())];
        h.extend_from_slice(&prefix[prefix.len().saturating_sub(n)..]);
        h
    }

    fn context_key(&self, prefix: &[usize]) -> u64 {
        self.pack(&self.history(prefix))
    }

    /// log p(outcome | history) for every outcome slot (chars then end).
    pub fn next_logprobs(&self, prefix: &[usize]) -> Vec<f64> {
        let v = self.outcomes() as f64;
        match self.counts.get(&self.context_key(prefix)) {
            Some((c, total)) => {
                let denom = (*total as f64 + self.k * v).ln();
                c.iter().map(|&n| (n as f64 + self.k).ln() - denom).collect()
            }
            None => vec![-(v.ln()); self.outcomes()],
        }
    }

    /// log p(symbol | prefix) for a writable vocab index.
    pub fn symbol_logprob(&self, prefix: &[usize], symbol: usize) -> f64 {
        self.slot_logprob(prefix, self.slot(symbol))
    }

    pub fn end_logprob(&self, prefix: &[usize]) -> f64 {
        self.slot_logprob(prefix, self.end_slot())
    }

    fn slot_logprob(&self, prefix: &[usize], slot: usize) -> f64 {
        let v = self.outcomes() as f64;
        match self.counts.get(&self.context_key(prefix)) {
            Some((c, total)) => (c[slot] as f64 + self.k).ln() - (*total as f64 + self.k * v).ln(),
            None => -(v.ln()),
        }
    }

    fn check_labels(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&s| s == BLANK || s >= self.vocab.size()) {
            Some(s) => Err(CastleError::Validation(format!("symbol index {s} is not writable"))),
            None => Ok(()),
        }
    }

    /// Σ log p(s_t | history) + log p(end | tail).
    pub fn logprob(&self, seq: &[usize]) -> Result<f64> {
        self.check_labels(seq)?;
        let mut total = 0.0;
        for t in 0..seq.len() {
            total += self.symbol_logprob(&seq[..t], seq[t]);
        }
        Ok(total + self.end_logprob(seq))
    }

    pub fn text_logprob(&self, text: &str) -> Result<f64> {
        self.logprob(&self.vocab.encode(text)?)
    }

    /// Per-outcome perplexity over a text set (end events included).
    pub fn perplexity<S: AsRef<str>>(&self, texts: &[S]) -> Result<f64> {
        let mut lp = 0.0;
        let mut n = 0usize;
        for t in texts {
            let seq = self.vocab.encode(t.as_ref())?;
            lp += self.logprob(&seq)?;
            n += seq.len() + 1;
        }
        Ok((-lp / n.max(1) as f64).exp())
    }

    /// Histories seen in training, unpacked.
    pub fn observed_histories(&self) -> Vec<Vec<usize>> {
        let mut keys: Vec<u64> = self.counts.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| self.unpack(k)).collect()
    }

    fn unpack(&self, mut key: u64) -> Vec<usize> {
        let base = self.vocab.size() as u64;
        let mut h = vec![0usize; self.order - 1];
        for slot in h.iter_mut().rev() {
            *slot = (key % base) as usize;
            key /= base;
        }
        h
    }

    /// Serializes the count tables as plain text.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<&u64> = self.counts.keys().collect();
        keys.sort_unstable();
        let mut out = String::new();
        writeln!(out, "#castle-ngram v1").unwrap();
        writeln!(out, "order {}", self.order).unwrap();
        writeln!(out, "k {:e}", self.k).unwrap();
        writeln!(out, "vocab {}", self.vocab.fingerprint()).unwrap();
        writeln!(out, "outcomes {}", self.outcomes()).unwrap();
        writeln!(out, "histories {}", keys.len()).unwrap();
        for key in keys {
            let h = self.unpack(*key);
            let (c, _) = &self.counts[key];
            let hs: Vec<String> = h.iter().map(usize::to_string).collect();
            let cs: Vec<String> = c.iter().map(u32::to_string).collect();
            writeln!(out, "{}\t{}", hs.join(" "), cs.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str, vocab: &Vocab, path: &Path) -> Result<Self> {
        let bad = |m: String| CastleError::format(path, m);
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` header")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}` header, found {line:?}")))
        };
        if header("#castle-ngram")? != "v1" {
            return Err(bad("unsupported version".into()));
        }
        let order: usize = header("order")?.parse().map_err(|_| bad("bad order".into()))?;
        let k: f64 = header("k")?.parse().map_err(|_| bad("bad k".into()))?;
        let fingerprint = header("vocab")?;
        let outcomes: usize = header("outcomes")?.parse().map_err(|_| bad("bad outcome count".into()))?;
        let histories: usize = header("histories")?.parse().map_err(|_| bad("bad history count".into()))?;
        if fingerprint != vocab.fingerprint() || outcomes != vocab.size() {
            return Err(CastleError::Validation(format!(
                "language model in {} was trained on a different vocabulary",
                path.display()
            )));
        }
        if order < 1 || !(k > 0.0) {
            return Err(bad(format!("invalid order {order} or k {k}")));
        }
        let mut lm = NgramLM {
            order,
            k,
            vocab: vocab.clone(),
            counts: HashMap::new(),
        };
        for line in lines {
            let (h, c) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad count line {line:?}")))?;
            let hist: Vec<usize> = if h.is_empty() {
                Vec::new()
            } else {
                h.split(' ')
                    .map(|x| x.parse().map_err(|_| bad(format!("bad history {h:?}"))))
                    .collect::<Result<_>>()?
            };
            if hist.len() != order - 1 || hist.iter().any(|&x| x >= vocab.size()) {
                return Err(bad(format!("history {h:?} does not match order {order}")));
            }
            let counts: Vec<u32> = c
                .split(' ')
                .map(|x| x.parse().map_err(|_| bad(format!("bad counts {c:?}"))))
                .collect::<Result<_>>()?;
            if counts.len() != outcomes {
                return Err(bad(format!("expected {outcomes} counts, found {}", counts.len())));
            }
            let total = counts.iter().sum();
            lm.counts.insert(lm.pack(&hist), (counts, total));
        }
        if lm.counts.len() != histories {
            return Err(bad(format!("expected {histories} histories, found {}", lm.counts.len())));
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| CastleError::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CastleError::io(path, e))?;
        Self::from_text(&text, vocab, path)
    }
}

/// Counts every n-gram of each text with begin/end padding.
pub fn train_ngram<S: AsRef<str>>(texts: &[S], vocab: &Vocab, order: usize, k: f64) -> Result<NgramLM> {
    if texts.is_empty() {
        return Err(CastleError::Validation("cannot train a language model on no text".into()));
    }
    if order < 1 {
        return Err(CastleError::Validation("n-gram order must be at least 1".into()));
    }
    if !(k > 0.0) {
        return Err(CastleError::Validation(format!("smoothing constant must be positive, got {k}")));
    }
    let bits_per = (vocab.size() as f64).log2().ceil() as usize;
    if (order - 1) * bits_per > 63 {
        return Err(CastleError::Validation(format!("order {order} is too large for this vocabulary")));
    }
    let mut lm = NgramLM {
        order,
        k,
        vocab: vocab.clone(),
        counts: HashMap::new(),
    };
    let outcomes = lm.outcomes();
    for text in texts {
        let seq = vocab.encode(text.as_ref())?;
        for t in 0..=seq.len() {
            let key = lm.context_key(&seq[..t]);
            let slot = if t < seq.len() { lm.slot(seq[t]) } else { lm.end_slot() };
            let entry = lm.counts.entry(key).or_insert_with(|| (vec![0; outcomes], 0));
            entry.0[slot] += 1;
            entry.1 += 1;
        }
    }
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::desk(4) // _ | a b c d
    }

    #[test]
    fn unseen_history_is_uniform() {
        let lm = train_ngram(&["ab"], &vocab(), 3, 0.5).unwrap();
        let v = lm.outcomes() as f64;
        let p = lm.symbol_logprob(&vocab().encode("dd").unwrap(), 3).exp();
        assert!((p - 1.0 / v).abs() < 1e-15);
    }

    #[test]
    fn closed_form_bigram() {
        let k = 0.3;
        let voc = vocab();
        let lm = train_ngram(&["ab"], &voc, 2, k).unwrap();
        let a = voc.encode("a").unwrap();
        let b = voc.index_of('b').unwrap();
        let expect = (1.0 + k) / (1.0 + k * lm.outcomes() as f64);
        assert!((lm.symbol_logprob(&a, b).exp() - expect).abs() < 1e-15);
    }

    #[test]
    fn empty_sequence_scores_end_after_begin() {
        let lm = train_ngram(&["ab", "b"], &vocab(), 3, 0.5).unwrap();
        assert_eq!(lm.logprob(&[]).unwrap(), lm.end_logprob(&[]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(train_ngram::<&str>(&[], &vocab(), 3, 0.5).is_err());
        assert!(train_ngram(&["a"], &vocab(), 0, 0.5).is_err());
        assert!(train_ngram(&["a"], &vocab(), 2, 0.0).is_err());
        let lm = train_ngram(&["ab"], &vocab(), 2, 0.5).unwrap();
        assert!(lm.logprob(&[0]).is_err());
        assert!(lm.text_logprob("az").is_err());
    }

    #[test]
    fn order_independent_training() {
        let a = train_ngram(&["ab|c", "dca", "b"], &vocab(), 3, 0.1).unwrap();
        let b = train_ngram(&["b", "ab|c", "dca"], &vocab(), 3, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn text_round_trip() {
        let voc = vocab();
        let lm = train_ngram(&["ab|c", "dca", "b|bb"], &voc, 3, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.txt");
        lm.save(&path).unwrap();
        let back = NgramLM::load(&path, &voc).unwrap();
        assert_eq!(back, lm);
        for probe in ["", "a", "abcd|", "ddd|a"] {
            let (x, y) = (lm.text_logprob(probe).unwrap(), back.text_logprob(probe).unwrap());
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_order_header_is_format_error() {
        let voc = vocab();
        let lm = train_ngram(&["abc"], &voc, 3, 0.25).unwrap();
        let text = lm.to_text().replace("order 3", "order 2");
        assert!(matches!(
            NgramLM::from_text(&text, &voc, Path::new("lm.txt")),
            Err(CastleError::Format { .. })
        ));
        let original = lm.to_text();
        let mut lines: Vec<&str> = original.lines().collect();
        lines.swap(1, 2);
        let swapped = lines.join("\n");
        assert!(matches!(
            NgramLM::from_text(&swapped, &voc, Path::new("lm.txt")),
            Err(CastleError::Format { .. })
        ));
    }

    #[test]
    fn cross_vocab_load_is_validation_error() {
        let lm = train_ngram(&["abc"], &vocab(), 3, 0.25).unwrap();
        let other = Vocab::desk(5);
        assert!(matches!(
            NgramLM::from_text(&lm.to_text(), &other, Path::new("lm.txt")),
            Err(CastleError::Validation(_))
        ));
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        "[abcd|]{0,10}"
    }

    proptest! {
        #[test]
        fn distributions_normalize(texts in prop::collection::vec(text_strategy(), 1..8), order in 1usize..5, k in 0.01f64..2.0) {
            let voc = vocab();
            let lm = train_ngram(&texts, &voc, order, k).unwrap();
            for h in lm.observed_histories() {
                // histories are begin-padded symbol lists; strip leading begins for the prefix
                let prefix: Vec<usize> = h.iter().copied().skip_while(|&x| x == BEGIN).collect();
                let total: f64 = lm.next_logprobs(&prefix).iter().map(|l| l.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
            for t in &texts {
                prop_assert!(lm.text_logprob(t).unwrap() <= 0.0);
            }
        }

        #[test]
        fn additive_over_split(texts in prop::collection::vec(text_strategy(), 1..6), probe in "[abcd|]{1,12}", cut in 0usize..12) {
            let voc = vocab();
            let lm = train_ngram(&texts, &voc, 3, 0.5).unwrap();
            let seq = voc.encode(&probe).unwrap();
            let cut = cut % (seq.len() + 1);
            let left: f64 = (0..cut).map(|t| lm.symbol_logprob(&seq[..t], seq[t])).sum();
            let right: f64 = (cut..seq.len()).map(|t| lm.symbol_logprob(&seq[..t], seq[t])).sum::<f64>() + lm.end_logprob(&seq);
            prop_assert!((left + right - lm.logprob(&seq).unwrap()).abs() < 1e-9);
        }
    }
}
