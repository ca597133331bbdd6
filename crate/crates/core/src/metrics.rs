//! Edit distance and corpus-level error rates.

use serde::{Deserialize, Serialize};

use crate::error::{CastleError, Result};

/// Substitution/insertion/deletion counts accumulated over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_length: usize,
    pub rate: f64,
}

impl ErrorBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn finish(mut self) -> Self {
        self.rate = self.errors() as f64 / self.ref_length.max(1) as f64;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Char,
    Word,
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            let cost = if x == y { diag } else { diag + 1 };
            row[j + 1] = cost.min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// Minimal-cost alignment split into (S, I, D) where insertions are symbols
/// present in `hyp` but not in `reference`.
pub fn align_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorBreakdown {
    let (n, m) = (reference.len(), hyp.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[idx(i - 1, j - 1)] + usize::from(reference[i - 1] != hyp[j - 1]);
            dp[idx(i, j)] = sub.min(dp[idx(i - 1, j)] + 1).min(dp[idx(i, j - 1)] + 1);
        }
    }
    let mut out = ErrorBreakdown {
        ref_length: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if dp[idx(i, j)] == dp[idx(i - 1, j - 1)] + usize::from(!same) {
                if !same {
                    out.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[idx(i, j)] == dp[idx(i - 1, j)] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out.finish()
}

fn tokens(s: &str, unit: Unit, separator: char) -> Vec<&str> {
    match unit {
        Unit::Char => s
            .char_indices()
            .map(|(i, c)| &s[i..i + c.len_utf8()])
            .collect(),
        Unit::Word => s.split(separator).filter(|w| !w.is_empty()).collect(),
    }
}

/// Corpus-level error rate: total edits over total reference length.
pub fn error_rate<R, H>(refs: &[R], hyps: &[H], unit: Unit, separator: char) -> Result<ErrorBreakdown>
where
    R: AsRef<str>,
    H: AsRef<str>,
{
    if refs.len() != hyps.len() {
        return Err(CastleError::Validation(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = ErrorBreakdown::default();
    for (r, h) in refs.iter().zip(hyps) {
        let rt = tokens(r.as_ref(), unit, separator);
        let ht = tokens(h.as_ref(), unit, separator);
        let b = align_counts(&rt, &ht);
        total.substitutions += b.substitutions;
        total.insertions += b.insertions;
        total.deletions += b.deletions;
        total.ref_length += b.ref_length;
    }
    Ok(total.finish())
}

/// Plain-text alignment: reference and hypothesis rows with `*` for gaps and
/// a marker row (`S`, `I`, `D` or space).
pub fn alignment_diff(reference: &str, hyp: &str) -> String {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hyp.chars().collect();
    let (n, m) = (r.len(), h.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[idx(i - 1, j - 1)] + usize::from(r[i - 1] != h[j - 1]);
            dp[idx(i, j)] = sub.min(dp[idx(i - 1, j)] + 1).min(dp[idx(i, j - 1)] + 1);
        }
    }
    let (mut top, mut bottom, mut marks) = (Vec::new(), Vec::new(), Vec::new());
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && dp[idx(i, j)] == dp[idx(i - 1, j - 1)] + usize::from(r[i - 1] != h[j - 1]) {
            top.push(r[i - 1]);
            bottom.push(h[j - 1]);
            marks.push(if r[i - 1] == h[j - 1] { ' ' } else { 'S' });
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[idx(i, j)] == dp[idx(i - 1, j)] + 1 {
            top.push(r[i - 1]);
            bottom.push('*');
            marks.push('D');
            i -= 1;
        } else {
            top.push('*');
            bottom.push(h[j - 1]);
            marks.push('I');
            j -= 1;
        }
    }
    let rev = |v: Vec<char>| v.into_iter().rev().collect::<String>();
    format!("REF: {}\nHYP: {}\n     {}\n", rev(top), rev(bottom), rev(marks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exponential-time recursive oracle for tiny inputs.
    fn naive(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    #[test]
    fn named_cases() {
        assert_eq!(edit_distance(b"abc", b"abc"), 0);
        assert_eq!(edit_distance(b"", b"abc"), 3);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(naive(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn word_rate_one_substitution() {
        let b = error_rate(&["a b"], &["a x"], Unit::Word, ' ').unwrap();
        assert_eq!(b.substitutions, 1);
        assert_eq!(b.ref_length, 2);
        assert!((b.rate - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rate_edge_cases() {
        let same = error_rate(&["ab|c", "d"], &["ab|c", "d"], Unit::Char, '|').unwrap();
        assert_eq!(same.rate, 0.0);
        let del = error_rate(&["abcd"], &[""], Unit::Char, '|').unwrap();
        assert_eq!(del.deletions, 4);
        assert_eq!(del.rate, 1.0);
        assert!(error_rate(&["a"], &["a", "b"], Unit::Char, '|').is_err());
    }

    #[test]
    fn diff_marks_edits() {
        let d = alignment_diff("abc", "axc");
        assert!(d.contains("REF: abc"));
        assert!(d.contains(" S "));
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(a in prop::collection::vec(0u8..3, 0..6), b in prop::collection::vec(0u8..3, 0..6)) {
            prop_assert_eq!(edit_distance(&a, &b), naive(&a, &b));
            prop_assert_eq!(align_counts(&a, &b).errors(), naive(&a, &b));
        }

        #[test]
        fn metric_axioms(a in prop::collection::vec(0u8..4, 0..12), b in prop::collection::vec(0u8..4, 0..12), c in prop::collection::vec(0u8..4, 0..12)) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn rate_is_permutation_invariant(pairs in prop::collection::vec(("[ab|]{0,6}", "[ab|]{0,6}"), 1..6), rot in 0usize..6) {
            let refs: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
            let hyps: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
            let k = rot % refs.len();
            let mut r2 = refs.clone();
            let mut h2 = hyps.clone();
            r2.rotate_left(k);
            h2.rotate_left(k);
            for unit in [Unit::Char, Unit::Word] {
                prop_assert_eq!(error_rate(&refs, &hyps, unit, '|').unwrap(), error_rate(&r2, &h2, unit, '|').unwrap());
            }
        }
    }
}
