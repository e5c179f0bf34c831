use std::collections::HashMap;

use super::EvalError;

/// SQuAD-style answer normalisation: lowercase, drop punctuation, drop the
/// articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{00a1}' | '\u{00bf}' | '\u{00ab}' | '\u{00bb}' | '\u{00b7}')
}

/// 1 when the normalised prediction equals any normalised reference.
pub fn exact_match<S: AsRef<str>>(prediction: &str, references: &[S]) -> Result<u8, EvalError> {
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let p = normalize_answer(prediction);
    Ok(u8::from(references.iter().any(|r| normalize_answer(r.as_ref()) == p)))
}

/// Whitespace tokens, as used for BLEU over generated code.
pub fn bleu_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Clipped n-gram statistics of one prediction against its references.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub pred_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn compute<S: AsRef<str>, T: AsRef<str>>(prediction: &[S], references: &[Vec<T>], max_n: usize) -> Result<Self, EvalError> {
        if max_n == 0 {
            return Err(EvalError::Config("BLEU max_n must be >= 1".into()));
        }
        if references.is_empty() {
            return Err(EvalError::NoReferences);
        }
        let pred: Vec<&str> = prediction.iter().map(AsRef::as_ref).collect();
        let refs: Vec<Vec<&str>> = references.iter().map(|r| r.iter().map(AsRef::as_ref).collect()).collect();
        let mut stats = Self { pred_len: pred.len(), ref_len: closest_ref_len(pred.len(), &refs), ..Self::default() };
        for n in 1..=max_n {
            let counts = ngrams(&pred, n);
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            let matched = counts.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
            stats.matches.push(matched);
            stats.totals.push((pred.len() + 1).saturating_sub(n));
        }
        Ok(stats)
    }

    fn add(&mut self, other: &Self) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.pred_len += other.pred_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of the precisions times the brevity penalty. When any
    /// order above one has no match, orders >= 2 get add-one smoothing.
    pub fn score(&self) -> f64 {
        if self.pred_len == 0 || self.matches.first().copied().unwrap_or(0) == 0 {
            return 0.0;
        }
        let max_n = self.matches.len();
        let smooth = self.matches[1..].iter().any(|&m| m == 0);
        let mut log_sum = 0.0;
        for i in 0..max_n {
            let (mut num, mut den) = (self.matches[i] as f64, self.totals[i] as f64);
            if i >= 1 && smooth {
                num += 1.0;
                den += 1.0;
            }
            log_sum += (num / den).ln() / max_n as f64;
        }
        let bp = if self.pred_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.pred_len as f64).exp()
        };
        bp * log_sum.exp()
    }
}

fn ngrams<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Reference length closest to the prediction's; ties go to the shorter.
fn closest_ref_len(pred_len: usize, refs: &[Vec<&str>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(pred_len), l))
        .unwrap_or(0)
}

/// Sentence BLEU in [0, 1]. An empty prediction scores 0.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(prediction: &[S], references: &[Vec<T>], max_n: usize) -> Result<f64, EvalError> {
    if prediction.is_empty() {
        log::warn!("empty prediction scores BLEU 0");
    }
    Ok(BleuStats::compute(prediction, references, max_n)?.score())
}

/// Corpus BLEU: n-gram counts and lengths summed over all pairs first.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> Result<f64, EvalError> {
    let mut total = BleuStats::default();
    for (pred, refs) in pairs {
        total.add(&BleuStats::compute(pred, refs, max_n)?);
    }
    Ok(total.score())
}
