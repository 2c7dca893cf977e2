//! Corpus BLEU with exponential smoothing, single reference.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    /// Split on whitespace only.
    Whitespace,
    /// Punctuation split in the style of the common `13a` rule.
    Mteval13a,
}

impl Tokenizer {
    pub fn tokenize(self, s: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => s.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Mteval13a => tokenize_13a(s),
        }
    }
}

fn splits_always(c: char) -> bool {
    matches!(c, '{'..='~' | '['..='`' | '!'..='&' | '('..='+' | ':'..='@' | '/')
}

fn tokenize_13a(s: &str) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut spaced = String::with_capacity(s.len() * 2);
    for (i, &c) in chars.iter().enumerate() {
        let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
        let next_digit = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        let split = splits_always(c)
            || (matches!(c, '.' | ',') && !(prev_digit && next_digit))
            || (c == '-' && prev_digit);
        if split {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

impl BleuStats {
    pub fn add(&mut self, hyp: &[String], reference: &[String]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    /// BLEU in `[0, 100]`. A zero match count at order `n` uses precision
    /// `100 / (2^k · total)` for its `k`-th occurrence. Orders for which the
    /// hypotheses contain no n-grams at all are left out of the mean.
    pub fn score(&self) -> f64 {
        let order = self.totals.iter().take_while(|&&t| t > 0).count();
        if order == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut smooth = 1.0;
        for n in 0..order {
            let p = if self.matches[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.totals[n] as f64)
            } else {
                100.0 * self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        (bp * (log_sum / order as f64).exp()).min(100.0)
    }
}

/// Corpus BLEU over pre-tokenized sentences.
pub fn bleu_tokens(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Eval(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Eval("empty corpus".into()));
    }
    let mut st = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        st.add(h, r);
    }
    Ok(st.score())
}

pub fn bleu_corpus<S: AsRef<str>, R: AsRef<str>>(
    hyps: &[S],
    refs: &[R],
    tokenizer: Tokenizer,
) -> Result<f64> {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenizer.tokenize(s.as_ref())).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| tokenizer.tokenize(s.as_ref())).collect();
    bleu_tokens(&h, &r)
}
