//! Output-language identification.

use std::collections::HashMap;

use crate::corpus::{Corpus, Split};
use crate::error::Result;
use crate::lang::{LangId, ENGLISH};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Detection {
    Language { lang: LangId, confidence: f64 },
    Undetermined,
}

impl Detection {
    pub fn lang(&self) -> Option<LangId> {
        match self {
            Detection::Language { lang, .. } => Some(*lang),
            Detection::Undetermined => None,
        }
    }
}

pub trait LanguageDetector {
    fn detect(&self, sentence: &str) -> Detection;
}

/// Majority vote over tokens with a known language. Confidence is the
/// winner's share of all tokens; ties go to the lower language id.
#[derive(Clone, Debug, Default)]
pub struct VocabDetector {
    table: HashMap<String, LangId>,
}

impl VocabDetector {
    pub fn new(table: HashMap<String, LangId>) -> Self {
        Self { table }
    }
}

impl LanguageDetector for VocabDetector {
    fn detect(&self, sentence: &str) -> Detection {
        let mut votes: HashMap<LangId, usize> = HashMap::new();
        let mut total = 0;
        for tok in sentence.split_whitespace() {
            total += 1;
            if let Some(&l) = self.table.get(tok) {
                *votes.entry(l).or_default() += 1;
            }
        }
        let best = votes
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((lang, n)) => Detection::Language {
                lang,
                confidence: n as f64 / total as f64,
            },
            None => Detection::Undetermined,
        }
    }
}

/// Naive Bayes over character 1- to 3-grams of space-padded words, with
/// add-one smoothing. Confidence is the winner's posterior probability under
/// a uniform prior.
#[derive(Clone, Debug)]
pub struct NgramDetector {
    langs: Vec<LangId>,
    counts: Vec<HashMap<String, f64>>,
    totals: Vec<f64>,
    vocab_size: f64,
}

fn char_ngrams(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in sentence.split_whitespace() {
        let padded: Vec<char> = format!(" {} ", word.to_lowercase()).chars().collect();
        for n in 1..=3 {
            for w in padded.windows(n) {
                let g: String = w.iter().collect();
                if g.trim().is_empty() {
                    continue;
                }
                out.push(g);
            }
        }
    }
    out
}

impl NgramDetector {
    /// Trains one profile per language from its example sentences.
    pub fn train<'a>(examples: impl IntoIterator<Item = (LangId, &'a str)>) -> Self {
        let mut langs: Vec<LangId> = Vec::new();
        let mut counts: Vec<HashMap<String, f64>> = Vec::new();
        let mut seen: HashMap<String, ()> = HashMap::new();
        for (lang, s) in examples {
            let i = match langs.iter().position(|&l| l == lang) {
                Some(i) => i,
                None => {
                    langs.push(lang);
                    counts.push(HashMap::new());
                    langs.len() - 1
                }
            };
            for g in char_ngrams(s) {
                seen.insert(g.clone(), ());
                *counts[i].entry(g).or_default() += 1.0;
            }
        }
        let totals = counts.iter().map(|c| c.values().sum()).collect();
        Self {
            langs,
            counts,
            totals,
            vocab_size: seen.len().max(1) as f64,
        }
    }
}

impl LanguageDetector for NgramDetector {
    fn detect(&self, sentence: &str) -> Detection {
        let grams = char_ngrams(sentence);
        if grams.is_empty() || self.langs.is_empty() {
            return Detection::Undetermined;
        }
        let scores: Vec<f64> = (0..self.langs.len())
            .map(|i| {
                let denom = self.totals[i] + self.vocab_size;
                grams
                    .iter()
                    .map(|g| ((self.counts[i].get(g).copied().unwrap_or(0.0) + 1.0) / denom).ln())
                    .sum()
            })
            .collect();
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] || (scores[i] == scores[best] && self.langs[i] < self.langs[best]) {
                best = i;
            }
        }
        let z: f64 = scores.iter().map(|s| (s - scores[best]).exp()).sum();
        Detection::Language {
            lang: self.langs[best],
            confidence: 1.0 / z,
        }
    }
}

/// Every sentence of `corpus` with its language.
fn labelled(corpus: &Corpus) -> Result<Vec<(LangId, &str)>> {
    let langs = corpus.languages()?;
    let en = langs.id(ENGLISH)?;
    let mut out = Vec::new();
    for p in &corpus.pairs {
        let x = langs.id(&p.foreign)?;
        for split in Split::ALL {
            let b = p.split(split);
            out.extend(b.english.iter().map(|s| (en, s.as_str())));
            out.extend(b.foreign.iter().map(|s| (x, s.as_str())));
        }
    }
    for m in corpus.zero_shot_dev.iter().chain(&corpus.zero_shot) {
        for (code, lines) in m.languages.iter().zip(&m.lines) {
            let l = langs.id(code)?;
            out.extend(lines.iter().map(|s| (l, s.as_str())));
        }
    }
    Ok(out)
}

/// Detector for the languages of `corpus`: the vocabulary vote when no
/// token occurs in two languages, otherwise a character n-gram profile of
/// the corpus's own sentences.
pub fn corpus_detector(corpus: &Corpus) -> Result<Box<dyn LanguageDetector>> {
    let examples = labelled(corpus)?;
    let mut table: HashMap<String, LangId> = HashMap::new();
    let mut disjoint = true;
    'outer: for &(lang, s) in &examples {
        for tok in s.split_whitespace() {
            if *table.entry(tok.to_string()).or_insert(lang) != lang {
                disjoint = false;
                break 'outer;
            }
        }
    }
    Ok(if disjoint {
        Box::new(VocabDetector::new(table))
    } else {
        Box::new(NgramDetector::train(examples))
    })
}
