//! Synthetic multilingual task: every language renders a shared sequence of
//! concept ids through its own bijective token cipher, optionally swapping
//! adjacent tokens. English renders concepts in order with the identity
//! cipher. Surface vocabularies are disjoint because each token carries its
//! language code as a prefix.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bitext, Corpus, MultiwayTest, ParallelPair};
use crate::error::{Error, Result};
use crate::lang::{LangId, LanguageSet, ENGLISH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Total number of languages including English.
    pub languages: usize,
    pub concepts: usize,
    pub train_per_pair: usize,
    pub valid_per_pair: usize,
    pub test_per_pair: usize,
    pub zero_shot_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Every second non-English language swaps adjacent tokens.
    pub reorder: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            languages: 6,
            concepts: 80,
            train_per_pair: 5000,
            valid_per_pair: 200,
            test_per_pair: 200,
            zero_shot_test: 200,
            min_len: 4,
            max_len: 12,
            reorder: true,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSuite {
    languages: LanguageSet,
    concepts: usize,
    /// `ciphers[l][c]` is the surface index of concept `c` in language `l`.
    ciphers: Vec<Vec<usize>>,
    inverse: Vec<Vec<usize>>,
    swaps: Vec<bool>,
    corpus: Corpus,
}

/// Non-English codes `xa`, `xb`, ...
fn code_for(i: usize) -> String {
    let a = (b'a' + (i / 26) as u8) as char;
    let b = (b'a' + (i % 26) as u8) as char;
    if i < 26 {
        format!("x{b}")
    } else {
        format!("x{a}{b}")
    }
}

fn swap_adjacent<T: Clone>(xs: &[T]) -> Vec<T> {
    let mut out = xs.to_vec();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

pub fn generate_synthetic_suite(cfg: &SyntheticConfig) -> Result<SyntheticSuite> {
    if cfg.languages < 3 {
        return Err(Error::Config(format!(
            "synthetic suite needs at least 3 languages, got {}",
            cfg.languages
        )));
    }
    if cfg.concepts == 0 || cfg.concepts > 1000 {
        return Err(Error::Config("concept count must be in 1..=1000".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!(
            "bad sentence length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    let mut codes = vec![ENGLISH.to_string()];
    codes.extend((0..cfg.languages - 1).map(code_for));
    let languages = LanguageSet::new(&codes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ciphers = vec![(0..cfg.concepts).collect::<Vec<_>>()];
    let mut swaps = vec![false];
    for i in 1..cfg.languages {
        let mut perm: Vec<usize> = (0..cfg.concepts).collect();
        perm.shuffle(&mut rng);
        ciphers.push(perm);
        swaps.push(cfg.reorder && i % 2 == 0);
    }
    let inverse = ciphers
        .iter()
        .map(|p| {
            let mut inv = vec![0; p.len()];
            for (c, &s) in p.iter().enumerate() {
                inv[s] = c;
            }
            inv
        })
        .collect();
    let mut suite = SyntheticSuite {
        languages,
        concepts: cfg.concepts,
        ciphers,
        inverse,
        swaps,
        corpus: Corpus::default(),
    };

    let needed = (cfg.languages - 1)
        * (cfg.train_per_pair + cfg.valid_per_pair + cfg.test_per_pair)
        + cfg.zero_shot_test;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(needed);
    let mut fresh = |rng: &mut ChaCha8Rng, n: usize| -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * needed + 1000 {
                return Err(Error::Config(
                    "concept space too small for the requested number of distinct sentences"
                        .into(),
                ));
            }
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.concepts)).collect();
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        Ok(out)
    };

    let en = LangId(0);
    let mut valid_concepts = Vec::with_capacity(cfg.languages - 1);
    for l in 1..cfg.languages {
        let lang = LangId(l);
        let train = fresh(&mut rng, cfg.train_per_pair)?;
        let valid = fresh(&mut rng, cfg.valid_per_pair)?;
        let test = fresh(&mut rng, cfg.test_per_pair)?;
        let bitext = |sentences: &[Vec<usize>]| {
            let mut b = Bitext::default();
            for s in sentences {
                b.push(suite.render(en, s), suite.render(lang, s));
            }
            b
        };
        let pair = ParallelPair {
            foreign: suite.languages.code(lang).to_string(),
            train: bitext(&train),
            valid: bitext(&valid),
            test: bitext(&test),
        };
        suite.corpus.pairs.push(pair);
        valid_concepts.push(valid);
    }
    // The development set aligns every pair's validation sentences across all
    // non-English languages, interleaved so any prefix mixes source pairs.
    let dev: Vec<Vec<usize>> = (0..cfg.valid_per_pair)
        .flat_map(|j| valid_concepts.iter().map(move |v| v[j].clone()))
        .collect();
    let zero = fresh(&mut rng, cfg.zero_shot_test)?;
    suite.corpus.zero_shot_dev = Some(suite.multiway(&dev));
    suite.corpus.zero_shot = Some(suite.multiway(&zero));
    Ok(suite)
}

impl SyntheticSuite {
    fn multiway(&self, sentences: &[Vec<usize>]) -> MultiwayTest {
        let mut m = MultiwayTest::default();
        for l in self.languages.ids().filter(|l| l.0 != 0) {
            m.languages.push(self.languages.code(l).to_string());
            m.lines.push(sentences.iter().map(|s| self.render(l, s)).collect());
        }
        m
    }

    pub fn languages(&self) -> &LanguageSet {
        &self.languages
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn into_corpus(self) -> Corpus {
        self.corpus
    }

    pub fn concept_count(&self) -> usize {
        self.concepts
    }

    pub fn reorders(&self, lang: LangId) -> bool {
        self.swaps[lang.0]
    }

    /// Surface form of a concept sequence in `lang`.
    pub fn render(&self, lang: LangId, concepts: &[usize]) -> String {
        let code = self.languages.code(lang);
        let ordered = if self.swaps[lang.0] {
            swap_adjacent(concepts)
        } else {
            concepts.to_vec()
        };
        ordered
            .iter()
            .map(|&c| format!("{code}{:03}", self.ciphers[lang.0][c]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`render`](Self::render).
    pub fn concepts_of(&self, lang: LangId, text: &str) -> Result<Vec<usize>> {
        let code = self.languages.code(lang);
        let mut out = Vec::new();
        for tok in text.split_whitespace() {
            let idx = tok
                .strip_prefix(code)
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n < self.concepts)
                .ok_or_else(|| Error::Sequence(format!("`{tok}` is not a {code} token")))?;
            out.push(self.inverse[lang.0][idx]);
        }
        Ok(if self.swaps[lang.0] {
            swap_adjacent(&out)
        } else {
            out
        })
    }

    /// Exact reference translation by cipher composition.
    pub fn translate(&self, text: &str, src: LangId, tgt: LangId) -> Result<String> {
        Ok(self.render(tgt, &self.concepts_of(src, text)?))
    }

    /// Which language's surface vocabulary a token belongs to.
    pub fn token_language(&self, token: &str) -> Option<LangId> {
        self.languages.ids().find(|&l| {
            token
                .strip_prefix(self.languages.code(l))
                .filter(|n| n.len() == 3 && n.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|n| n.parse::<usize>().ok())
                .is_some_and(|n| n < self.concepts)
        })
    }

    /// Token → language table covering every surface token.
    pub fn token_table(&self) -> HashMap<String, LangId> {
        let mut out = HashMap::new();
        for l in self.languages.ids() {
            let code = self.languages.code(l);
            for i in 0..self.concepts {
                out.insert(format!("{code}{i:03}"), l);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            languages: 4,
            concepts: 20,
            train_per_pair: 50,
            valid_per_pair: 5,
            test_per_pair: 5,
            zero_shot_test: 10,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn codes() {
        assert_eq!(code_for(0), "xa");
        assert_eq!(code_for(4), "xe");
    }

    #[test]
    fn swap_is_involution() {
        let v = vec![1, 2, 3, 4, 5];
        assert_eq!(swap_adjacent(&v), vec![2, 1, 4, 3, 5]);
        assert_eq!(swap_adjacent(&swap_adjacent(&v)), v);
    }

    #[test]
    fn deterministic_and_sized() {
        let a = generate_synthetic_suite(&small()).unwrap();
        let b = generate_synthetic_suite(&small()).unwrap();
        assert_eq!(a.corpus(), b.corpus());
        assert_eq!(a.corpus().pairs.len(), 3);
        assert_eq!(a.corpus().pairs[0].train.len(), 50);
        assert!(a.reorders(LangId(2)) && !a.reorders(LangId(1)));
    }

    #[test]
    fn rejects_too_few_languages() {
        let cfg = SyntheticConfig {
            languages: 2,
            ..small()
        };
        assert!(matches!(generate_synthetic_suite(&cfg), Err(Error::Config(_))));
    }
}
