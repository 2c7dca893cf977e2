//! Joint vocabulary with reserved ids, per-language tag tokens and an
//! optional frequency-driven subword merge table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::lang::{LangId, LanguageSet};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

const END_OF_WORD: &str = "</w>";
const FILE_MAGIC: &str = "#polyglot-vocab v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    /// Whitespace-delimited tokens are atomic.
    WholeToken,
    /// Characters merged by the given number of greedy pair merges.
    BpeLite { merges: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    languages: LanguageSet,
    mode: VocabMode,
    merges: Vec<(String, String)>,
}

impl Vocabulary {
    fn assemble(
        languages: LanguageSet,
        mode: VocabMode,
        merges: Vec<(String, String)>,
        body: Vec<String>,
    ) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(languages.ids().map(|l| languages.tag(l)));
        tokens.extend(body);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            index,
            languages,
            mode,
            merges,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &LanguageSet {
        &self.languages
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Number of ids that are not ordinary tokens (specials and tags).
    pub fn reserved_count(&self) -> usize {
        RESERVED.len() + self.languages.len()
    }

    pub fn tag_id(&self, lang: LangId) -> Result<u32> {
        self.languages.check(lang)?;
        Ok((RESERVED.len() + lang.0) as u32)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.reserved_count()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids for `text`. Unknown pieces, and anything spelled like a
    /// special or tag token, map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.mode {
                VocabMode::WholeToken => out.push(self.ordinary_id(word)),
                VocabMode::BpeLite { .. } => {
                    for piece in apply_merges(word, &self.merges) {
                        out.push(self.ordinary_id(&piece));
                    }
                }
            }
        }
        out
    }

    fn ordinary_id(&self, piece: &str) -> u32 {
        match self.index.get(piece) {
            Some(&id) if !self.is_special(id) => id,
            _ => UNK,
        }
    }

    /// Text for `ids`, skipping pad/bos/eos/tag ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        let pieces = ids
            .iter()
            .filter(|&&id| id == UNK || !self.is_special(id))
            .filter_map(|&id| self.token(id));
        match self.mode {
            VocabMode::WholeToken => pieces.collect::<Vec<_>>().join(" "),
            VocabMode::BpeLite { .. } => {
                let mut s = String::new();
                for p in pieces {
                    match p.strip_suffix(END_OF_WORD) {
                        Some(stem) => {
                            s.push_str(stem);
                            s.push(' ');
                        }
                        None => s.push_str(p),
                    }
                }
                s.trim_end().to_string()
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let mode = match self.mode {
            VocabMode::WholeToken => "whole".to_string(),
            VocabMode::BpeLite { merges } => format!("bpe:{merges}"),
        };
        writeln!(s, "{FILE_MAGIC}").unwrap();
        writeln!(s, "mode\t{mode}").unwrap();
        writeln!(s, "languages\t{}", self.languages.codes().join(",")).unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "merge\t{a}\t{b}").unwrap();
        }
        for t in &self.tokens[self.reserved_count()..] {
            writeln!(s, "token\t{t}").unwrap();
        }
        std::fs::write(path, s).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let bad = |detail: String| Error::Parse {
            what: path.display().to_string(),
            detail,
        };
        let mut lines = text.lines();
        if lines.next() != Some(FILE_MAGIC) {
            return Err(bad("missing vocabulary header".into()));
        }
        let (mut mode, mut langs, mut merges, mut body) = (None, None, Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["mode", "whole"] => mode = Some(VocabMode::WholeToken),
                ["mode", m] => {
                    let k = m
                        .strip_prefix("bpe:")
                        .and_then(|k| k.parse().ok())
                        .ok_or_else(|| bad(format!("line {}: bad mode {m}", n + 2)))?;
                    mode = Some(VocabMode::BpeLite { merges: k });
                }
                ["languages", l] => {
                    langs = Some(LanguageSet::new(&l.split(',').collect::<Vec<_>>())?)
                }
                ["merge", a, b] => merges.push((a.to_string(), b.to_string())),
                ["token", t] => body.push(t.to_string()),
                [""] => {}
                _ => return Err(bad(format!("line {}: unrecognized `{line}`", n + 2))),
            }
        }
        let mode = mode.ok_or_else(|| bad("missing mode".into()))?;
        let langs = langs.ok_or_else(|| bad("missing languages".into()))?;
        Ok(Self::assemble(langs, mode, merges, body))
    }
}

/// Builds a joint vocabulary of at most `size` entries over `sentences`.
///
/// Token order is frequency-descending with ties broken by first occurrence,
/// so the result is deterministic in the input order.
pub fn build_vocab<'a, I>(
    sentences: I,
    size: usize,
    mode: VocabMode,
    languages: &LanguageSet,
) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let reserved = RESERVED.len() + languages.len();
    if size <= reserved {
        return Err(Error::Config(format!(
            "vocabulary size {size} must exceed the {reserved} reserved and tag entries"
        )));
    }
    let reserved_names: Vec<String> = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(languages.ids().map(|l| languages.tag(l)))
        .collect();
    let mut words = Counter::default();
    for s in sentences {
        for w in s.split_whitespace() {
            if !reserved_names.iter().any(|r| r == w) {
                words.add(w, 1);
            }
        }
    }
    let capacity = size - reserved;
    let (merges, body) = match mode {
        VocabMode::WholeToken => (Vec::new(), words.ranked()),
        VocabMode::BpeLite { merges } => {
            let (table, symbols) = learn_merges(&words, merges);
            (table, symbols.ranked())
        }
    };
    let body = body.into_iter().take(capacity).collect();
    Ok(Vocabulary::assemble(languages.clone(), mode, merges, body))
}

/// Insertion-ordered frequency counter.
#[derive(Default)]
struct Counter {
    order: Vec<String>,
    counts: HashMap<String, usize>,
}

impl Counter {
    fn add(&mut self, key: &str, n: usize) {
        match self.counts.get_mut(key) {
            Some(c) => *c += n,
            None => {
                self.order.push(key.to_string());
                self.counts.insert(key.to_string(), n);
            }
        }
    }

    fn ranked(&self) -> Vec<String> {
        let mut keyed: Vec<(usize, usize, &String)> = self
            .order
            .iter()
            .enumerate()
            .map(|(i, k)| (self.counts[k], i, k))
            .collect();
        keyed.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, _, k)| k.clone()).collect()
    }
}

fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Greedy pair merges: each round merges the most frequent adjacent pair,
/// ties going to the lexicographically smallest pair.
fn learn_merges(words: &Counter, rounds: usize) -> (Vec<(String, String)>, Counter) {
    let mut segmented: Vec<(Vec<String>, usize)> = words
        .order
        .iter()
        .map(|w| (split_word(w), words.counts[w]))
        .collect();
    let mut merges = Vec::new();
    for _ in 0..rounds {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &segmented {
            for w in syms.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += n;
            }
        }
        let Some(best) = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()))
        else {
            break;
        };
        for (syms, _) in segmented.iter_mut() {
            *syms = merge_pair(syms, &best);
        }
        merges.push(best);
    }
    let mut symbols = Counter::default();
    for (syms, n) in &segmented {
        for s in syms {
            symbols.add(s, *n);
        }
    }
    (merges, symbols)
}

fn merge_pair(syms: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

fn apply_merges(word: &str, merges: &[(String, String)]) -> Vec<String> {
    let mut syms = split_word(word);
    for m in merges {
        if syms.len() < 2 {
            break;
        }
        syms = merge_pair(&syms, m);
    }
    syms
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs() -> LanguageSet {
        LanguageSet::new(&["en", "de"]).unwrap()
    }

    #[test]
    fn small_corpus_keeps_everything() {
        let v = build_vocab(["x y", "z x"], 10, VocabMode::WholeToken, &langs()).unwrap();
        assert_eq!(v.len(), 4 + 2 + 3);
        assert_eq!(v.token(6), Some("x"));
        assert_eq!(v.tag_id(LangId(0)).unwrap(), 4);
        assert_eq!(v.token(4), Some("<2EN>"));
        assert_eq!(v.encode("y q"), vec![v.id("y").unwrap(), UNK]);
    }

    #[test]
    fn size_must_exceed_reserved() {
        let err = build_vocab(["a"], 6, VocabMode::WholeToken, &langs()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tags_in_text_are_not_tags() {
        let v = build_vocab(["a <2EN> b"], 20, VocabMode::WholeToken, &langs()).unwrap();
        assert_eq!(v.encode("<2EN> a"), vec![UNK, v.id("a").unwrap()]);
        assert!(v.tokens()[v.reserved_count()..].iter().all(|t| t != "<2EN>"));
    }

    #[test]
    fn bpe_merge_trace() {
        // "aaab aab": (a,a) occurs 3 times, (a,b</w>) twice -> merge aa first.
        // Then (aa,a), (a,b</w>), (aa,b</w>) all occur once; the smallest pair
        // lexicographically is (a, b</w>).
        let v = build_vocab(
            ["aaab aab"],
            30,
            VocabMode::BpeLite { merges: 2 },
            &langs(),
        )
        .unwrap();
        assert_eq!(
            v.merges(),
            &[
                ("a".to_string(), "a".to_string()),
                ("a".to_string(), "b</w>".to_string())
            ]
        );
        let ids = v.encode("aaab aab");
        assert_eq!(v.decode(&ids), "aaab aab");
        let pieces: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["aa", "ab</w>", "aa", "b</w>"]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        for mode in [VocabMode::WholeToken, VocabMode::BpeLite { merges: 3 }] {
            let v = build_vocab(["hello world", "hello there"], 40, mode, &langs()).unwrap();
            v.save(&p).unwrap();
            let back = Vocabulary::load(&p).unwrap();
            assert_eq!(back, v);
            assert_eq!(back.decode(&back.encode("hello world")), "hello world");
        }
    }
}
