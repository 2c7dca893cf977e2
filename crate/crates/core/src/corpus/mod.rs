//! Parallel data: training instances, English-centric split corpora on disk,
//! the synthetic cipher suite and the overlap-filtering sampler.

use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, IoContext, Result};
use crate::lang::{LangId, LanguageSet, ENGLISH};
use crate::vocab::{Vocabulary, EOS};

pub mod sampler;
pub mod synthetic;

pub use sampler::{sample_corpus, SamplerConfig, SamplerReport};
pub use synthetic::{generate_synthetic_suite, SyntheticConfig, SyntheticSuite};

/// NFC, then runs of whitespace collapsed to one space and trimmed.
pub fn normalize(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One tagged example. `source` carries no tag; the model prepends the tag
/// for `lang` when encoding. `target` ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub lang: LangId,
}

pub fn encode_instance(
    vocab: &Vocabulary,
    src_text: &str,
    tgt_text: &str,
    lang: LangId,
) -> Result<TrainingInstance> {
    vocab.languages().check(lang)?;
    let source = vocab.encode(src_text);
    let mut target = vocab.encode(tgt_text);
    if source.is_empty() {
        return Err(Error::Sequence("empty source sentence".into()));
    }
    if target.is_empty() {
        return Err(Error::Sequence("empty target sentence".into()));
    }
    target.push(EOS);
    Ok(TrainingInstance {
        source,
        target,
        lang,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Aligned sentences with English on one side.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitext {
    pub english: Vec<String>,
    pub foreign: Vec<String>,
}

impl Bitext {
    pub fn len(&self) -> usize {
        self.english.len()
    }

    pub fn is_empty(&self) -> bool {
        self.english.is_empty()
    }

    pub fn push(&mut self, english: String, foreign: String) {
        self.english.push(english);
        self.foreign.push(foreign);
    }
}

/// English paired with one other language, split three ways.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub foreign: String,
    pub train: Bitext,
    pub valid: Bitext,
    pub test: Bitext,
}

impl ParallelPair {
    pub fn name(&self) -> String {
        format!("{ENGLISH}-{}", self.foreign)
    }

    pub fn split(&self, split: Split) -> &Bitext {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Sentences aligned across several non-English languages, used for
/// directions never seen in training.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MultiwayTest {
    pub languages: Vec<String>,
    pub lines: Vec<Vec<String>>,
}

impl MultiwayTest {
    pub fn side(&self, code: &str) -> Option<&[String]> {
        let i = self.languages.iter().position(|c| c == code)?;
        Some(&self.lines[i])
    }
}

const ZERO_SHOT_DIR: &str = "zero-shot";

/// An English-centric corpus as laid out on disk:
/// `en-xx/{train,valid,test}.{en,xx}` plus optional aligned sets
/// `zero-shot/{valid,test}.xx`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<ParallelPair>,
    pub zero_shot: Option<MultiwayTest>,
    /// Development counterpart of `zero_shot`; drives stopping decisions so
    /// the test set never does.
    pub zero_shot_dev: Option<MultiwayTest>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).at(path)?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    if !lines.is_empty() {
        s.push('\n');
    }
    fs::write(path, s).at(path)
}

/// Reads `<split>.xx` files of one aligned set; `None` when there are none.
fn read_multiway(dir: &Path, split: Split) -> Result<Option<MultiwayTest>> {
    let prefix = format!("{}.", split.name());
    let mut langs: Vec<String> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|f| f.strip_prefix(&prefix).map(str::to_string))
        .collect();
    if langs.is_empty() {
        return Ok(None);
    }
    langs.sort();
    let mut z = MultiwayTest::default();
    for code in langs {
        let lines = read_lines(&dir.join(format!("{prefix}{code}")))?;
        if z.lines.first().is_some_and(|first| first.len() != lines.len()) {
            return Err(Error::Parse {
                what: dir.display().to_string(),
                detail: format!("{prefix}{code} is not aligned"),
            });
        }
        z.languages.push(code);
        z.lines.push(lines);
    }
    Ok(Some(z))
}

impl Corpus {
    /// Language set with English first, then pair languages in order.
    pub fn languages(&self) -> Result<LanguageSet> {
        let mut codes = vec![ENGLISH.to_string()];
        codes.extend(self.pairs.iter().map(|p| p.foreign.clone()));
        LanguageSet::new(&codes)
    }

    pub fn pair(&self, foreign: &str) -> Option<&ParallelPair> {
        self.pairs.iter().find(|p| p.foreign == foreign)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for pair in &self.pairs {
            let sub = dir.join(pair.name());
            fs::create_dir_all(&sub).at(&sub)?;
            for split in Split::ALL {
                let b = pair.split(split);
                write_lines(&sub.join(format!("{}.{ENGLISH}", split.name())), &b.english)?;
                write_lines(
                    &sub.join(format!("{}.{}", split.name(), pair.foreign)),
                    &b.foreign,
                )?;
            }
        }
        for (split, set) in [(Split::Valid, &self.zero_shot_dev), (Split::Test, &self.zero_shot)] {
            let Some(z) = set else { continue };
            let sub = dir.join(ZERO_SHOT_DIR);
            fs::create_dir_all(&sub).at(&sub)?;
            for (code, lines) in z.languages.iter().zip(&z.lines) {
                write_lines(&sub.join(format!("{}.{code}", split.name())), lines)?;
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .at(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let mut corpus = Corpus::default();
        let prefix = format!("{ENGLISH}-");
        for name in &names {
            let sub = dir.join(name);
            if name == ZERO_SHOT_DIR {
                corpus.zero_shot_dev = read_multiway(&sub, Split::Valid)?;
                corpus.zero_shot = read_multiway(&sub, Split::Test)?;
                continue;
            }
            let Some(foreign) = name.strip_prefix(&prefix) else {
                log::warn!("skipping {}: not an English-centric pair", sub.display());
                continue;
            };
            let mut pair = ParallelPair {
                foreign: foreign.to_string(),
                train: Bitext::default(),
                valid: Bitext::default(),
                test: Bitext::default(),
            };
            for split in Split::ALL {
                let en = sub.join(format!("{}.{ENGLISH}", split.name()));
                let fx = sub.join(format!("{}.{foreign}", split.name()));
                if !en.exists() && !fx.exists() {
                    continue;
                }
                let b = Bitext {
                    english: read_lines(&en)?,
                    foreign: read_lines(&fx)?,
                };
                if b.english.len() != b.foreign.len() {
                    return Err(Error::Parse {
                        what: sub.display().to_string(),
                        detail: format!(
                            "{} split has {} English and {} {foreign} lines",
                            split.name(),
                            b.english.len(),
                            b.foreign.len()
                        ),
                    });
                }
                match split {
                    Split::Train => pair.train = b,
                    Split::Valid => pair.valid = b,
                    Split::Test => pair.test = b,
                }
            }
            corpus.pairs.push(pair);
        }
        if corpus.pairs.is_empty() {
            return Err(Error::Config(format!(
                "{} contains no en-xx pair directories",
                dir.display()
            )));
        }
        Ok(corpus)
    }

    /// Every sentence of every split and the aligned sets.
    pub fn all_sentences(&self) -> impl Iterator<Item = &str> {
        let pairs = self.pairs.iter().flat_map(|p| {
            Split::ALL.into_iter().flat_map(move |s| {
                let b = p.split(s);
                b.english.iter().chain(&b.foreign).map(String::as_str)
            })
        });
        let zero = self
            .zero_shot_dev
            .iter()
            .chain(&self.zero_shot)
            .flat_map(|z| z.lines.iter().flatten().map(String::as_str));
        pairs.chain(zero)
    }

    /// Both directions of every pair for `split`, encoded with `vocab`.
    /// Lines that encode to nothing on either side are skipped.
    pub fn instances(&self, vocab: &Vocabulary, split: Split) -> Result<Vec<TrainingInstance>> {
        let langs = vocab.languages();
        let en = langs.id(ENGLISH)?;
        let mut out = Vec::new();
        for pair in &self.pairs {
            let x = langs.id(&pair.foreign)?;
            let b = pair.split(split);
            for (e, f) in b.english.iter().zip(&b.foreign) {
                for (src, tgt, lang) in [(e, f, x), (f, e, en)] {
                    match encode_instance(vocab, src, tgt, lang) {
                        Ok(inst) => out.push(inst),
                        Err(Error::Sequence(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(out)
    }
}
