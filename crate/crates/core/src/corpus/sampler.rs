//! English-centric sampling of train/valid/test splits with a cross-pair
//! overlap filter: a normalized sentence used in any pair's evaluation split
//! never appears in any pair's training split, and valid never shares a
//! sentence with test.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{normalize, Bitext, Corpus, ParallelPair, Split};
use crate::error::{Error, IoContext, Result};
use crate::lang::ENGLISH;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub cap_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Raw aligned lines for English and one other language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub foreign: String,
    pub english: Vec<String>,
    pub foreign_lines: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairStats {
    pub pair: String,
    pub raw_lines: usize,
    pub usable_lines: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Lines rejected because a side was already claimed by another split.
    pub filtered: usize,
    /// Too few lines for evaluation splits; everything went to train.
    pub no_eval: bool,
    pub dropped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SamplerReport {
    pub cap_train: usize,
    pub pairs: Vec<PairStats>,
    pub warnings: Vec<String>,
}

impl SamplerReport {
    /// Pairs whose training split reaches `cap`, `cap/10` and `cap/100`.
    pub fn coverage(&self) -> [usize; 3] {
        let kept = || self.pairs.iter().filter(|p| !p.dropped);
        [1, 10, 100].map(|div| {
            let bar = (self.cap_train / div).max(1);
            kept().filter(|p| p.train >= bar).count()
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            writeln!(
                s,
                "pair={} raw={} usable={} train={} valid={} test={} filtered={} no_eval={} dropped={}",
                p.pair, p.raw_lines, p.usable_lines, p.train, p.valid, p.test, p.filtered, p.no_eval, p.dropped
            )
            .unwrap();
        }
        let [full, tenth, hundredth] = self.coverage();
        writeln!(
            s,
            "coverage cap={} at_cap={full} at_cap/10={tenth} at_cap/100={hundredth}",
            self.cap_train
        )
        .unwrap();
        for w in &self.warnings {
            writeln!(s, "warning {w}").unwrap();
        }
        s
    }
}

/// Reads `<a>-<b>.<lang>` file pairs from `dir`; one side must be English.
pub fn read_raw_pairs(dir: &Path) -> Result<Vec<RawPair>> {
    let mut files: Vec<String> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    files.sort();
    let mut stems: Vec<String> = files
        .iter()
        .filter_map(|f| f.rsplit_once('.').map(|(stem, _)| stem.to_string()))
        .filter(|stem| stem.split('-').count() == 2)
        .collect();
    stems.dedup();
    let mut out = Vec::new();
    for stem in stems {
        let (a, b) = stem.split_once('-').unwrap();
        let foreign = match (a, b) {
            (ENGLISH, f) | (f, ENGLISH) if f != ENGLISH => f.to_string(),
            _ => {
                log::warn!("skipping {stem}: pairs must include English on exactly one side");
                continue;
            }
        };
        let read = |lang: &str| -> Result<Vec<String>> {
            let p = dir.join(format!("{stem}.{lang}"));
            Ok(fs::read_to_string(&p)
                .at(&p)?
                .lines()
                .map(str::to_string)
                .collect())
        };
        let english = read(ENGLISH)?;
        let foreign_lines = read(&foreign)?;
        if english.len() != foreign_lines.len() {
            return Err(Error::Parse {
                what: dir.join(&stem).display().to_string(),
                detail: format!(
                    "{} English lines but {} {foreign} lines",
                    english.len(),
                    foreign_lines.len()
                ),
            });
        }
        out.push(RawPair {
            foreign,
            english,
            foreign_lines,
        });
    }
    out.sort_by(|a, b| a.foreign.cmp(&b.foreign));
    if let Some(w) = out.windows(2).find(|w| w[0].foreign == w[1].foreign) {
        return Err(Error::Config(format!(
            "language `{}` appears in more than one pair",
            w[0].foreign
        )));
    }
    Ok(out)
}

struct Claims(HashMap<String, Split>);

impl Claims {
    fn allows(&self, s: &str, split: Split) -> bool {
        self.0.get(s).is_none_or(|&owner| owner == split)
    }

    fn line_allowed(&self, line: &(String, String), split: Split) -> bool {
        self.allows(&line.0, split) && self.allows(&line.1, split)
    }

    fn claim(&mut self, line: &(String, String), split: Split) {
        self.0.insert(line.0.clone(), split);
        self.0.insert(line.1.clone(), split);
    }
}

/// Samples every pair of `raw`. Pairs are processed in language-code order;
/// evaluation splits of all pairs are chosen before any training split.
pub fn sample_corpus(raw: &[RawPair], cfg: &SamplerConfig) -> Result<(Corpus, SamplerReport)> {
    if cfg.cap_train == 0 {
        return Err(Error::Config("training cap must be positive".into()));
    }
    let mut order: Vec<&RawPair> = raw.iter().collect();
    order.sort_by(|a, b| a.foreign.cmp(&b.foreign));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Normalized, non-empty lines in a seeded random order.
    let mut lines: Vec<Vec<(String, String)>> = Vec::with_capacity(order.len());
    let mut stats: Vec<PairStats> = Vec::with_capacity(order.len());
    for p in &order {
        let mut v: Vec<(String, String)> = p
            .english
            .iter()
            .zip(&p.foreign_lines)
            .map(|(e, f)| (normalize(e), normalize(f)))
            .filter(|(e, f)| !e.is_empty() && !f.is_empty())
            .collect();
        v.shuffle(&mut rng);
        stats.push(PairStats {
            pair: format!("{ENGLISH}-{}", p.foreign),
            raw_lines: p.english.len(),
            usable_lines: v.len(),
            no_eval: v.len() < cfg.n_valid + cfg.n_test,
            ..PairStats::default()
        });
        lines.push(v);
    }

    let mut claims = Claims(HashMap::new());
    let mut splits: Vec<[Bitext; 3]> = (0..order.len()).map(|_| Default::default()).collect();
    let mut taken: Vec<Vec<bool>> = lines.iter().map(|v| vec![false; v.len()]).collect();

    for (i, v) in lines.iter().enumerate() {
        if stats[i].no_eval {
            continue;
        }
        for (slot, split, want) in [(1, Split::Valid, cfg.n_valid), (2, Split::Test, cfg.n_test)] {
            for (j, line) in v.iter().enumerate() {
                if splits[i][slot].len() >= want {
                    break;
                }
                if taken[i][j] {
                    continue;
                }
                if claims.line_allowed(line, split) {
                    claims.claim(line, split);
                    splits[i][slot].push(line.0.clone(), line.1.clone());
                    taken[i][j] = true;
                }
            }
        }
    }
    for (i, v) in lines.iter().enumerate() {
        for (j, line) in v.iter().enumerate() {
            if taken[i][j] {
                continue;
            }
            if !claims.line_allowed(line, Split::Train) {
                stats[i].filtered += 1;
                continue;
            }
            if splits[i][0].len() < cfg.cap_train {
                claims.claim(line, Split::Train);
                splits[i][0].push(line.0.clone(), line.1.clone());
            }
        }
    }

    let mut corpus = Corpus::default();
    let mut report = SamplerReport {
        cap_train: cfg.cap_train,
        ..SamplerReport::default()
    };
    for ((p, [train, valid, test]), mut st) in order.iter().zip(splits).zip(stats) {
        st.train = train.len();
        st.valid = valid.len();
        st.test = test.len();
        if st.no_eval {
            report.warnings.push(format!(
                "{}: only {} usable lines, no valid/test split",
                st.pair, st.usable_lines
            ));
        }
        if train.is_empty() {
            st.dropped = true;
            let w = format!("{}: no training data left after filtering, pair dropped", st.pair);
            log::warn!("{w}");
            report.warnings.push(w);
        } else {
            corpus.pairs.push(ParallelPair {
                foreign: p.foreign.clone(),
                train,
                valid,
                test,
            });
        }
        report.pairs.push(st);
    }
    Ok((corpus, report))
}
