//! Evaluation over direction sets and the end-to-end synthetic experiment:
//! pretraining a many-to-many model, then finetuning it with random online
//! backtranslation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{generate_synthetic_suite, Corpus, MultiwayTest, Split, SyntheticConfig, SyntheticSuite};
use crate::decode::{pivot_translate, translate_beam, translate_greedy_chunked, BeamConfig, LengthCap};
use crate::error::{Error, Result};
use crate::eval::{bleu_corpus, language_accuracy, CurvePoint, DirectionResult, EvalReport, LanguageDetector, Tokenizer, VocabDetector};
use crate::lang::{LangId, ENGLISH};
use crate::model::{Model, ModelConfig};
use crate::robt::{robt_finetune, RobtConfig};
use crate::trainer::{TrainConfig, Trainer};
use crate::vocab::{build_vocab, VocabMode, Vocabulary};

/// Source sentences and references for one translation direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSet {
    pub src: String,
    pub tgt: String,
    pub zero_shot: bool,
    pub sources: Vec<String>,
    pub references: Vec<String>,
}

/// `en→xx` and `xx→en` for every pair, at most `limit` sentences each.
pub fn supervised_sets(corpus: &Corpus, split: Split, limit: usize) -> Vec<EvalSet> {
    let mut out = Vec::new();
    for p in &corpus.pairs {
        let b = p.split(split);
        let n = b.len().min(limit);
        out.push(EvalSet {
            src: ENGLISH.into(),
            tgt: p.foreign.clone(),
            zero_shot: false,
            sources: b.english[..n].to_vec(),
            references: b.foreign[..n].to_vec(),
        });
        out.push(EvalSet {
            src: p.foreign.clone(),
            tgt: ENGLISH.into(),
            zero_shot: false,
            sources: b.foreign[..n].to_vec(),
            references: b.english[..n].to_vec(),
        });
    }
    out
}

/// Every ordered pair of distinct languages in a multiway test set.
pub fn zero_shot_sets(test: &MultiwayTest, limit: usize) -> Vec<EvalSet> {
    let mut out = Vec::new();
    for (i, a) in test.languages.iter().enumerate() {
        for (j, b) in test.languages.iter().enumerate() {
            if i == j {
                continue;
            }
            let n = test.lines[i].len().min(test.lines[j].len()).min(limit);
            out.push(EvalSet {
                src: a.clone(),
                tgt: b.clone(),
                zero_shot: true,
                sources: test.lines[i][..n].to_vec(),
                references: test.lines[j][..n].to_vec(),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy { cap: LengthCap },
    Beam(BeamConfig),
}

/// Whether non-English directions translate directly or through English.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Direct,
    Pivot,
}

pub struct Evaluator<'a> {
    pub vocab: &'a Vocabulary,
    pub detector: &'a dyn LanguageDetector,
    pub mode: DecodeMode,
    pub tokenizer: Tokenizer,
    /// Sentences per greedy decoding batch.
    pub batch: usize,
}

impl Evaluator<'_> {
    fn decode(&self, model: &Model<f32>, sources: &[Vec<u32>], lang: LangId) -> Result<Vec<Vec<u32>>> {
        match self.mode {
            DecodeMode::Greedy { cap } => {
                let inputs: Vec<(&[u32], LangId)> = sources.iter().map(|s| (s.as_slice(), lang)).collect();
                translate_greedy_chunked(model, &inputs, cap, self.batch)
            }
            DecodeMode::Beam(cfg) => sources.iter().map(|s| translate_beam(model, s, lang, &cfg)).collect(),
        }
    }

    /// Translations of `sources` from `src` into `tgt`.
    pub fn translate(&self, model: &Model<f32>, sources: &[String], src: &str, tgt: &str, route: Route) -> Result<Vec<String>> {
        let langs = self.vocab.languages();
        let src_id = langs.id(src)?;
        let tgt_id = langs.id(tgt)?;
        let english = langs.id(ENGLISH)?;
        let ids: Vec<Vec<u32>> = sources.iter().map(|s| self.vocab.encode(s)).collect();
        let pivot = route == Route::Pivot && src_id != english && tgt_id != english;
        let out = match (pivot, self.mode) {
            (false, _) => self.decode(model, &ids, tgt_id)?,
            (true, DecodeMode::Greedy { .. }) => {
                let mid = self.decode(model, &ids, english)?;
                self.decode(model, &mid, tgt_id)?
            }
            (true, DecodeMode::Beam(cfg)) => ids
                .iter()
                .map(|x| pivot_translate(model, model, x, src_id, tgt_id, english, &cfg))
                .collect::<Result<_>>()?,
        };
        Ok(out.iter().map(|y| self.vocab.decode(y)).collect())
    }

    pub fn evaluate_set(&self, model: &Model<f32>, set: &EvalSet, route: Route) -> Result<DirectionResult> {
        let hyps = self.translate(model, &set.sources, &set.src, &set.tgt, route)?;
        let tgt = self.vocab.languages().id(&set.tgt)?;
        Ok(DirectionResult {
            src: set.src.clone(),
            tgt: set.tgt.clone(),
            zero_shot: set.zero_shot,
            bleu: bleu_corpus(&hyps, &set.references, self.tokenizer)?,
            accuracy: language_accuracy(self.detector, &hyps, tgt),
            n_sentences: set.sources.len(),
        })
    }

    pub fn evaluate(&self, model: &Model<f32>, sets: &[EvalSet], route: Route) -> Result<EvalReport> {
        let dirs = sets
            .iter()
            .map(|s| self.evaluate_set(model, s, route))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::new(dirs))
    }
}

/// Settings of the synthetic pretrain-then-finetune experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub suite: SyntheticConfig,
    pub vocab_size: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub use_laln: bool,
    pub use_lalt: bool,
    pub dropout: f64,
    pub init_std: f64,
    pub train: TrainConfig,
    pub pretrain_steps: u64,
    pub robt_steps: u64,
    pub robt_batch: usize,
    pub robt_eval_every: u64,
    /// Evaluations without accuracy gain before finetuning stops.
    pub robt_patience: usize,
    /// Sentences per direction in the zero-shot development sets that drive
    /// the plateau test.
    pub dev_sentences: usize,
    /// Sentences per direction in the reported evaluations.
    pub test_sentences: usize,
    pub decode: DecodeMode,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            suite: SyntheticConfig {
                languages: 6,
                ..SyntheticConfig::default()
            },
            vocab_size: 512,
            d: 64,
            d_ff: 256,
            heads: 4,
            layers: 2,
            use_laln: true,
            use_lalt: true,
            dropout: 0.1,
            init_std: 0.1,
            train: TrainConfig {
                batch_tokens: 1500,
                warmup: 400,
                lr_scale: 0.5,
                ..TrainConfig::default()
            },
            pretrain_steps: 1000,
            robt_steps: 2000,
            robt_batch: 64,
            robt_eval_every: 100,
            robt_patience: 3,
            dev_sentences: 50,
            test_sentences: 100,
            decode: DecodeMode::Greedy {
                cap: LengthCap::default(),
            },
        }
    }
}

/// A pretrained model with everything needed to evaluate and finetune it.
pub struct Pretrained {
    pub cfg: DeskConfig,
    pub suite: SyntheticSuite,
    pub vocab: Vocabulary,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    pub pivot_report: EvalReport,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
    pub plateau_step: Option<u64>,
    pub steps: u64,
    pub seconds: f64,
}

impl Pretrained {
    pub fn detector(&self) -> VocabDetector {
        VocabDetector::new(self.suite.token_table())
    }

    /// Test directions: supervised pairs plus all zero-shot pairs.
    pub fn test_sets(&self) -> Result<Vec<EvalSet>> {
        let corpus = self.suite.corpus();
        let zero = corpus
            .zero_shot
            .as_ref()
            .ok_or_else(|| Error::Config("suite has no zero-shot test set".into()))?;
        let mut sets = supervised_sets(corpus, Split::Test, self.cfg.test_sentences);
        sets.extend(zero_shot_sets(zero, self.cfg.test_sentences));
        Ok(sets)
    }

    /// Zero-shot directions of the development set.
    pub fn dev_sets(&self) -> Result<Vec<EvalSet>> {
        let dev = self
            .suite
            .corpus()
            .zero_shot_dev
            .as_ref()
            .ok_or_else(|| Error::Config("suite has no zero-shot development set".into()))?;
        Ok(zero_shot_sets(dev, self.cfg.dev_sentences))
    }

    pub fn evaluate(&self, model: &Model<f32>, sets: &[EvalSet], route: Route) -> Result<EvalReport> {
        let detector = self.detector();
        Evaluator {
            vocab: &self.vocab,
            detector: &detector,
            mode: self.cfg.decode,
            tokenizer: Tokenizer::Whitespace,
            batch: 64,
        }
        .evaluate(model, sets, route)
    }

    /// Finetunes a copy of the pretrained model, drawing intermediate
    /// languages from `languages`.
    pub fn finetune(&self, languages: Vec<LangId>, seed: u64) -> Result<Finetuned> {
        let start = Instant::now();
        let data = self.suite.corpus().instances(&self.vocab, Split::Train)?;
        let mut trainer = Trainer::from_checkpoint(
            &self.checkpoint,
            TrainConfig {
                seed,
                ..self.cfg.train.clone()
            },
        )?;
        let cfg = RobtConfig {
            max_steps: self.cfg.robt_steps,
            batch_size: self.cfg.robt_batch,
            seed,
            eval_every: self.cfg.robt_eval_every,
            patience: self.cfg.robt_patience,
            ..RobtConfig::new(languages)
        };
        let dev = self.dev_sets()?;
        let outcome = robt_finetune(&mut trainer, &data, &cfg, None, |m| {
            let r = self.evaluate(m, &dev, Route::Direct)?;
            log::info!("robt dev acc_zero={:.4} bleu_zero={:.2}", r.acc_zero, r.bleu_zero);
            Ok((r.acc_zero, r.bleu_zero))
        })?;
        let report = self.evaluate(&trainer.model, &self.test_sets()?, Route::Direct)?;
        Ok(Finetuned {
            report,
            curve: outcome.curve,
            plateau_step: outcome.plateau_step,
            steps: outcome.steps,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Non-English languages, the directions never seen in pretraining.
    pub fn zero_shot_languages(&self) -> Vec<LangId> {
        let langs = self.suite.languages();
        langs.ids().filter(|&l| langs.code(l) != ENGLISH).collect()
    }

    pub fn all_languages(&self) -> Vec<LangId> {
        self.suite.languages().ids().collect()
    }
}

/// Generates the suite, builds the vocabulary, pretrains on all supervised
/// directions and evaluates direct and pivot translation.
pub fn pretrain(cfg: &DeskConfig) -> Result<Pretrained> {
    let start = Instant::now();
    let suite = generate_synthetic_suite(&cfg.suite)?;
    let corpus = suite.corpus();
    let langs = corpus.languages()?;
    let vocab = build_vocab(corpus.all_sentences(), cfg.vocab_size, VocabMode::WholeToken, &langs)?;
    let data = corpus.instances(&vocab, Split::Train)?;
    let model_cfg = ModelConfig {
        d: cfg.d,
        d_ff: cfg.d_ff,
        heads: cfg.heads,
        layers: cfg.layers,
        use_laln: cfg.use_laln,
        use_lalt: cfg.use_lalt,
        dropout_residual: cfg.dropout,
        dropout_attention: cfg.dropout,
        ..ModelConfig::base(vocab.len(), langs.len())
    };
    let model = Model::new(model_cfg, cfg.init_std, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.run(&data, cfg.pretrain_steps, None, |_, s| {
        if s.step % 250 == 0 {
            log::info!("pretrain step {} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
        }
        Ok(true)
    })?;
    let checkpoint = trainer.checkpoint();
    let mut pre = Pretrained {
        cfg: cfg.clone(),
        suite,
        vocab,
        checkpoint,
        report: EvalReport::new(Vec::new()),
        pivot_report: EvalReport::new(Vec::new()),
        seconds: 0.0,
    };
    let sets = pre.test_sets()?;
    pre.report = pre.evaluate(&trainer.model, &sets, Route::Direct)?;
    let zero: Vec<EvalSet> = sets.into_iter().filter(|s| s.zero_shot).collect();
    pre.pivot_report = pre.evaluate(&trainer.model, &zero, Route::Pivot)?;
    pre.seconds = start.elapsed().as_secs_f64();
    Ok(pre)
}
