//! Random online backtranslation finetuning.
//!
//! Each step samples `B` training instances. Every instance `(x, y, t)` gets
//! an intermediate language `t'` drawn uniformly from the sampling set minus
//! `t`; the live model greedily translates `y` into `t'`, and the pair
//! `(x', y, t)` joins the batch. One optimizer step runs on all `2B`
//! instances.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainingInstance;
use crate::decode::{translate_greedy, LengthCap};
use crate::error::{Error, Result};
use crate::eval::CurvePoint;
use crate::lang::LangId;
use crate::model::Model;
use crate::trainer::{write_record, StepStats, Trainer};
use crate::vocab::{EOS, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobtConfig {
    /// Maximum number of finetuning steps.
    pub max_steps: u64,
    /// Sampled instances per step; the optimized batch holds twice as many.
    pub batch_size: usize,
    /// Languages intermediate targets are drawn from.
    pub languages: Vec<LangId>,
    pub seed: u64,
    /// Steps between evaluations; 0 disables evaluation and the plateau stop.
    pub eval_every: u64,
    /// Evaluations without sufficient gain before stopping.
    pub patience: usize,
    /// Required accuracy gain in points (percent) to reset patience.
    pub min_gain_points: f64,
    pub cap: LengthCap,
}

impl RobtConfig {
    pub fn new(languages: Vec<LangId>) -> Self {
        Self {
            max_steps: 2000,
            batch_size: 64,
            languages,
            seed: 1,
            eval_every: 100,
            patience: 3,
            min_gain_points: 0.5,
            cap: LengthCap::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut langs = self.languages.clone();
        langs.sort();
        langs.dedup();
        if langs.len() < 2 {
            return Err(Error::Config(
                "backtranslation needs at least two target languages".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws uniformly from `set \ {t}`.
pub fn sample_intermediate<R: Rng + ?Sized>(t: LangId, set: &[LangId], rng: &mut R) -> Result<LangId> {
    let candidates: Vec<LangId> = set.iter().copied().filter(|&l| l != t).collect();
    if set.len() < 2 || candidates.is_empty() {
        return Err(Error::Config(format!(
            "no intermediate language other than {t} in a set of {}",
            set.len()
        )));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedInstance {
    /// Backtranslated source; may be empty.
    pub source: Vec<u32>,
    /// Original target, end symbol included.
    pub target: Vec<u32>,
    pub lang: LangId,
    pub intermediate: LangId,
}

impl AugmentedInstance {
    /// The training pair `(x', y, t)`. An empty `x'` becomes a single
    /// unknown token so the encoder always sees a source.
    pub fn to_instance(&self) -> TrainingInstance {
        TrainingInstance {
            source: if self.source.is_empty() { vec![UNK] } else { self.source.clone() },
            target: self.target.clone(),
            lang: self.lang,
        }
    }
}

fn strip_eos(y: &[u32]) -> &[u32] {
    y.strip_suffix(&[EOS]).unwrap_or(y)
}

/// Greedy translation of every `(y, t')` in one joint batch, with the model
/// in inference mode.
pub fn backtranslate_batch<T: polyglot_tensor::Scalar>(
    model: &Model<T>,
    targets: &[(&[u32], LangId)],
    cap: LengthCap,
) -> Result<Vec<Vec<u32>>> {
    let inputs: Vec<(&[u32], LangId)> = targets.iter().map(|&(y, l)| (strip_eos(y), l)).collect();
    translate_greedy(model, &inputs, cap)
}

/// One augmented instance per original, in order.
pub fn augment<T: polyglot_tensor::Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    batch: &[&TrainingInstance],
    languages: &[LangId],
    cap: LengthCap,
    rng: &mut R,
) -> Result<Vec<AugmentedInstance>> {
    let mids = batch
        .iter()
        .map(|inst| sample_intermediate(inst.lang, languages, rng))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<(&[u32], LangId)> = batch
        .iter()
        .zip(&mids)
        .map(|(inst, &m)| (inst.target.as_slice(), m))
        .collect();
    let sources = backtranslate_batch(model, &targets, cap)?;
    let empty = sources.iter().filter(|s| s.is_empty()).count();
    if empty > 0 {
        log::warn!("{empty} of {} backtranslations were empty", sources.len());
    }
    Ok(batch
        .iter()
        .zip(mids)
        .zip(sources)
        .map(|((inst, intermediate), source)| AugmentedInstance {
            source,
            target: inst.target.clone(),
            lang: inst.lang,
            intermediate,
        })
        .collect())
}

/// What one finetuning step sampled and built.
#[derive(Clone, Debug)]
pub struct RobtStep {
    pub stats: StepStats,
    /// Indices into the training data.
    pub originals: Vec<usize>,
    pub augmented: Vec<AugmentedInstance>,
}

/// Finetuning state over a fixed training set: batches are drawn without
/// replacement from reshuffled passes.
pub struct Robt<'a> {
    data: &'a [TrainingInstance],
    cfg: RobtConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Robt<'a> {
    pub fn new(data: &'a [TrainingInstance], cfg: RobtConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("no training instances".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            data,
            cfg,
            rng,
            order: Vec::new(),
            pos: 0,
        })
    }

    pub fn config(&self) -> &RobtConfig {
        &self.cfg
    }

    fn sample_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.pos == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Samples, augments with the live model, and takes one optimizer step
    /// on the `2B` instances (originals first).
    pub fn step(&mut self, trainer: &mut Trainer) -> Result<RobtStep> {
        let originals = self.sample_batch();
        let batch: Vec<&TrainingInstance> = originals.iter().map(|&i| &self.data[i]).collect();
        let augmented = augment(
            &trainer.model,
            &batch,
            &self.cfg.languages,
            self.cfg.cap,
            &mut self.rng,
        )?;
        let extra: Vec<TrainingInstance> = augmented.iter().map(AugmentedInstance::to_instance).collect();
        let full: Vec<&TrainingInstance> = batch.iter().copied().chain(extra.iter()).collect();
        let stats = trainer.train_step(&full)?;
        Ok(RobtStep {
            stats,
            originals,
            augmented,
        })
    }
}

/// Outcome of a finetuning run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobtOutcome {
    pub steps: u64,
    pub curve: Vec<CurvePoint>,
    /// Step of the evaluation at which the accuracy plateau was detected.
    pub plateau_step: Option<u64>,
}

/// Patience-based plateau test on zero-shot accuracy.
#[derive(Clone, Debug)]
pub struct Plateau {
    best: f64,
    stale: usize,
    patience: usize,
    min_gain: f64,
}

impl Plateau {
    /// `min_gain_points` is in percent; accuracies are fractions.
    pub fn new(patience: usize, min_gain_points: f64) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            stale: 0,
            patience,
            min_gain: min_gain_points / 100.0,
        }
    }

    /// Records one evaluation and reports whether the plateau is reached.
    pub fn observe(&mut self, acc: f64) -> bool {
        if acc >= self.best + self.min_gain {
            self.best = acc;
            self.stale = 0;
        } else {
            self.stale += 1;
            self.best = self.best.max(acc);
        }
        self.stale >= self.patience
    }
}

/// Runs up to `cfg.max_steps` finetuning steps on `trainer`, evaluating
/// every `cfg.eval_every` steps (and once before the first step) and
/// stopping on an accuracy plateau. Step records go to `log`.
pub fn robt_finetune(
    trainer: &mut Trainer,
    data: &[TrainingInstance],
    cfg: &RobtConfig,
    mut log: Option<&mut dyn Write>,
    mut evaluate: impl FnMut(&Model<f32>) -> Result<(f64, f64)>,
) -> Result<RobtOutcome> {
    let mut run = Robt::new(data, cfg.clone())?;
    let start = trainer.step();
    let mut curve = Vec::new();
    let mut plateau = Plateau::new(cfg.patience, cfg.min_gain_points);
    let mut record = |trainer: &Trainer, curve: &mut Vec<CurvePoint>, plateau: &mut Plateau| -> Result<bool> {
        let (acc_zero, bleu_zero) = evaluate(&trainer.model)?;
        curve.push(CurvePoint {
            step: trainer.step() - start,
            acc_zero,
            bleu_zero,
        });
        Ok(plateau.observe(acc_zero))
    };
    if cfg.eval_every > 0 && cfg.max_steps > 0 {
        record(trainer, &mut curve, &mut plateau)?;
    }
    let mut plateau_step = None;
    for s in 1..=cfg.max_steps {
        let step = run.step(trainer)?;
        if let Some(w) = log.as_deref_mut() {
            write_record(w, &step.stats)?;
        }
        if cfg.eval_every > 0 && s % cfg.eval_every == 0 && record(trainer, &mut curve, &mut plateau)? {
            plateau_step = Some(s);
            break;
        }
    }
    Ok(RobtOutcome {
        steps: trainer.step() - start,
        curve,
        plateau_step,
    })
}
