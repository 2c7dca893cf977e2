use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use polyglot_core::checkpoint::Checkpoint;
use polyglot_core::corpus::sampler::read_raw_pairs;
use polyglot_core::corpus::{
    generate_synthetic_suite, sample_corpus, Corpus, SamplerConfig, Split, SyntheticConfig,
};
use polyglot_core::decode::{BeamConfig, LengthCap};
use polyglot_core::eval::{corpus_detector, plot_data, EvalReport, Tokenizer};
use polyglot_core::experiment::{supervised_sets, zero_shot_sets, DecodeMode, Evaluator, Route};
use polyglot_core::lang::ENGLISH;
use polyglot_core::model::{param_count, Model, ModelConfig};
use polyglot_core::robt::{robt_finetune, RobtConfig};
use polyglot_core::trainer::{TrainConfig, Trainer};
use polyglot_core::{build_vocab, LangId, VocabMode, Vocabulary};

use crate::cli::*;
use crate::manifest::RunManifest;

/// An invalid combination of otherwise well-formed flags.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    let config = cli.config.clone();
    let name = cli.command.name();
    let manifest =
        |args: &dyn erased::Args| RunManifest::new(name, config.clone(), seed, &args.value());
    match &cli.command {
        Command::SampleCorpus(a) => {
            sample(a, seed)?;
            manifest(a).write(&a.output)?;
        }
        Command::GenSynthetic(a) => {
            gen_synthetic(a, seed)?;
            manifest(a).write(&a.output)?;
        }
        Command::BuildVocab(a) => {
            vocab(a)?;
            manifest(a).write(parent(&a.output))?;
        }
        Command::Train(a) => {
            manifest(a).write(&a.output)?;
            train(a, seed)?;
        }
        Command::FinetuneRobt(a) => {
            manifest(a).write(&a.output)?;
            finetune(a, seed)?;
        }
        Command::Translate(a) => {
            translate(a)?;
            manifest(a).write(parent(&a.output))?;
        }
        Command::Evaluate(a) => {
            evaluate(a)?;
            manifest(a).write(&a.output)?;
        }
        Command::ParamCount(a) => {
            let text = params(a);
            print!("{text}");
            if let Some(dir) = &a.output {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("param-count.txt"), &text)?;
                manifest(a).write(dir)?;
            }
        }
    }
    Ok(())
}

/// Serialization of heterogeneous argument structs for the manifest.
mod erased {
    pub trait Args {
        fn value(&self) -> serde_json::Value;
    }

    impl<T: serde::Serialize> Args for T {
        fn value(&self) -> serde_json::Value {
            serde_json::to_value(self).expect("arguments serialize")
        }
    }
}

fn parent(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn sample(a: &SampleCorpusArgs, seed: u64) -> anyhow::Result<()> {
    let raw = read_raw_pairs(&a.input)?;
    let cfg = SamplerConfig {
        cap_train: a.cap_train,
        n_valid: a.n_valid,
        n_test: a.n_test,
        seed,
    };
    let (corpus, report) = sample_corpus(&raw, &cfg)?;
    corpus.write(&a.output)?;
    let text = report.render();
    fs::write(a.output.join("sampler-report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn gen_synthetic(a: &GenSyntheticArgs, seed: u64) -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        languages: a.languages,
        concepts: a.concepts,
        train_per_pair: a.train_per_pair,
        valid_per_pair: a.valid_per_pair,
        test_per_pair: a.test_per_pair,
        zero_shot_test: a.zero_shot_test,
        min_len: a.min_len,
        max_len: a.max_len,
        reorder: a.reorder,
        seed,
    };
    let suite = generate_synthetic_suite(&cfg)?;
    suite.corpus().write(&a.output)?;
    log::info!(
        "wrote {} pairs over {} languages to {}",
        suite.corpus().pairs.len(),
        suite.languages().len(),
        a.output.display()
    );
    Ok(())
}

fn vocab(a: &BuildVocabArgs) -> anyhow::Result<()> {
    let corpus = Corpus::read(&a.corpus)?;
    let mode = match a.merges {
        0 => VocabMode::WholeToken,
        merges => VocabMode::BpeLite { merges },
    };
    let v = build_vocab(corpus.all_sentences(), a.size, mode, &corpus.languages()?)?;
    if let Some(dir) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    v.save(&a.output)?;
    log::info!("{} entries written to {}", v.len(), a.output.display());
    Ok(())
}

fn load_inputs(corpus: &Path, vocab: &Path) -> anyhow::Result<(Corpus, Vocabulary)> {
    let corpus = Corpus::read(corpus)?;
    let vocab = Vocabulary::load(vocab)?;
    let (have, want) = (vocab.languages().codes(), corpus.languages()?);
    if have != want.codes() {
        bail!(
            "vocabulary languages {:?} do not match corpus languages {:?}",
            have,
            want.codes()
        );
    }
    Ok((corpus, vocab))
}

fn log_file(path: PathBuf) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn train(a: &TrainArgs, seed: u64) -> anyhow::Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let data = corpus.instances(&vocab, Split::Train)?;
    let cfg = TrainConfig {
        max_steps: a.steps,
        batch_tokens: a.optim.batch_tokens,
        warmup: a.optim.warmup,
        lr_scale: a.optim.lr_scale,
        label_smoothing: a.optim.label_smoothing,
        clip_norm: a.optim.clip_norm,
        checkpoint_every: a.optim.checkpoint_every,
        seed,
    };
    let mut trainer = match &a.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, cfg)?,
        None => {
            let m = &a.model;
            let model_cfg = ModelConfig {
                d: m.d,
                d_ff: m.d_ff,
                heads: m.heads,
                layers: m.layers,
                use_laln: m.laln,
                use_lalt: m.lalt,
                dropout_residual: m.dropout,
                dropout_attention: m.dropout,
                ..ModelConfig::base(vocab.len(), vocab.languages().len())
            };
            Trainer::new(Model::new(model_cfg, m.init_std, seed)?, cfg)?
        }
    };
    if trainer.model.config().vocab_size != vocab.len() {
        bail!(
            "checkpoint vocabulary size {} does not match the vocabulary's {}",
            trainer.model.config().vocab_size,
            vocab.len()
        );
    }
    let mut log = log_file(a.output.join("train.log"))?;
    let every = a.optim.checkpoint_every;
    let out = a.output.clone();
    trainer.run(&data, a.steps, Some(&mut log), |t, s| {
        if s.step % 100 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
        }
        if every > 0 && s.step % every == 0 {
            t.checkpoint()
                .save(&out.join(format!("checkpoint-{}.ckpt", s.step)))?;
        }
        Ok(true)
    })?;
    log.flush()?;
    trainer.checkpoint().save(&a.output.join("model.ckpt"))?;
    Ok(())
}

fn decode_mode(d: &DecodeArgs) -> anyhow::Result<DecodeMode> {
    let cap = LengthCap {
        ratio: d.cap_ratio,
        extra: d.cap_extra,
    };
    if d.greedy {
        return Ok(DecodeMode::Greedy { cap });
    }
    let cfg = BeamConfig {
        beam_size: d.beam,
        alpha: d.alpha,
        cap,
    };
    cfg.validate()?;
    Ok(DecodeMode::Beam(cfg))
}

fn finetune(a: &FinetuneRobtArgs, seed: u64) -> anyhow::Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let langs = vocab.languages();
    let languages: Vec<LangId> = if a.languages.is_empty() {
        langs.ids().collect()
    } else {
        a.languages
            .iter()
            .map(|c| langs.id(c))
            .collect::<Result<_, _>>()?
    };
    let data = corpus.instances(&vocab, Split::Train)?;
    let cfg = TrainConfig {
        warmup: a.warmup,
        lr_scale: a.lr_scale,
        label_smoothing: a.label_smoothing,
        clip_norm: a.clip_norm,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?, cfg)?;
    let robt = RobtConfig {
        max_steps: a.steps,
        batch_size: a.batch,
        seed,
        eval_every: a.eval_every,
        patience: a.patience,
        min_gain_points: a.min_gain,
        ..RobtConfig::new(languages)
    };
    let dev = match (&corpus.zero_shot_dev, a.eval_every) {
        (_, 0) => Vec::new(),
        (Some(dev), _) => zero_shot_sets(dev, a.dev_sentences),
        (None, _) => bail!(
            "{} has no zero-shot development set (zero-shot/valid.xx); pass --eval-every 0 to finetune without evaluation",
            a.corpus.display()
        ),
    };
    let detector = corpus_detector(&corpus)?;
    let evaluator = Evaluator {
        vocab: &vocab,
        detector: detector.as_ref(),
        mode: DecodeMode::Greedy {
            cap: LengthCap::default(),
        },
        tokenizer: Tokenizer::Whitespace,
        batch: 64,
    };
    let mut log = log_file(a.output.join("robt.log"))?;
    let outcome = robt_finetune(&mut trainer, &data, &robt, Some(&mut log), |m| {
        let r = evaluator.evaluate(m, &dev, Route::Direct)?;
        log::info!(
            "dev acc_zero={:.4} bleu_zero={:.2}",
            r.acc_zero,
            r.bleu_zero
        );
        Ok((r.acc_zero, r.bleu_zero))
    })?;
    log.flush()?;
    fs::write(a.output.join("curve.txt"), plot_data(&outcome.curve))?;
    trainer.checkpoint().save(&a.output.join("model.ckpt"))?;
    match outcome.plateau_step {
        Some(s) => log::info!("plateau after {s} steps"),
        None => log::info!("ran {} steps without a plateau", outcome.steps),
    }
    Ok(())
}

fn load_model(path: &Path, vocab: &Vocabulary) -> anyhow::Result<Model<f32>> {
    let model: Model<f32> = Checkpoint::load(path)?.to_model()?;
    if model.config().vocab_size != vocab.len() {
        bail!(
            "checkpoint vocabulary size {} does not match the vocabulary's {}",
            model.config().vocab_size,
            vocab.len()
        );
    }
    Ok(model)
}

fn translate(a: &TranslateArgs) -> anyhow::Result<()> {
    if a.pivot && (a.src == ENGLISH || a.tgt == ENGLISH) {
        return Err(UsageError(format!(
            "--pivot needs two non-English languages, got {} -> {}",
            a.src, a.tgt
        ))
        .into());
    }
    let vocab = Vocabulary::load(&a.vocab)?;
    let model = load_model(&a.checkpoint, &vocab)?;
    let text =
        fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let sources: Vec<String> = text.lines().map(str::to_string).collect();
    // Detection plays no part in translation.
    let detector = polyglot_core::eval::VocabDetector::default();
    let evaluator = Evaluator {
        vocab: &vocab,
        detector: &detector,
        mode: decode_mode(&a.decode)?,
        tokenizer: Tokenizer::Whitespace,
        batch: a.decode.batch,
    };
    let route = if a.pivot { Route::Pivot } else { Route::Direct };
    let out = evaluator.translate(&model, &sources, &a.src, &a.tgt, route)?;
    let mut w = log_file(a.output.clone())?;
    for line in out {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let (corpus, vocab) = load_inputs(&a.corpus, &a.vocab)?;
    let model = load_model(&a.checkpoint, &vocab)?;
    let detector = corpus_detector(&corpus)?;
    let evaluator = Evaluator {
        vocab: &vocab,
        detector: detector.as_ref(),
        mode: decode_mode(&a.decode)?,
        tokenizer: match a.tokenize {
            TokenizerArg::Whitespace => Tokenizer::Whitespace,
            TokenizerArg::Thirteen => Tokenizer::Mteval13a,
        },
        batch: a.decode.batch,
    };
    let mut sets = supervised_sets(&corpus, Split::Test, a.limit);
    if let Some(z) = &corpus.zero_shot {
        sets.extend(zero_shot_sets(z, a.limit));
    }
    sets.retain(|s| !s.sources.is_empty());
    if sets.is_empty() {
        bail!("{} has no test sentences", a.corpus.display());
    }
    let mut report = EvalReport::new(Vec::new());
    for set in &sets {
        let route = if a.pivot && set.zero_shot {
            Route::Pivot
        } else {
            Route::Direct
        };
        report
            .directions
            .push(evaluator.evaluate_set(&model, set, route)?);
        log::info!("evaluated {}-{}", set.src, set.tgt);
    }
    let mut report = EvalReport::new(report.directions);
    if let Some(path) = &a.reference {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        report.compare_to(
            &path.display().to_string(),
            &EvalReport::from_records(&text)?,
        )?;
    }
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    fs::write(a.output.join("report.txt"), report.to_records())?;
    let table = report.to_table();
    fs::write(a.output.join("report-table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn params(a: &ParamCountArgs) -> String {
    let cfg = ModelConfig {
        d: a.d,
        d_ff: a.d_ff,
        heads: a.heads,
        layers: a.layers,
        use_laln: a.laln,
        use_lalt: a.lalt,
        ..ModelConfig::base(a.vocab_size, a.languages)
    };
    let pc = param_count(&cfg);
    let mut s = String::new();
    for (name, n) in pc.components() {
        s += &format!("{name:<12} {n:>14}\n");
    }
    s += &format!("{:<12} {:>14}\n", "total", pc.total());
    s
}
