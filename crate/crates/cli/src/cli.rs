use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "polyglot",
    version,
    about = "Multilingual translation experiments at desk scale"
)]
pub struct Cli {
    /// Plain `key = value` file of flag defaults; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, env = "POLYGLOT_SEED", default_value_t = 1)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split raw `<pair>.<lang>` files into train/valid/test without
    /// cross-pair overlap.
    SampleCorpus(SampleCorpusArgs),
    /// Generate a synthetic cipher suite.
    GenSynthetic(GenSyntheticArgs),
    /// Build a joint vocabulary for a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a multilingual model on every supervised direction.
    Train(TrainArgs),
    /// Finetune a trained model with random online backtranslation.
    FinetuneRobt(FinetuneRobtArgs),
    /// Translate one sentence per line.
    Translate(TranslateArgs),
    /// Score a model on every direction of a corpus.
    Evaluate(EvaluateArgs),
    /// Print exact parameter counts per component.
    ParamCount(ParamCountArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SampleCorpus(_) => "sample-corpus",
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::BuildVocab(_) => "build-vocab",
            Command::Train(_) => "train",
            Command::FinetuneRobt(_) => "finetune-robt",
            Command::Translate(_) => "translate",
            Command::Evaluate(_) => "evaluate",
            Command::ParamCount(_) => "param-count",
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct SampleCorpusArgs {
    /// Directory of raw `<pair>.<lang>` files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    pub cap_train: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_valid: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_test: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub output: PathBuf,
    /// Languages including English.
    #[arg(long, default_value_t = 6)]
    pub languages: usize,
    #[arg(long, default_value_t = 80)]
    pub concepts: usize,
    #[arg(long, default_value_t = 5000)]
    pub train_per_pair: usize,
    #[arg(long, default_value_t = 200)]
    pub valid_per_pair: usize,
    #[arg(long, default_value_t = 200)]
    pub test_per_pair: usize,
    #[arg(long, default_value_t = 200)]
    pub zero_shot_test: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub reorder: bool,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Frequency-based merges; 0 keeps whole tokens.
    #[arg(long, default_value_t = 0)]
    pub merges: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub laln: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub lalt: bool,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    pub init_std: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1500)]
    pub batch_tokens: usize,
    #[arg(long, default_value_t = 400)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    /// Continue from a checkpoint; model flags are then taken from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerArg {
    Whitespace,
    #[value(name = "13a")]
    #[serde(rename = "13a")]
    Thirteen,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DecodeArgs {
    /// Argmax decoding; otherwise beam search.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub greedy: bool,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Output length cap is `cap-ratio * source length + cap-extra`.
    #[arg(long, default_value_t = 2)]
    pub cap_ratio: usize,
    #[arg(long, default_value_t = 8)]
    pub cap_extra: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct FinetuneRobtArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    /// Instances per step before augmentation.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Intermediate-language codes; all languages when empty.
    #[arg(long, value_delimiter = ',')]
    pub languages: Vec<String>,
    /// Steps between zero-shot development evaluations; 0 disables them.
    #[arg(long, default_value_t = 100)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.5)]
    pub min_gain: f64,
    #[arg(long, default_value_t = 50)]
    pub dev_sentences: usize,
    #[arg(long, default_value_t = 400)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub src: String,
    #[arg(long)]
    pub tgt: String,
    /// Two hops through English.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub pivot: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for the report.
    #[arg(long)]
    pub output: PathBuf,
    /// Sentences per direction.
    #[arg(long, default_value_t = 200)]
    pub limit: usize,
    /// Translate zero-shot directions through English.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub pivot: bool,
    #[arg(long, value_enum, default_value_t = TokenizerArg::Whitespace)]
    pub tokenize: TokenizerArg,
    /// Report records of a reference system for the win ratio.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct ParamCountArgs {
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    #[arg(long, default_value_t = 2048)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, default_value_t = 64_000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 100)]
    pub languages: usize,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub laln: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub lalt: bool,
    /// Directory for the counts and manifest; stdout only when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn read_config(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            anyhow::anyhow!("{}:{}: expected `key = value`", path.display(), i + 1)
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `argv`, inserting the config file's entries as flags right after
/// the subcommand so that flags given on the command line override them.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = &first.config else {
        return Ok(first);
    };
    let entries = read_config(path)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::Io, format!("{e}\n")))?;
    let name = first.command.name();
    let at = argv
        .iter()
        .position(|a| a.to_str() == Some(name))
        .expect("parsed subcommand appears in argv");
    let mut full = argv[..=at].to_vec();
    // The seed flag is global, so a command-line seed must still win over
    // the config entry when it precedes the subcommand.
    let seed_on_command_line = argv.iter().any(|a| {
        a.to_str()
            .is_some_and(|s| s == "--seed" || s.starts_with("--seed="))
    });
    for (k, v) in entries {
        if k == "seed" && seed_on_command_line {
            continue;
        }
        full.push(format!("--{k}={v}").into());
    }
    full.extend_from_slice(&argv[at + 1..]);
    Cli::try_parse_from(full)
}
