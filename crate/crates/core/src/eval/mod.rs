//! Translation quality and output-language metrics.

pub mod bleu;
pub mod detect;
pub mod metrics;
pub mod report;

pub use bleu::{bleu_corpus, bleu_tokens, BleuStats, Tokenizer};
pub use detect::{corpus_detector, Detection, LanguageDetector, NgramDetector, VocabDetector};
pub use metrics::{language_accuracy, mean, pearson, win_ratio};
pub use report::{plot_data, CurvePoint, DirectionResult, EvalReport, WinRatio};
