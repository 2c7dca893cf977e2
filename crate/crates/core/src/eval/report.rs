//! Per-direction results, aggregates, and their text renderings.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{mean, pearson, win_ratio};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionResult {
    pub src: String,
    pub tgt: String,
    pub zero_shot: bool,
    /// In `[0, 100]`.
    pub bleu: f64,
    /// In `[0, 1]`.
    pub accuracy: f64,
    pub n_sentences: usize,
}

impl DirectionResult {
    pub fn name(&self) -> String {
        format!("{}-{}", self.src, self.tgt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRatio {
    pub reference: String,
    /// In `[0, 100]`.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub directions: Vec<DirectionResult>,
    /// Mean BLEU over supervised directions.
    pub bleu_all: f64,
    /// Mean BLEU over zero-shot directions.
    pub bleu_zero: f64,
    /// Mean language accuracy over zero-shot directions, in `[0, 1]`.
    pub acc_zero: f64,
    pub win_ratio: Option<WinRatio>,
    /// Correlation of accuracy and BLEU over zero-shot directions, when
    /// defined.
    pub pearson: Option<f64>,
}

impl EvalReport {
    pub fn new(directions: Vec<DirectionResult>) -> Self {
        let sup: Vec<f64> = directions.iter().filter(|d| !d.zero_shot).map(|d| d.bleu).collect();
        let zero: Vec<&DirectionResult> = directions.iter().filter(|d| d.zero_shot).collect();
        let zb: Vec<f64> = zero.iter().map(|d| d.bleu).collect();
        let za: Vec<f64> = zero.iter().map(|d| d.accuracy).collect();
        Self {
            bleu_all: mean(&sup),
            bleu_zero: mean(&zb),
            acc_zero: mean(&za),
            pearson: pearson(&za, &zb).ok(),
            win_ratio: None,
            directions,
        }
    }

    pub fn bleu_by_direction(&self) -> Vec<(String, f64)> {
        self.directions.iter().map(|d| (d.name(), d.bleu)).collect()
    }

    /// Sets the win ratio against `reference`, named `name`.
    pub fn compare_to(&mut self, name: &str, reference: &EvalReport) -> Result<f64> {
        let value = win_ratio(&self.bleu_by_direction(), &reference.bleu_by_direction())?;
        self.win_ratio = Some(WinRatio {
            reference: name.to_string(),
            value,
        });
        Ok(value)
    }

    /// One `key=value` line per direction followed by aggregate lines.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for d in &self.directions {
            let _ = writeln!(
                s,
                "direction src={} tgt={} zero_shot={} bleu={} accuracy={} n={}",
                d.src, d.tgt, d.zero_shot, d.bleu, d.accuracy, d.n_sentences
            );
        }
        let _ = writeln!(
            s,
            "aggregate bleu_all={} bleu_zero={} acc_zero={}",
            self.bleu_all, self.bleu_zero, self.acc_zero
        );
        if let Some(w) = &self.win_ratio {
            let _ = writeln!(s, "win_ratio reference={} value={}", w.reference, w.value);
        }
        if let Some(r) = self.pearson {
            let _ = writeln!(s, "pearson r={r}");
        }
        s
    }

    /// Parses the output of [`EvalReport::to_records`].
    pub fn from_records(text: &str) -> Result<Self> {
        let bad = |line: &str, what: &str| Error::Parse {
            what: "report".into(),
            detail: format!("{what} in line {line:?}"),
        };
        let mut directions = Vec::new();
        let mut aggregate = None;
        let mut wr = None;
        let mut r = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or_default();
            let kv: HashMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(line, &format!("missing {k}")));
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(line, &format!("bad {k}"))) };
            match kind {
                "direction" => directions.push(DirectionResult {
                    src: get("src")?.to_string(),
                    tgt: get("tgt")?.to_string(),
                    zero_shot: get("zero_shot")?.parse().map_err(|_| bad(line, "bad zero_shot"))?,
                    bleu: num("bleu")?,
                    accuracy: num("accuracy")?,
                    n_sentences: get("n")?.parse().map_err(|_| bad(line, "bad n"))?,
                }),
                "aggregate" => aggregate = Some((num("bleu_all")?, num("bleu_zero")?, num("acc_zero")?)),
                "win_ratio" => {
                    wr = Some(WinRatio {
                        reference: get("reference")?.to_string(),
                        value: num("value")?,
                    })
                }
                "pearson" => r = Some(num("r")?),
                _ => return Err(bad(line, "unknown record")),
            }
        }
        let (bleu_all, bleu_zero, acc_zero) = aggregate.ok_or_else(|| bad("", "no aggregate record"))?;
        Ok(Self {
            directions,
            bleu_all,
            bleu_zero,
            acc_zero,
            win_ratio: wr,
            pearson: r,
        })
    }

    /// Aligned-column table of directions and aggregates.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>5} {:>8} {:>8} {:>6}", "direction", "zero", "BLEU", "ACC%", "n");
        for d in &self.directions {
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>8.2} {:>8.2} {:>6}",
                d.name(),
                if d.zero_shot { "yes" } else { "no" },
                d.bleu,
                100.0 * d.accuracy,
                d.n_sentences
            );
        }
        let _ = writeln!(s, "{:<12} {:>8.2}", "BLEU_all", self.bleu_all);
        let _ = writeln!(s, "{:<12} {:>8.2}", "BLEU_zero", self.bleu_zero);
        let _ = writeln!(s, "{:<12} {:>8.2}", "ACC_zero", 100.0 * self.acc_zero);
        if let Some(w) = &self.win_ratio {
            let _ = writeln!(s, "{:<12} {:>8.2}  (vs {})", "WR", w.value, w.reference);
        }
        if let Some(r) = self.pearson {
            let _ = writeln!(s, "{:<12} {:>8.4}", "pearson_r", r);
        }
        s
    }
}

/// One evaluation during finetuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    /// In `[0, 1]`.
    pub acc_zero: f64,
    pub bleu_zero: f64,
}

/// Whitespace-separated `step acc_zero bleu_zero` rows with a header.
pub fn plot_data(points: &[CurvePoint]) -> String {
    let mut s = String::from("# step acc_zero bleu_zero\n");
    for p in points {
        let _ = writeln!(s, "{} {:.6} {:.4}", p.step, p.acc_zero, p.bleu_zero);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(src: &str, tgt: &str, zero: bool, bleu: f64, acc: f64) -> DirectionResult {
        DirectionResult {
            src: src.into(),
            tgt: tgt.into(),
            zero_shot: zero,
            bleu,
            accuracy: acc,
            n_sentences: 10,
        }
    }

    #[test]
    fn aggregates_and_round_trip() {
        let mut rep = EvalReport::new(vec![
            dir("en", "xa", false, 60.0, 1.0),
            dir("xa", "en", false, 70.0, 1.0),
            dir("xa", "xb", true, 10.0, 0.2),
            dir("xb", "xa", true, 30.0, 0.6),
        ]);
        assert_eq!(rep.bleu_all, 65.0);
        assert_eq!(rep.bleu_zero, 20.0);
        assert!((rep.acc_zero - 0.4).abs() < 1e-12);
        assert!((rep.pearson.unwrap() - 1.0).abs() < 1e-12);
        let base = rep.clone();
        assert_eq!(rep.compare_to("base", &base).unwrap(), 0.0);
        let back = EvalReport::from_records(&rep.to_records()).unwrap();
        assert_eq!(back, rep);
        assert!(rep.to_table().contains("BLEU_zero"));
    }
}
