use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Depth of both encoder and decoder.
    pub layers: usize,
    pub vocab_size: usize,
    pub languages: usize,
    pub use_laln: bool,
    pub use_lalt: bool,
    /// Merged decoder attention is not implemented; setting this is an error.
    #[serde(default)]
    pub merged_attention: bool,
    pub dropout_residual: f64,
    pub dropout_attention: f64,
}

impl ModelConfig {
    /// Base-sized settings: 512/2048, 8 heads, 6 layers, dropout 0.1.
    pub fn base(vocab_size: usize, languages: usize) -> Self {
        Self {
            d: 512,
            d_ff: 2048,
            heads: 8,
            layers: 6,
            vocab_size,
            languages,
            use_laln: false,
            use_lalt: false,
            merged_attention: false,
            dropout_residual: 0.1,
            dropout_attention: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.merged_attention {
            return bad("merged attention is not supported; use standard decoder attention".into());
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return bad("layers and d_ff must be at least 1".into());
        }
        if self.vocab_size == 0 || self.languages == 0 {
            return bad("vocabulary and language set must be non-empty".into());
        }
        for (name, p) in [
            ("dropout_residual", self.dropout_residual),
            ("dropout_attention", self.dropout_attention),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name}={p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Layer-norm sites: two per encoder layer, three per decoder layer.
    pub fn norm_sites(&self) -> usize {
        5 * self.layers
    }

    /// Rows of each layer-norm table.
    pub fn norm_groups(&self) -> usize {
        if self.use_laln {
            self.languages
        } else {
            1
        }
    }
}

/// Parameter totals per component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embedding: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub output: u64,
    /// Shared layer-norm gains and biases (zero when LALN replaces them).
    pub shared_norm: u64,
    /// Per-language layer-norm gains and biases.
    pub laln: u64,
    /// Per-language bridge matrices.
    pub lalt: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.embedding
            + self.encoder
            + self.decoder
            + self.output
            + self.shared_norm
            + self.laln
            + self.lalt
    }

    pub fn components(&self) -> [(&'static str, u64); 7] {
        [
            ("embedding", self.embedding),
            ("encoder", self.encoder),
            ("decoder", self.decoder),
            ("output", self.output),
            ("shared_norm", self.shared_norm),
            ("laln", self.laln),
            ("lalt", self.lalt),
        ]
    }
}

/// Exact parameter count; attention and feed-forward blocks exclude norms,
/// which are reported separately.
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d as u64;
    let ff = cfg.d_ff as u64;
    let v = cfg.vocab_size as u64;
    let l = cfg.layers as u64;
    let t = cfg.languages as u64;
    let attn = 4 * (d * d + d);
    let ffn = d * ff + ff + ff * d + d;
    let norms = 2 * d * cfg.norm_sites() as u64;
    ParamCount {
        embedding: v * d,
        encoder: l * (attn + ffn),
        decoder: l * (2 * attn + ffn),
        output: d * v + v,
        shared_norm: if cfg.use_laln { 0 } else { norms },
        laln: if cfg.use_laln { norms * t } else { 0 },
        lalt: if cfg.use_lalt { t * d * d } else { 0 },
    }
}

/// Exact parameter delta between two configurations set against a delta
/// read off totals that were rounded to whole millions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeltaAccounting {
    pub from: ParamCount,
    pub to: ParamCount,
    /// `to.total() - from.total()`.
    pub exact: i64,
    /// Difference of the rounded totals, in parameters.
    pub rounded: i64,
    /// `rounded - exact`.
    pub residual: i64,
    /// Each rounded total is within half a million of its true value, so
    /// any residual strictly inside one million is pure rounding.
    pub explained: bool,
}

impl DeltaAccounting {
    pub fn new(from: &ModelConfig, to: &ModelConfig, from_millions: u64, to_millions: u64) -> Self {
        let (from, to) = (param_count(from), param_count(to));
        let exact = to.total() as i64 - from.total() as i64;
        let rounded = (to_millions as i64 - from_millions as i64) * 1_000_000;
        let residual = rounded - exact;
        Self {
            from,
            to,
            exact,
            rounded,
            residual,
            explained: residual.abs() < 1_000_000,
        }
    }

    /// Component table followed by the residual explanation.
    pub fn render(&self) -> String {
        let mut s = format!("{:<12} {:>14} {:>14} {:>14}\n", "component", "from", "to", "delta");
        for ((name, a), (_, b)) in self.from.components().iter().zip(self.to.components()) {
            s += &format!("{name:<12} {a:>14} {b:>14} {:>14}\n", b as i64 - *a as i64);
        }
        s += &format!(
            "{:<12} {:>14} {:>14} {:>14}\n",
            "total",
            self.from.total(),
            self.to.total(),
            self.exact
        );
        s += &format!(
            "rounded delta {} - exact delta {} = residual {}\n",
            self.rounded, self.exact, self.residual
        );
        s += &format!(
            "each rounded total carries up to 500000 of rounding, so the rounded delta \
             may differ from the exact one by less than 1000000: {}\n",
            if self.explained { "residual explained by rounding" } else { "residual NOT explained" }
        );
        s
    }
}
