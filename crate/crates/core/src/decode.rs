//! Greedy decoding, length-normalized beam search and two-hop pivoting
//! through English.

use std::cmp::Ordering;

use polyglot_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::LangId;
use crate::model::{DecodeSession, Model, ModelSession};
use crate::vocab::EOS;

/// Output length limit `ratio · |x| + extra` tokens, end symbol excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthCap {
    pub ratio: usize,
    pub extra: usize,
}

impl LengthCap {
    pub fn for_len(&self, n: usize) -> usize {
        self.ratio * n + self.extra
    }
}

impl Default for LengthCap {
    fn default() -> Self {
        Self { ratio: 2, extra: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub cap: LengthCap,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            alpha: 0.6,
            cap: LengthCap::default(),
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("length penalty {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// `((5 + n) / 6)^alpha`.
pub fn length_penalty(n: usize, alpha: f64) -> f64 {
    ((5.0 + n as f64) / 6.0).powf(alpha)
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of every source in `session` jointly. `caps[i]` bounds
/// the output length of source `i`. Outputs exclude the end symbol.
pub fn greedy<S: DecodeSession>(session: &mut S, caps: &[usize]) -> Result<Vec<Vec<u32>>> {
    if session.live() != caps.len() {
        return Err(Error::Sequence(format!(
            "{} caps for {} sources",
            caps.len(),
            session.live()
        )));
    }
    let v = session.vocab_size();
    let mut out = vec![Vec::new(); caps.len()];
    // (session row, source) of every live hypothesis.
    let mut rows: Vec<(usize, usize)> = (0..caps.len()).filter(|&i| caps[i] > 0).map(|i| (i, i)).collect();
    while !rows.is_empty() {
        let lp = session.log_probs();
        let mut parents = Vec::with_capacity(rows.len());
        let mut tokens = Vec::with_capacity(rows.len());
        let mut sources = Vec::with_capacity(rows.len());
        for &(r, src) in &rows {
            let tok = argmax(&lp[r * v..(r + 1) * v]) as u32;
            if tok == EOS {
                continue;
            }
            out[src].push(tok);
            if out[src].len() < caps[src] {
                parents.push(r);
                tokens.push(tok);
                sources.push(src);
            }
        }
        if parents.is_empty() {
            break;
        }
        session.advance(&parents, &tokens)?;
        rows = sources.into_iter().enumerate().collect();
    }
    Ok(out)
}

/// A finished beam hypothesis. `steps` counts emitted tokens including the
/// end symbol when one was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub steps: usize,
    pub score: f64,
}

fn finish(tokens: Vec<u32>, logprob: f64, steps: usize, alpha: f64) -> Hypothesis {
    Hypothesis {
        tokens,
        logprob,
        steps,
        score: logprob / length_penalty(steps, alpha),
    }
}

/// Higher score first; ties go to the lexicographically smaller sequence.
fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search for the single source held by `session`, scoring finished
/// hypotheses by `logprob / lp(steps)`.
///
/// Each step keeps the `beam_size` best extensions of the live hypotheses
/// by cumulative log-probability (ties toward lower token ids). Extensions
/// ending in the end symbol, or reaching `cap` tokens, are finished. Search
/// stops when nothing is live or when no live hypothesis can still beat the
/// best finished one.
pub fn beam_search<S: DecodeSession>(
    session: &mut S,
    cfg: &BeamConfig,
    cap: usize,
) -> Result<Hypothesis> {
    cfg.validate()?;
    if session.live() != 1 {
        return Err(Error::Sequence("beam search decodes one source at a time".into()));
    }
    let v = session.vocab_size();
    let mut finished: Vec<Hypothesis> = Vec::new();
    if cap == 0 {
        return Ok(finish(Vec::new(), 0.0, 0, cfg.alpha));
    }
    // (tokens, logprob) per live session row.
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let best_possible = length_penalty(cap + 1, cfg.alpha);
    while !alive.is_empty() {
        let lp = session.log_probs();
        // (cumulative, step log-prob, token, row); the step term separates
        // extensions whose sums round to the same value.
        let mut cands: Vec<(f64, f64, u32, usize)> = Vec::with_capacity(alive.len() * v);
        for (r, (_, base)) in alive.iter().enumerate() {
            for (tok, &l) in lp[r * v..(r + 1) * v].iter().enumerate() {
                if l.is_finite() {
                    cands.push((base + l, l, tok as u32, r));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        cands.truncate(cfg.beam_size);
        let mut parents = Vec::new();
        let mut tokens = Vec::new();
        let mut next = Vec::new();
        for (total, _, tok, r) in cands {
            let prefix = &alive[r].0;
            if tok == EOS {
                finished.push(finish(prefix.clone(), total, prefix.len() + 1, cfg.alpha));
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(tok);
            if seq.len() >= cap {
                let n = seq.len();
                finished.push(finish(seq, total, n, cfg.alpha));
                continue;
            }
            parents.push(r);
            tokens.push(tok);
            next.push((seq, total));
        }
        if next.is_empty() {
            break;
        }
        if let Some(best) = finished.iter().map(|h| h.score).reduce(f64::max) {
            let hope = next.iter().map(|(_, l)| l / best_possible).fold(f64::MIN, f64::max);
            if best >= hope {
                break;
            }
        }
        session.advance(&parents, &tokens)?;
        alive = next;
    }
    finished.sort_by(better);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Sequence("beam search produced no hypothesis".into()))
}

/// Greedy translations of `(source, target language)` inputs decoded as one
/// batch.
pub fn translate_greedy<T: Scalar>(
    model: &Model<T>,
    inputs: &[(&[u32], LangId)],
    cap: LengthCap,
) -> Result<Vec<Vec<u32>>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let mut session = ModelSession::new(model, inputs)?;
    let caps: Vec<usize> = inputs.iter().map(|(x, _)| cap.for_len(x.len())).collect();
    greedy(&mut session, &caps)
}

/// Greedy translations decoded in chunks of `batch` sentences. An empty
/// source yields an empty translation.
pub fn translate_greedy_chunked<T: Scalar>(
    model: &Model<T>,
    inputs: &[(&[u32], LangId)],
    cap: LengthCap,
    batch: usize,
) -> Result<Vec<Vec<u32>>> {
    let mut out = vec![Vec::new(); inputs.len()];
    let live: Vec<usize> = (0..inputs.len()).filter(|&i| !inputs[i].0.is_empty()).collect();
    for chunk in live.chunks(batch.max(1)) {
        let sub: Vec<(&[u32], LangId)> = chunk.iter().map(|&i| inputs[i]).collect();
        for (&i, y) in chunk.iter().zip(translate_greedy(model, &sub, cap)?) {
            out[i] = y;
        }
    }
    Ok(out)
}

/// Beam-search translation of one sentence; an empty source yields an
/// empty translation.
pub fn translate_beam<T: Scalar>(
    model: &Model<T>,
    source: &[u32],
    lang: LangId,
    cfg: &BeamConfig,
) -> Result<Vec<u32>> {
    if source.is_empty() {
        return Ok(Vec::new());
    }
    let mut session = ModelSession::new(model, &[(source, lang)])?;
    Ok(beam_search(&mut session, cfg, cfg.cap.for_len(source.len()))?.tokens)
}

/// Two hops through English: `hop(x, english)` then `hop(·, tgt)`.
/// Neither end may be English; an empty input gives an empty output.
pub fn pivot_with<F>(x: &[u32], src: LangId, tgt: LangId, english: LangId, mut hop: F) -> Result<Vec<u32>>
where
    F: FnMut(&[u32], LangId) -> Result<Vec<u32>>,
{
    if src == english || tgt == english {
        return Err(Error::Config(
            "pivot translation needs non-English source and target".into(),
        ));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mid = hop(x, english)?;
    if mid.is_empty() {
        return Ok(Vec::new());
    }
    hop(&mid, tgt)
}

/// Pivot translation with beam search on each hop. The first hop uses
/// `to_english`, the second `from_english`; pass the same model twice for a
/// single multilingual system.
pub fn pivot_translate<T: Scalar>(
    to_english: &Model<T>,
    from_english: &Model<T>,
    x: &[u32],
    src: LangId,
    tgt: LangId,
    english: LangId,
    cfg: &BeamConfig,
) -> Result<Vec<u32>> {
    pivot_with(x, src, tgt, english, |s, lang| {
        let m = if lang == english { to_english } else { from_english };
        translate_beam(m, s, lang, cfg)
    })
}
