//! Tape-free inference: per-sentence encoding and incremental decoding with
//! cached self-attention keys and values.

use polyglot_tensor::kernels::{attend_row, layer_norm_forward, log_softmax_in_place, LAYER_NORM_EPS};
use polyglot_tensor::{Scalar, Tensor};

use super::forward::sinusoid;
use super::params::{AttnIds, FfnIds, NormIds};
use super::{tag_id, Model};
use crate::error::{Error, Result};
use crate::lang::LangId;
use crate::vocab::BOS;

/// Step-wise next-token distributions over a set of live hypotheses.
///
/// After construction each source has one hypothesis holding only the
/// start symbol. [`advance`](Self::advance) replaces the live set: new
/// hypothesis `j` is old hypothesis `parents[j]` extended by `tokens[j]`.
pub trait DecodeSession {
    fn vocab_size(&self) -> usize;

    /// Number of live hypotheses.
    fn live(&self) -> usize;

    /// Row-major `[live × vocab]` log-probabilities of the next token.
    fn log_probs(&self) -> &[f64];

    fn advance(&mut self, parents: &[usize], tokens: &[u32]) -> Result<()>;
}

fn linear<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![T::zero(); rows * n];
    T::gemm(rows, k, n, x, false, w.data(), false, T::zero(), &mut y);
    for row in y.chunks_exact_mut(n) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v = *v + bias;
        }
    }
    y
}

struct Stack<'m, T: Scalar> {
    model: &'m Model<T>,
}

impl<T: Scalar> Stack<'_, T> {
    fn p(&self, i: usize) -> &Tensor<T> {
        &self.model.params[i]
    }

    fn linear(&self, x: &[T], rows: usize, w: usize, b: usize) -> Vec<T> {
        linear(x, rows, self.p(w), self.p(b))
    }

    fn embed(&self, tokens: &[u32], positions: &[usize]) -> Vec<T> {
        let d = self.model.config.d;
        let table = self.p(self.model.ids.embed).data();
        let scale = T::of((d as f64).sqrt());
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (&tok, &pos) in tokens.iter().zip(positions) {
            let e = &table[tok as usize * d..(tok as usize + 1) * d];
            for (&v, pe) in e.iter().zip(sinusoid(pos, d)) {
                out.push(v * scale + T::of(pe));
            }
        }
        out
    }

    /// `x ← LN(x + y)` in place.
    fn residual(&self, x: &mut [T], y: &[T], norm: &NormIds, groups: &[usize]) {
        let d = self.model.config.d;
        let s: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a + b).collect();
        let mut xhat = vec![T::zero(); s.len()];
        let mut rstd = vec![T::zero(); groups.len()];
        layer_norm_forward(
            &s,
            d,
            self.p(norm.gain).data(),
            self.p(norm.bias).data(),
            groups,
            T::of(LAYER_NORM_EPS),
            x,
            &mut xhat,
            &mut rstd,
        );
    }

    fn ffn(&self, x: &[T], rows: usize, ids: &FfnIds) -> Vec<T> {
        let mut h = self.linear(x, rows, ids.w1, ids.b1);
        for v in h.iter_mut() {
            if *v <= T::zero() {
                *v = T::zero();
            }
        }
        self.linear(&h, rows, ids.w2, ids.b2)
    }

    /// Query row `q` against `n` cached key/value rows.
    fn attend(&self, q: &[T], keys: &[T], values: &[T], n: usize, out: &mut [T]) {
        let cfg = &self.model.config;
        let mut probs = vec![T::zero(); cfg.heads * n];
        attend_row(q, keys, values, n, cfg.d, cfg.heads, &mut probs, None, out);
    }

    /// Full-attention self-attention over the rows of `x`.
    fn self_attend(&self, x: &[T], rows: usize, ids: &AttnIds) -> Vec<T> {
        let d = self.model.config.d;
        let q = self.linear(x, rows, ids.q_w, ids.q_b);
        let k = self.linear(x, rows, ids.k_w, ids.k_b);
        let v = self.linear(x, rows, ids.v_w, ids.v_b);
        let mut a = vec![T::zero(); rows * d];
        for i in 0..rows {
            self.attend(&q[i * d..(i + 1) * d], &k, &v, rows, &mut a[i * d..(i + 1) * d]);
        }
        self.linear(&a, rows, ids.o_w, ids.o_b)
    }
}

impl<T: Scalar> Model<T> {
    fn validate_source(&self, source: &[u32], lang: LangId) -> Result<()> {
        self.check_lang(lang)?;
        if source.is_empty() {
            return Err(Error::Sequence("empty source sentence".into()));
        }
        self.check_tokens(source)
    }

    /// Encoder states `H` for `[tag(lang), source...]`, one row per token.
    pub fn encode(&self, source: &[u32], lang: LangId) -> Result<Tensor<T>> {
        self.validate_source(source, lang)?;
        let st = Stack { model: self };
        let d = self.config.d;
        let mut tokens = vec![tag_id(lang)];
        tokens.extend_from_slice(source);
        let n = tokens.len();
        let positions: Vec<usize> = (0..n).collect();
        let groups = vec![self.norm_group(lang); n];
        let mut x = st.embed(&tokens, &positions);
        for layer in &self.ids.encoder {
            let a = st.self_attend(&x, n, &layer.self_attn);
            st.residual(&mut x, &a, &layer.norm1, &groups);
            let f = st.ffn(&x, n, &layer.ffn);
            st.residual(&mut x, &f, &layer.norm2, &groups);
        }
        Ok(Tensor::new(&[n, d], x)?)
    }

    /// Decoder memory: `H·W_lang` with the bridge, `H` without.
    pub fn memory(&self, h: &Tensor<T>, lang: LangId) -> Result<Tensor<T>> {
        self.check_lang(lang)?;
        let d = self.config.d;
        if h.shape().len() != 2 || h.cols() != d {
            return Err(Error::Sequence(format!("encoder output shape {:?}", h.shape())));
        }
        match self.ids.bridge {
            None => Ok(h.clone()),
            Some(w) => {
                let wt = &self.params[w].data()[lang.0 * d * d..(lang.0 + 1) * d * d];
                let mut out = vec![T::zero(); h.numel()];
                T::gemm(h.rows(), d, d, h.data(), false, wt, false, T::zero(), &mut out);
                Ok(Tensor::new(h.shape(), out)?)
            }
        }
    }

    /// Teacher-forced next-token logits for decoder input `y_in` (starting
    /// with BOS) given encoder states `h`.
    pub fn decode(&self, y_in: &[u32], h: &Tensor<T>, lang: LangId) -> Result<Tensor<T>> {
        if y_in.first() != Some(&BOS) {
            return Err(Error::Sequence("decoder input must start with BOS".into()));
        }
        self.check_tokens(y_in)?;
        let mut s = ModelSession::from_states(self, vec![(h.clone(), lang)])?;
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(y_in.len() * v);
        out.extend(s.last_logits.iter().copied());
        for &tok in &y_in[1..] {
            s.advance(&[0], &[tok])?;
            out.extend(s.last_logits.iter().copied());
        }
        Ok(Tensor::new(&[y_in.len(), v], out)?)
    }
}

struct SourceState<T> {
    /// Cross-attention keys and values per decoder layer, `[len × d]`.
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
    len: usize,
    group: usize,
}

#[derive(Clone)]
struct Hyp<T> {
    source: usize,
    /// Tokens consumed so far, including BOS.
    len: usize,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
}

/// Incremental decoder over a batch of encoded sources.
pub struct ModelSession<'m, T: Scalar> {
    model: &'m Model<T>,
    sources: Vec<SourceState<T>>,
    hyps: Vec<Hyp<T>>,
    last_logits: Vec<T>,
    log_probs: Vec<f64>,
}

impl<'m, T: Scalar> ModelSession<'m, T> {
    /// Encodes every `(source, target language)` and feeds BOS.
    pub fn new(model: &'m Model<T>, inputs: &[(&[u32], LangId)]) -> Result<Self> {
        let states = inputs
            .iter()
            .map(|&(src, lang)| Ok((model.encode(src, lang)?, lang)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_states(model, states)
    }

    fn from_states(model: &'m Model<T>, states: Vec<(Tensor<T>, LangId)>) -> Result<Self> {
        let st = Stack { model };
        let mut sources = Vec::with_capacity(states.len());
        for (h, lang) in states {
            let mem = model.memory(&h, lang)?;
            let n = mem.rows();
            let mut cross_k = Vec::with_capacity(model.ids.decoder.len());
            let mut cross_v = Vec::with_capacity(model.ids.decoder.len());
            for layer in &model.ids.decoder {
                let c = &layer.cross_attn;
                cross_k.push(st.linear(mem.data(), n, c.k_w, c.k_b));
                cross_v.push(st.linear(mem.data(), n, c.v_w, c.v_b));
            }
            sources.push(SourceState {
                cross_k,
                cross_v,
                len: n,
                group: model.norm_group(lang),
            });
        }
        let layers = model.ids.decoder.len();
        let hyps = (0..sources.len())
            .map(|s| Hyp {
                source: s,
                len: 0,
                self_k: vec![Vec::new(); layers],
                self_v: vec![Vec::new(); layers],
            })
            .collect();
        let mut session = Self {
            model,
            sources,
            hyps,
            last_logits: Vec::new(),
            log_probs: Vec::new(),
        };
        let bos = vec![BOS; session.hyps.len()];
        session.step(&bos);
        Ok(session)
    }

    /// Source index of live hypothesis `j`.
    pub fn source_of(&self, j: usize) -> usize {
        self.hyps[j].source
    }

    /// Consumes one token per live hypothesis and refreshes the
    /// next-token distributions.
    fn step(&mut self, tokens: &[u32]) {
        let model = self.model;
        let st = Stack { model };
        let d = model.config.d;
        let n = self.hyps.len();
        if n == 0 {
            self.last_logits.clear();
            self.log_probs.clear();
            return;
        }
        let positions: Vec<usize> = self.hyps.iter().map(|h| h.len).collect();
        let groups: Vec<usize> = self
            .hyps
            .iter()
            .map(|h| self.sources[h.source].group)
            .collect();
        let mut x = st.embed(tokens, &positions);
        for (l, layer) in model.ids.decoder.iter().enumerate() {
            let sa = &layer.self_attn;
            let q = st.linear(&x, n, sa.q_w, sa.q_b);
            let k = st.linear(&x, n, sa.k_w, sa.k_b);
            let v = st.linear(&x, n, sa.v_w, sa.v_b);
            let mut a = vec![T::zero(); n * d];
            for (j, h) in self.hyps.iter_mut().enumerate() {
                h.self_k[l].extend_from_slice(&k[j * d..(j + 1) * d]);
                h.self_v[l].extend_from_slice(&v[j * d..(j + 1) * d]);
                st.attend(
                    &q[j * d..(j + 1) * d],
                    &h.self_k[l],
                    &h.self_v[l],
                    h.len + 1,
                    &mut a[j * d..(j + 1) * d],
                );
            }
            let o = st.linear(&a, n, sa.o_w, sa.o_b);
            st.residual(&mut x, &o, &layer.norm1, &groups);

            let ca = &layer.cross_attn;
            let q = st.linear(&x, n, ca.q_w, ca.q_b);
            let mut a = vec![T::zero(); n * d];
            for (j, h) in self.hyps.iter().enumerate() {
                let s = &self.sources[h.source];
                st.attend(
                    &q[j * d..(j + 1) * d],
                    &s.cross_k[l],
                    &s.cross_v[l],
                    s.len,
                    &mut a[j * d..(j + 1) * d],
                );
            }
            let o = st.linear(&a, n, ca.o_w, ca.o_b);
            st.residual(&mut x, &o, &layer.norm2, &groups);

            let f = st.ffn(&x, n, &layer.ffn);
            st.residual(&mut x, &f, &layer.norm3, &groups);
        }
        for h in self.hyps.iter_mut() {
            h.len += 1;
        }
        self.last_logits = st.linear(&x, n, model.ids.out_w, model.ids.out_b);
        let vsize = model.config.vocab_size;
        self.log_probs = self.last_logits.iter().map(|v| v.as_f64()).collect();
        for row in self.log_probs.chunks_exact_mut(vsize) {
            log_softmax_in_place(row);
        }
    }
}

impl<T: Scalar> DecodeSession for ModelSession<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn live(&self) -> usize {
        self.hyps.len()
    }

    fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    fn advance(&mut self, parents: &[usize], tokens: &[u32]) -> Result<()> {
        if parents.len() != tokens.len() {
            return Err(Error::Sequence("parents and tokens differ in length".into()));
        }
        if let Some(&p) = parents.iter().find(|&&p| p >= self.hyps.len()) {
            return Err(Error::Sequence(format!("no live hypothesis {p}")));
        }
        self.model.check_tokens(tokens)?;
        let mut last_use = vec![usize::MAX; self.hyps.len()];
        for (j, &p) in parents.iter().enumerate() {
            last_use[p] = j;
        }
        let mut old: Vec<Option<Hyp<T>>> = self.hyps.drain(..).map(Some).collect();
        self.hyps = parents
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                if last_use[p] == j {
                    old[p].take().expect("each hypothesis is moved once")
                } else {
                    old[p].clone().expect("moved only at its last use")
                }
            })
            .collect();
        self.step(tokens);
        Ok(())
    }
}
