//! Batched teacher-forced forward pass recorded on the differentiation tape.

use polyglot_tensor::{AttentionLayout, Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{AttnIds, FfnIds, NormIds};
use super::{tag_id, Model};
use crate::corpus::TrainingInstance;
use crate::error::{Error, Result};
use crate::vocab::{BOS, PAD};

/// Fixed sinusoidal position encoding of width `d`.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// A recorded forward pass. `gold[r]` is the expected token of logits row
/// `r`, or `None` on padding.
pub struct Forward<T: Scalar> {
    pub graph: Graph<T>,
    pub params: Vec<Var>,
    pub logits: Var,
    pub gold: Vec<Option<usize>>,
    pub target_tokens: usize,
}

struct Ctx<'a, T: Scalar> {
    g: Graph<T>,
    p: Vec<Var>,
    heads: usize,
    rng: Option<&'a mut ChaCha8Rng>,
    p_res: f64,
    p_att: f64,
}

fn keep_mask<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<T> {
    let scale = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
        .collect()
}

impl<T: Scalar> Ctx<'_, T> {
    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p_res > 0.0 => {
                let n = self.g.value(x).numel();
                let mask = keep_mask(rng, n, self.p_res);
                Ok(self.g.dropout(x, mask)?)
            }
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = self.g.matmul(x, self.p[w])?;
        Ok(self.g.add_row(y, self.p[b])?)
    }

    fn attention(&mut self, ids: &AttnIds, x: Var, mem: Var, layout: AttentionLayout) -> Result<Var> {
        let q = self.linear(x, ids.q_w, ids.q_b)?;
        let k = self.linear(mem, ids.k_w, ids.k_b)?;
        let v = self.linear(mem, ids.v_w, ids.v_b)?;
        let drop = match self.rng.as_deref_mut() {
            Some(rng) if self.p_att > 0.0 => {
                let n = layout.batch * layout.q_len * layout.heads * layout.k_len;
                Some(keep_mask(rng, n, self.p_att))
            }
            _ => None,
        };
        let a = self.g.attention(q, k, v, layout, drop)?;
        self.linear(a, ids.o_w, ids.o_b)
    }

    fn ffn(&mut self, ids: &FfnIds, x: Var) -> Result<Var> {
        let h = self.linear(x, ids.w1, ids.b1)?;
        let h = self.g.relu(h);
        self.linear(h, ids.w2, ids.b2)
    }

    /// Post-norm residual: `LN(x + dropout(y))` with per-row norm groups.
    fn residual(&mut self, x: Var, y: Var, norm: &NormIds, groups: &[usize]) -> Result<Var> {
        let y = self.dropout(y)?;
        let s = self.g.add(x, y)?;
        Ok(self
            .g
            .layer_norm_grouped(s, self.p[norm.gain], self.p[norm.bias], groups.to_vec())?)
    }

    fn embed(&mut self, embed: usize, ids: &[usize], len: usize, d: usize) -> Result<Var> {
        let e = self.g.embedding(self.p[embed], ids)?;
        let e = self.g.scale(e, T::of((d as f64).sqrt()));
        let mut pe = Vec::with_capacity(ids.len() * d);
        let table: Vec<Vec<f64>> = (0..len).map(|i| sinusoid(i, d)).collect();
        for r in 0..ids.len() {
            pe.extend(table[r % len].iter().map(|&v| T::of(v)));
        }
        let pe = self.g.constant(Tensor::new(&[ids.len(), d], pe)?);
        let x = self.g.add(e, pe)?;
        self.dropout(x)
    }
}

impl<T: Scalar> Model<T> {
    /// Teacher-forced pass over a batch. With `rng`, parameters are
    /// trainable leaves and dropout is active; without, everything is
    /// constant and deterministic.
    pub fn forward(
        &self,
        batch: &[&TrainingInstance],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward<T>> {
        if batch.is_empty() {
            return Err(Error::Sequence("empty batch".into()));
        }
        for inst in batch {
            self.check_lang(inst.lang)?;
            if inst.source.is_empty() || inst.target.is_empty() {
                return Err(Error::Sequence("empty source or target".into()));
            }
            self.check_tokens(&inst.source)?;
            self.check_tokens(&inst.target)?;
        }
        let cfg = &self.config;
        let d = cfg.d;
        let trainable = rng.is_some();
        let mut g = Graph::new();
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let mut cx = Ctx {
            g,
            p,
            heads: cfg.heads,
            rng,
            p_res: cfg.dropout_residual,
            p_att: cfg.dropout_attention,
        };

        let nb = batch.len();
        let src_len: Vec<usize> = batch.iter().map(|i| i.source.len() + 1).collect();
        let tgt_len: Vec<usize> = batch.iter().map(|i| i.target.len()).collect();
        let ls = *src_len.iter().max().unwrap();
        let lt = *tgt_len.iter().max().unwrap();

        let mut src_ids = vec![PAD as usize; nb * ls];
        let mut dec_ids = vec![PAD as usize; nb * lt];
        let mut gold = vec![None; nb * lt];
        let mut enc_groups = Vec::with_capacity(nb * ls);
        let mut dec_groups = Vec::with_capacity(nb * lt);
        let mut bridge_groups = Vec::with_capacity(nb * ls);
        for (b, inst) in batch.iter().enumerate() {
            src_ids[b * ls] = tag_id(inst.lang) as usize;
            for (i, &t) in inst.source.iter().enumerate() {
                src_ids[b * ls + 1 + i] = t as usize;
            }
            dec_ids[b * lt] = BOS as usize;
            for (i, &t) in inst.target.iter().enumerate() {
                if i + 1 < inst.target.len() {
                    dec_ids[b * lt + i + 1] = t as usize;
                }
                gold[b * lt + i] = Some(t as usize);
            }
            let grp = self.norm_group(inst.lang);
            enc_groups.extend(std::iter::repeat_n(grp, ls));
            dec_groups.extend(std::iter::repeat_n(grp, lt));
            bridge_groups.extend(std::iter::repeat_n(inst.lang.0, ls));
        }

        let ids = &self.ids;
        let enc_layout = AttentionLayout {
            batch: nb,
            q_len: ls,
            k_len: ls,
            heads: cx.heads,
            q_valid: src_len.clone(),
            k_valid: src_len.clone(),
            causal: false,
        };
        let mut x = cx.embed(ids.embed, &src_ids, ls, d)?;
        for layer in &ids.encoder {
            let a = cx.attention(&layer.self_attn, x, x, enc_layout.clone())?;
            x = cx.residual(x, a, &layer.norm1, &enc_groups)?;
            let f = cx.ffn(&layer.ffn, x)?;
            x = cx.residual(x, f, &layer.norm2, &enc_groups)?;
        }
        let memory = match ids.bridge {
            Some(w) => cx.g.grouped_linear(x, cx.p[w], bridge_groups)?,
            None => x,
        };

        let self_layout = AttentionLayout {
            batch: nb,
            q_len: lt,
            k_len: lt,
            heads: cx.heads,
            q_valid: tgt_len.clone(),
            k_valid: tgt_len.clone(),
            causal: true,
        };
        let cross_layout = AttentionLayout {
            batch: nb,
            q_len: lt,
            k_len: ls,
            heads: cx.heads,
            q_valid: tgt_len.clone(),
            k_valid: src_len,
            causal: false,
        };
        let mut y = cx.embed(ids.embed, &dec_ids, lt, d)?;
        for layer in &ids.decoder {
            let a = cx.attention(&layer.self_attn, y, y, self_layout.clone())?;
            y = cx.residual(y, a, &layer.norm1, &dec_groups)?;
            let c = cx.attention(&layer.cross_attn, y, memory, cross_layout.clone())?;
            y = cx.residual(y, c, &layer.norm2, &dec_groups)?;
            let f = cx.ffn(&layer.ffn, y)?;
            y = cx.residual(y, f, &layer.norm3, &dec_groups)?;
        }
        let logits = cx.linear(y, ids.out_w, ids.out_b)?;
        Ok(Forward {
            graph: cx.g,
            params: cx.p,
            logits,
            gold,
            target_tokens: tgt_len.iter().sum(),
        })
    }

    /// Next-token logits `[target.len() × V]` for one instance under teacher
    /// forcing, without dropout.
    pub fn teacher_forced_logits(&self, inst: &TrainingInstance) -> Result<Tensor<T>> {
        let f = self.forward(&[inst], None)?;
        let mut t = f.graph.value(f.logits).clone();
        t.grad = None;
        Ok(t)
    }

    /// Mean label-smoothed loss of a batch without dropout or gradients.
    pub fn loss(&self, batch: &[&TrainingInstance], label_smoothing: f64) -> Result<f64> {
        let mut f = self.forward(batch, None)?;
        let l = f.graph.smoothed_cross_entropy(f.logits, &f.gold, label_smoothing)?;
        Ok(f.graph.value(l).item().as_f64())
    }
}
