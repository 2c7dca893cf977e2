use polyglot_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIds {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub ffn: FfnIds,
    pub norm2: NormIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub cross_attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
    pub norm3: NormIds,
}

/// Indices into the flat parameter list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub embed: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub bridge: Option<usize>,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Normal with std `base_std / sqrt(depth)`.
    Normal { depth: usize },
    Zeros,
    Ones,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize, depth: usize) -> AttnIds {
        let mut pair = |p: &str| {
            let w = self.add(format!("{prefix}.{p}.weight"), &[d, d], Init::Normal { depth });
            let b = self.add(format!("{prefix}.{p}.bias"), &[d], Init::Zeros);
            (w, b)
        };
        let (q_w, q_b) = pair("q");
        let (k_w, k_b) = pair("k");
        let (v_w, v_b) = pair("v");
        let (o_w, o_b) = pair("o");
        AttnIds {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize, depth: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.ffn.w1"), &[d, ff], Init::Normal { depth }),
            b1: self.add(format!("{prefix}.ffn.b1"), &[ff], Init::Zeros),
            w2: self.add(format!("{prefix}.ffn.w2"), &[ff, d], Init::Normal { depth }),
            b2: self.add(format!("{prefix}.ffn.b2"), &[d], Init::Zeros),
        }
    }

    fn norm(&mut self, name: String, groups: usize, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{name}.gain"), &[groups, d], Init::Ones),
            bias: self.add(format!("{name}.bias"), &[groups, d], Init::Zeros),
        }
    }
}

/// Names, shapes and index map of every parameter for `cfg`.
pub fn layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, ParamIds) {
    let (d, ff, g) = (cfg.d, cfg.d_ff, cfg.norm_groups());
    let mut b = Builder { specs: Vec::new() };
    let embed = b.add("embed.weight".into(), &[cfg.vocab_size, d], Init::Normal { depth: 1 });
    let mut encoder = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("enc.{l}");
        let depth = l + 1;
        encoder.push(EncoderLayerIds {
            self_attn: b.attn(&format!("{p}.self_attn"), d, depth),
            norm1: b.norm(format!("{p}.norm1"), g, d),
            ffn: b.ffn(&p, d, ff, depth),
            norm2: b.norm(format!("{p}.norm2"), g, d),
        });
    }
    let mut decoder = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("dec.{l}");
        let depth = l + 1;
        decoder.push(DecoderLayerIds {
            self_attn: b.attn(&format!("{p}.self_attn"), d, depth),
            norm1: b.norm(format!("{p}.norm1"), g, d),
            cross_attn: b.attn(&format!("{p}.cross_attn"), d, depth),
            norm2: b.norm(format!("{p}.norm2"), g, d),
            ffn: b.ffn(&p, d, ff, depth),
            norm3: b.norm(format!("{p}.norm3"), g, d),
        });
    }
    let bridge = cfg
        .use_lalt
        .then(|| b.add("bridge.weight".into(), &[cfg.languages, d, d], Init::Identity));
    let out_w = b.add("output.weight".into(), &[d, cfg.vocab_size], Init::Normal { depth: 1 });
    let out_b = b.add("output.bias".into(), &[cfg.vocab_size], Init::Zeros);
    let ids = ParamIds {
        embed,
        encoder,
        decoder,
        bridge,
        out_w,
        out_b,
    };
    (b.specs, ids)
}

/// Draws parameters for `cfg`. Weights of layer `l` (1-based, encoder and
/// decoder alike) have std `base_std / sqrt(l)`; embeddings and the output
/// projection use `base_std`; gains are 1, biases 0, bridges the identity.
pub fn init_depth_scaled<T: Scalar>(
    specs: &[ParamSpec],
    base_std: f64,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    if !(base_std > 0.0 && base_std.is_finite()) {
        return Err(Error::Config(format!("base_std must be positive, got {base_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(specs.len());
    for s in specs {
        let n: usize = s.shape.iter().product();
        let t = match s.init {
            Init::Normal { depth } => {
                let dist = Normal::new(0.0, base_std / (depth as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
                Tensor::new(&s.shape, data)?
            }
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::full(&s.shape, T::one()),
            Init::Identity => {
                let (g, d) = (s.shape[0], s.shape[1]);
                let mut data = vec![T::zero(); n];
                for k in 0..g {
                    for i in 0..d {
                        data[k * d * d + i * d + i] = T::one();
                    }
                }
                Tensor::new(&s.shape, data)?
            }
        };
        out.push(t);
    }
    Ok(out)
}
