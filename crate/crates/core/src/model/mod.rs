//! Tag-prefixed Transformer encoder-decoder with optional per-language layer
//! normalization (LALN) and per-language encoder-to-decoder bridge (LALT).

use polyglot_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::lang::LangId;
use crate::vocab::RESERVED;

mod config;
mod forward;
mod infer;
mod params;

pub use config::{param_count, DeltaAccounting, ModelConfig, ParamCount};
pub use forward::{sinusoid, Forward};
pub use infer::{DecodeSession, ModelSession};
pub use params::{
    init_depth_scaled, layout, AttnIds, DecoderLayerIds, EncoderLayerIds, FfnIds, NormIds,
    ParamIds, ParamSpec,
};

/// Vocabulary id of the `<2X>` tag for `lang`.
pub fn tag_id(lang: LangId) -> u32 {
    (RESERVED.len() + lang.0) as u32
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    ids: ParamIds,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, base_std: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size < RESERVED.len() + config.languages {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold the reserved ids and {} tags",
                config.vocab_size, config.languages
            )));
        }
        let (specs, ids) = layout(&config);
        let params = init_depth_scaled(&specs, base_std, seed)?;
        Ok(Self {
            config,
            specs,
            ids,
            params,
        })
    }

    /// Model from tensors listed in layout order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (specs, ids) = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    s.shape
                )));
            }
        }
        Ok(Self {
            config,
            specs,
            ids,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.specs.iter().position(|s| s.name == name)?;
        Some(&mut self.params[i])
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            specs: self.specs.clone(),
            ids: self.ids.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces the dropout rates.
    pub fn set_dropout(&mut self, residual: f64, attention: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout_residual = residual;
        cfg.dropout_attention = attention;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    fn check_lang(&self, lang: LangId) -> Result<()> {
        if lang.0 >= self.config.languages {
            return Err(Error::UnknownLanguage(lang.to_string()));
        }
        Ok(())
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Sequence(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Norm-table row used for sentences translated into `lang`.
    fn norm_group(&self, lang: LangId) -> usize {
        if self.config.use_laln {
            lang.0
        } else {
            0
        }
    }
}
