//! Adam with inverse-square-root warmup, label smoothing and token-budget
//! batching.

use std::io::Write;
use std::time::Instant;

use polyglot_tensor::{check_finite, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerMoments};
use crate::corpus::TrainingInstance;
use crate::error::{Error, Result};
use crate::model::Model;

/// `lr_scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, d: usize, warmup: u64, lr_scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    lr_scale * (d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: u64,
    /// Target tokens per batch.
    pub batch_tokens: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            batch_tokens: 2000,
            warmup: 4000,
            lr_scale: 0.5,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            checkpoint_every: 500,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 || self.warmup == 0 {
            return Err(Error::Config("batch_tokens and warmup must be positive".into()));
        }
        if !(self.lr_scale >= 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config(format!("lr_scale {} must be non-negative", self.lr_scale)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update. Missing gradients count as zero. Gradients
    /// are rescaled to global norm `clip_norm` when larger. Returns the
    /// pre-clipping norm.
    pub fn update(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<Vec<T>>],
        lr: f64,
        clip_norm: f64,
    ) -> f64 {
        self.step += 1;
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (ob1, ob2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let step_size = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(ADAM_EPS);
        let clip = T::of(clip);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_deref();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j] * clip);
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                *w = *w - step_size * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Groups instance indices into batches of at most `budget` target tokens
/// (a single longer sentence forms its own batch). Sentences of similar
/// length are batched together; batch order is shuffled.
pub fn token_batches(
    instances: &[TrainingInstance],
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| instances[i].target.len());
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = instances[i].target.len();
        if !cur.is_empty() && tokens + n > budget {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            adam,
            cfg,
            rng,
        })
    }

    /// Resumes from a checkpoint, restoring optimizer moments when present.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ckpt.to_model()?, cfg)?;
        t.adam.step = ckpt.step;
        if let Some(opt) = &ckpt.optimizer {
            t.adam.m = opt.m.clone();
            t.adam.v = opt.v.clone();
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            self.adam.step,
            Some(OptimizerMoments {
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
        )
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Forward, smoothed cross-entropy over non-pad targets, backward and an
    /// Adam update.
    pub fn train_step(&mut self, batch: &[&TrainingInstance]) -> Result<StepStats> {
        let start = Instant::now();
        let step = self.adam.step + 1;
        let mut f = self.model.forward(batch, Some(&mut self.rng))?;
        let loss_var = f
            .graph
            .smoothed_cross_entropy(f.logits, &f.gold, self.cfg.label_smoothing)?;
        let loss = f.graph.value(loss_var).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        f.graph.backward(loss_var)?;
        let grads: Vec<Option<Vec<f32>>> =
            f.params.iter().map(|&v| f.graph.take_grad(v)).collect();
        drop(f);
        let lr = lr_at(step, self.model.config().d, self.cfg.warmup, self.cfg.lr_scale);
        let grad_norm = self
            .adam
            .update(self.model.params_mut(), &grads, lr, self.cfg.clip_norm);
        for (spec, p) in self.model.specs().iter().zip(self.model.params()) {
            check_finite(p.data(), &spec.name).map_err(|e| Error::NonFinite {
                step,
                detail: e.to_string(),
            })?;
        }
        let tokens = batch.iter().map(|i| i.target.len()).sum();
        Ok(StepStats {
            step,
            loss,
            lr,
            tokens,
            grad_norm,
            tokens_per_sec: tokens as f64 / start.elapsed().as_secs_f64().max(1e-9),
        })
    }

    /// Trains for `steps` updates over repeated shuffled passes of `data`,
    /// writing one JSON record per step to `log`. `on_step` runs after every
    /// update and stops training by returning `false`.
    pub fn run(
        &mut self,
        data: &[TrainingInstance],
        steps: u64,
        mut log: Option<&mut dyn Write>,
        mut on_step: impl FnMut(&mut Trainer, &StepStats) -> Result<bool>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("no training instances".into()));
        }
        let mut done = 0;
        while done < steps {
            let batches = token_batches(data, self.cfg.batch_tokens, &mut self.rng);
            for idx in batches {
                if done >= steps {
                    break;
                }
                let batch: Vec<&TrainingInstance> = idx.iter().map(|&i| &data[i]).collect();
                let stats = self.train_step(&batch)?;
                done += 1;
                if let Some(w) = log.as_deref_mut() {
                    write_record(w, &stats)?;
                }
                if !on_step(self, &stats)? {
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}

pub fn write_record<S: Serialize>(w: &mut dyn Write, record: &S) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(w, "{line}").map_err(|source| Error::Io {
        path: "<log>".into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let peak = lr_at(4000, 512, 4000, 0.5);
        assert!((peak - 3.494e-4).abs() < 1e-6);
        assert!((peak - 0.5 / (512f64.sqrt() * 4000f64.sqrt())).abs() < 1e-15);
        assert!(lr_at(2000, 512, 4000, 0.5) < peak);
        assert!(lr_at(16000, 512, 4000, 0.5) < peak);
        assert!(lr_at(3999, 512, 4000, 0.5) < lr_at(4000, 512, 4000, 0.5));
        assert!(lr_at(4001, 512, 4000, 0.5) < lr_at(4000, 512, 4000, 0.5));
    }

    #[test]
    fn zero_gradient_update_is_identity() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p[0].data().to_vec();
        let mut adam = Adam::new(&p);
        for _ in 0..3 {
            adam.update(&mut p, &[Some(vec![0.0; 3])], 0.1, 1.0);
        }
        assert_eq!(p[0].data(), &before[..]);
    }
}
