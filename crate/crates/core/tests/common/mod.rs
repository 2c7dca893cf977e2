//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use polyglot_core::model::{DecodeSession, Model, ModelConfig};
use polyglot_core::vocab::EOS;
use polyglot_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Corpus BLEU from nested-loop n-gram counting.
pub fn brute_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hl, mut rl) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += h.len() - n + 1;
            let mut used = vec![false; r.len().saturating_sub(n - 1)];
            for i in 0..=h.len() - n {
                // Clipping by greedy one-to-one assignment of equal n-grams.
                for (j, u) in used.iter_mut().enumerate() {
                    if !*u && h[i..i + n] == r[j..j + n] {
                        *u = true;
                        matches[n - 1] += 1;
                        break;
                    }
                }
            }
        }
    }
    let order = totals.iter().take_while(|&&t| t > 0).count();
    if order == 0 {
        return 0.0;
    }
    let mut logs = 0.0;
    let mut k = 0;
    for n in 0..order {
        let p = if matches[n] == 0 {
            k += 1;
            1.0 / (2f64.powi(k) * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        logs += p.ln();
    }
    let bp = if hl < rl { (1.0 - rl as f64 / hl as f64).exp() } else { 1.0 };
    100.0 * bp * (logs / order as f64).exp()
}

/// Sample Pearson r from raw sums.
pub fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// A decoding tree given by a function from prefix to next-token
/// log-probabilities.
pub struct TreeSession<F: Fn(&[u32]) -> Vec<f64>> {
    vocab: usize,
    rows: Vec<Vec<u32>>,
    table: Vec<f64>,
    dist: F,
}

impl<F: Fn(&[u32]) -> Vec<f64>> TreeSession<F> {
    pub fn new(vocab: usize, dist: F) -> Self {
        let mut s = Self {
            vocab,
            rows: vec![Vec::new()],
            table: Vec::new(),
            dist,
        };
        s.refresh();
        s
    }

    fn refresh(&mut self) {
        self.table = self.rows.iter().flat_map(|p| (self.dist)(p)).collect();
    }
}

impl<F: Fn(&[u32]) -> Vec<f64>> DecodeSession for TreeSession<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn live(&self) -> usize {
        self.rows.len()
    }

    fn log_probs(&self) -> &[f64] {
        &self.table
    }

    fn advance(&mut self, parents: &[usize], tokens: &[u32]) -> Result<()> {
        self.rows = parents
            .iter()
            .zip(tokens)
            .map(|(&p, &t)| {
                let mut r = self.rows[p].clone();
                r.push(t);
                r
            })
            .collect();
        self.refresh();
        Ok(())
    }
}

pub const V: usize = 5;

/// Random normalized distribution over `allowed` tokens, seeded by the prefix.
pub fn random_dist(seed: u64, allowed: &[u32]) -> impl Fn(&[u32]) -> Vec<f64> + '_ {
    move |prefix: &[u32]| {
        let mut h = seed;
        for &t in prefix {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut out = vec![f64::NEG_INFINITY; V];
        let raw: Vec<f64> = allowed.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = raw.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        for (&t, v) in allowed.iter().zip(raw) {
            out[t as usize] = v - z;
        }
        out
    }
}

/// Best `(score, tokens)` over every complete path of the tree, found by
/// enumeration.
pub fn exhaustive(dist: &dyn Fn(&[u32]) -> Vec<f64>, cap: usize, alpha: f64) -> (f64, Vec<u32>) {
    let mut best: Option<(f64, Vec<u32>)> = None;
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let d = dist(&prefix);
        for (tok, &l) in d.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let total = lp + l;
            let (tokens, steps, done) = if tok as u32 == EOS {
                (prefix.clone(), prefix.len() + 1, true)
            } else {
                let mut s = prefix.clone();
                s.push(tok as u32);
                let n = s.len();
                (s, n, n >= cap)
            };
            if done {
                let score = total / ((5.0 + steps as f64) / 6.0).powf(alpha);
                let better = match &best {
                    None => true,
                    Some((b, bt)) => score > *b || (score == *b && tokens < *bt),
                };
                if better {
                    best = Some((score, tokens));
                }
            } else {
                stack.push((tokens, total));
            }
        }
    }
    best.unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng) -> Model<f64> {
    let heads = rng.gen_range(1..3);
    let cfg = ModelConfig {
        d: 4 * heads,
        d_ff: rng.gen_range(4..12),
        heads,
        layers: rng.gen_range(1..3),
        vocab_size: rng.gen_range(10..20),
        languages: 3,
        use_laln: rng.gen(),
        use_lalt: rng.gen(),
        merged_attention: false,
        dropout_residual: 0.0,
        dropout_attention: 0.0,
    };
    let mut m = Model::new(cfg, 0.5, rng.gen()).unwrap();
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

pub fn random_source(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<u32> {
    (0..rng.gen_range(1..6)).map(|_| rng.gen_range(7..vocab as u32)).collect()
}
