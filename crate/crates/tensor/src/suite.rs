//! Randomized finite-difference checks covering every differentiable op.

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{AttentionLayout, Graph, Var};
use crate::tensor::Tensor;

/// Small deterministic generator so the suite does not depend on `rand`.
struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next() >> 11) as f64 / (1u64 << 53) as f64)
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next() % (hi - lo) as u64) as usize
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Values bounded away from zero (for ops with a kink at 0).
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v = self.uniform(0.1, 1.0);
                if self.next().is_multiple_of(2) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn mask(&mut self, n: usize, keep: f64) -> Vec<f64> {
        (0..n)
            .map(|_| if self.uniform(0.0, 1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

/// Result of checking one op on one random configuration.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub op: &'static str,
    pub config: String,
    pub report: GradCheckReport,
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn case(rng: &mut SplitMix, op: &'static str) -> (String, Vec<Tensor<f64>>, Builder) {
    match op {
        "matmul" => {
            let (m, k, n) = (rng.range(1, 5), rng.range(1, 5), rng.range(1, 5));
            let ins = vec![rng.tensor(&[m, k]), rng.tensor(&[k, n])];
            (format!("{m}x{k} * {k}x{n}"), ins, Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        "add" => {
            let (m, n) = (rng.range(1, 5), rng.range(1, 5));
            let ins = vec![rng.tensor(&[m, n]), rng.tensor(&[m, n])];
            (format!("{m}x{n}"), ins, Box::new(|g, v| g.add(v[0], v[1])))
        }
        "add_row" => {
            let (m, n) = (rng.range(1, 5), rng.range(1, 5));
            let ins = vec![rng.tensor(&[m, n]), rng.tensor(&[n])];
            (format!("{m}x{n}"), ins, Box::new(|g, v| g.add_row(v[0], v[1])))
        }
        "scale" => {
            let (m, n) = (rng.range(1, 5), rng.range(1, 5));
            let c = rng.uniform(-2.0, 2.0);
            let ins = vec![rng.tensor(&[m, n])];
            (format!("{m}x{n} by {c:.3}"), ins, Box::new(move |g, v| Ok(g.scale(v[0], c))))
        }
        "relu" => {
            let (m, n) = (rng.range(1, 5), rng.range(1, 5));
            let ins = vec![rng.off_zero(&[m, n])];
            (format!("{m}x{n}"), ins, Box::new(|g, v| Ok(g.relu(v[0]))))
        }
        "dropout" => {
            let (m, n) = (rng.range(1, 5), rng.range(1, 5));
            let mask = rng.mask(m * n, 0.7);
            let ins = vec![rng.tensor(&[m, n])];
            (
                format!("{m}x{n}"),
                ins,
                Box::new(move |g, v| g.dropout(v[0], mask.clone())),
            )
        }
        "softmax" => {
            let (m, n) = (rng.range(1, 5), rng.range(1, 7));
            let ins = vec![rng.tensor(&[m, n])];
            (format!("{m}x{n}"), ins, Box::new(|g, v| Ok(g.softmax(v[0]))))
        }
        "layer_norm" => {
            let (m, d) = (rng.range(1, 4), rng.range(2, 8));
            let ins = vec![rng.tensor(&[m, d]), rng.tensor(&[d]), rng.tensor(&[d])];
            (
                format!("{m}x{d}"),
                ins,
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
            )
        }
        "layer_norm_grouped" => {
            let (m, d, groups) = (rng.range(2, 5), rng.range(2, 6), rng.range(1, 4));
            let rows: Vec<usize> = (0..m).map(|_| rng.range(0, groups)).collect();
            let ins = vec![
                rng.tensor(&[m, d]),
                rng.tensor(&[groups, d]),
                rng.tensor(&[groups, d]),
            ];
            (
                format!("{m}x{d}, {groups} groups {rows:?}"),
                ins,
                Box::new(move |g, v| g.layer_norm_grouped(v[0], v[1], v[2], rows.clone())),
            )
        }
        "embedding" => {
            let (vocab, d, n) = (rng.range(2, 6), rng.range(1, 5), rng.range(1, 6));
            let ids: Vec<usize> = (0..n).map(|_| rng.range(0, vocab)).collect();
            let ins = vec![rng.tensor(&[vocab, d])];
            (
                format!("{vocab}x{d} ids {ids:?}"),
                ins,
                Box::new(move |g, v| g.embedding(v[0], &ids)),
            )
        }
        "grouped_linear" => {
            let (n, d, e, groups) = (rng.range(1, 5), rng.range(1, 4), rng.range(1, 4), rng.range(1, 4));
            let rows: Vec<usize> = (0..n).map(|_| rng.range(0, groups)).collect();
            let ins = vec![rng.tensor(&[n, d]), rng.tensor(&[groups, d, e])];
            (
                format!("{n}x{d} by {groups}x{d}x{e} {rows:?}"),
                ins,
                Box::new(move |g, v| g.grouped_linear(v[0], v[1], rows.clone())),
            )
        }
        "attention" => {
            let heads = rng.range(1, 3);
            let d = heads * rng.range(1, 3);
            let batch = rng.range(1, 3);
            let q_len = rng.range(1, 4);
            let causal = rng.next().is_multiple_of(2);
            let k_len = if causal { q_len } else { rng.range(1, 4) };
            let q_valid: Vec<usize> = (0..batch).map(|_| rng.range(1, q_len + 1)).collect();
            let k_valid: Vec<usize> = (0..batch).map(|_| rng.range(1, k_len + 1)).collect();
            let with_drop = rng.next().is_multiple_of(2);
            let drop = with_drop.then(|| rng.mask(batch * q_len * heads * k_len, 0.8));
            let layout = AttentionLayout {
                batch,
                q_len,
                k_len,
                heads,
                q_valid,
                k_valid,
                causal,
            };
            let ins = vec![
                rng.tensor(&[batch * q_len, d]),
                rng.tensor(&[batch * k_len, d]),
                rng.tensor(&[batch * k_len, d]),
            ];
            (
                format!("{layout:?} dropout={with_drop}"),
                ins,
                Box::new(move |g, v| g.attention(v[0], v[1], v[2], layout.clone(), drop.clone())),
            )
        }
        "smoothed_cross_entropy" => {
            let (n, vocab) = (rng.range(1, 5), rng.range(2, 7));
            let gold: Vec<Option<usize>> = (0..n)
                .map(|i| (i == 0 || !rng.next().is_multiple_of(4)).then(|| rng.range(0, vocab)))
                .collect();
            let eps = [0.0, 0.1, 0.3][rng.range(0, 3)];
            let ins = vec![rng.tensor(&[n, vocab])];
            (
                format!("{n}x{vocab} eps {eps} gold {gold:?}"),
                ins,
                Box::new(move |g, v| g.smoothed_cross_entropy(v[0], &gold, eps)),
            )
        }
        "weighted_sum" => {
            let n = rng.range(1, 8);
            let w: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let ins = vec![rng.tensor(&[n])];
            (
                format!("{n}"),
                ins,
                Box::new(move |g, v| g.weighted_sum(v[0], w.clone())),
            )
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// Every differentiable op exposed by [`Graph`].
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "scale",
    "relu",
    "dropout",
    "softmax",
    "layer_norm",
    "layer_norm_grouped",
    "embedding",
    "grouped_linear",
    "attention",
    "smoothed_cross_entropy",
    "weighted_sum",
];

/// Runs `configs` random configurations of every op at the given tolerance.
pub fn run_gradient_suite(configs: usize, tolerance: f64, seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = SplitMix(seed);
    let mut out = Vec::new();
    for &op in DIFFERENTIABLE_OPS {
        for _ in 0..configs {
            let (config, inputs, build) = case(&mut rng, op);
            let report = grad_check(&inputs, &*build, tolerance)?;
            out.push(SuiteCase { op, config, report });
        }
    }
    Ok(out)
}
