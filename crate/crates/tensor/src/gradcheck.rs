use std::fmt;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, SCALE_FLOOR)`
/// so that entries whose true derivative is ~0 are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct WorstElement {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub tolerance: f64,
    pub checked: usize,
    pub worst: Option<WorstElement>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "FAIL" };
        write!(f, "{verdict}: {} elements, tol {:e}", self.checked, self.tolerance)?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst input {} index {}: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                w.input, w.index, w.analytic, w.numeric, w.rel_error
            )?;
        }
        Ok(())
    }
}

/// Compares analytic gradients of `build` against central finite differences.
///
/// `build` receives the graph and one parameter per input. A non-scalar
/// output is reduced with fixed pseudo-random weights so every output element
/// contributes.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let n = g.value(out).numel();
        let loss = if n == 1 {
            out
        } else {
            g.weighted_sum(out, reduction_weights(n))?
        };
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: Option<WorstElement> = None;
    let mut checked = 0;
    let mut values = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let (plus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig - FD_STEP;
            let (minus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(SCALE_FLOOR);
            checked += 1;
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(WorstElement {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    let passed = worst.as_ref().is_none_or(|w| w.rel_error <= tolerance);
    Ok(GradCheckReport {
        passed,
        tolerance,
        checked,
        worst,
    })
}

fn reduction_weights(n: usize) -> Vec<f64> {
    // Deterministic, non-degenerate weights in [-1, 1].
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}
