//! Language accuracy, win ratio, Pearson correlation and averages.

use crate::error::{Error, Result};
use crate::eval::detect::LanguageDetector;
use crate::lang::LangId;

/// Fraction of hypotheses detected as `expected`; undetermined counts as
/// wrong. An empty list scores 0.
pub fn language_accuracy<D: LanguageDetector + ?Sized, S: AsRef<str>>(
    detector: &D,
    hyps: &[S],
    expected: LangId,
) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    let hits = hyps
        .iter()
        .filter(|h| detector.detect(h.as_ref()).lang() == Some(expected))
        .count();
    hits as f64 / hyps.len() as f64
}

/// Percentage of directions on which `system` strictly beats `reference`.
/// Both lists are `(direction name, BLEU)` and must name the same
/// directions, in any order.
pub fn win_ratio(system: &[(String, f64)], reference: &[(String, f64)]) -> Result<f64> {
    if system.is_empty() || system.len() != reference.len() {
        return Err(Error::Eval(format!(
            "win ratio over {} vs {} directions",
            system.len(),
            reference.len()
        )));
    }
    let mut wins = 0;
    for (name, b) in system {
        let r = reference
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Eval(format!("direction {name} missing from reference")))?;
        if *b > r.1 {
            wins += 1;
        }
    }
    Ok(100.0 * wins as f64 / system.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Eval(format!(
            "correlation needs two equal series of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Eval("correlation undefined for a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Arithmetic mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirs(v: &[f64]) -> Vec<(String, f64)> {
        v.iter().enumerate().map(|(i, &b)| (format!("d{i}"), b)).collect()
    }

    #[test]
    fn win_ratio_cases() {
        let a = dirs(&[10.0, 20.0, 30.0, 40.0]);
        assert_eq!(win_ratio(&a, &a).unwrap(), 0.0);
        let b = dirs(&[11.0, 21.0, 31.0, 39.0]);
        assert_eq!(win_ratio(&b, &a).unwrap(), 75.0);
        assert!(win_ratio(&a, &a[..3]).is_err());
        let mut c = a.clone();
        c[0].0 = "other".into();
        assert!(win_ratio(&c, &a).is_err());
    }

    #[test]
    fn pearson_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let ny: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson(&x, &ny).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 4]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }
}
