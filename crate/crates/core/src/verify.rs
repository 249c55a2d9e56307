//! Numerical self-checks of the descriptor head, run by `landmark check-grad`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::descriptor_math::{
    arcmargin_logits, arcmargin_loss, gem_pool, gem_pool_grad, ArcMarginParams, FeatureMap, GemParams,
};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub observed: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckParams {
    pub seed: u64,
    pub maps: usize,
    pub max_side: usize,
    pub step: f64,
    pub batches: usize,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            seed: 0,
            maps: 20,
            max_side: 8,
            step: 1e-3,
            batches: 100,
        }
    }
}

fn random_map(rng: &mut ChaCha8Rng, max_side: usize, lo: f32) -> FeatureMap {
    let (c, h, w) = (
        rng.random_range(1..=max_side),
        rng.random_range(1..=max_side),
        rng.random_range(1..=max_side),
    );
    let data = (0..c * h * w).map(|_| rng.random_range(lo..1.0f32)).collect();
    FeatureMap::new(c, h, w, data).expect("valid map")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| (x / n) as f32));
    }
    out
}

/// Worst relative error between the analytic GeM gradient and central
/// differences. The perturbed entry is stored as `f32`, so the difference is
/// divided by the step that was actually taken. Entries start at 0.1: below
/// that the truncation error of the difference quotient itself, about
/// `h²/(3x²)`, approaches the tolerance.
pub fn gem_gradient_error(params: &CheckParams) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let gem = GemParams::default();
    let mut worst = 0.0f64;
    for _ in 0..params.maps {
        let map = random_map(&mut rng, params.max_side, 0.1);
        let upstream: Vec<f64> = (0..map.channels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = gem_pool_grad(&map, &gem, &upstream)?;
        let loss = |m: &FeatureMap| -> Result<f64> {
            Ok(gem_pool(m, &gem)?.iter().zip(&upstream).map(|(f, u)| f * u).sum())
        };
        for (i, &a) in analytic.iter().enumerate() {
            let x = map.data()[i];
            let plus = (f64::from(x) + params.step) as f32;
            let minus = (f64::from(x) - params.step) as f32;
            let mut data = map.data().to_vec();
            data[i] = plus;
            let lp = loss(&FeatureMap::new(map.channels(), map.height(), map.width(), data.clone())?)?;
            data[i] = minus;
            let lm = loss(&FeatureMap::new(map.channels(), map.height(), map.width(), data)?)?;
            let numeric = (lp - lm) / (f64::from(plus) - f64::from(minus));
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Worst gap between GeM at `p = 1` and mean pooling.
pub fn gem_mean_error(params: &CheckParams) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 1);
    let mut worst = 0.0f64;
    for _ in 0..params.maps {
        let map = random_map(&mut rng, params.max_side, 0.0);
        let pooled = gem_pool(&map, &GemParams::with_p(1.0))?;
        for (c, g) in pooled.iter().enumerate() {
            let ch = map.channel(c);
            let mean = ch.iter().map(|&x| f64::from(x).max(1e-6)).sum::<f64>() / ch.len() as f64;
            worst = worst.max((g - mean).abs());
        }
    }
    Ok(worst)
}

/// Worst relative shortfall of GeM at `p = 64` against max pooling.
///
/// GeM at large `p` is bounded below by `max · N^(-1/p)`, which stays within
/// 2% of the max only for `N ≤ 3` spatial positions, so maps here use at most
/// three positions.
pub fn gem_max_error(params: &CheckParams) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 2);
    let mut worst = 0.0f64;
    for _ in 0..params.maps {
        let c = rng.random_range(1..=params.max_side);
        let n = rng.random_range(1..=3);
        let data = (0..c * n).map(|_| rng.random_range(0.01..1.0f32)).collect();
        let map = FeatureMap::new(c, 1, n, data)?;
        let pooled = gem_pool(&map, &GemParams::with_p(64.0))?;
        for (ch, g) in pooled.iter().enumerate() {
            let max = map.channel(ch).iter().fold(0.0f64, |m, &x| m.max(f64::from(x)));
            worst = worst.max((max - g).abs() / max);
        }
    }
    Ok(worst)
}

/// Number of logits that differ from `s·cos` when the margin is zero.
pub fn arcmargin_zero_mismatches(params: &CheckParams) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 3);
    let mut mismatches = 0;
    for _ in 0..params.batches {
        let (classes, dim) = (rng.random_range(2..=16), rng.random_range(2..=32));
        let weights = unit_rows(&mut rng, classes, dim);
        let emb = unit_rows(&mut rng, 1, dim);
        let target = rng.random_range(0..classes);
        let mut p = ArcMarginParams::new(classes, dim);
        p.margin = 0.0;
        let logits = arcmargin_logits(&emb, &weights, target, &p)?;
        for (j, row) in weights.chunks_exact(dim).enumerate() {
            let cos: f64 = emb.iter().zip(row).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            if logits[j] != p.scale * cos.clamp(-1.0, 1.0) {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

/// Batches where the margin lowered the loss; targets are the argmax classes.
pub fn arcmargin_monotonicity_violations(params: &CheckParams) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 4);
    let mut violations = 0;
    for _ in 0..params.batches {
        let (classes, dim, batch) = (
            rng.random_range(2..=16),
            rng.random_range(2..=32),
            rng.random_range(1..=8),
        );
        let weights = unit_rows(&mut rng, classes, dim);
        let emb = unit_rows(&mut rng, batch, dim);
        let targets: Vec<usize> = emb
            .chunks_exact(dim)
            .map(|e| {
                let cos = |j: usize| -> f64 {
                    e.iter()
                        .zip(&weights[j * dim..(j + 1) * dim])
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum()
                };
                (0..classes).fold(0, |best, j| if cos(j) > cos(best) { j } else { best })
            })
            .collect();
        let mut p = ArcMarginParams::new(classes, dim);
        let with_margin = arcmargin_loss(&emb, &weights, &targets, &p)?;
        p.margin = 0.0;
        let without = arcmargin_loss(&emb, &weights, &targets, &p)?;
        if with_margin < without {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Runs every check at its tolerance.
pub fn run_checks(params: &CheckParams) -> Result<Vec<CheckOutcome>> {
    let outcome = |name, observed: f64, tolerance: f64, passed: bool| CheckOutcome {
        name,
        passed,
        observed,
        tolerance,
    };
    let grad = gem_gradient_error(params)?;
    let mean = gem_mean_error(params)?;
    let max = gem_max_error(params)?;
    let zero = arcmargin_zero_mismatches(params)?;
    let mono = arcmargin_monotonicity_violations(params)?;
    Ok(vec![
        outcome("gem_gradient", grad, 1e-4, grad < 1e-4),
        outcome("gem_p1_mean", mean, 1e-7, mean <= 1e-7),
        outcome("gem_p64_max", max, 0.02, max <= 0.02),
        outcome("arcmargin_m0_exact", zero as f64, 0.0, zero == 0),
        outcome("arcmargin_margin_raises_loss", mono as f64, 0.0, mono == 0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_checks_pass() {
        let params = CheckParams {
            maps: 5,
            batches: 10,
            ..Default::default()
        };
        for c in run_checks(&params).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
