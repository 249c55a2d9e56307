//! Head mathematics of the descriptor network: generalized-mean pooling with
//! its analytic gradient, additive angular margin logits and loss, and cosine
//! similarity. Inputs are stored as `f32`; every reduction runs in `f64`.

use crate::error::{Error, Result};
use crate::store::NORM_TOLERANCE;

/// A `c × h × w` post-activation feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Param(format!(
                "feature map shape {channels}x{height}x{width} has an empty axis"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Param(format!(
                "feature map expects {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Param(format!(
                "feature map entries must be finite and non-negative, found {v}"
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let s = self.spatial();
        &self.data[c * s..(c + 1) * s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemParams {
    pub p: f64,
    pub eps: f64,
}

impl Default for GemParams {
    fn default() -> Self {
        GemParams { p: 3.0, eps: 1e-6 }
    }
}

impl GemParams {
    pub fn with_p(p: f64) -> Self {
        GemParams {
            p,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0) || !self.p.is_finite() {
            return Err(Error::Param(format!("GeM exponent p={} must be >= 1", self.p)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Param(format!("GeM eps={} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Generalized-mean pooling: per channel `((1/hw) Σ max(x, eps)^p)^(1/p)`.
pub fn gem_pool(map: &FeatureMap, params: &GemParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = map.spatial() as f64;
    Ok((0..map.channels())
        .map(|c| {
            let mean = map
                .channel(c)
                .iter()
                .map(|&x| f64::from(x).max(params.eps).powf(params.p))
                .sum::<f64>()
                / n;
            mean.powf(1.0 / params.p)
        })
        .collect())
}

/// Gradient of `Σ_c upstream[c] · gem_pool(map)[c]` with respect to every map
/// entry. `p` is held fixed. Entries at or below `eps` get a zero gradient
/// because the clamp is flat there.
///
/// `∂f_c/∂x = (1/hw) · f_c^(1-p) · x^(p-1)`
pub fn gem_pool_grad(map: &FeatureMap, params: &GemParams, upstream: &[f64]) -> Result<Vec<f64>> {
    let pooled = gem_pool(map, params)?;
    if upstream.len() != map.channels() {
        return Err(Error::Param(format!(
            "upstream gradient has {} entries for {} channels",
            upstream.len(),
            map.channels()
        )));
    }
    let n = map.spatial() as f64;
    let p = params.p;
    let mut grad = Vec::with_capacity(map.data().len());
    for (c, (&f, &up)) in pooled.iter().zip(upstream).enumerate() {
        let scale = up * f.powf(1.0 - p) / n;
        grad.extend(map.channel(c).iter().map(|&x| {
            let x = f64::from(x);
            if x > params.eps {
                scale * x.powf(p - 1.0)
            } else {
                0.0
            }
        }));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcMarginParams {
    pub scale: f64,
    /// Additive angular margin, radians.
    pub margin: f64,
    pub num_classes: usize,
    pub dim: usize,
}

impl ArcMarginParams {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        ArcMarginParams {
            scale: 30.0,
            margin: 0.3,
            num_classes,
            dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Param(format!("scale {} must be positive", self.scale)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Param(format!(
                "margin {} must lie in [0, pi/2)",
                self.margin
            )));
        }
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::Param("num_classes and dim must be positive".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn check_unit(v: &[f32], what: &str) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::Norm(format!("{what} has norm {norm}")));
    }
    Ok(())
}

/// Target-class cosine after the additive angular margin, `cos(θ + m)`.
///
/// Past `θ = π − m` the angle would wrap around, so the usual linear
/// fallback `cos θ − m·sin m` applies instead, floored at −1.
fn margin_cosine(cos: f64, margin: f64) -> f64 {
    let threshold = (std::f64::consts::PI - margin).cos();
    if cos > threshold {
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        cos * margin.cos() - sin * margin.sin()
    } else {
        (cos - margin * margin.sin()).max(-1.0)
    }
}

/// Scaled cosine logits with the angular margin applied to the target class.
///
/// `weights` is row-major `num_classes × dim`; the embedding and every weight
/// row must be unit vectors.
pub fn arcmargin_logits(
    embedding: &[f32],
    weights: &[f32],
    target: usize,
    params: &ArcMarginParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    if embedding.len() != params.dim || weights.len() != params.num_classes * params.dim {
        return Err(Error::Param(format!(
            "expected embedding of {} and weights of {}x{}",
            params.dim, params.num_classes, params.dim
        )));
    }
    if target >= params.num_classes {
        return Err(Error::Index {
            index: target,
            len: params.num_classes,
        });
    }
    check_unit(embedding, "embedding")?;
    let mut logits = Vec::with_capacity(params.num_classes);
    for (j, row) in weights.chunks_exact(params.dim).enumerate() {
        check_unit(row, &format!("weight row {j}"))?;
        let cos = dot(embedding, row).clamp(-1.0, 1.0);
        let cos = if j == target {
            margin_cosine(cos, params.margin)
        } else {
            cos
        };
        logits.push(params.scale * cos);
    }
    Ok(logits)
}

/// Mean softmax cross-entropy of the margin logits over a batch.
///
/// `embeddings` is row-major `batch × dim`, one target per row.
pub fn arcmargin_loss(
    embeddings: &[f32],
    weights: &[f32],
    targets: &[usize],
    params: &ArcMarginParams,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptySet);
    }
    if embeddings.len() != targets.len() * params.dim {
        return Err(Error::Param(format!(
            "{} embedding values for {} targets of dim {}",
            embeddings.len(),
            targets.len(),
            params.dim
        )));
    }
    let mut total = 0.0;
    for (row, &target) in embeddings.chunks_exact(params.dim).zip(targets) {
        let logits = arcmargin_logits(row, weights, target, params)?;
        total += cross_entropy(&logits, target);
    }
    Ok(total / targets.len() as f64)
}

/// `logsumexp(logits) − logits[target]`, with the log taken as `ln_1p` of the
/// non-maximal terms so tiny losses keep full precision.
fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let (arg, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    ((max - logits[target]) + rest.ln_1p()).max(0.0)
}

/// Cosine of the angle between two non-zero vectors.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Param(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 {
        return Err(Error::ZeroVector { id: "a".into() });
    }
    if nb == 0.0 {
        return Err(Error::ZeroVector { id: "b".into() });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_channel(values: &[f32]) -> FeatureMap {
        FeatureMap::new(1, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn gem_cubic_hand_value() {
        let out = gem_pool(&single_channel(&[1.0, 2.0, 3.0, 4.0]), &GemParams::with_p(3.0)).unwrap();
        assert!((out[0] - 25f64.cbrt()).abs() < 1e-12);
        assert!((out[0] - 2.924).abs() < 1e-3);
    }

    #[test]
    fn gem_p1_is_mean_and_p64_approaches_max() {
        let map = single_channel(&[0.1, 0.9]);
        let mean = gem_pool(&map, &GemParams::with_p(1.0)).unwrap()[0];
        assert!((mean - 0.5).abs() < 1e-7);
        let hi = gem_pool(&map, &GemParams::with_p(64.0)).unwrap()[0];
        assert!((0.9 - hi) / 0.9 < 0.02);
    }

    #[test]
    fn gem_rejects_small_p() {
        let map = single_channel(&[1.0]);
        assert!(matches!(gem_pool(&map, &GemParams::with_p(0.5)), Err(Error::Param(_))));
    }

    #[test]
    fn feature_map_rejects_negative_entries() {
        assert!(FeatureMap::new(1, 1, 2, vec![1.0, -0.5]).is_err());
        assert!(FeatureMap::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn gem_grad_p1_is_mean_pool_gradient() {
        let map = FeatureMap::new(2, 2, 2, (1..=8).map(|v| v as f32).collect()).unwrap();
        let g = gem_pool_grad(&map, &GemParams::with_p(1.0), &[2.0, -1.0]).unwrap();
        for v in &g[..4] {
            assert!((v - 0.5).abs() < 1e-12);
        }
        for v in &g[4..] {
            assert!((v + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gem_grad_uniform_channel_is_uniform() {
        let map = FeatureMap::new(1, 3, 3, vec![0.7; 9]).unwrap();
        let g = gem_pool_grad(&map, &GemParams::default(), &[1.0]).unwrap();
        assert!(g.iter().all(|v| (v - g[0]).abs() < 1e-15));
        // f = x for a constant channel, so each entry carries 1/hw
        assert!((g[0] - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn arcmargin_self_match_target_logit() {
        let w = [1.0f32, 0.0, 0.0, 1.0];
        let params = ArcMarginParams::new(2, 2);
        let logits = arcmargin_logits(&[1.0, 0.0], &w, 0, &params).unwrap();
        assert!((logits[0] - 30.0 * 0.3f64.cos()).abs() < 1e-12);
        assert!((logits[0] - 28.660).abs() < 1e-3);
        // orthogonal non-target row
        assert_eq!(logits[1], 0.0);
    }

    #[test]
    fn arcmargin_input_errors() {
        let params = ArcMarginParams::new(2, 2);
        let w = [1.0f32, 0.0, 0.0, 1.0];
        assert!(matches!(
            arcmargin_logits(&[2.0, 0.0], &w, 0, &params),
            Err(Error::Norm(_))
        ));
        assert!(matches!(
            arcmargin_logits(&[1.0, 0.0], &w, 2, &params),
            Err(Error::Index { .. })
        ));
        let bad = ArcMarginParams {
            margin: 2.0,
            ..params
        };
        assert!(matches!(
            arcmargin_logits(&[1.0, 0.0], &w, 0, &bad),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn margin_fallback_stays_bounded() {
        // target anti-parallel to the embedding, deep in the fallback branch
        let params = ArcMarginParams::new(1, 2);
        let logits = arcmargin_logits(&[1.0, 0.0], &[-1.0, 0.0], 0, &params).unwrap();
        assert!(logits[0] >= -params.scale);
        assert!(logits[0] <= -params.scale * (1.0 - 1e-12));
    }

    #[test]
    fn two_class_loss_matches_scalar_softmax() {
        let w = [1.0f32, 0.0, 0.0, 1.0];
        let mut params = ArcMarginParams::new(2, 2);
        params.margin = 0.0;
        let loss = arcmargin_loss(&[1.0, 0.0], &w, &[0], &params).unwrap();
        // -log(e^30 / (e^30 + 1)) = log1p(e^-30)
        let expected = (-30f64).exp().ln_1p();
        assert!((loss - expected).abs() / expected < 1e-12);
        assert!((loss - 9.36e-14).abs() < 0.01e-14);

        params.margin = 0.3;
        assert!(arcmargin_loss(&[1.0, 0.0], &w, &[0], &params).unwrap() > loss);
    }

    #[test]
    fn batch_of_identical_rows_equals_single_row() {
        let w = [0.6f32, 0.8, 0.8, -0.6];
        let params = ArcMarginParams::new(2, 2);
        let single = arcmargin_loss(&[1.0, 0.0], &w, &[1], &params).unwrap();
        let double = arcmargin_loss(&[1.0, 0.0, 1.0, 0.0], &w, &[1, 1], &params).unwrap();
        assert!((single - double).abs() < 1e-15);
        assert!(matches!(
            arcmargin_loss(&[], &w, &[], &params),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-7);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-7);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c - 0.70711).abs() < 1e-5);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroVector { .. })
        ));
    }
}
