//! Training objectives: class-weighted BCE, cosine similarity, dense
//! pixel-level contrastive loss and teacher-student consistency.
//!
//! Every loss comes in a value form and a `_with_grad` form returning the
//! analytic gradient with respect to its inputs. Everything here is `f64`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::augment::WeightMap;
use crate::error::{Error, Result};
use crate::image::DefectMask;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature of the contrastive loss.
    pub tau: f64,
    /// Probabilities are clamped to `[clamp_eps, 1 - clamp_eps]`.
    pub clamp_eps: f64,
    /// Pixels sampled per image for the contrastive loss.
    pub pixel_sample_budget: usize,
    /// Whether the positive pair also appears in the softmax denominator.
    pub include_positive: bool,
    pub lambda_bce: f64,
    pub lambda_clr: f64,
    pub lambda_cons: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            clamp_eps: 1e-6,
            pixel_sample_budget: 64,
            include_positive: true,
            lambda_bce: 1.0,
            lambda_clr: 0.0,
            lambda_cons: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::param(format!("clamp_eps must be in (0, 0.5), got {}", self.clamp_eps)));
        }
        if self.pixel_sample_budget < 1 {
            return Err(Error::param("pixel_sample_budget must be >= 1"));
        }
        for (name, v) in [
            ("lambda_bce", self.lambda_bce),
            ("lambda_clr", self.lambda_clr),
            ("lambda_cons", self.lambda_cons),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

fn clamp_prob(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, false)
    } else if p > 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (p, true)
    }
}

fn wbce_core(prob: &[f64], labels: &[u8], weights: &[f64], eps: f64, mut grad: Option<&mut [f64]>) -> f64 {
    let n = prob.len() as f64;
    let mut acc = 0.0;
    for i in 0..prob.len() {
        let (p, active) = clamp_prob(prob[i], eps);
        let y = labels[i] as f64;
        let w = weights[i];
        acc += w * (-y * p.ln() - (1.0 - y) * (1.0 - p).ln());
        if let Some(g) = grad.as_deref_mut() {
            g[i] = if active { w * (-y / p + (1.0 - y) / (1.0 - p)) / n } else { 0.0 };
        }
    }
    acc / n
}

fn check_bce(prob: &[f64], mask: &DefectMask, weights: &WeightMap) -> Result<()> {
    check_len("probabilities vs mask", prob.len(), mask.labels.len())?;
    check_len("weights vs mask", weights.weights.len(), mask.labels.len())?;
    if (weights.height, weights.width) != mask.shape() {
        return Err(Error::shape(format!(
            "weight map {}x{} vs mask {}x{}",
            weights.height, weights.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// `(1/N) sum w_i [-y_i log p_i - (1 - y_i) log(1 - p_i)]` with clamped `p`.
pub fn weighted_bce(prob: &[f64], mask: &DefectMask, weights: &WeightMap, eps: f64) -> Result<f64> {
    check_bce(prob, mask, weights)?;
    Ok(wbce_core(prob, &mask.labels, &weights.weights, eps, None))
}

/// Weighted BCE and its gradient with respect to `prob`.
pub fn weighted_bce_with_grad(
    prob: &[f64],
    mask: &DefectMask,
    weights: &WeightMap,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    check_bce(prob, mask, weights)?;
    let mut g = vec![0.0; prob.len()];
    let v = wbce_core(prob, &mask.labels, &weights.weights, eps, Some(&mut g));
    Ok((v, g))
}

/// Per-pixel embedding vectors of one image, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMap {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape(format!("{} values do not split into {dim}-vectors", data.len())));
        }
        Ok(Self { dim, data })
    }

    /// Transpose a channel-major `(dim, n_pixels)` buffer.
    pub fn from_channel_major(dim: usize, channels: &[f32]) -> Self {
        let n = channels.len() / dim;
        let mut data = vec![0.0; channels.len()];
        for c in 0..dim {
            for p in 0..n {
                data[p * dim + c] = channels[c * n + p] as f64;
            }
        }
        Self { dim, data }
    }

    pub fn n_pixels(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct ClrOutput {
    pub loss: f64,
    /// Gradient for each image of `embeds`, pixel-major like the input.
    pub grad_embeds: Vec<Vec<f64>>,
    pub grad_aug: Vec<Vec<f64>>,
}

fn check_clr(embeds: &[EmbeddingMap], aug: &[EmbeddingMap]) -> Result<()> {
    if embeds.len() != aug.len() {
        return Err(Error::shape(format!(
            "{} embedding maps vs {} augmented maps",
            embeds.len(),
            aug.len()
        )));
    }
    if embeds.len() < 2 {
        return Err(Error::config("dense contrastive loss requires >=2 samples per batch"));
    }
    let dim = embeds[0].dim;
    for (e, a) in embeds.iter().zip(aug) {
        if e.dim != dim || a.dim != dim {
            return Err(Error::shape("embedding dimensions differ within the batch"));
        }
        check_len("embeddings vs augmented embeddings", e.data.len(), a.data.len())?;
        if e.n_pixels() == 0 {
            return Err(Error::shape("empty embedding map"));
        }
    }
    Ok(())
}

/// Pixels per image that enter the loss: all of them when the budget covers
/// the image, otherwise a seeded uniform sample without replacement.
fn sample_pixels(n: usize, budget: usize, seed: u64) -> Vec<usize> {
    if budget >= n {
        return (0..n).collect();
    }
    let mut r = rng::seeded(seed);
    index::sample(&mut r, n, budget).into_vec()
}

struct UnitVec {
    unit: Vec<f64>,
    norm: f64,
}

fn unit(v: &[f64]) -> UnitVec {
    let n = norm(v);
    let unit = if n > 0.0 { v.iter().map(|x| x / n).collect() } else { vec![0.0; v.len()] };
    UnitVec { unit, norm: n }
}

/// Dense contrastive loss. Anchors are sampled pixels of `embeds`; the
/// positive of an anchor is the same pixel of its augmented view and the
/// negatives are sampled pixels of the augmented views of the other images.
pub fn dense_clr(embeds: &[EmbeddingMap], aug: &[EmbeddingMap], cfg: &LossConfig, seed: u64) -> Result<f64> {
    Ok(dense_clr_impl(embeds, aug, cfg, seed, false)?.loss)
}

pub fn dense_clr_with_grad(
    embeds: &[EmbeddingMap],
    aug: &[EmbeddingMap],
    cfg: &LossConfig,
    seed: u64,
) -> Result<ClrOutput> {
    dense_clr_impl(embeds, aug, cfg, seed, true)
}

fn dense_clr_impl(
    embeds: &[EmbeddingMap],
    aug: &[EmbeddingMap],
    cfg: &LossConfig,
    seed: u64,
    want_grad: bool,
) -> Result<ClrOutput> {
    cfg.validate()?;
    check_clr(embeds, aug)?;
    let dim = embeds[0].dim;
    let tau = cfg.tau;
    let samples: Vec<Vec<usize>> = embeds
        .iter()
        .enumerate()
        .map(|(b, e)| sample_pixels(e.n_pixels(), cfg.pixel_sample_budget, rng::derive(seed, b as u64)))
        .collect();
    let anchors: Vec<Vec<UnitVec>> = samples
        .iter()
        .zip(embeds)
        .map(|(s, e)| s.iter().map(|&p| unit(e.pixel(p))).collect())
        .collect();
    let views: Vec<Vec<UnitVec>> = samples
        .iter()
        .zip(aug)
        .map(|(s, a)| s.iter().map(|&p| unit(a.pixel(p))).collect())
        .collect();
    // Gradients with respect to the unit vectors, projected at the end.
    let mut g_anchor: Vec<Vec<Vec<f64>>> = anchors.iter().map(|v| vec![vec![0.0; dim]; v.len()]).collect();
    let mut g_view: Vec<Vec<Vec<f64>>> = views.iter().map(|v| vec![vec![0.0; dim]; v.len()]).collect();
    let n_anchors: usize = anchors.iter().map(Vec::len).sum();
    let inv_m = 1.0 / n_anchors as f64;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
    let mut total = 0.0;
    // (image, index) of each denominator term, positive first when included.
    let mut terms: Vec<(usize, usize)> = Vec::new();
    let mut logits: Vec<f64> = Vec::new();
    for b in 0..anchors.len() {
        for k in 0..anchors[b].len() {
            let a = &anchors[b][k].unit;
            let pos_logit = dot(a, &views[b][k].unit) / tau;
            terms.clear();
            logits.clear();
            if cfg.include_positive {
                terms.push((b, k));
                logits.push(pos_logit);
            }
            for (ob, ov) in views.iter().enumerate() {
                if ob == b {
                    continue;
                }
                for (j, v) in ov.iter().enumerate() {
                    terms.push((ob, j));
                    logits.push(dot(a, &v.unit) / tau);
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - pos_logit;
            if !want_grad {
                continue;
            }
            // d loss_i / d logit_j = softmax_j - [j is positive]
            let mut coeff_pos = -1.0;
            for (t, &(ob, j)) in terms.iter().enumerate() {
                let sm = (logits[t] - lse).exp();
                if cfg.include_positive && t == 0 {
                    coeff_pos += sm;
                    continue;
                }
                let c = sm * inv_m / tau;
                let v = &views[ob][j].unit;
                for d in 0..dim {
                    g_anchor[b][k][d] += c * v[d];
                    g_view[ob][j][d] += c * a[d];
                }
            }
            let c = coeff_pos * inv_m / tau;
            let v = &views[b][k].unit;
            for d in 0..dim {
                g_anchor[b][k][d] += c * v[d];
                g_view[b][k][d] += c * a[d];
            }
        }
    }
    let loss = total * inv_m;
    let mut out = ClrOutput {
        loss,
        grad_embeds: Vec::new(),
        grad_aug: Vec::new(),
    };
    if want_grad {
        // d unit(x) / dx applied to g: (g - (g . u) u) / |x|
        let project = |dst: &mut [f64], uv: &UnitVec, g: &[f64]| {
            if uv.norm == 0.0 {
                return;
            }
            let gu: f64 = g.iter().zip(&uv.unit).map(|(x, y)| x * y).sum();
            for d in 0..dim {
                dst[d] += (g[d] - gu * uv.unit[d]) / uv.norm;
            }
        };
        for b in 0..embeds.len() {
            let mut ge = vec![0.0; embeds[b].data.len()];
            let mut ga = vec![0.0; aug[b].data.len()];
            for (k, &p) in samples[b].iter().enumerate() {
                project(&mut ge[p * dim..(p + 1) * dim], &anchors[b][k], &g_anchor[b][k]);
                project(&mut ga[p * dim..(p + 1) * dim], &views[b][k], &g_view[b][k]);
            }
            out.grad_embeds.push(ge);
            out.grad_aug.push(ga);
        }
    }
    Ok(out)
}

fn cross_entropy(p: f64, q: f64) -> f64 {
    -p * q.ln() - (1.0 - p) * (1.0 - q).ln()
}

/// Symmetric cross-entropy between two probability maps:
/// `(1/N) sum [H(p1, p2) + H(p2, p1)]`.
pub fn consistency(p1: &[f64], p2: &[f64], eps: f64) -> Result<f64> {
    check_len("consistency inputs", p1.len(), p2.len())?;
    let n = p1.len() as f64;
    let s: f64 = p1
        .iter()
        .zip(p2)
        .map(|(a, b)| {
            let (a, _) = clamp_prob(*a, eps);
            let (b, _) = clamp_prob(*b, eps);
            cross_entropy(a, b) + cross_entropy(b, a)
        })
        .sum();
    Ok(s / n)
}

/// Consistency value and its gradient with respect to the student map `p1`;
/// the teacher map `p2` is treated as a constant.
pub fn consistency_with_grad(student: &[f64], teacher: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    check_len("consistency inputs", student.len(), teacher.len())?;
    let n = student.len() as f64;
    let mut grad = vec![0.0; student.len()];
    let mut s = 0.0;
    for i in 0..student.len() {
        let (a, active) = clamp_prob(student[i], eps);
        let (b, _) = clamp_prob(teacher[i], eps);
        s += cross_entropy(a, b) + cross_entropy(b, a);
        if active {
            grad[i] = ((1.0 - b).ln() - b.ln() - b / a + (1.0 - b) / (1.0 - a)) / n;
        }
    }
    Ok((s / n, grad))
}

/// Segmentation output of one sample with its supervision.
#[derive(Debug, Clone, Copy)]
pub struct SegTarget<'a> {
    pub prob: &'a [f64],
    pub mask: &'a DefectMask,
    pub weights: &'a WeightMap,
}

/// Inputs of [`total_loss`]. Terms whose coefficient is zero may be left empty.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossInputs<'a> {
    pub segmentation: &'a [SegTarget<'a>],
    /// Embeddings of the batch and of its photometric views.
    pub embeddings: Option<(&'a [EmbeddingMap], &'a [EmbeddingMap])>,
    /// Teacher probability map for each entry of `segmentation`.
    pub teacher: Option<&'a [Vec<f64>]>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub wbce: f64,
    pub clr: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LossGrads {
    /// Gradient w.r.t. each sample's probability map (all terms combined).
    pub prob: Vec<Vec<f64>>,
    pub embeds: Vec<Vec<f64>>,
    pub aug: Vec<Vec<f64>>,
}

/// `lambda_bce * WBCE + lambda_clr * CLR + lambda_cons * CL`, batch-averaged.
pub fn total_loss(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(total_loss_impl(inputs, cfg, false)?.0)
}

pub fn total_loss_with_grad(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<(LossBreakdown, LossGrads)> {
    total_loss_impl(inputs, cfg, true)
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term `{term}` evaluated to {v}")))
    }
}

fn total_loss_impl(inputs: &LossInputs<'_>, cfg: &LossConfig, want_grad: bool) -> Result<(LossBreakdown, LossGrads)> {
    cfg.validate()?;
    let mut out = LossBreakdown::default();
    let mut grads = LossGrads::default();
    let seg = inputs.segmentation;
    let batch = seg.len() as f64;
    if want_grad {
        grads.prob = seg.iter().map(|s| vec![0.0; s.prob.len()]).collect();
    }
    if cfg.lambda_bce > 0.0 {
        if seg.is_empty() {
            return Err(Error::config("weighted BCE enabled but no segmentation targets given"));
        }
        for (i, s) in seg.iter().enumerate() {
            let (v, g) = weighted_bce_with_grad(s.prob, s.mask, s.weights, cfg.clamp_eps)?;
            out.wbce += v / batch;
            if want_grad {
                for (dst, gv) in grads.prob[i].iter_mut().zip(&g) {
                    *dst += cfg.lambda_bce * gv / batch;
                }
            }
        }
        finite("wbce", out.wbce)?;
    }
    if cfg.lambda_clr > 0.0 {
        let (e, a) = inputs
            .embeddings
            .ok_or_else(|| Error::config("contrastive term enabled but no embeddings given"))?;
        let r = dense_clr_impl(e, a, cfg, inputs.seed, want_grad)?;
        out.clr = finite("clr", r.loss)?;
        if want_grad {
            let scale = |v: Vec<f64>| v.into_iter().map(|x| x * cfg.lambda_clr).collect();
            grads.embeds = r.grad_embeds.into_iter().map(scale).collect();
            grads.aug = r.grad_aug.into_iter().map(scale).collect();
        }
    }
    if cfg.lambda_cons > 0.0 {
        let teacher = inputs
            .teacher
            .ok_or_else(|| Error::config("consistency term enabled but no teacher maps given"))?;
        if teacher.len() != seg.len() || seg.is_empty() {
            return Err(Error::shape(format!(
                "{} teacher maps for {} student maps",
                teacher.len(),
                seg.len()
            )));
        }
        for (i, (s, t)) in seg.iter().zip(teacher).enumerate() {
            let (v, g) = consistency_with_grad(s.prob, t, cfg.clamp_eps)?;
            out.consistency += v / batch;
            if want_grad {
                for (dst, gv) in grads.prob[i].iter_mut().zip(&g) {
                    *dst += cfg.lambda_cons * gv / batch;
                }
            }
        }
        finite("consistency", out.consistency)?;
    }
    out.total = cfg.lambda_bce * out.wbce + cfg.lambda_clr * out.clr + cfg.lambda_cons * out.consistency;
    finite("total", out.total)?;
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::weight_map;
    use proptest::prelude::*;

    fn ones(n: usize) -> WeightMap {
        WeightMap {
            height: 1,
            width: n,
            weights: vec![1.0; n],
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn bce_examples() {
        let mask = DefectMask::new(1, 1, vec![1]).unwrap();
        let v = weighted_bce(&[0.9], &mask, &ones(1), 1e-6).unwrap();
        assert!((v - 0.10536052).abs() < 1e-6);

        let mask = DefectMask::new(2, 5, vec![1, 1, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let w = weight_map(&mask);
        let v = weighted_bce(&[0.5; 10], &mask, &w, 1e-6).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9);

        let exact: Vec<f64> = mask.labels.iter().map(|y| *y as f64).collect();
        let v = weighted_bce(&exact, &mask, &w, 1e-6).unwrap();
        let bound = -(1.0f64 - 1e-6).ln() * w.weights.iter().cloned().fold(0.0, f64::max);
        assert!(v <= bound && v >= 0.0);
    }

    #[test]
    fn bce_shape_mismatch() {
        let mask = DefectMask::zeros(2, 2);
        let w = weight_map(&mask);
        assert!(matches!(weighted_bce(&[0.5; 3], &mask, &w, 1e-6), Err(Error::Shape(_))));
    }

    #[test]
    fn bce_unit_weights_all_foreground_is_mean_neg_log() {
        let p = [0.2, 0.7, 0.95, 0.4];
        let mask = DefectMask::new(1, 4, vec![1; 4]).unwrap();
        let v = weighted_bce(&p, &mask, &ones(4), 1e-6).unwrap();
        let oracle = p.iter().map(|x| -x.ln()).sum::<f64>() / 4.0;
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn clr_two_term_softmax() {
        let e = vec![
            EmbeddingMap::new(2, vec![1.0, 0.0]).unwrap(),
            EmbeddingMap::new(2, vec![0.0, 1.0]).unwrap(),
        ];
        let cfg = LossConfig {
            tau: 1.0,
            ..LossConfig::default()
        };
        let v = dense_clr(&e, &e, &cfg, 0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((expected - 0.31326169).abs() < 1e-8);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn clr_uniform_softmax_is_log_k() {
        // 3 images x 2 pixels, identical embeddings: 1 positive + 4 negatives.
        let maps: Vec<EmbeddingMap> = (0..3).map(|_| EmbeddingMap::new(3, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap()).collect();
        let v = dense_clr(&maps, &maps, &LossConfig::default(), 1).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn clr_batch_of_one_is_a_config_error() {
        let m = vec![EmbeddingMap::new(2, vec![1.0, 0.0]).unwrap()];
        let err = dense_clr(&m, &m, &LossConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("requires >=2 samples"));
    }

    #[test]
    fn clr_without_positive_in_denominator() {
        let e = vec![
            EmbeddingMap::new(2, vec![1.0, 0.0]).unwrap(),
            EmbeddingMap::new(2, vec![0.0, 1.0]).unwrap(),
        ];
        let cfg = LossConfig {
            tau: 1.0,
            include_positive: false,
            ..LossConfig::default()
        };
        // -log(e^1 / e^0) = -1 for each anchor.
        assert!((dense_clr(&e, &e, &cfg, 0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let half = vec![0.5; 6];
        assert!((consistency(&half, &half, 1e-6).unwrap() - 1.38629436).abs() < 1e-6);
        let eps = 1e-6;
        let hi = vec![1.0 - eps; 4];
        let lo = vec![eps; 4];
        let v = consistency(&hi, &lo, eps).unwrap();
        assert!((v - 2.0 * -(eps.ln())).abs() / v < 1e-4);
        let agree = consistency(&hi, &hi, eps).unwrap();
        assert!(agree < 1e-4);
    }

    #[test]
    fn total_loss_mixes() {
        let mask = DefectMask::new(1, 1, vec![1]).unwrap();
        let w = ones(1);
        let prob = [0.9];
        let seg = [SegTarget {
            prob: &prob,
            mask: &mask,
            weights: &w,
        }];
        let e = vec![
            EmbeddingMap::new(2, vec![1.0, 0.0]).unwrap(),
            EmbeddingMap::new(2, vec![0.0, 1.0]).unwrap(),
        ];
        let inputs = LossInputs {
            segmentation: &seg,
            embeddings: Some((&e, &e)),
            teacher: None,
            seed: 0,
        };
        let cfg = LossConfig {
            tau: 1.0,
            lambda_bce: 1.0,
            lambda_clr: 0.5,
            ..LossConfig::default()
        };
        let b = total_loss(&inputs, &cfg).unwrap();
        assert!((b.total - 0.26199137).abs() < 1e-6);

        let only_bce = LossConfig {
            lambda_clr: 0.0,
            ..cfg.clone()
        };
        let b = total_loss(&inputs, &only_bce).unwrap();
        assert_eq!(b.total, weighted_bce(&prob, &mask, &w, only_bce.clamp_eps).unwrap());

        let none = LossConfig {
            lambda_bce: 0.0,
            lambda_clr: 0.0,
            lambda_cons: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(&LossInputs::default(), &none).unwrap().total, 0.0);

        let cons = LossConfig {
            lambda_cons: 1.0,
            ..cfg
        };
        assert!(matches!(total_loss(&inputs, &cons), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn losses_are_finite(
            p in proptest::collection::vec(-0.5f64..1.5, 1..40),
            q in proptest::collection::vec(-0.5f64..1.5, 40),
            bits in proptest::collection::vec(0u8..2, 40),
        ) {
            let n = p.len();
            let mask = DefectMask::new(1, n, bits[..n].to_vec()).unwrap();
            let w = weight_map(&mask);
            for eps in [1e-12, 1e-6, 0.1] {
                prop_assert!(weighted_bce(&p, &mask, &w, eps).unwrap().is_finite());
                prop_assert!(consistency(&p, &q[..n], eps).unwrap().is_finite());
            }
        }

        #[test]
        fn consistency_is_symmetric(
            p in proptest::collection::vec(0.0f64..1.0, 16),
            q in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let a = consistency(&p, &q, 1e-6).unwrap();
            let b = consistency(&q, &p, 1e-6).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn clr_is_scale_invariant(
            vals in proptest::collection::vec(-1.0f64..1.0, 48),
            scale in 0.01f64..100.0,
            seed in 0u64..100,
        ) {
            let split = |v: &[f64]| -> Vec<EmbeddingMap> {
                v.chunks(12).map(|c| EmbeddingMap::new(3, c.to_vec()).unwrap()).collect()
            };
            let e = split(&vals[..24]);
            let a = split(&vals[24..]);
            let scaled = |m: &[EmbeddingMap]| -> Vec<EmbeddingMap> {
                m.iter().map(|x| EmbeddingMap::new(3, x.data.iter().map(|v| v * scale).collect()).unwrap()).collect()
            };
            let cfg = LossConfig { pixel_sample_budget: 3, ..LossConfig::default() };
            let l0 = dense_clr(&e, &a, &cfg, seed).unwrap();
            let l1 = dense_clr(&scaled(&e), &scaled(&a), &cfg, seed).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-6);
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d = norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        d / norm(a).max(norm(b)).max(1e-12)
    }

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        use rand::Rng as _;
        for seed in 0..20 {
            let mut r = rng::seeded(seed);
            let n = r.random_range(2..=32);
            let labels: Vec<u8> = (0..n).map(|_| r.random_bool(0.3) as u8).collect();
            let mask = DefectMask::new(1, n, labels).unwrap();
            let w = weight_map(&mask);
            let p: Vec<f64> = (0..n).map(|_| r.random_range(0.02..0.98)).collect();
            let (_, g) = weighted_bce_with_grad(&p, &mask, &w, 1e-6).unwrap();
            let fd = numeric_grad(&p, |x| weighted_bce(x, &mask, &w, 1e-6).unwrap());
            assert!(rel_err(&g, &fd) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn clr_gradient_matches_finite_difference() {
        use rand::Rng as _;
        let cfg = LossConfig::default();
        for seed in 0..20 {
            let mut r = rng::seeded(100 + seed);
            // 2 images x 2 pixels x dim 4, twice: 32 values.
            let vals: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
            let maps = |v: &[f64]| -> Vec<EmbeddingMap> { v.chunks(8).map(|c| EmbeddingMap::new(4, c.to_vec()).unwrap()).collect() };
            let out = dense_clr_with_grad(&maps(&vals[..16]), &maps(&vals[16..]), &cfg, seed).unwrap();
            let analytic: Vec<f64> = out.grad_embeds.iter().chain(&out.grad_aug).flatten().copied().collect();
            let fd = numeric_grad(&vals, |x| dense_clr(&maps(&x[..16]), &maps(&x[16..]), &cfg, seed).unwrap());
            assert!(rel_err(&analytic, &fd) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn consistency_gradient_matches_finite_difference() {
        use rand::Rng as _;
        for seed in 0..20 {
            let mut r = rng::seeded(200 + seed);
            let n = r.random_range(1..=16);
            let s: Vec<f64> = (0..n).map(|_| r.random_range(0.02..0.98)).collect();
            let t: Vec<f64> = (0..n).map(|_| r.random_range(0.02..0.98)).collect();
            let (_, g) = consistency_with_grad(&s, &t, 1e-6).unwrap();
            let fd = numeric_grad(&s, |x| consistency(x, &t, 1e-6).unwrap());
            assert!(rel_err(&g, &fd) < 1e-4, "seed {seed}");
        }
    }
}
