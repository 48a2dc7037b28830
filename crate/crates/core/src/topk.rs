//! Top-k% rationale selection and the perturb-and-MAP gradient estimator
//! that lets training push gradients through it.
//!
//! The forward pass always uses the noiseless mask. Gumbel noise only enters
//! [`imle_gradient`], which estimates `dL/ds` as the difference of two top-k
//! solutions: one at the perturbed scores and one at perturbed scores moved
//! against the downstream gradient `dL/dr`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary token selection produced by [`topk_mask`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleMask {
    bits: Vec<u8>,
    k_percent: KPercent,
    cardinality: usize,
}

impl RationaleMask {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn k_percent(&self) -> KPercent {
        self.k_percent
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.bits[i] == 1
    }
}

/// Percentage of tokens to keep, in `(0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct KPercent(f64);

impl KPercent {
    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k > 0.0 && k <= 100.0 {
            Ok(Self(k))
        } else {
            Err(Error::contract(format!("k-percent {k} outside (0, 100]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Number of tokens selected out of `n`: `max(1, round_half_up(k n / 100))`.
    pub fn count(self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let k = self.0;
        let raw = if k.fract() == 0.0 {
            // Integer k: exact in integer arithmetic.
            ((k as u64 * n as u64 + 50) / 100) as usize
        } else {
            (k * n as f64 / 100.0 + 0.5).floor() as usize
        };
        raw.clamp(1, n)
    }
}

impl Eq for KPercent {}

impl TryFrom<f64> for KPercent {
    type Error = Error;
    fn try_from(k: f64) -> Result<Self> {
        Self::new(k)
    }
}

impl From<KPercent> for f64 {
    fn from(k: KPercent) -> f64 {
        k.0
    }
}

impl std::fmt::Display for KPercent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Selects the `k.count(n)` largest scores; ties go to the lower index.
pub fn topk_mask(scores: &[f64], k: KPercent) -> Result<RationaleMask> {
    if scores.is_empty() {
        return Err(Error::contract("topk_mask: empty score vector"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::contract(format!(
            "topk_mask: non-finite score {} at {i}",
            scores[i]
        )));
    }
    let n = scores.len();
    let count = k.count(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending score keeps lower indices first among ties.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut bits = vec![0u8; n];
    for &i in &order[..count] {
        bits[i] = 1;
    }
    Ok(RationaleMask {
        bits,
        k_percent: k,
        cardinality: count,
    })
}

/// Standard Gumbel draws scaled by `scale`: `-scale ln(-ln u)`, `u ~ U(0,1)`.
pub fn gumbel_sample<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| scale * gumbel_from_uniform(open_unit(rng))).collect()
}

/// Inverse CDF of the standard Gumbel distribution.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Uniform draw in the open interval (0, 1).
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImleConfig {
    /// Step size of the target perturbation.
    pub lambda: f64,
    /// Gumbel scale; 0 disables noise.
    pub noise_scale: f64,
    pub samples: usize,
}

impl Default for ImleConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            noise_scale: 1.0,
            samples: 1,
        }
    }
}

impl ImleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("imle.lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Config(format!(
                "imle.noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("imle.samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient estimate plus whether any sample's two masks differed.
#[derive(Clone, Debug, PartialEq)]
pub struct ImleEstimate {
    pub grad: Vec<f64>,
    pub masks_differed: bool,
}

/// Perturb-and-MAP estimate of `dL/ds`:
/// `mean over samples of topk(s + e) - topk(s - lambda dL/dr + e)`.
pub fn imle_gradient<R: Rng + ?Sized>(
    scores: &[f64],
    grad_r: &[f64],
    k: KPercent,
    cfg: &ImleConfig,
    rng: &mut R,
) -> Result<ImleEstimate> {
    imle_gradient_with(scores, grad_r, k, cfg.lambda, cfg, rng, |s| s)
}

/// As [`imle_gradient`] with an explicit step size and a transform applied to
/// the perturbed scores before the target shift (the adaptive controller's
/// target map).
pub(crate) fn imle_gradient_with<R: Rng + ?Sized>(
    scores: &[f64],
    grad_r: &[f64],
    k: KPercent,
    lambda: f64,
    cfg: &ImleConfig,
    rng: &mut R,
    target_map: impl Fn(f64) -> f64,
) -> Result<ImleEstimate> {
    if scores.len() != grad_r.len() {
        return Err(Error::contract(format!(
            "imle_gradient: {} scores but {} gradient entries",
            scores.len(),
            grad_r.len()
        )));
    }
    let n = scores.len();
    let samples = if cfg.noise_scale == 0.0 { 1 } else { cfg.samples.max(1) };
    let mut grad = vec![0.0; n];
    let mut differed = false;
    let mut perturbed = vec![0.0; n];
    let mut target = vec![0.0; n];
    for _ in 0..samples {
        let eps = gumbel_sample(n, cfg.noise_scale, rng);
        for j in 0..n {
            perturbed[j] = scores[j] + eps[j];
            target[j] = target_map(perturbed[j]) - lambda * grad_r[j];
        }
        let a = topk_mask(&perturbed, k)?;
        let b = topk_mask(&target, k)?;
        if a.bits != b.bits {
            differed = true;
            for j in 0..n {
                grad[j] += f64::from(a.bits[j]) - f64::from(b.bits[j]);
            }
        }
    }
    if samples > 1 {
        grad.iter_mut().for_each(|g| *g /= samples as f64);
    }
    Ok(ImleEstimate {
        grad,
        masks_differed: differed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AimleConfig {
    pub enabled: bool,
    /// Target fraction of batch items whose two top-k solutions differ.
    pub target_rate: f64,
    pub step_factor: f64,
}

impl Default for AimleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            target_rate: 0.3,
            step_factor: 0.1,
        }
    }
}

/// Adapts the IMLE step size toward a target rate of mask changes.
///
/// The target scores are `alpha (s + e) + beta - lambda dL/dr`; `alpha` and
/// `beta` stay at their initial values 1 and 0 and only `lambda` adapts,
/// multiplicatively, from an exponential moving average of how often the two
/// top-k solutions differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AimleController {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub target_rate: f64,
    pub step_factor: f64,
    pub observed_diff_ema: f64,
}

impl AimleController {
    pub const EMA_DECAY: f64 = 0.9;
    pub const DEAD_BAND: f64 = 0.05;
    pub const LAMBDA_MIN: f64 = 1e-6;
    pub const LAMBDA_MAX: f64 = 1e6;

    pub fn new(initial_lambda: f64, cfg: &AimleConfig) -> Self {
        Self {
            lambda: initial_lambda.clamp(Self::LAMBDA_MIN, Self::LAMBDA_MAX),
            alpha: 1.0,
            beta: 0.0,
            target_rate: cfg.target_rate,
            step_factor: cfg.step_factor,
            observed_diff_ema: 0.0,
        }
    }

    /// Folds one batch of mask-change flags into the running rate, then
    /// scales lambda up when masks change too rarely and down when too often.
    pub fn update(&mut self, masks_differed: &[bool]) -> f64 {
        if !masks_differed.is_empty() {
            let rate = masks_differed.iter().filter(|&&d| d).count() as f64
                / masks_differed.len() as f64;
            self.observed_diff_ema =
                (Self::EMA_DECAY * self.observed_diff_ema + (1.0 - Self::EMA_DECAY) * rate)
                    .clamp(0.0, 1.0);
        }
        self.adapt()
    }

    fn adapt(&mut self) -> f64 {
        let gap = self.observed_diff_ema - self.target_rate;
        if gap < -Self::DEAD_BAND {
            self.lambda *= 1.0 + self.step_factor;
        } else if gap > Self::DEAD_BAND {
            self.lambda /= 1.0 + self.step_factor;
        }
        self.lambda = self.lambda.clamp(Self::LAMBDA_MIN, Self::LAMBDA_MAX);
        self.lambda
    }

    /// Estimator with the controller's current lambda and target map.
    pub fn gradient<R: Rng + ?Sized>(
        &self,
        scores: &[f64],
        grad_r: &[f64],
        k: KPercent,
        cfg: &ImleConfig,
        rng: &mut R,
    ) -> Result<ImleEstimate> {
        let (alpha, beta) = (self.alpha, self.beta);
        imle_gradient_with(scores, grad_r, k, self.lambda, cfg, rng, |p| alpha * p + beta)
    }
}
