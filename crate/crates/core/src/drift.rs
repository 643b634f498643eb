//! Unsupervised drift detection on a stream of classifier confidences.
//!
//! A bounded [`ConfidenceWindow`] keeps the most recent confidences. When a
//! check is triggered, [`detect`] scans every split of the window into an
//! older and a newer part (each at least `padding` long), fits a beta
//! distribution to both by the method of moments, and accumulates the
//! log-likelihood ratio of the newer values under the two fits. Only splits
//! where the newer mean dropped by at least the sensitivity fraction are
//! scored; a drift is declared when the best score exceeds `-ln(sensitivity)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidences are stored inside `[CLAMP, 1 - CLAMP]` so the beta density stays finite.
pub const CLAMP: f64 = 1e-6;

/// Sub-windows with variance at or below this carry no distributional information.
pub const MIN_VARIANCE: f64 = 1e-12;

/// Lower bound applied to moment estimates of the shape parameters.
pub const MIN_SHAPE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Sensitivity to change `λ` in (0, 1).
    pub sensitivity: f64,
    /// Minimum sub-window length `Δ`.
    pub padding: usize,
    /// Sliding window capacity `N_max`.
    pub max_window: usize,
    /// Run the detector every `n` pushes instead of through the random
    /// `exp(-2q)` gate. Intended for deterministic tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_every: Option<usize>,
}

impl DetectorConfig {
    pub fn new(sensitivity: f64, padding: usize, max_window: usize) -> Result<Self> {
        let cfg = Self {
            sensitivity,
            padding,
            max_window,
            check_every: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sensitivity > 0.0 && self.sensitivity < 1.0) {
            return Err(Error::Config(format!(
                "sensitivity must lie in (0, 1), got {}",
                self.sensitivity
            )));
        }
        if self.padding == 0 {
            return Err(Error::Config("padding must be positive".into()));
        }
        if self.max_window < 2 * self.padding {
            return Err(Error::Config(format!(
                "window capacity {} is smaller than twice the padding {}",
                self.max_window, self.padding
            )));
        }
        if self.check_every == Some(0) {
            return Err(Error::Config("check_every must be positive".into()));
        }
        Ok(())
    }

    /// Detection threshold `T_h = -ln(λ)`.
    pub fn threshold(&self) -> f64 {
        -self.sensitivity.ln()
    }
}

/// FIFO window of the most recent confidences, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceWindow {
    values: VecDeque<f64>,
    max_size: usize,
}

impl ConfidenceWindow {
    pub fn new(max_size: usize) -> Result<Self> {
        if max_size == 0 {
            return Err(Error::Config("window capacity must be positive".into()));
        }
        Ok(Self {
            values: VecDeque::with_capacity(max_size),
            max_size,
        })
    }

    /// Clamps `q` into `[CLAMP, 1 - CLAMP]` and appends it, evicting the
    /// oldest value when the window is full.
    pub fn push(&mut self, q: f64) -> Result<()> {
        if !q.is_finite() {
            return Err(Error::Input(format!("confidence {q} is not finite")));
        }
        if self.values.len() == self.max_size {
            self.values.pop_front();
        }
        self.values.push_back(q.clamp(CLAMP, 1.0 - CLAMP));
        Ok(())
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn values(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

/// Randomised check gate: run the detector with probability `exp(-2q)`.
///
/// `u` must come from the caller's seeded uniform generator on `[0, 1)`.
pub fn should_check(q: f64, u: f64) -> bool {
    (-2.0 * q).exp() >= u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(Error::Input(format!(
                "beta shape parameters must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Method-of-moments inversion of a mean and variance.
    ///
    /// Shapes that come out non-positive (variance at or above `m(1-m)`) are
    /// clamped to [`MIN_SHAPE`].
    pub fn from_moments(mean: f64, variance: f64) -> Result<Self> {
        if !(mean > 0.0 && mean < 1.0) {
            return Err(Error::Input(format!("mean {mean} outside (0, 1)")));
        }
        if !(variance > MIN_VARIANCE) {
            return Err(Error::DegenerateSample { variance });
        }
        let common = mean * (1.0 - mean) / variance - 1.0;
        Ok(Self {
            alpha: (mean * common).max(MIN_SHAPE),
            beta: ((1.0 - mean) * common).max(MIN_SHAPE),
        })
    }

    /// `ln B(alpha, beta)` through the log-gamma function.
    pub fn ln_beta_fn(&self) -> f64 {
        libm::lgamma(self.alpha) + libm::lgamma(self.beta) - libm::lgamma(self.alpha + self.beta)
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Fits a beta distribution to `values` by matching the sample mean and the
/// second central sample moment (normalised by `n`).
pub fn estimate_beta(values: &[f64]) -> Result<BetaParams> {
    if values.len() < 2 {
        return Err(Error::Input(format!(
            "need at least two values to estimate a beta distribution, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    BetaParams::from_moments(mean, variance)
}

/// Log-density of `Beta(alpha, beta)` at `q`.
pub fn beta_log_pdf(q: f64, p: &BetaParams) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Input(format!("beta density evaluated at {q}, outside (0, 1)")));
    }
    Ok((p.alpha - 1.0) * q.ln() + (p.beta - 1.0) * (1.0 - q).ln() - p.ln_beta_fn())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub detected: bool,
    /// Number of older values at the best split (`k_max`), if any split was scored.
    pub change_index: Option<usize>,
    /// Best cumulative log-likelihood ratio `s_f`, never negative.
    pub score: f64,
}

impl DetectionResult {
    fn none() -> Self {
        Self {
            detected: false,
            change_index: None,
            score: 0.0,
        }
    }
}

/// Running sums over a run of confidences, centred on `shift` to keep the
/// variance computation well conditioned.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
    ln_q: f64,
    ln_1mq: f64,
}

impl Moments {
    fn add(&mut self, q: f64, shift: f64) {
        let d = q - shift;
        self.n += 1;
        self.sum += d;
        self.sum_sq += d * d;
        self.ln_q += q.ln();
        self.ln_1mq += (1.0 - q).ln();
    }

    fn mean(&self, shift: f64) -> f64 {
        shift + self.sum / self.n as f64
    }

    fn variance(&self) -> f64 {
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / n).max(0.0)
    }
}

/// Scans `values` (oldest first) for a downward change in distribution.
///
/// Runs in `O(N)` using prefix statistics for the older part and suffix
/// statistics for the newer part.
pub fn detect_values(values: &[f64], cfg: &DetectorConfig) -> DetectionResult {
    let n = values.len();
    let pad = cfg.padding;
    if pad == 0 || n < 2 * pad {
        return DetectionResult::none();
    }
    let shift = values.iter().sum::<f64>() / n as f64;

    // prefix[k] covers values[..k], suffix[k] covers values[k..]
    let mut prefix = vec![Moments::default(); n + 1];
    for (i, &q) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i];
        prefix[i + 1].add(q, shift);
    }
    let mut suffix = vec![Moments::default(); n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1];
        suffix[i].add(values[i], shift);
    }

    let guard = 1.0 - cfg.sensitivity;
    let mut best: Option<(usize, f64)> = None;
    for k in pad..=n - pad {
        let older = &prefix[k];
        let newer = &suffix[k];
        let mean_b = older.mean(shift);
        let mean_a = newer.mean(shift);
        if mean_a > guard * mean_b {
            continue;
        }
        let (Ok(fit_b), Ok(fit_a)) = (
            BetaParams::from_moments(mean_b, older.variance()),
            BetaParams::from_moments(mean_a, newer.variance()),
        ) else {
            continue;
        };
        let score = (fit_a.alpha - fit_b.alpha) * newer.ln_q
            + (fit_a.beta - fit_b.beta) * newer.ln_1mq
            - newer.n as f64 * (fit_a.ln_beta_fn() - fit_b.ln_beta_fn());
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((k, score));
        }
    }

    match best {
        Some((k, s)) if s >= 0.0 => DetectionResult {
            detected: s > cfg.threshold(),
            change_index: Some(k),
            score: s,
        },
        _ => DetectionResult::none(),
    }
}

pub fn detect(window: &ConfidenceWindow, cfg: &DetectorConfig) -> DetectionResult {
    let values = window.to_vec();
    detect_values(&values, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Distribution};

    fn cfg(sensitivity: f64, padding: usize, max_window: usize) -> DetectorConfig {
        DetectorConfig::new(sensitivity, padding, max_window).unwrap()
    }

    /// Direct transcription of the split scan, quadratic in the window length.
    fn brute_force(values: &[f64], cfg: &DetectorConfig) -> DetectionResult {
        let n = values.len();
        let mut best: Option<(usize, f64)> = None;
        if n >= 2 * cfg.padding {
            for k in cfg.padding..=n - cfg.padding {
                let (old, new) = values.split_at(k);
                let m_b = old.iter().sum::<f64>() / old.len() as f64;
                let m_a = new.iter().sum::<f64>() / new.len() as f64;
                if m_a > (1.0 - cfg.sensitivity) * m_b {
                    continue;
                }
                let (Ok(fb), Ok(fa)) = (estimate_beta(old), estimate_beta(new)) else {
                    continue;
                };
                let s: f64 = new
                    .iter()
                    .map(|&q| beta_log_pdf(q, &fa).unwrap() - beta_log_pdf(q, &fb).unwrap())
                    .sum();
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
        }
        match best {
            Some((k, s)) if s >= 0.0 => DetectionResult {
                detected: s > cfg.threshold(),
                change_index: Some(k),
                score: s,
            },
            _ => DetectionResult::none(),
        }
    }

    #[test]
    fn fifo_eviction_and_clamping() {
        let mut w = ConfidenceWindow::new(3).unwrap();
        w.push(0.73).unwrap();
        assert_eq!(w.to_vec(), vec![0.73]);
        w.push(0.2).unwrap();
        w.push(0.3).unwrap();
        w.push(0.4).unwrap();
        assert_eq!(w.to_vec(), vec![0.2, 0.3, 0.4]);
        w.push(1.0).unwrap();
        assert_eq!(w.to_vec(), vec![0.3, 0.4, 1.0 - 1e-6]);
        w.push(0.0).unwrap();
        assert_eq!(w.to_vec()[2], 1e-6);
        assert!(matches!(w.push(f64::NAN), Err(Error::Input(_))));
        assert!(matches!(w.push(f64::INFINITY), Err(Error::Input(_))));
    }

    #[test]
    fn gate_values() {
        assert!(should_check(0.0, 0.999_999));
        assert!(!should_check(1.0, 0.2));
        assert!(should_check(1.0, 0.1));
    }

    #[test]
    fn moment_inversion_examples() {
        let p = BetaParams::from_moments(0.5, 0.05).unwrap();
        assert!((p.alpha - 2.0).abs() < 1e-12 && (p.beta - 2.0).abs() < 1e-12);
        let p = BetaParams::from_moments(0.5, 1.0 / 12.0).unwrap();
        assert!((p.alpha - 1.0).abs() < 1e-12 && (p.beta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moment_inversion_clamps_and_rejects() {
        // variance above m(1-m) gives a negative common factor
        let p = BetaParams::from_moments(0.5, 0.3).unwrap();
        assert_eq!(p.alpha, MIN_SHAPE);
        assert_eq!(p.beta, MIN_SHAPE);
        assert!(matches!(
            estimate_beta(&[0.4, 0.4, 0.4]),
            Err(Error::DegenerateSample { .. })
        ));
        assert!(matches!(estimate_beta(&[0.4]), Err(Error::Input(_))));
    }

    #[test]
    fn moment_round_trip_grid() {
        let grid = [0.5, 1.0, 2.0, 8.0];
        for &a in &grid {
            for &b in &grid {
                let truth = BetaParams::new(a, b).unwrap();
                let fit = BetaParams::from_moments(truth.mean(), truth.variance()).unwrap();
                assert!((fit.alpha - a).abs() < 1e-9, "{a},{b}: {fit:?}");
                assert!((fit.beta - b).abs() < 1e-9, "{a},{b}: {fit:?}");
            }
        }
    }

    #[test]
    fn sampled_beta_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = Beta::new(8.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
        let fit = estimate_beta(&xs).unwrap();
        assert!((fit.alpha - 8.0).abs() < 0.5, "{fit:?}");
        assert!((fit.beta - 2.0).abs() < 0.5, "{fit:?}");
    }

    #[test]
    fn log_pdf_values() {
        let uniform = BetaParams::new(1.0, 1.0).unwrap();
        for q in [0.01, 0.3, 0.99] {
            assert!(beta_log_pdf(q, &uniform).unwrap().abs() < 1e-14);
        }
        let p = BetaParams::new(2.0, 2.0).unwrap();
        assert!((beta_log_pdf(0.5, &p).unwrap() - 1.5f64.ln()).abs() < 1e-12);
        assert!(beta_log_pdf(0.0, &p).is_err());
        assert!(beta_log_pdf(1.0, &p).is_err());
    }

    #[test]
    fn short_window_never_scans() {
        let c = cfg(0.05, 100, 1000);
        let mut w = ConfidenceWindow::new(1000).unwrap();
        for i in 0..150 {
            w.push(if i < 75 { 0.95 } else { 0.3 }).unwrap();
        }
        assert_eq!(detect(&w, &c), DetectionResult::none());
    }

    #[test]
    fn sharp_drop_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let high = Beta::new(18.0, 2.0).unwrap();
        let low = Beta::new(3.0, 3.0).unwrap();
        let mut w = ConfidenceWindow::new(1000).unwrap();
        for i in 0..1000 {
            let q = if i < 500 { high.sample(&mut rng) } else { low.sample(&mut rng) };
            w.push(q).unwrap();
        }
        let r = detect(&w, &cfg(0.05, 100, 1000));
        assert!(r.detected);
        assert!(r.score > cfg(0.05, 100, 1000).threshold());
        let k = r.change_index.unwrap();
        assert!((100..=900).contains(&k), "k_max = {k}");
    }

    #[test]
    fn upward_trend_never_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..400)
            .map(|i| (0.3 + 0.6 * i as f64 / 400.0 + rng.random_range(-0.05..0.05)).clamp(0.01, 0.99))
            .collect();
        let r = detect_values(&values, &cfg(0.05, 50, 400));
        assert_eq!(r.score, 0.0);
        assert!(!r.detected);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::new(0.05, 100, 1000).is_ok());
        assert!(DetectorConfig::new(0.0, 100, 1000).is_err());
        assert!(DetectorConfig::new(1.0, 100, 1000).is_err());
        assert!(DetectorConfig::new(0.05, 100, 199).is_err());
        assert!((cfg(0.05, 100, 1000).threshold() - 2.995_732_273_553_991).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn window_never_exceeds_capacity(cap in 1usize..20, qs in prop::collection::vec(-0.5f64..1.5, 0..100)) {
            let mut w = ConfidenceWindow::new(cap).unwrap();
            for q in qs {
                w.push(q).unwrap();
                prop_assert!(w.len() <= cap);
                prop_assert!(w.values().all(|v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn gate_is_monotone(q1 in 0.0f64..=1.0, dq in 0.0f64..=1.0, u in 0.0f64..1.0) {
            let q2 = (q1 + dq).min(1.0);
            if !should_check(q1, u) {
                prop_assert!(!should_check(q2, u));
            }
        }

        #[test]
        fn matches_brute_force(
            seed in any::<u64>(),
            len in 0usize..=300,
            pad in 5usize..60,
            split in 0.0f64..1.0,
            drop in 0.0f64..0.6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cut = (split * len as f64) as usize;
            let values: Vec<f64> = (0..len)
                .map(|i| {
                    let centre = if i < cut { 0.9 } else { 0.9 - drop };
                    (centre + rng.random_range(-0.08..0.08)).clamp(CLAMP, 1.0 - CLAMP)
                })
                .collect();
            let c = DetectorConfig { sensitivity: 0.05, padding: pad, max_window: 2 * pad.max(150), check_every: None };
            let fast = detect_values(&values, &c);
            let slow = brute_force(&values, &c);
            prop_assert_eq!(fast.detected, slow.detected);
            prop_assert_eq!(fast.change_index, slow.change_index);
            prop_assert!((fast.score - slow.score).abs() < 1e-9, "{} vs {}", fast.score, slow.score);
            prop_assert_eq!(fast.detected, fast.score > c.threshold());
        }
    }
}
