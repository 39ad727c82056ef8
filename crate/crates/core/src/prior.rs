//! Noise schedules and denoisers that map a noisy spectrogram to a dry estimate.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ComplexSpectrogram;

/// Largest noise level of any schedule.
pub const SIGMA_MAX: f64 = 100.0;
const COSINE_OFFSET: f64 = 0.008;

/// Noise levels `σ_0 < σ_1 < … < σ_T` in variance-exploding form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if sigmas[0] < 0.0 || sigmas.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("noise levels must be finite and non-negative".into()));
        }
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "noise levels must strictly increase with t".into(),
            ));
        }
        Ok(NoiseSchedule { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

fn cosine_alpha_bar(u: f64) -> f64 {
    let f = |u: f64| {
        ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    f(u) / f(0.0)
}

/// Cosine `ᾱ` profile sampled at `t/T`, mapped to `σ_t = sqrt((1 − ᾱ)/ᾱ)` and capped at [`SIGMA_MAX`].
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let sigmas: Vec<f64> = (0..=steps)
        .map(|t| {
            let ab = cosine_alpha_bar(t as f64 / steps as f64);
            if ab <= 0.0 {
                SIGMA_MAX
            } else {
                ((1.0 - ab).max(0.0) / ab).sqrt().min(SIGMA_MAX)
            }
        })
        .collect();
    NoiseSchedule::from_sigmas(sigmas).map_err(|_| {
        Error::InvalidArgument(format!(
            "{steps} steps saturate the noise cap; use fewer steps"
        ))
    })
}

/// A denoiser `f(x_t, σ)` returning an estimate of the noiseless spectrogram.
///
/// Inputs and outputs are in the pipeline's normalized units. Implementations
/// must be deterministic.
pub trait DenoiserPrior: Send + Sync {
    fn denoise(&self, x_t: &ComplexSpectrogram, sigma: f64) -> Result<ComplexSpectrogram>;

    fn name(&self) -> String;
}

/// Returns a stored spectrogram regardless of its input.
#[derive(Debug, Clone)]
pub struct OraclePrior {
    dry: ComplexSpectrogram,
}

impl OraclePrior {
    pub fn new(dry: ComplexSpectrogram) -> Self {
        OraclePrior { dry }
    }
}

impl DenoiserPrior for OraclePrior {
    fn denoise(&self, x_t: &ComplexSpectrogram, _sigma: f64) -> Result<ComplexSpectrogram> {
        if !x_t.same_shape(&self.dry) {
            return Err(Error::ShapeMismatch(format!(
                "oracle holds {}x{}, input is {}x{}",
                self.dry.frames(),
                self.dry.bins(),
                x_t.frames(),
                x_t.bins()
            )));
        }
        Ok(self.dry.clone())
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// One mean and variance per (frame, bin); inputs must have the fitted frame count.
    PerBin,
    /// One mean and variance per bin, pooled over frames.
    PerBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMetadata {
    pub clips: usize,
    pub window_size: usize,
    pub hop_size: usize,
    pub sample_rate: Option<u32>,
    pub source: String,
}

pub const PRIOR_FORMAT: &str = "dereverb-gaussian-prior";
pub const PRIOR_VERSION: u32 = 1;

/// Floor on fitted variances, relative to their mean.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Posterior mean of a circular complex Gaussian prior under additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianShrinkagePrior {
    format: String,
    version: u32,
    mode: PriorMode,
    bins: usize,
    frames: Option<usize>,
    mean: Vec<Complex64>,
    variance: Vec<f64>,
    metadata: PriorMetadata,
}

impl GaussianShrinkagePrior {
    pub fn new(
        mode: PriorMode,
        bins: usize,
        frames: Option<usize>,
        mean: Vec<Complex64>,
        variance: Vec<f64>,
        metadata: PriorMetadata,
    ) -> Result<Self> {
        let expected = match (mode, frames) {
            (PriorMode::PerBand, None) => bins,
            (PriorMode::PerBin, Some(f)) => bins * f,
            _ => {
                return Err(Error::InvalidArgument(
                    "per-bin priors need a frame count, per-band priors must not have one".into(),
                ))
            }
        };
        if mean.len() != expected || variance.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} prior entries, got {} means and {} variances",
                mean.len(),
                variance.len()
            )));
        }
        if variance.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || mean.iter().any(|m| !m.re.is_finite() || !m.im.is_finite())
        {
            return Err(Error::InvalidArgument(
                "prior variances must be positive and all statistics finite".into(),
            ));
        }
        Ok(GaussianShrinkagePrior {
            format: PRIOR_FORMAT.into(),
            version: PRIOR_VERSION,
            mode,
            bins,
            frames,
            mean,
            variance,
            metadata,
        })
    }

    /// Fit statistics from dry spectrograms, each first scaled to unit RMS.
    pub fn fit(corpus: &[ComplexSpectrogram], mode: PriorMode, source: &str) -> Result<Self> {
        let first = corpus
            .first()
            .ok_or_else(|| Error::InvalidArgument("prior corpus is empty".into()))?;
        let bins = first.bins();
        if corpus.iter().any(|s| s.bins() != bins) {
            return Err(Error::ShapeMismatch("corpus spectrograms differ in bin count".into()));
        }
        let frames = match mode {
            PriorMode::PerBin => {
                if corpus.iter().any(|s| s.frames() != first.frames()) {
                    return Err(Error::ShapeMismatch(
                        "per-bin fitting needs equal frame counts".into(),
                    ));
                }
                Some(first.frames())
            }
            PriorMode::PerBand => None,
        };
        let cells = frames.map_or(bins, |f| f * bins);
        let index = |n: usize, k: usize| match mode {
            PriorMode::PerBin => n * bins + k,
            PriorMode::PerBand => k,
        };
        let mut sum = vec![Complex64::new(0.0, 0.0); cells];
        let mut count = vec![0usize; cells];
        let normalized: Vec<ComplexSpectrogram> = corpus
            .iter()
            .map(|s| {
                let rms = s.rms();
                if rms > 0.0 {
                    s.scaled(1.0 / rms)
                } else {
                    s.clone()
                }
            })
            .collect();
        for s in &normalized {
            for n in 0..s.frames() {
                for k in 0..bins {
                    let i = index(n, k);
                    sum[i] += s.get(n, k);
                    count[i] += 1;
                }
            }
        }
        let mean: Vec<Complex64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| s / c as f64)
            .collect();
        let mut var = vec![0.0; cells];
        for s in &normalized {
            for n in 0..s.frames() {
                for k in 0..bins {
                    let i = index(n, k);
                    var[i] += (s.get(n, k) - mean[i]).norm_sqr();
                }
            }
        }
        for (v, &c) in var.iter_mut().zip(&count) {
            *v /= c as f64;
        }
        let avg = var.iter().sum::<f64>() / cells as f64;
        let floor = if avg > 0.0 { VARIANCE_FLOOR * avg } else { VARIANCE_FLOOR };
        var.iter_mut().for_each(|v| *v = v.max(floor));
        let metadata = PriorMetadata {
            clips: corpus.len(),
            window_size: first.window_size(),
            hop_size: first.hop_size(),
            sample_rate: None,
            source: source.to_string(),
        };
        Self::new(mode, bins, frames, mean, var, metadata)
    }

    pub fn with_sample_rate(mut self, sample_rate: u32) -> Self {
        self.metadata.sample_rate = Some(sample_rate);
        self
    }

    pub fn mode(&self) -> PriorMode {
        self.mode
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn metadata(&self) -> &PriorMetadata {
        &self.metadata
    }

    pub fn mean_at(&self, frame: usize, bin: usize) -> Complex64 {
        self.mean[self.cell(frame, bin)]
    }

    pub fn variance_at(&self, frame: usize, bin: usize) -> f64 {
        self.variance[self.cell(frame, bin)]
    }

    fn cell(&self, frame: usize, bin: usize) -> usize {
        match self.mode {
            PriorMode::PerBin => frame * self.bins + bin,
            PriorMode::PerBand => bin,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: GaussianShrinkagePrior = serde_json::from_str(&text)?;
        if raw.format != PRIOR_FORMAT {
            return Err(Error::Format(format!("unknown prior format {:?}", raw.format)));
        }
        if raw.version != PRIOR_VERSION {
            return Err(Error::Format(format!(
                "prior file version {} is not supported",
                raw.version
            )));
        }
        Self::new(raw.mode, raw.bins, raw.frames, raw.mean, raw.variance, raw.metadata)
    }
}

impl DenoiserPrior for GaussianShrinkagePrior {
    fn denoise(&self, x_t: &ComplexSpectrogram, sigma: f64) -> Result<ComplexSpectrogram> {
        if x_t.bins() != self.bins {
            return Err(Error::ShapeMismatch(format!(
                "prior fitted on {} bins, input has {}",
                self.bins,
                x_t.bins()
            )));
        }
        if let Some(f) = self.frames {
            if x_t.frames() != f {
                return Err(Error::ShapeMismatch(format!(
                    "per-bin prior fitted on {f} frames, input has {}",
                    x_t.frames()
                )));
            }
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise level must be non-negative".into()));
        }
        let s2 = sigma * sigma;
        let mut out = x_t.zeros_like();
        for n in 0..x_t.frames() {
            for k in 0..self.bins {
                let i = self.cell(n, k);
                let v = self.variance[i];
                let value = if s2.is_infinite() {
                    self.mean[i]
                } else {
                    (x_t.get(n, k) * v + self.mean[i] * s2) / (v + s2)
                };
                out.set(n, k, value);
            }
        }
        Ok(out)
    }

    fn name(&self) -> String {
        format!("gaussian-{}", match self.mode {
            PriorMode::PerBin => "per-bin",
            PriorMode::PerBand => "per-band",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{crandn_vec, rng};

    fn spec(frames: usize, bins: usize, data: Vec<Complex64>) -> ComplexSpectrogram {
        ComplexSpectrogram::from_data(data, frames, 2 * bins, bins / 2 + 1, 0, true).unwrap()
    }

    fn meta() -> PriorMetadata {
        PriorMetadata {
            clips: 1,
            window_size: 8,
            hop_size: 2,
            sample_rate: None,
            source: "test".into(),
        }
    }

    #[test]
    fn cosine_default_profile() {
        let s = cosine_schedule(20).unwrap();
        assert_eq!(s.steps(), 20);
        assert_eq!(s.sigma(20), SIGMA_MAX);
        assert!(s.sigma(0) < 1e-3);
        // closed form at t = 10: ᾱ = cos²(0.508/1.008·π/2)/cos²(0.008/1.008·π/2)
        let th = |u: f64| ((u + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let ab = th(0.5) / th(0.0);
        assert!((s.sigma(10) - ((1.0 - ab) / ab).sqrt()).abs() < 1e-12);
        assert!((s.sigma(10) - 1.0124).abs() < 1e-4);
        assert!((s.sigma(19) - 12.8073).abs() < 1e-4);
    }

    #[test]
    fn cosine_is_strictly_monotone() {
        for t in [1, 5, 20, 100] {
            let s = cosine_schedule(t).unwrap();
            assert!(s.sigmas().windows(2).all(|w| w[0] < w[1]));
            assert!(s.sigma(0) >= 0.0);
        }
        assert!(cosine_schedule(0).is_err());
        assert!(cosine_schedule(5000).is_err());
    }

    #[test]
    fn oracle_ignores_input() {
        let mut r = rng(1);
        let dry = spec(3, 4, crandn_vec(&mut r, 12));
        let p = OraclePrior::new(dry.clone());
        let x = spec(3, 4, crandn_vec(&mut r, 12));
        assert_eq!(p.denoise(&x, 3.0).unwrap(), dry);
        assert!(p.denoise(&spec(2, 4, crandn_vec(&mut r, 8)), 1.0).is_err());
    }

    #[test]
    fn shrinkage_formula_and_limits() {
        let mut r = rng(2);
        let mean = crandn_vec(&mut r, 6);
        let var: Vec<f64> = (0..6).map(|i| 0.5 + i as f64).collect();
        let p = GaussianShrinkagePrior::new(PriorMode::PerBin, 3, Some(2), mean.clone(), var.clone(), meta())
            .unwrap();
        let x = spec(2, 3, crandn_vec(&mut r, 6));
        let sigma = 0.7;
        let out = p.denoise(&x, sigma).unwrap();
        for i in 0..6 {
            let s2 = sigma * sigma;
            let want = x.data()[i] * (var[i] / (var[i] + s2)) + mean[i] * (s2 / (var[i] + s2));
            assert!((out.data()[i] - want).norm() < 1e-14);
        }
        let small = p.denoise(&x, 1e-9).unwrap();
        for i in 0..6 {
            assert!((small.data()[i] - x.data()[i]).norm() <= 1e-6 * x.data()[i].norm());
        }
        let big = p.denoise(&x, 1e12).unwrap();
        for i in 0..6 {
            assert!((big.data()[i] - mean[i]).norm() < 1e-9);
        }
        assert_eq!(p.denoise(&x, f64::INFINITY).unwrap().data(), &mean[..]);
        // bounded by input plus prior mean
        let n = |s: &ComplexSpectrogram| s.energy().sqrt();
        let mn: f64 = mean.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(n(&out) <= n(&x) + mn);
        // determinism
        assert_eq!(p.denoise(&x, sigma).unwrap(), out);
    }

    #[test]
    fn shrinkage_is_mmse_for_gaussian_data() {
        let (v, sigma) = (2.0, 1.3);
        let mu = Complex64::new(0.4, -0.3);
        let bins = 50;
        let p = GaussianShrinkagePrior::new(
            PriorMode::PerBand,
            bins,
            None,
            vec![mu; bins],
            vec![v; bins],
            meta(),
        )
        .unwrap();
        let mut r = rng(3);
        let mut se = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let x: Vec<Complex64> = crandn_vec(&mut r, bins).iter().map(|e| mu + e * v.sqrt()).collect();
            let noisy: Vec<Complex64> =
                x.iter().zip(crandn_vec(&mut r, bins)).map(|(a, e)| a + e * sigma).collect();
            let est = p.denoise(&spec(1, bins, noisy), sigma).unwrap();
            se += est.data().iter().zip(&x).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        }
        let mse = se / (trials * bins) as f64;
        let posterior = v * sigma * sigma / (v + sigma * sigma);
        assert!((mse / posterior - 1.0).abs() < 0.05, "mse {mse} vs {posterior}");
    }

    #[test]
    fn fit_and_file_round_trip() {
        let mut r = rng(4);
        let corpus: Vec<ComplexSpectrogram> = (0..3).map(|_| spec(5, 4, crandn_vec(&mut r, 20))).collect();
        let band = GaussianShrinkagePrior::fit(&corpus, PriorMode::PerBand, "unit").unwrap();
        assert_eq!(band.metadata().clips, 3);
        let bin = GaussianShrinkagePrior::fit(&corpus, PriorMode::PerBin, "unit").unwrap();
        assert!(bin.denoise(&corpus[0], 1.0).is_ok());
        assert!(bin.denoise(&spec(4, 4, crandn_vec(&mut r, 16)), 1.0).is_err());
        // per-band variance equals the pooled circular variance after unit-RMS scaling
        let scaled: Vec<ComplexSpectrogram> = corpus.iter().map(|s| s.scaled(1.0 / s.rms())).collect();
        let vals: Vec<Complex64> = scaled.iter().flat_map(|s| s.band(2)).collect();
        let m: Complex64 = vals.iter().sum::<Complex64>() / vals.len() as f64;
        let v: f64 = vals.iter().map(|c| (c - m).norm_sqr()).sum::<f64>() / vals.len() as f64;
        assert!((band.mean_at(0, 2) - m).norm() < 1e-12);
        assert!((band.variance_at(3, 2) - v).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        band.save(&path).unwrap();
        assert_eq!(GaussianShrinkagePrior::load(&path).unwrap(), band);
        std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
        assert!(GaussianShrinkagePrior::load(&path).is_err());
    }
}
