//! Weighted prediction error estimation of per-band delayed linear-prediction filters.

use faer::prelude::SpSolver;
use faer::{Mat, Side};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ComplexSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpeConfig {
    /// Prediction taps `L`.
    pub taps: usize,
    /// Prediction delay `D` in frames.
    pub delay: usize,
    pub iterations: usize,
    /// Floor on the power weights, relative to the band's mean power.
    pub power_floor: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        WpeConfig {
            taps: 150,
            delay: 8,
            iterations: 1,
            power_floor: 1e-10,
        }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.delay == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "WPE taps, delay and iterations must all be at least 1".into(),
            ));
        }
        if !(self.power_floor > 0.0 && self.power_floor.is_finite()) {
            return Err(Error::InvalidArgument("WPE power floor must be positive".into()));
        }
        Ok(())
    }
}

/// Relative diagonal loading added to the normal-equation matrix.
pub const DIAGONAL_LOADING: f64 = 1e-8;

/// One prediction filter per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WpeFilterBank {
    pub filters: Vec<Vec<Complex64>>,
    pub delay: usize,
}

impl WpeFilterBank {
    pub fn zeros(bands: usize, taps: usize, delay: usize) -> Self {
        WpeFilterBank {
            filters: vec![vec![Complex64::new(0.0, 0.0); taps]; bands],
            delay,
        }
    }

    pub fn bands(&self) -> usize {
        self.filters.len()
    }

    pub fn taps(&self) -> usize {
        self.filters.first().map_or(0, |f| f.len())
    }

    fn validate(&self) -> Result<()> {
        let taps = self.taps();
        if self.delay == 0 || taps == 0 {
            return Err(Error::InvalidArgument("filter bank needs D >= 1 and L >= 1".into()));
        }
        if self.filters.iter().any(|f| f.len() != taps) {
            return Err(Error::InvalidArgument("filters have unequal lengths".into()));
        }
        if self
            .filters
            .iter()
            .flatten()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::Numerical("filter bank has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Filter for one band plus the weighted cost after every iteration.
#[derive(Debug, Clone)]
pub struct BandEstimate {
    pub filter: Vec<Complex64>,
    /// `Σ |x̂|²/λ + ln λ` with `λ = max(|x̂|², ε)`, starting from the unfiltered band.
    pub costs: Vec<f64>,
}

/// Sliding application `x̂_n = y_n − Σ_l conj(g_l) y_{n−D−l+1}` with zero history.
pub fn apply_band(y: &[Complex64], g: &[Complex64], delay: usize) -> Vec<Complex64> {
    let gc: Vec<Complex64> = g.iter().map(|v| v.conj()).collect();
    (0..y.len())
        .map(|n| {
            let mut acc = y[n];
            for (l, c) in gc.iter().enumerate() {
                let back = delay + l;
                if back > n {
                    break;
                }
                acc -= c * y[n - back];
            }
            acc
        })
        .collect()
}

/// Delayed-frame matrix: row `n`, column `l` holds `y_{n−D−l}` (zero before the start).
pub(crate) fn delayed_frames(y: &[Complex64], taps: usize, delay: usize) -> Mat<Complex64> {
    Mat::from_fn(y.len(), taps, |n, l| {
        let back = delay + l;
        if back > n {
            Complex64::new(0.0, 0.0)
        } else {
            y[n - back]
        }
    })
}

fn weighted_cost(x: &[Complex64], floor: f64) -> (f64, Vec<f64>) {
    let weights: Vec<f64> = x.iter().map(|v| v.norm_sqr().max(floor)).collect();
    let cost = x
        .iter()
        .zip(&weights)
        .map(|(v, w)| v.norm_sqr() / w + w.ln())
        .sum();
    (cost, weights)
}

/// Solve the Hermitian positive definite system `R g = p` after diagonal loading.
pub(crate) fn solve_loaded(
    mut r: Mat<Complex64>,
    p: &Mat<Complex64>,
    loading: f64,
    band: usize,
) -> Result<Vec<Complex64>> {
    let dim = r.nrows();
    let trace: f64 = (0..dim).map(|i| r.read(i, i).re).sum();
    let delta = loading * trace / dim as f64;
    for i in 0..dim {
        r.write(i, i, r.read(i, i) + delta);
    }
    let chol = r.cholesky(Side::Lower).map_err(|_| Error::Singular { band })?;
    let g = chol.solve(p);
    let out: Vec<Complex64> = (0..dim).map(|i| g.read(i, 0)).collect();
    if out.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Singular { band });
    }
    Ok(out)
}

pub fn estimate_band(y: &[Complex64], cfg: &WpeConfig, band: usize) -> Result<BandEstimate> {
    let zero = vec![Complex64::new(0.0, 0.0); cfg.taps];
    let mean_power = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len() as f64;
    if mean_power == 0.0 {
        return Ok(BandEstimate {
            filter: zero,
            costs: Vec::new(),
        });
    }
    let floor = cfg.power_floor * mean_power;
    let delayed = delayed_frames(y, cfg.taps, cfg.delay);
    let (cost0, mut weights) = weighted_cost(y, floor);
    let mut costs = vec![cost0];
    let mut filter = zero;
    for _ in 0..cfg.iterations {
        let inv_sqrt: Vec<f64> = weights.iter().map(|w| 1.0 / w.sqrt()).collect();
        let bw = Mat::from_fn(y.len(), cfg.taps, |n, l| delayed.read(n, l) * inv_sqrt[n]);
        let yw = Mat::from_fn(y.len(), 1, |n, _| y[n] * inv_sqrt[n]);
        // R = Σ ỹ ỹᴴ/λ = conj(Bᴴ B), p = Σ ỹ y*/λ = conj(Bᴴ y_w)
        let r = (bw.adjoint() * &bw).as_ref().conjugate().to_owned();
        let p = (bw.adjoint() * &yw).as_ref().conjugate().to_owned();
        filter = solve_loaded(r, &p, DIAGONAL_LOADING, band)?;
        let x = apply_band(y, &filter, cfg.delay);
        let (cost, w) = weighted_cost(&x, floor);
        costs.push(cost);
        weights = w;
    }
    Ok(BandEstimate { filter, costs })
}

/// Estimate one filter per band of `wet`.
pub fn estimate_wpe_filter(wet: &ComplexSpectrogram, cfg: &WpeConfig) -> Result<WpeFilterBank> {
    cfg.validate()?;
    if wet.frames() <= cfg.taps + cfg.delay {
        return Err(Error::TooFewFrames {
            needed: cfg.taps + cfg.delay,
            got: wet.frames(),
        });
    }
    let filters = (0..wet.bins())
        .into_par_iter()
        .map(|k| estimate_band(&wet.band(k), cfg, k).map(|e| e.filter))
        .collect::<Result<Vec<_>>>()?;
    Ok(WpeFilterBank {
        filters,
        delay: cfg.delay,
    })
}

pub fn apply_dereverb_filter(
    wet: &ComplexSpectrogram,
    bank: &WpeFilterBank,
) -> Result<ComplexSpectrogram> {
    if bank.bands() != wet.bins() {
        return Err(Error::ShapeMismatch(format!(
            "filter bank has {} bands, spectrogram has {}",
            bank.bands(),
            wet.bins()
        )));
    }
    bank.validate()?;
    let bands: Vec<Vec<Complex64>> = (0..wet.bins())
        .into_par_iter()
        .map(|k| apply_band(&wet.band(k), &bank.filters[k], bank.delay))
        .collect();
    wet.from_bands_like(&bands)
}
