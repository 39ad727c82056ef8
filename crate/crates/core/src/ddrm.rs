//! Diffusion restoration sampling in the spectral space of per-band degradations.
//!
//! The degradation `H` of a band maps a block of `m` dry frames to an
//! observation of `m + context` wet frames. For dereverberation `H` is the
//! pseudo-inverse of `Ĩ − G`; for the oracle ceiling it is a fitted forward
//! convolution. Every block of a band with the same length shares one SVD.

use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{build_band_operator, pseudo_inverse_svd, svd_band, BandSvd};
use crate::prior::{DenoiserPrior, NoiseSchedule};
use crate::rng::{complex_normal, stream, StreamRng};
use crate::spectral::ComplexSpectrogram;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdrmParams {
    pub eta: f64,
    pub eta_b: f64,
    pub sigma_y: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for DdrmParams {
    fn default() -> Self {
        DdrmParams {
            eta: 0.7,
            eta_b: 0.2,
            sigma_y: 1e-6,
            steps: 20,
            seed: 0,
        }
    }
}

impl DdrmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidArgument(format!("eta {} outside (0, 1]", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.eta_b) {
            return Err(Error::InvalidArgument(format!("eta_b {} outside [0, 1]", self.eta_b)));
        }
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_y {} must be finite and non-negative",
                self.sigma_y
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("at least one sampling step is required".into()));
        }
        Ok(())
    }
}

/// Partition of a band's frames into consecutive blocks of at most `block` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub frames: usize,
    pub block: usize,
}

impl BlockLayout {
    pub fn new(frames: usize, block: usize) -> Result<Self> {
        if frames == 0 || block == 0 {
            return Err(Error::InvalidArgument("block layout needs frames and block size".into()));
        }
        Ok(BlockLayout { frames, block })
    }

    /// `(start, len)` of every block in time order.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        (0..self.frames)
            .step_by(self.block)
            .map(|start| (start, self.block.min(self.frames - start)))
            .collect()
    }

    /// Distinct block lengths, longest first.
    pub fn lengths(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.blocks().iter().map(|b| b.1).collect();
        l.sort_unstable_by(|a, b| b.cmp(a));
        l.dedup();
        l
    }
}

/// Degradation SVDs for one band, one per block length.
#[derive(Debug, Clone)]
pub struct BandDegradation {
    context: usize,
    factors: Vec<BandSvd>,
}

impl BandDegradation {
    /// `factors[j]` is the SVD of an `(m + context) × m` degradation with a square `Vh`.
    pub fn from_factors(context: usize, factors: Vec<BandSvd>) -> Result<Self> {
        for f in &factors {
            let m = f.cols();
            if f.vh.nrows() != m || f.s.len() != m || f.u.ncols() != m {
                return Err(Error::ShapeMismatch(format!(
                    "degradation factor needs a square {m}x{m} Vh and {m} singular values"
                )));
            }
            if f.rows() != m + context {
                return Err(Error::ShapeMismatch(format!(
                    "degradation for {m} frames must observe {} frames, has {}",
                    m + context,
                    f.rows()
                )));
            }
        }
        Ok(BandDegradation { context, factors })
    }

    /// Degradation `(Ĩ − G)†` for each requested block length.
    pub fn dereverb(g: &[Complex64], delay: usize, lengths: &[usize]) -> Result<Self> {
        let mut factors = Vec::with_capacity(lengths.len());
        let mut context = 0;
        for &m in lengths {
            let op = build_band_operator(g, delay, m)?;
            context = op.context();
            factors.push(pseudo_inverse_svd(&svd_band(&op)?));
        }
        Self::from_factors(context, factors)
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn factor(&self, len: usize) -> Option<&BandSvd> {
        self.factors.iter().find(|f| f.cols() == len)
    }
}

/// `ȳ = Σ† Uᴴ y` for a degradation SVD.
pub fn to_spectral(y: &[Complex64], svd: &BandSvd) -> Result<Vec<Complex64>> {
    if y.len() != svd.rows() {
        return Err(Error::ShapeMismatch(format!(
            "observation has {} entries, degradation expects {}",
            y.len(),
            svd.rows()
        )));
    }
    let ym = Mat::from_fn(y.len(), 1, |i, _| y[i]);
    let proj = svd.u.adjoint() * &ym;
    Ok(svd
        .s
        .iter()
        .enumerate()
        .map(|(i, &s)| if s > 0.0 { proj.read(i, 0) / s } else { ZERO })
        .collect())
}

/// `x = V x̄`.
pub fn from_spectral(xbar: &[Complex64], svd: &BandSvd) -> Result<Vec<Complex64>> {
    if xbar.len() != svd.vh.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "spectral vector has {} entries, factor has {}",
            xbar.len(),
            svd.vh.nrows()
        )));
    }
    let xm = Mat::from_fn(xbar.len(), 1, |i, _| xbar[i]);
    let x = svd.vh.adjoint() * &xm;
    Ok((0..x.nrows()).map(|i| x.read(i, 0)).collect())
}

#[derive(Debug, Clone)]
struct BlockFactor {
    /// `V`, columns are the right singular vectors.
    v: Mat<Complex64>,
    s: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockObservation {
    start: usize,
    len: usize,
    factor: usize,
    ybar: Vec<Complex64>,
}

/// Everything the sampler needs for one band: right factors, singular values
/// and projected observations. Left factors are dropped after projection.
#[derive(Debug, Clone)]
pub struct BandProblem {
    factors: Vec<BlockFactor>,
    blocks: Vec<BlockObservation>,
}

impl BandProblem {
    pub fn new(wet_band: &[Complex64], degradation: &BandDegradation, layout: &BlockLayout) -> Result<Self> {
        if wet_band.len() != layout.frames {
            return Err(Error::ShapeMismatch(format!(
                "band has {} frames, layout expects {}",
                wet_band.len(),
                layout.frames
            )));
        }
        let lengths = layout.lengths();
        let mut factors = Vec::with_capacity(lengths.len());
        for &len in &lengths {
            let f = degradation.factor(len).ok_or_else(|| {
                Error::ShapeMismatch(format!("no degradation factor for blocks of {len} frames"))
            })?;
            factors.push((len, f));
        }
        let mut blocks = Vec::new();
        for (start, len) in layout.blocks() {
            let idx = factors.iter().position(|f| f.0 == len).expect("length listed");
            let newest = start + len - 1;
            let obs: Vec<Complex64> = (0..len + degradation.context())
                .map(|i| if i <= newest { wet_band[newest - i] } else { ZERO })
                .collect();
            blocks.push(BlockObservation {
                start,
                len,
                factor: idx,
                ybar: to_spectral(&obs, factors[idx].1)?,
            });
        }
        let factors = factors
            .into_iter()
            .map(|(_, f)| BlockFactor {
                v: f.vh.adjoint().to_owned(),
                s: f.s.clone(),
            })
            .collect();
        Ok(BandProblem { factors, blocks })
    }

    pub fn frames(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    /// Total transformed coordinates (equals the frame count).
    pub fn coordinates(&self) -> usize {
        self.frames()
    }

    pub fn ybar(&self) -> Vec<Vec<Complex64>> {
        self.blocks.iter().map(|b| b.ybar.clone()).collect()
    }

    pub fn singular_values(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| self.factors[b.factor].s.clone()).collect()
    }

    /// Signal-space band sequence for per-block spectral coordinates.
    fn synthesize(&self, xbar: &[Vec<Complex64>], out: &mut [Complex64]) {
        for (b, xb) in self.blocks.iter().zip(xbar) {
            let f = &self.factors[b.factor];
            let xm = Mat::from_fn(b.len, 1, |i, _| xb[i]);
            let x = &f.v * &xm;
            let newest = b.start + b.len - 1;
            for i in 0..b.len {
                out[newest - i] = x.read(i, 0);
            }
        }
    }

    /// Spectral coordinates `Vᴴ x` of a signal-space band sequence.
    fn analyze(&self, band: &[Complex64]) -> Vec<Vec<Complex64>> {
        self.blocks
            .iter()
            .map(|b| {
                let f = &self.factors[b.factor];
                let newest = b.start + b.len - 1;
                let xm = Mat::from_fn(b.len, 1, |i, _| band[newest - i]);
                let c = f.v.adjoint() * &xm;
                (0..b.len).map(|i| c.read(i, 0)).collect()
            })
            .collect()
    }
}

/// Build per-band sampling problems from a wet spectrogram and its degradations.
pub fn prepare(
    wet: &ComplexSpectrogram,
    degradations: &[BandDegradation],
    block: usize,
) -> Result<Vec<BandProblem>> {
    if degradations.len() != wet.bins() {
        return Err(Error::ShapeMismatch(format!(
            "{} degradations for {} bands",
            degradations.len(),
            wet.bins()
        )));
    }
    let layout = BlockLayout::new(wet.frames(), block)?;
    degradations
        .par_iter()
        .enumerate()
        .map(|(k, d)| BandProblem::new(&wet.band(k), d, &layout))
        .collect()
}

/// Per-band, per-block spectral coordinates at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub t: usize,
    pub xbar: Vec<Vec<Vec<Complex64>>>,
}

/// `x̄_T` for one coordinate.
pub fn init_coordinate(
    ybar: Complex64,
    s: f64,
    eps: Complex64,
    sigma_y: f64,
    sigma_top: f64,
) -> Result<Complex64> {
    if s > 0.0 {
        let var = sigma_top * sigma_top - (sigma_y / s).powi(2);
        if var < 0.0 {
            return Err(Error::Numerical(format!(
                "initial noise level {sigma_top} is below the observation noise {}",
                sigma_y / s
            )));
        }
        Ok(ybar + eps * var.sqrt())
    } else {
        Ok(eps * sigma_top)
    }
}

/// One coordinate update from step `t + 1` (noise `sigma_next`) to step `t` (noise `sigma_t`).
#[allow(clippy::too_many_arguments)]
pub fn update_coordinate(
    prev: Complex64,
    theta: Complex64,
    ybar: Complex64,
    s: f64,
    eps: Complex64,
    sigma_t: f64,
    sigma_next: f64,
    params: &DdrmParams,
) -> Result<Complex64> {
    let eta = params.eta;
    let keep = (1.0 - eta * eta).max(0.0).sqrt();
    if s == 0.0 {
        return Ok(theta + (prev - theta) * (keep * sigma_t / sigma_next) + eps * (eta * sigma_t));
    }
    let rho = params.sigma_y / s;
    if sigma_t < rho {
        Ok(theta + (ybar - theta) * (keep * sigma_t / rho) + eps * (eta * sigma_t))
    } else {
        let var = sigma_t * sigma_t - (rho * params.eta_b).powi(2);
        if var < 0.0 {
            return Err(Error::Numerical("negative variance in the data-consistent branch".into()));
        }
        Ok(theta * (1.0 - params.eta_b) + ybar * params.eta_b + eps * var.sqrt())
    }
}

fn draw_noise(problems: &[BandProblem], rng: &mut StreamRng) -> Vec<Vec<Vec<Complex64>>> {
    problems
        .iter()
        .map(|p| {
            p.blocks
                .iter()
                .map(|b| (0..b.len).map(|_| complex_normal(rng)).collect())
                .collect()
        })
        .collect()
}

pub fn init_state(
    problems: &[BandProblem],
    params: &DdrmParams,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<SpectralState> {
    let top = schedule.sigma(schedule.steps());
    let noise = draw_noise(problems, rng);
    let xbar = problems
        .par_iter()
        .zip(noise.par_iter())
        .map(|(p, eps)| {
            p.blocks
                .iter()
                .zip(eps)
                .map(|(b, e)| {
                    let s = &p.factors[b.factor].s;
                    (0..b.len)
                        .map(|i| init_coordinate(b.ybar[i], s[i], e[i], params.sigma_y, top))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralState {
        t: schedule.steps(),
        xbar,
    })
}

/// Signal-space spectrogram of the current state.
pub fn assemble(
    problems: &[BandProblem],
    state: &SpectralState,
    template: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    let bands: Vec<Vec<Complex64>> = problems
        .par_iter()
        .zip(state.xbar.par_iter())
        .map(|(p, xb)| {
            let mut out = vec![ZERO; p.frames()];
            p.synthesize(xb, &mut out);
            out
        })
        .collect();
    template.from_bands_like(&bands)
}

/// Advance the state from `state.t` to `state.t − 1` given the prior's estimate.
pub fn spectral_update_step(
    state: &mut SpectralState,
    problems: &[BandProblem],
    x0_hat: &ComplexSpectrogram,
    params: &DdrmParams,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<()> {
    if state.t == 0 || state.t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("cannot step from t = {}", state.t)));
    }
    if x0_hat.bins() != problems.len() || !x0_hat.is_finite() {
        return Err(Error::ShapeMismatch(
            "prior output does not match the sampling problem".into(),
        ));
    }
    let t = state.t - 1;
    let (sigma_t, sigma_next) = (schedule.sigma(t), schedule.sigma(t + 1));
    let noise = draw_noise(problems, rng);
    let updated = problems
        .par_iter()
        .zip(state.xbar.par_iter())
        .zip(noise.par_iter())
        .enumerate()
        .map(|(k, ((p, prev), eps))| {
            let theta = p.analyze(&x0_hat.band(k));
            p.blocks
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    let s = &p.factors[b.factor].s;
                    (0..b.len)
                        .map(|i| {
                            update_coordinate(
                                prev[j][i],
                                theta[j][i],
                                b.ybar[i],
                                s[i],
                                eps[j][i],
                                sigma_t,
                                sigma_next,
                                params,
                            )
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    state.xbar = updated;
    state.t = t;
    Ok(())
}

/// Per-step diagnostics: distance between state and observation on data coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub sigma: f64,
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DdrmOutput {
    pub estimate: ComplexSpectrogram,
    pub trace: Vec<StepTrace>,
}

fn residuals(problems: &[BandProblem], state: &SpectralState) -> Vec<f64> {
    problems
        .iter()
        .zip(&state.xbar)
        .map(|(p, xb)| {
            let mut acc = 0.0;
            for (b, x) in p.blocks.iter().zip(xb) {
                let s = &p.factors[b.factor].s;
                for i in 0..b.len {
                    if s[i] > 0.0 {
                        acc += (x[i] - b.ybar[i]).norm_sqr();
                    }
                }
            }
            acc.sqrt()
        })
        .collect()
}

/// Run the full sampler on prepared problems using RNG stream `stream_id` of `params.seed`.
pub fn sample_problems(
    template: &ComplexSpectrogram,
    problems: &[BandProblem],
    prior: &dyn DenoiserPrior,
    schedule: &NoiseSchedule,
    params: &DdrmParams,
    stream_id: u64,
) -> Result<DdrmOutput> {
    params.validate()?;
    if schedule.steps() != params.steps {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps, parameters ask for {}",
            schedule.steps(),
            params.steps
        )));
    }
    if problems.len() != template.bins() || problems.iter().any(|p| p.frames() != template.frames()) {
        return Err(Error::ShapeMismatch("sampling problems do not cover the spectrogram".into()));
    }
    let mut rng = stream(params.seed, stream_id);
    let mut state = init_state(problems, params, schedule, &mut rng)?;
    let mut trace = vec![StepTrace {
        step: state.t,
        sigma: schedule.sigma(state.t),
        residual: residuals(problems, &state),
    }];
    while state.t > 0 {
        let x = assemble(problems, &state, template)?;
        let x0 = prior.denoise(&x, schedule.sigma(state.t))?;
        spectral_update_step(&mut state, problems, &x0, params, schedule, &mut rng)?;
        trace.push(StepTrace {
            step: state.t,
            sigma: schedule.sigma(state.t),
            residual: residuals(problems, &state),
        });
    }
    let estimate = assemble(problems, &state, template)?;
    if !estimate.is_finite() {
        return Err(Error::Numerical("sampler produced non-finite values".into()));
    }
    Ok(DdrmOutput { estimate, trace })
}

/// Sample a dry estimate given one degradation per band.
pub fn ddrm_sample(
    wet: &ComplexSpectrogram,
    degradations: &[BandDegradation],
    block: usize,
    prior: &dyn DenoiserPrior,
    schedule: &NoiseSchedule,
    params: &DdrmParams,
) -> Result<ComplexSpectrogram> {
    params.validate()?;
    let problems = prepare(wet, degradations, block)?;
    Ok(sample_problems(wet, &problems, prior, schedule, params, 0)?.estimate)
}
