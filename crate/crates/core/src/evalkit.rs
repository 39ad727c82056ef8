//! Synthetic reverb, a synthetic voice source, oracle operators, metrics and
//! the benchmark harness comparing the dereverberation methods.

use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;

use faer::Mat;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddrm::{sample_problems, BandDegradation, BandProblem, BlockLayout, DdrmParams};
use crate::error::{Error, Result};
use crate::linop::svd_matrix;
use crate::pipeline::{dereverberate_detailed, wpe_only, DereverbConfig, StftConfig, FIRST_PASS_STREAM};
use crate::prior::{cosine_schedule, DenoiserPrior, GaussianShrinkagePrior, PriorMode};
use crate::refine::RefineParams;
use crate::rng::stream;
use crate::spectral::{drop_dc, istft, restore_dc, stft, AudioClip, ComplexSpectrogram};
use crate::wpe::{solve_loaded, WpeConfig};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IrKind {
    ExponentialDecay,
    VelvetNoise,
    CombResonant,
}

impl IrKind {
    pub const ALL: [IrKind; 3] = [IrKind::ExponentialDecay, IrKind::VelvetNoise, IrKind::CombResonant];

    pub fn as_str(self) -> &'static str {
        match self {
            IrKind::ExponentialDecay => "exponential-decay",
            IrKind::VelvetNoise => "velvet-noise",
            IrKind::CombResonant => "comb-resonant",
        }
    }
}

impl std::str::FromStr for IrKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IrKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown impulse response kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverbSpec {
    /// Seconds for the tail energy to fall by 60 dB.
    pub rt60: f64,
    /// Seconds between the direct sound and the start of the tail.
    pub pre_delay: f64,
    pub wet_dry_mix: f64,
    pub ir_kind: IrKind,
    pub seed: u64,
    /// Additive white noise level relative to the reverberant signal; `None` adds none.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

impl ReverbSpec {
    pub fn new(rt60: f64, pre_delay: f64, wet_dry_mix: f64, ir_kind: IrKind, seed: u64) -> Self {
        ReverbSpec { rt60, pre_delay, wet_dry_mix, ir_kind, seed, snr_db: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rt60 > 0.0 && self.rt60.is_finite()) {
            return Err(Error::InvalidArgument(format!("rt60 must be positive, got {}", self.rt60)));
        }
        if !(self.pre_delay >= 0.0 && self.pre_delay.is_finite()) {
            return Err(Error::InvalidArgument(format!("pre-delay must be non-negative, got {}", self.pre_delay)));
        }
        if !(0.0..=1.0).contains(&self.wet_dry_mix) {
            return Err(Error::InvalidArgument(format!("mix must lie in [0, 1], got {}", self.wet_dry_mix)));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::InvalidArgument("SNR must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Unit direct path followed, after the pre-delay, by a unit-energy tail.
pub fn reverb_ir(spec: &ReverbSpec, sample_rate: u32) -> Result<Vec<f64>> {
    spec.validate()?;
    let fs = sample_rate as f64;
    let start = ((spec.pre_delay * fs).round() as usize).max(1);
    let len = start + (1.2 * spec.rt60 * fs).ceil() as usize;
    let tail_len = len - start;
    let decay = 3.0 * LN_10 / (spec.rt60 * fs);
    let mut rng = stream(spec.seed, 2);
    let mut tail = vec![0.0; tail_len];
    match spec.ir_kind {
        IrKind::ExponentialDecay => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for (n, v) in tail.iter_mut().enumerate() {
                *v = normal.sample(&mut rng) * (-decay * n as f64).exp();
            }
        }
        IrKind::VelvetNoise => {
            let spacing = (fs / 2000.0).max(1.0);
            let mut pos = 0.0;
            while (pos as usize) < tail_len {
                let n = (pos + rng.gen::<f64>() * spacing) as usize;
                if n < tail_len {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    tail[n] += sign * (-decay * n as f64).exp();
                }
                pos += spacing;
            }
        }
        IrKind::CombResonant => {
            for (i, base_ms) in [29.7, 37.1, 41.1, 43.7].into_iter().enumerate() {
                let d = ((base_ms * (0.95 + 0.1 * rng.gen::<f64>()) * 1e-3 * fs).round() as usize).max(1);
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let mut n = 0;
                while n < tail_len {
                    tail[n] += sign * (-decay * n as f64).exp();
                    n += d;
                }
            }
        }
    }
    let energy: f64 = tail.iter().map(|v| v * v).sum();
    let mut ir = vec![0.0; len];
    ir[0] = 1.0;
    if energy > 0.0 {
        let g = energy.sqrt().recip();
        for (dst, v) in ir[start..].iter_mut().zip(&tail) {
            *dst = v * g;
        }
    }
    Ok(ir)
}

/// Linear convolution truncated to `out_len` samples.
pub fn convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex64> = v.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        buf.resize(n, ZERO);
        buf
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    (0..out_len)
        .map(|i| if i < x.len() + h.len() - 1 { a[i].re * scale } else { 0.0 })
        .collect()
}

/// `wet = (1 − mix)·dry + mix·(dry ∗ ir)`, truncated to the dry length.
pub fn synth_reverb_with_ir(dry: &AudioClip, ir: &[f64], mix: f64) -> Result<AudioClip> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::InvalidArgument(format!("mix must lie in [0, 1], got {mix}")));
    }
    let reverbed = convolve(&dry.samples, ir, dry.len());
    let samples = dry
        .samples
        .iter()
        .zip(&reverbed)
        .map(|(d, r)| (1.0 - mix) * d + mix * r)
        .collect();
    AudioClip::new(samples, dry.sample_rate)
}

pub fn synth_reverb(dry: &AudioClip, spec: &ReverbSpec) -> Result<AudioClip> {
    let mut ir = reverb_ir(spec, dry.sample_rate)?;
    if ir.len() > dry.len() {
        log::warn!(
            "impulse response of {} samples is longer than the {}-sample clip; truncating",
            ir.len(),
            dry.len()
        );
        ir.truncate(dry.len().max(1));
    }
    let mut wet = synth_reverb_with_ir(dry, &ir, spec.wet_dry_mix)?;
    if let Some(snr) = spec.snr_db {
        let power = wet.samples.iter().map(|v| v * v).sum::<f64>() / wet.len().max(1) as f64;
        let std = (power / 10f64.powf(snr / 10.0)).sqrt();
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = stream(spec.seed, 3);
            for v in &mut wet.samples {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(wet)
}

/// Deterministic sung-voice stand-in: notes of a harmonic stack with vibrato,
/// formant colouring, short gaps and a low noise floor, peak-normalized to 0.5.
pub fn synth_voice(seed: u64, duration: f64, sample_rate: u32) -> Result<AudioClip> {
    if !(duration > 0.0 && duration.is_finite()) || sample_rate == 0 {
        return Err(Error::InvalidArgument("voice needs a positive duration and sample rate".into()));
    }
    let fs = sample_rate as f64;
    let total = (duration * fs).round() as usize;
    let mut rng = stream(seed, 11);
    let mut out = vec![0.0; total];
    let formants: Vec<(f64, f64)> = (0..3)
        .map(|i| (400.0 + 900.0 * i as f64 + 500.0 * rng.gen::<f64>(), 120.0 + 200.0 * rng.gen::<f64>()))
        .collect();
    let notes = rng.gen_range(2..=4);
    let mut cursor = 0usize;
    for note in 0..notes {
        let remaining = total.saturating_sub(cursor);
        if remaining == 0 {
            break;
        }
        let share = if note + 1 == notes { remaining } else { remaining / (notes - note) };
        let gap = ((0.04 + 0.12 * rng.gen::<f64>()) * fs) as usize;
        let len = share.saturating_sub(gap).max(1);
        let f0 = 110.0 * 4f64.powf(rng.gen::<f64>());
        let vib_rate = 4.5 + 2.0 * rng.gen::<f64>();
        let vib_depth = 0.005 + 0.01 * rng.gen::<f64>();
        let harmonics = ((0.45 * fs / f0) as usize).clamp(1, 24);
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| {
                let f = f0 * h as f64;
                let env: f64 = formants.iter().map(|(c, w)| (-0.5 * ((f - c) / w).powi(2)).exp()).sum();
                (0.15 + env) / h as f64
            })
            .collect();
        let mut phases: Vec<f64> = (0..harmonics).map(|_| 2.0 * PI * rng.gen::<f64>()).collect();
        let attack = 0.02 * fs;
        let release = 0.06 * fs;
        for n in 0..len {
            let t = n as f64 / fs;
            let vib = 1.0 + vib_depth * (t / 0.15).min(1.0) * (2.0 * PI * vib_rate * t).sin();
            let env = (n as f64 / attack).min(1.0) * ((len - n) as f64 / release).min(1.0);
            let mut s = 0.0;
            for (h, (ph, a)) in phases.iter_mut().zip(&amps).enumerate() {
                *ph += 2.0 * PI * f0 * (h + 1) as f64 * vib / fs;
                s += a * ph.sin();
            }
            out[cursor + n] = env * s;
        }
        cursor += share;
    }
    let floor = Normal::new(0.0, 1.0).expect("unit normal");
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / total.max(1) as f64).sqrt();
    for v in &mut out {
        *v += 1e-3 * rms * floor.sample(&mut rng);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= 0.5 / peak;
        }
    }
    AudioClip::new(out, sample_rate)
}

/// Per-band dry-to-wet convolution taps `y_n ≈ Σ_j h_j x_{n−j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOperator {
    pub taps: Vec<Vec<Complex64>>,
}

const ORACLE_LOADING: f64 = 1e-12;
/// Default relative singular-value cutoff for oracle degradations.
pub const ORACLE_RTOL: f64 = 1e-2;
const ORACLE_FALLBACK_LOADING: f64 = 1e-6;

fn fit_band(y: &[Complex64], x: &[Complex64], taps: usize, band: usize) -> Result<Vec<Complex64>> {
    let frames = y.len();
    let xm = Mat::from_fn(frames, taps, |n, j| if j > n { ZERO } else { x[n - j] });
    let ym = Mat::from_fn(frames, 1, |n, _| y[n]);
    let r = xm.adjoint() * &xm;
    let p = xm.adjoint() * &ym;
    let trace: f64 = (0..taps).map(|i| r.read(i, i).re).sum();
    if trace == 0.0 {
        return Ok(vec![ZERO; taps]);
    }
    match solve_loaded(r.clone(), &p, ORACLE_LOADING, band) {
        Ok(h) => Ok(h),
        Err(Error::Singular { .. }) => {
            log::warn!("oracle normal equations singular in band {band}; loading the diagonal");
            solve_loaded(r, &p, ORACLE_FALLBACK_LOADING, band)
        }
        Err(e) => Err(e),
    }
}

/// Least-squares dry-to-wet taps per band from an aligned pair.
pub fn estimate_oracle_operator(
    wet: &ComplexSpectrogram,
    dry: &ComplexSpectrogram,
    taps: usize,
) -> Result<OracleOperator> {
    if !wet.same_shape(dry) {
        return Err(Error::ShapeMismatch("wet and dry spectrograms differ in shape".into()));
    }
    if taps == 0 || taps > wet.frames() {
        return Err(Error::InvalidArgument(format!(
            "oracle operator needs 1..={} taps, got {taps}",
            wet.frames()
        )));
    }
    let taps = (0..wet.bins())
        .into_par_iter()
        .map(|k| fit_band(&wet.band(k), &dry.band(k), taps, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleOperator { taps })
}

/// Causal convolution of one band with taps `h`, zero history.
pub fn apply_band_taps(x: &[Complex64], h: &[Complex64]) -> Vec<Complex64> {
    (0..x.len())
        .map(|n| h.iter().enumerate().take(n + 1).map(|(j, c)| c * x[n - j]).sum())
        .collect()
}

/// First `taps` samples of the dry-to-wet response implied by a dereverberation
/// filter, i.e. the inverse of `x_n = y_n − Σ_l conj(g_l) y_{n−D−l}`.
pub fn wpe_implied_taps(g: &[Complex64], delay: usize, taps: usize) -> Vec<Complex64> {
    let mut h = vec![ZERO; taps];
    if taps == 0 {
        return h;
    }
    h[0] = Complex64::new(1.0, 0.0);
    for n in 1..taps {
        let mut acc = ZERO;
        for (l, c) in g.iter().enumerate() {
            let back = delay + l;
            if back > n {
                break;
            }
            acc += c.conj() * h[n - back];
        }
        h[n] = acc;
    }
    h
}

/// `‖y − H x‖ / ‖y‖` over all bands.
pub fn fit_residual(wet: &ComplexSpectrogram, dry: &ComplexSpectrogram, taps: &[Vec<Complex64>]) -> Result<f64> {
    if !wet.same_shape(dry) || taps.len() != wet.bins() {
        return Err(Error::ShapeMismatch("operator and spectrograms disagree in shape".into()));
    }
    let mut num = 0.0;
    for (k, h) in taps.iter().enumerate() {
        let y = wet.band(k);
        let pred = apply_band_taps(&dry.band(k), h);
        num += y.iter().zip(&pred).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
    }
    let den = wet.energy();
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

/// `m × m` Toeplitz matrix `H[i, i+j] = h_j` acting on newest-first vectors.
pub fn oracle_block_matrix(h: &[Complex64], frames: usize) -> Mat<Complex64> {
    Mat::from_fn(frames, frames, |i, c| if c >= i && c - i < h.len() { h[c - i] } else { ZERO })
}

impl OracleOperator {
    pub fn bands(&self) -> usize {
        self.taps.len()
    }

    /// Sampling degradations for every band; contributions from before a block are ignored.
    /// Singular values below `rtol·s_max` are zeroed so those directions are left to the prior.
    pub fn degradations(&self, layout: &BlockLayout, rtol: f64) -> Result<Vec<BandDegradation>> {
        let lengths = layout.lengths();
        self.taps
            .par_iter()
            .map(|h| {
                let factors = lengths
                    .iter()
                    .map(|&m| {
                        let mut f = svd_matrix(oracle_block_matrix(h, m).as_ref())?;
                        let cut = rtol * f.s.first().copied().unwrap_or(0.0);
                        for v in &mut f.s {
                            if *v < cut {
                                *v = 0.0;
                            }
                        }
                        Ok(f)
                    })
                    .collect::<Result<Vec<_>>>()?;
                BandDegradation::from_factors(0, factors)
            })
            .collect()
    }
}

/// Sample with fixed per-band degradations in the pipeline's normalized, DC-free units.
pub fn sample_with_degradations(
    wet: &ComplexSpectrogram,
    degradations: &[BandDegradation],
    prior: &dyn DenoiserPrior,
    config: &DereverbConfig,
) -> Result<ComplexSpectrogram> {
    let (nodc, dc) = drop_dc(wet)?;
    let scale = nodc.rms();
    if scale == 0.0 {
        return Ok(wet.clone());
    }
    let y = nodc.scaled(1.0 / scale);
    let layout = BlockLayout::new(y.frames(), config.block)?;
    let problems = degradations
        .par_iter()
        .enumerate()
        .map(|(k, d)| BandProblem::new(&y.band(k), d, &layout))
        .collect::<Result<Vec<_>>>()?;
    let schedule = cosine_schedule(config.ddrm.steps)?;
    let out = sample_problems(&y, &problems, prior, &schedule, &config.ddrm, FIRST_PASS_STREAM)?;
    restore_dc(&out.estimate.scaled(scale), &dc)
}

fn check_pair(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> Result<()> {
    if a.same_shape(b) && a.dc_dropped() == b.dc_dropped() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("metric inputs differ in shape".into()))
    }
}

/// Mean absolute difference of magnitudes.
pub fn l1_spec_loss(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.norm() - y.norm()).abs()).sum();
    Ok(sum / n as f64)
}

/// Magnitude floor for the log-spectral distance.
pub const LSD_FLOOR: f64 = 1e-8;

/// Root-mean-square difference of `20·log10(max(|·|, floor))`, in dB.
pub fn log_spectral_distance(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let db = |c: &Complex64| 20.0 * c.norm().max(LSD_FLOOR).log10();
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (db(x) - db(y)).powi(2)).sum();
    Ok((sum / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "wet")]
    Wet,
    #[serde(rename = "wpe")]
    Wpe,
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "proposed+")]
    ProposedPlus,
    #[serde(rename = "oracle-operator")]
    OracleOperator,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Wet,
        Method::Wpe,
        Method::Proposed,
        Method::ProposedPlus,
        Method::OracleOperator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Wet => "wet",
            Method::Wpe => "wpe",
            Method::Proposed => "proposed",
            Method::ProposedPlus => "proposed+",
            Method::OracleOperator => "oracle-operator",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub clips: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration: f64,
    pub rt60s: Vec<f64>,
    pub mixes: Vec<f64>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            clips: 30,
            seed: 0,
            sample_rate: 16_000,
            duration: 2.0,
            rt60s: vec![0.3, 0.8, 1.5],
            mixes: vec![0.3, 0.5, 0.7],
        }
    }
}

/// Seed offset that keeps prior-fitting clips disjoint from benchmark clips.
pub const PRIOR_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub clip: String,
    pub dry: AudioClip,
    pub reverb: ReverbSpec,
}

/// Every clip crossed with the rt60 × mix grid; kinds and pre-delays vary by clip.
pub fn corpus_from_clips(clips: Vec<(String, AudioClip)>, spec: &CorpusSpec) -> Result<Vec<BenchmarkCase>> {
    let mut cases = Vec::new();
    for (c, (name, dry)) in clips.into_iter().enumerate() {
        let kind = IrKind::ALL[c % IrKind::ALL.len()];
        let mut rng = stream(spec.seed.wrapping_add(c as u64), 12);
        for &rt60 in &spec.rt60s {
            for &mix in &spec.mixes {
                let pre_delay = 0.01 + 0.02 * rng.gen::<f64>();
                let reverb = ReverbSpec::new(rt60, pre_delay, mix, kind, rng.gen());
                reverb.validate()?;
                cases.push(BenchmarkCase { clip: name.clone(), dry: dry.clone(), reverb });
            }
        }
    }
    Ok(cases)
}

/// Generated voices crossed with the reverb grid.
pub fn synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<BenchmarkCase>> {
    let clips = (0..spec.clips)
        .map(|c| {
            let dry = synth_voice(spec.seed.wrapping_add(c as u64), spec.duration, spec.sample_rate)?;
            Ok((format!("voice-{c:03}"), dry))
        })
        .collect::<Result<Vec<_>>>()?;
    corpus_from_clips(clips, spec)
}

/// Per-band Gaussian prior fitted on generator clips disjoint from the benchmark corpus.
pub fn fit_synthetic_prior(spec: &CorpusSpec, clips: usize, stft_cfg: &StftConfig) -> Result<GaussianShrinkagePrior> {
    let specs = (0..clips)
        .into_par_iter()
        .map(|c| {
            let dry = synth_voice(spec.seed.wrapping_add(PRIOR_SEED_OFFSET + c as u64), spec.duration, spec.sample_rate)?;
            Ok(drop_dc(&stft(&dry, stft_cfg.window, stft_cfg.hop)?)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianShrinkagePrior::fit(&specs, PriorMode::PerBand, "synthetic-voice")?.with_sample_rate(spec.sample_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub pipeline: DereverbConfig,
    pub oracle_taps: usize,
    /// Relative singular-value cutoff for oracle degradations.
    pub oracle_rtol: f64,
    pub methods: Vec<Method>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig::desk()
    }
}

impl BenchmarkConfig {
    /// Settings for the 16 kHz desk-scale corpus.
    pub fn desk() -> Self {
        BenchmarkConfig {
            pipeline: DereverbConfig {
                stft: StftConfig { window: 512, hop: 128 },
                wpe: WpeConfig { taps: 40, delay: 4, iterations: 1, power_floor: 1e-10 },
                ddrm: DdrmParams::default(),
                refine: RefineParams { alpha: 1e-6, lambda: 1.0, n_refine: 1000 },
                block: 64,
            },
            oracle_taps: 32,
            oracle_rtol: ORACLE_RTOL,
            methods: Method::ALL.to_vec(),
        }
    }

    /// Small smoke-test settings.
    pub fn quick() -> Self {
        BenchmarkConfig {
            pipeline: DereverbConfig {
                stft: StftConfig { window: 256, hop: 64 },
                wpe: WpeConfig { taps: 8, delay: 2, iterations: 1, power_floor: 1e-10 },
                ddrm: DdrmParams { steps: 8, ..DdrmParams::default() },
                refine: RefineParams { alpha: 1e-5, lambda: 1.0, n_refine: 100 },
                block: 32,
            },
            oracle_taps: 8,
            oracle_rtol: ORACLE_RTOL,
            methods: Method::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.oracle_taps == 0 {
            return Err(Error::InvalidArgument("oracle operator needs at least one tap".into()));
        }
        if !(0.0..1.0).contains(&self.oracle_rtol) {
            return Err(Error::InvalidArgument("oracle cutoff must lie in [0, 1)".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no benchmark methods selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: usize,
    pub clip: String,
    pub rt60: f64,
    pub mix: f64,
    pub ir_kind: IrKind,
    pub method: Method,
    pub l1: f64,
    pub lsd: f64,
    /// Reserved for scores merged in from an external FAD tool.
    pub fad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case: usize,
    pub clip: String,
    pub method: Option<Method>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub cases: usize,
    pub l1_mean: f64,
    pub l1_std: f64,
    pub lsd_mean: f64,
    pub lsd_std: f64,
    pub fad_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub fingerprint: String,
    pub cases: usize,
    pub methods: Vec<Method>,
    pub summary: Vec<MethodSummary>,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<CaseFailure>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl BenchmarkReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn mean_l1(&self, method: Method) -> Option<f64> {
        self.summary_for(method).map(|s| s.l1_mean)
    }

    /// Cases where some method failed; their remaining rows are still reported.
    pub fn partial_cases(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.failures.iter().map(|f| f.case).collect();
        v.dedup();
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fingerprint, case count and the per-method summary table.
    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.fingerprint);
        let _ = writeln!(out, "cases {}", self.cases);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>10} {:>10} {:>10} {:>10} {:>8}",
            "method", "n", "l1 mean", "l1 std", "lsd mean", "lsd std", "fad"
        );
        for s in &self.summary {
            let fad = s.fad_mean.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>10.6} {:>10.6} {:>10.4} {:>10.4} {:>8}",
                s.method.as_str(),
                s.cases,
                s.l1_mean,
                s.l1_std,
                s.lsd_mean,
                s.lsd_std,
                fad
            );
        }
        out
    }

    /// Summary followed by one row per case and method, then any failures.
    pub fn render_text(&self) -> String {
        let mut out = self.render_summary();
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>5} {:<10} {:>5} {:>5} {:<18} {:<16} {:>10} {:>9} {:>6}",
            "case", "clip", "rt60", "mix", "kind", "method", "l1", "lsd", "fad"
        );
        for r in &self.rows {
            let fad = r.fad.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:>5} {:<10} {:>5.2} {:>5.2} {:<18} {:<16} {:>10.6} {:>9.4} {:>6}",
                r.case,
                r.clip,
                r.rt60,
                r.mix,
                r.ir_kind.as_str(),
                r.method.as_str(),
                r.l1,
                r.lsd,
                fad
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "failures");
            for f in &self.failures {
                let m = f.method.map_or("-", |m| m.as_str());
                let _ = writeln!(out, "{:>5} {:<10} {:<16} {}", f.case, f.clip, m, f.message);
            }
        }
        out
    }
}

/// Hash of the configuration and the exact corpus contents.
pub fn fingerprint(cases: &[BenchmarkCase], config: &BenchmarkConfig, prior_name: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(prior_name.as_bytes());
    for c in cases {
        h.update(c.clip.as_bytes());
        h.update(serde_json::to_vec(&c.reverb)?);
        h.update(c.dry.sample_rate.to_le_bytes());
        for s in &c.dry.samples {
            h.update(s.to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

fn score(
    estimate: &ComplexSpectrogram,
    dry_spec: &ComplexSpectrogram,
    sample_rate: u32,
) -> Result<(f64, f64)> {
    let audio = istft(estimate, sample_rate)?;
    let spec = stft(&audio, estimate.window_size(), estimate.hop_size())?;
    Ok((l1_spec_loss(&spec, dry_spec)?, log_spectral_distance(&spec, dry_spec)?))
}

type MethodResult = (Method, Result<(f64, f64)>);

fn run_case(
    index: usize,
    case: &BenchmarkCase,
    config: &BenchmarkConfig,
    prior: &dyn DenoiserPrior,
) -> Result<Vec<MethodResult>> {
    let cfg = &config.pipeline;
    let wet = synth_reverb(&case.dry, &case.reverb)?;
    let rate = case.dry.sample_rate;
    let dry_spec = stft(&case.dry, cfg.stft.window, cfg.stft.hop)?;
    let wet_spec = stft(&wet, cfg.stft.window, cfg.stft.hop)?;
    let mut run_cfg = *cfg;
    run_cfg.ddrm.seed = cfg.ddrm.seed.wrapping_add(index as u64);
    let wants = |m: Method| config.methods.contains(&m);
    let mut results = Vec::new();
    if wants(Method::Wet) {
        results.push((Method::Wet, score(&wet_spec, &dry_spec, rate)));
    }
    if wants(Method::Wpe) {
        let r = wpe_only(&wet_spec, &cfg.wpe).and_then(|(s, _)| score(&s, &dry_spec, rate));
        results.push((Method::Wpe, r));
    }
    if wants(Method::Proposed) || wants(Method::ProposedPlus) {
        if !wants(Method::ProposedPlus) {
            run_cfg.refine.n_refine = 0;
        }
        match dereverberate_detailed(&wet_spec, prior, &run_cfg, None) {
            Ok(out) => {
                if wants(Method::Proposed) {
                    results.push((Method::Proposed, score(&out.first_pass, &dry_spec, rate)));
                }
                if wants(Method::ProposedPlus) {
                    results.push((Method::ProposedPlus, score(&out.output, &dry_spec, rate)));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for m in [Method::Proposed, Method::ProposedPlus] {
                    if wants(m) {
                        results.push((m, Err(Error::Numerical(msg.clone()))));
                    }
                }
            }
        }
    }
    if wants(Method::OracleOperator) {
        let r = (|| {
            let (wet_nodc, _) = drop_dc(&wet_spec)?;
            let (dry_nodc, _) = drop_dc(&dry_spec)?;
            let op = estimate_oracle_operator(&wet_nodc, &dry_nodc, config.oracle_taps.min(cfg.block))?;
            let layout = BlockLayout::new(wet_spec.frames(), cfg.block)?;
            let degradations = op.degradations(&layout, config.oracle_rtol)?;
            let est = sample_with_degradations(&wet_spec, &degradations, prior, &run_cfg)?;
            score(&est, &dry_spec, rate)
        })();
        results.push((Method::OracleOperator, r));
    }
    Ok(results)
}

/// Score every selected method on every case. Failures are recorded per case and method.
pub fn run_benchmark(
    cases: &[BenchmarkCase],
    config: &BenchmarkConfig,
    prior: &dyn DenoiserPrior,
) -> Result<BenchmarkReport> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("benchmark corpus is empty".into()));
    }
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();
    let config = BenchmarkConfig { methods: methods.clone(), ..config.clone() };
    let outcomes: Vec<Result<Vec<MethodResult>>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_case(i, c, &config, prior))
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, (case, outcome)) in cases.iter().zip(outcomes).enumerate() {
        let results = match outcome {
            Ok(r) => r,
            Err(e) => {
                failures.push(CaseFailure { case: i, clip: case.clip.clone(), method: None, message: e.to_string() });
                continue;
            }
        };
        for (method, r) in results {
            match r {
                Ok((l1, lsd)) => rows.push(ReportRow {
                    case: i,
                    clip: case.clip.clone(),
                    rt60: case.reverb.rt60,
                    mix: case.reverb.wet_dry_mix,
                    ir_kind: case.reverb.ir_kind,
                    method,
                    l1,
                    lsd,
                    fad: None,
                }),
                Err(e) => failures.push(CaseFailure {
                    case: i,
                    clip: case.clip.clone(),
                    method: Some(method),
                    message: e.to_string(),
                }),
            }
        }
    }

    let mut grouped: BTreeMap<Method, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = grouped.entry(r.method).or_default();
        e.0.push(r.l1);
        e.1.push(r.lsd);
    }
    let summary = methods
        .iter()
        .map(|&m| {
            let (l1, lsd) = grouped.remove(&m).unwrap_or_default();
            let (l1_mean, l1_std) = mean_std(&l1);
            let (lsd_mean, lsd_std) = mean_std(&lsd);
            MethodSummary { method: m, cases: l1.len(), l1_mean, l1_std, lsd_mean, lsd_std, fad_mean: None }
        })
        .collect();
    Ok(BenchmarkReport {
        fingerprint: fingerprint(cases, &config, &prior.name())?,
        cases: cases.len(),
        methods,
        summary,
        rows,
        failures,
    })
}
