//! End-to-end dereverberation: WPE, a first sampling pass, filter refinement
//! against that estimate, and a second sampling pass with the refined filters.

use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddrm::{sample_problems, BandDegradation, BandProblem, BlockLayout, DdrmParams, StepTrace};
use crate::error::{Error, Result, Stage, StageExt};
use crate::prior::{cosine_schedule, DenoiserPrior, OraclePrior};
use crate::refine::{refine_filter, RefineParams};
use crate::spectral::{self, drop_dc, restore_dc, AudioClip, ComplexSpectrogram};
use crate::wpe::{apply_dereverb_filter, estimate_wpe_filter, WpeConfig, WpeFilterBank};

/// RNG stream of the first sampling pass; the second pass uses `FIRST_PASS_STREAM + 1`.
pub const FIRST_PASS_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window: spectral::DEFAULT_WINDOW,
            hop: spectral::DEFAULT_HOP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DereverbConfig {
    pub stft: StftConfig,
    pub wpe: WpeConfig,
    pub ddrm: DdrmParams,
    pub refine: RefineParams,
    /// Frames per sampling block `m`.
    pub block: usize,
}

impl Default for DereverbConfig {
    fn default() -> Self {
        DereverbConfig {
            stft: StftConfig::default(),
            wpe: WpeConfig::default(),
            ddrm: DdrmParams::default(),
            refine: RefineParams::default(),
            block: 256,
        }
    }
}

impl DereverbConfig {
    pub fn validate(&self) -> Result<()> {
        self.wpe.validate()?;
        self.ddrm.validate()?;
        self.refine.validate()?;
        if self.block == 0 {
            return Err(Error::InvalidArgument("block size must be positive".into()));
        }
        if !spectral::is_cola(self.stft.window, self.stft.hop) || self.stft.window % 2 != 0 {
            return Err(Error::NonCola {
                window: self.stft.window,
                hop: self.stft.hop,
            });
        }
        Ok(())
    }
}

/// Progress notification: `done` of `total` units finished in `stage`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub stage: Stage,
    pub done: usize,
    pub total: usize,
}

pub type ProgressHook<'a> = &'a (dyn Fn(Progress) + Sync);

#[derive(Debug, Clone)]
pub struct DereverbOutput {
    /// Final estimate with the DC row restored.
    pub output: ComplexSpectrogram,
    /// Estimate after the first sampling pass (no refinement), DC restored.
    pub first_pass: ComplexSpectrogram,
    pub wpe_filters: WpeFilterBank,
    pub refined_filters: Option<WpeFilterBank>,
    /// RMS of the DC-free wet spectrogram; the prior works in units of this scale.
    pub scale: f64,
    pub first_trace: Vec<StepTrace>,
    pub second_trace: Vec<StepTrace>,
    pub refine_halvings: usize,
    pub timings: Vec<(Stage, f64)>,
}

/// Scale that brings the DC-free part of `wet` to unit RMS.
pub fn normalization_scale(wet: &ComplexSpectrogram) -> Result<f64> {
    let (nodc, _) = drop_dc(wet)?;
    Ok(nodc.rms())
}

/// Oracle prior holding `dry` in the normalized units the pipeline uses for `wet`.
pub fn oracle_prior_for(wet: &ComplexSpectrogram, dry: &ComplexSpectrogram) -> Result<OraclePrior> {
    if !wet.same_shape(dry) {
        return Err(Error::ShapeMismatch("dry and wet spectrograms differ in shape".into()));
    }
    let scale = normalization_scale(wet)?;
    let (dry_nodc, _) = drop_dc(dry)?;
    let unit = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    Ok(OraclePrior::new(dry_nodc.scaled(unit)))
}

/// Per-band sampling problems for a dereverberation filter bank.
pub fn dereverb_problems(
    wet: &ComplexSpectrogram,
    bank: &WpeFilterBank,
    block: usize,
) -> Result<Vec<BandProblem>> {
    let layout = BlockLayout::new(wet.frames(), block)?;
    let lengths = layout.lengths();
    (0..wet.bins())
        .into_par_iter()
        .map(|k| {
            let deg = BandDegradation::dereverb(&bank.filters[k], bank.delay, &lengths)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("band {k}: {msg}")),
                    other => other,
                })?;
            BandProblem::new(&wet.band(k), &deg, &layout)
        })
        .collect()
}

/// Refine every band's filter against the dry estimate, using whole bands as the window.
pub fn refine_bank(
    wet: &ComplexSpectrogram,
    estimate: &ComplexSpectrogram,
    bank: &WpeFilterBank,
    params: &RefineParams,
    progress: Option<ProgressHook<'_>>,
) -> Result<(WpeFilterBank, usize)> {
    let frames = wet.frames();
    let context = bank.delay + bank.taps() - 1;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results = (0..wet.bins())
        .into_par_iter()
        .map(|k| {
            let band = wet.band(k);
            let window: Vec<Complex64> = (0..frames + context)
                .map(|i| if i < frames { band[frames - 1 - i] } else { Complex64::new(0.0, 0.0) })
                .collect();
            let xb = estimate.band(k);
            let xbar: Vec<Complex64> = (0..frames).map(|i| xb[frames - 1 - i]).collect();
            let out = refine_filter(&bank.filters[k], &window, &xbar, bank.delay, params)?;
            if let Some(hook) = progress {
                let d = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                hook(Progress { stage: Stage::Refine, done: d, total: wet.bins() });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let halvings = results.iter().map(|r| r.halvings).sum();
    let filters = results.into_iter().map(|r| r.filter).collect();
    Ok((WpeFilterBank { filters, delay: bank.delay }, halvings))
}

pub fn dereverberate(
    wet: &ComplexSpectrogram,
    prior: &dyn DenoiserPrior,
    config: &DereverbConfig,
) -> Result<ComplexSpectrogram> {
    Ok(dereverberate_detailed(wet, prior, config, None)?.output)
}

/// Full pipeline on a wet spectrogram that still has its DC row.
pub fn dereverberate_detailed(
    wet: &ComplexSpectrogram,
    prior: &dyn DenoiserPrior,
    config: &DereverbConfig,
    progress: Option<ProgressHook<'_>>,
) -> Result<DereverbOutput> {
    config.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: Stage, timings: &mut Vec<(Stage, f64)>| {
        timings.push((stage, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let (nodc, dc) = drop_dc(wet).stage(Stage::Analysis)?;
    let scale = nodc.rms();
    let taps = config.wpe.taps;
    if scale == 0.0 {
        return Ok(DereverbOutput {
            output: wet.clone(),
            first_pass: wet.clone(),
            wpe_filters: WpeFilterBank::zeros(nodc.bins(), taps, config.wpe.delay),
            refined_filters: None,
            scale,
            first_trace: Vec::new(),
            second_trace: Vec::new(),
            refine_halvings: 0,
            timings,
        });
    }
    let y = nodc.scaled(1.0 / scale);
    let schedule = cosine_schedule(config.ddrm.steps).stage(Stage::FirstPass)?;

    let bank = estimate_wpe_filter(&y, &config.wpe).stage(Stage::Wpe)?;
    lap(Stage::Wpe, &mut timings);
    let problems = dereverb_problems(&y, &bank, config.block).stage(Stage::Factorize)?;
    lap(Stage::Factorize, &mut timings);
    let notify = |stage: Stage, done: usize, total: usize| {
        if let Some(h) = progress {
            h(Progress { stage, done, total });
        }
    };
    let first = sample_problems(&y, &problems, prior, &schedule, &config.ddrm, FIRST_PASS_STREAM)
        .stage(Stage::FirstPass)?;
    drop(problems);
    notify(Stage::FirstPass, 1, 1);
    lap(Stage::FirstPass, &mut timings);

    let (estimate, refined, second_trace, halvings) = if config.refine.n_refine == 0 {
        (first.estimate.clone(), None, Vec::new(), 0)
    } else {
        let (refined, halvings) =
            refine_bank(&y, &first.estimate, &bank, &config.refine, progress).stage(Stage::Refine)?;
        lap(Stage::Refine, &mut timings);
        let problems = dereverb_problems(&y, &refined, config.block).stage(Stage::Factorize)?;
        let second = sample_problems(&y, &problems, prior, &schedule, &config.ddrm, FIRST_PASS_STREAM + 1)
            .stage(Stage::SecondPass)?;
        notify(Stage::SecondPass, 1, 1);
        lap(Stage::SecondPass, &mut timings);
        (second.estimate, Some(refined), second.trace, halvings)
    };
    let output = restore_dc(&estimate.scaled(scale), &dc).stage(Stage::Synthesis)?;
    let first_pass = restore_dc(&first.estimate.scaled(scale), &dc).stage(Stage::Synthesis)?;
    Ok(DereverbOutput {
        output,
        first_pass,
        wpe_filters: bank,
        refined_filters: refined,
        scale,
        first_trace: first.trace,
        second_trace,
        refine_halvings: halvings,
        timings,
    })
}

/// WPE alone: estimate on the DC-free wet spectrogram, filter it, restore DC.
pub fn wpe_only(wet: &ComplexSpectrogram, config: &WpeConfig) -> Result<(ComplexSpectrogram, WpeFilterBank)> {
    let (nodc, dc) = drop_dc(wet).stage(Stage::Analysis)?;
    if nodc.rms() == 0.0 {
        return Ok((wet.clone(), WpeFilterBank::zeros(nodc.bins(), config.taps, config.delay)));
    }
    let bank = estimate_wpe_filter(&nodc, config).stage(Stage::Wpe)?;
    let filtered = apply_dereverb_filter(&nodc, &bank).stage(Stage::Wpe)?;
    Ok((restore_dc(&filtered, &dc).stage(Stage::Synthesis)?, bank))
}

/// Waveform-level convenience wrapper around [`dereverberate_detailed`].
pub fn dereverberate_clip(
    wet: &AudioClip,
    prior: &dyn DenoiserPrior,
    config: &DereverbConfig,
    progress: Option<ProgressHook<'_>>,
) -> Result<(AudioClip, DereverbOutput)> {
    let spec = spectral::stft(wet, config.stft.window, config.stft.hop).stage(Stage::Analysis)?;
    let out = dereverberate_detailed(&spec, prior, config, progress)?;
    let clip = spectral::istft(&out.output, wet.sample_rate).stage(Stage::Synthesis)?;
    Ok((clip, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddrm::sample_problems;
    use crate::prior::{GaussianShrinkagePrior, PriorMode};
    use crate::testutil::rng;
    use rand::Rng;

    fn small_config() -> DereverbConfig {
        DereverbConfig {
            stft: StftConfig { window: 64, hop: 16 },
            wpe: WpeConfig { taps: 4, delay: 2, iterations: 1, power_floor: 1e-10 },
            ddrm: DdrmParams { steps: 8, ..Default::default() },
            refine: RefineParams { alpha: 1e-4, lambda: 1.0, n_refine: 50 },
            block: 16,
        }
    }

    fn clip(seed: u64, len: usize) -> AudioClip {
        let mut r = rng(seed);
        let mut x: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        for n in 40..len {
            x[n] += 0.6 * x[n - 40];
        }
        AudioClip::new(x, 8000).unwrap()
    }

    fn prior_for(spec: &ComplexSpectrogram) -> GaussianShrinkagePrior {
        let (nodc, _) = drop_dc(spec).unwrap();
        GaussianShrinkagePrior::fit(&[nodc], PriorMode::PerBand, "test").unwrap()
    }

    #[test]
    fn defaults_are_the_published_settings() {
        let c = DereverbConfig::default();
        assert_eq!((c.wpe.taps, c.wpe.delay, c.wpe.iterations), (150, 8, 1));
        assert_eq!((c.ddrm.eta, c.ddrm.eta_b, c.ddrm.sigma_y, c.ddrm.steps), (0.7, 0.2, 1e-6, 20));
        assert_eq!((c.refine.alpha, c.refine.lambda, c.refine.n_refine), (1e-6, 1.0, 10_000));
        assert_eq!((c.stft.window, c.stft.hop), (1024, 256));
    }

    #[test]
    fn no_refinement_equals_single_pass() {
        let cfg = DereverbConfig { refine: RefineParams { n_refine: 0, ..small_config().refine }, ..small_config() };
        let spec = spectral::stft(&clip(1, 3000), 64, 16).unwrap();
        let prior = prior_for(&spec);
        let out = dereverberate(&spec, &prior, &cfg).unwrap();

        let (nodc, dc) = drop_dc(&spec).unwrap();
        let scale = nodc.rms();
        let y = nodc.scaled(1.0 / scale);
        let bank = estimate_wpe_filter(&y, &cfg.wpe).unwrap();
        let problems = dereverb_problems(&y, &bank, cfg.block).unwrap();
        let sched = cosine_schedule(cfg.ddrm.steps).unwrap();
        let est = sample_problems(&y, &problems, &prior, &sched, &cfg.ddrm, FIRST_PASS_STREAM).unwrap();
        let manual = restore_dc(&est.estimate.scaled(scale), &dc).unwrap();
        assert_eq!(out, manual);
    }

    #[test]
    fn deterministic_and_dc_preserving() {
        let cfg = small_config();
        let spec = spectral::stft(&clip(2, 3000), 64, 16).unwrap();
        let prior = prior_for(&spec);
        let a = dereverberate_detailed(&spec, &prior, &cfg, None).unwrap();
        let b = dereverberate_detailed(&spec, &prior, &cfg, None).unwrap();
        assert_eq!(a.output, b.output);
        assert!(a.refined_filters.is_some());
        assert_ne!(a.output, a.first_pass);
        for n in 0..spec.frames() {
            assert_eq!(a.output.get(n, 0), spec.get(n, 0));
        }
    }

    #[test]
    fn silent_input_passes_through() {
        let silent = AudioClip::new(vec![0.0; 2000], 8000).unwrap();
        let spec = spectral::stft(&silent, 64, 16).unwrap();
        let prior = GaussianShrinkagePrior::new(
            PriorMode::PerBand,
            32,
            None,
            vec![Complex64::new(0.0, 0.0); 32],
            vec![1.0; 32],
            crate::prior::PriorMetadata { clips: 0, window_size: 64, hop_size: 16, sample_rate: None, source: "t".into() },
        )
        .unwrap();
        let (out, _) = dereverberate_clip(&silent, &prior, &small_config(), None).unwrap();
        assert!(out.samples.iter().all(|v| *v == 0.0));
        assert_eq!(dereverberate(&spec, &prior, &small_config()).unwrap(), spec);
    }

    #[test]
    fn errors_carry_stage() {
        let spec = spectral::stft(&clip(3, 300), 64, 16).unwrap();
        let prior = prior_for(&spec);
        let mut cfg = small_config();
        cfg.wpe.taps = 40;
        let err = dereverberate(&spec, &prior, &cfg).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Wpe));
        assert!(matches!(err.root(), Error::TooFewFrames { .. }));
    }

    #[test]
    fn progress_hook_sees_every_band() {
        let spec = spectral::stft(&clip(4, 2000), 64, 16).unwrap();
        let prior = prior_for(&spec);
        let seen = std::sync::Mutex::new(Vec::new());
        let hook = |p: Progress| seen.lock().unwrap().push(p);
        dereverberate_detailed(&spec, &prior, &small_config(), Some(&hook)).unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen.iter().filter(|p| p.stage == Stage::Refine).count(), 32);
        assert!(seen.iter().any(|p| p.stage == Stage::SecondPass));
    }

    #[test]
    fn config_round_trips_through_serde() {
        let c = small_config();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DereverbConfig>(&text).unwrap(), c);
        let partial: DereverbConfig = serde_json::from_str("{\"block\": 64}").unwrap();
        assert_eq!(partial.block, 64);
        assert_eq!(partial.wpe, WpeConfig::default());
    }
}
