use std::path::{Path, PathBuf};
use std::str::FromStr;

use dereverb_core::evalkit::{fit_synthetic_prior, BenchmarkConfig, CorpusSpec};
use dereverb_core::pipeline::{oracle_prior_for, DereverbConfig};
use dereverb_core::prior::{DenoiserPrior, GaussianShrinkagePrior};
use dereverb_core::spectral::{read_wav, stft, ComplexSpectrogram};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{CliError, CliResult};

/// Generated clips used when no prior file is given.
pub const SYNTHETIC_PRIOR_CLIPS: usize = 30;
const SYNTHETIC_PRIOR_SECONDS: f64 = 2.0;

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_dereverb_config(path: Option<&Path>) -> CliResult<DereverbConfig> {
    load_toml(path)
}

pub fn load_bench_config(path: Option<&Path>) -> CliResult<BenchmarkConfig> {
    load_toml(path)
}

pub fn to_toml<T: Serialize>(value: &T) -> CliResult<String> {
    toml::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PriorSpec {
    /// Fit per-band statistics on generated voice clips.
    Synthetic,
    Gaussian(PathBuf),
    Oracle(PathBuf),
    External(PathBuf),
}

impl FromStr for PriorSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s == "synthetic" {
            return Ok(PriorSpec::Synthetic);
        }
        let (kind, path) = s
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("prior '{s}' must be synthetic or kind:path")))?;
        if path.is_empty() {
            return Err(CliError::Config(format!("prior '{s}' is missing a path")));
        }
        let path = PathBuf::from(path);
        match kind {
            "gaussian" => Ok(PriorSpec::Gaussian(path)),
            "oracle" => Ok(PriorSpec::Oracle(path)),
            "external" => Ok(PriorSpec::External(path)),
            _ => Err(CliError::Config(format!("unknown prior kind '{kind}'"))),
        }
    }
}

pub fn load_gaussian(path: &Path, config: &DereverbConfig) -> CliResult<GaussianShrinkagePrior> {
    let prior = GaussianShrinkagePrior::load(path)?;
    let bins = config.stft.window / 2;
    if prior.bins() != bins {
        return Err(CliError::Config(format!(
            "prior {} has {} bins, the STFT window {} needs {bins}",
            path.display(),
            prior.bins(),
            config.stft.window
        )));
    }
    Ok(prior)
}

/// Build the prior for dereverberating `wet` (a full spectrogram with DC).
pub fn build_prior(
    spec: &PriorSpec,
    wet: &ComplexSpectrogram,
    sample_rate: u32,
    config: &DereverbConfig,
) -> CliResult<Box<dyn DenoiserPrior>> {
    match spec {
        PriorSpec::Synthetic => {
            let corpus = CorpusSpec {
                clips: SYNTHETIC_PRIOR_CLIPS,
                sample_rate,
                duration: SYNTHETIC_PRIOR_SECONDS,
                ..CorpusSpec::default()
            };
            Ok(Box::new(fit_synthetic_prior(&corpus, SYNTHETIC_PRIOR_CLIPS, &config.stft)?))
        }
        PriorSpec::Gaussian(path) => Ok(Box::new(load_gaussian(path, config)?)),
        PriorSpec::Oracle(path) => {
            let dry = read_wav(path)?;
            if dry.sample_rate != sample_rate {
                return Err(CliError::Config(format!(
                    "oracle clip is {} Hz, input is {sample_rate} Hz",
                    dry.sample_rate
                )));
            }
            let dry_spec = stft(&dry, config.stft.window, config.stft.hop)?;
            if !dry_spec.same_shape(wet) {
                return Err(CliError::Config("oracle clip length differs from the input".into()));
            }
            Ok(Box::new(oracle_prior_for(wet, &dry_spec)?))
        }
        PriorSpec::External(path) => Err(CliError::Config(format!(
            "external priors are reserved and not supported by this build ({})",
            path.display()
        ))),
    }
}
