use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dereverb_core::evalkit::{IrKind, Method};
use dereverb_core::pipeline::DereverbConfig;
use dereverb_core::prior::PriorMode;
use dereverb_core::spectral::WavFormat;

use crate::EXIT_CODES;

#[derive(Debug, Parser)]
#[command(name = "dereverb", version, about = "Unsupervised dereverberation of mono recordings", after_help = EXIT_CODES)]
pub struct Cli {
    /// Worker threads for band- and clip-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dereverberate a WAV file.
    #[command(visible_alias = "dereverb", after_help = EXIT_CODES)]
    Run(RunArgs),
    /// Score all methods on a reverberated corpus.
    #[command(after_help = EXIT_CODES)]
    Bench(BenchArgs),
    /// Add synthetic reverb to a dry WAV file.
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
    /// Write a synthetic sung-voice clip.
    #[command(after_help = EXIT_CODES)]
    Voice(VoiceArgs),
    /// Fit Gaussian prior statistics from dry recordings.
    #[command(after_help = EXIT_CODES)]
    FitPrior(FitPriorArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// WPE, first pass, refinement, second pass.
    Full,
    /// WPE and a single sampling pass.
    Proposed,
    /// WPE filtering only.
    WpeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Float32,
    Pcm16,
}

impl From<OutputFormat> for WavFormat {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Float32 => WavFormat::Float32,
            OutputFormat::Pcm16 => WavFormat::Pcm16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorModeArg {
    PerBand,
    PerBin,
}

impl From<PriorModeArg> for PriorMode {
    fn from(m: PriorModeArg) -> Self {
        match m {
            PriorModeArg::PerBand => PriorMode::PerBand,
            PriorModeArg::PerBin => PriorMode::PerBin,
        }
    }
}

/// Flags that override individual config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineOverrides {
    /// STFT window length in samples.
    #[arg(long)]
    pub window: Option<usize>,
    /// STFT hop in samples.
    #[arg(long)]
    pub hop: Option<usize>,
    /// WPE prediction taps L.
    #[arg(long)]
    pub taps: Option<usize>,
    /// WPE prediction delay D in frames.
    #[arg(long)]
    pub delay: Option<usize>,
    /// WPE reweighting iterations.
    #[arg(long)]
    pub wpe_iterations: Option<usize>,
    /// Sampler noise weight on unobserved coordinates.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Sampler weight on the observation for observed coordinates.
    #[arg(long)]
    pub eta_b: Option<f64>,
    /// Observation noise level in normalized units.
    #[arg(long)]
    pub sigma_y: Option<f64>,
    /// Sampling steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Refinement step size.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Refinement ridge weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Refinement iterations.
    #[arg(long)]
    pub n_refine: Option<usize>,
    /// Frames per sampling block.
    #[arg(long)]
    pub block: Option<usize>,
}

impl PipelineOverrides {
    pub fn apply(&self, cfg: &mut DereverbConfig) {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src {
                    cfg.$($dst)+ = v;
                }
            };
        }
        set!(window => stft.window);
        set!(hop => stft.hop);
        set!(taps => wpe.taps);
        set!(delay => wpe.delay);
        set!(wpe_iterations => wpe.iterations);
        set!(eta => ddrm.eta);
        set!(eta_b => ddrm.eta_b);
        set!(sigma_y => ddrm.sigma_y);
        set!(steps => ddrm.steps);
        set!(alpha => refine.alpha);
        set!(lambda => refine.lambda);
        set!(n_refine => refine.n_refine);
        set!(block => block);
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Reverberant mono WAV file.
    #[arg(required_unless_present = "print_config")]
    pub input: Option<PathBuf>,
    /// Destination WAV file.
    #[arg(required_unless_present = "print_config")]
    pub output: Option<PathBuf>,
    /// TOML config; missing values take the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prior: `synthetic`, `gaussian:<stats.json>`, `oracle:<dry.wav>` or `external:<weights>`.
    #[arg(long, default_value = "synthetic")]
    pub prior: String,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    pub mode: Mode,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Manifest path (default: `<output>.manifest.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory for per-stage spectrogram, filter and trace dumps.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Float32)]
    pub format: OutputFormat,
    #[command(flatten)]
    pub overrides: PipelineOverrides,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Use generated voice clips as the dry corpus.
    #[arg(long, conflicts_with = "corpus")]
    pub synthetic: bool,
    /// Directory of dry mono WAV files.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of generated clips.
    #[arg(long, default_value_t = 30)]
    pub clips: usize,
    /// Generated clip length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Small STFT, few taps and few steps at 8 kHz.
    #[arg(long)]
    pub quick: bool,
    /// Comma-separated subset of wet, wpe, proposed, proposed+, oracle-operator.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    /// Seed for the corpus and the samplers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for report.json, report.txt and manifest.json.
    #[arg(long, required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
    /// TOML benchmark config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prior: `synthetic` or `gaussian:<stats.json>`.
    #[arg(long, default_value = "synthetic")]
    pub prior: String,
    /// Generated clips used to fit the synthetic prior.
    #[arg(long, default_value_t = 30)]
    pub prior_clips: usize,
    /// Taps per band of the least-squares oracle operator.
    #[arg(long)]
    pub oracle_taps: Option<usize>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(flatten)]
    pub overrides: PipelineOverrides,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dry mono WAV file.
    pub input: PathBuf,
    /// Destination WAV file.
    pub output: PathBuf,
    /// Seconds for the tail to decay by 60 dB.
    #[arg(long)]
    pub rt60: f64,
    /// Seconds between direct sound and tail.
    #[arg(long, default_value_t = 0.02)]
    pub pre_delay: f64,
    /// Wet/dry mix in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub mix: f64,
    /// Impulse response family: exponential-decay, velvet-noise or comb-resonant.
    #[arg(long, value_parser = parse_kind, default_value = "exponential-decay")]
    pub kind: IrKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add white noise at this SNR in dB.
    #[arg(long)]
    pub snr: Option<f64>,
    /// Also write the impulse response.
    #[arg(long)]
    pub ir_out: Option<PathBuf>,
    /// Manifest path (default: `<output>.manifest.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Float32)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct VoiceArgs {
    /// Destination WAV file.
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 44_100)]
    pub rate: u32,
    #[arg(long, value_enum, default_value_t = OutputFormat::Float32)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct FitPriorArgs {
    /// Dry mono WAV files.
    pub inputs: Vec<PathBuf>,
    /// Fit on this many generated voice clips instead of files.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, value_enum, default_value_t = PriorModeArg::PerBand)]
    pub mode: PriorModeArg,
    #[arg(long, default_value_t = dereverb_core::spectral::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = dereverb_core::spectral::DEFAULT_HOP)]
    pub hop: usize,
    /// Sample rate of generated clips.
    #[arg(long, default_value_t = 44_100)]
    pub rate: u32,
    /// Length of generated clips in seconds.
    #[arg(long, default_value_t = 3.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination statistics file.
    #[arg(short, long)]
    pub output: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.trim().parse().map_err(|e: dereverb_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<IrKind, String> {
    s.parse().map_err(|e: dereverb_core::Error| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_touch_only_given_fields() {
        let cli = Cli::try_parse_from(["dereverb", "run", "a.wav", "b.wav", "--taps", "12", "--eta-b", "0.5"]).unwrap();
        let Command::Run(args) = cli.command else { panic!("expected run") };
        let mut cfg = DereverbConfig::default();
        args.overrides.apply(&mut cfg);
        assert_eq!(cfg.wpe.taps, 12);
        assert_eq!(cfg.ddrm.eta_b, 0.5);
        assert_eq!(cfg.ddrm.eta, DereverbConfig::default().ddrm.eta);
    }

    #[test]
    fn method_lists_parse() {
        let cli = Cli::try_parse_from(["dereverb", "bench", "--synthetic", "--out", "o", "--methods", "wpe,proposed+"]).unwrap();
        let Command::Bench(args) = cli.command else { panic!("expected bench") };
        assert_eq!(args.methods, Some(vec![Method::Wpe, Method::ProposedPlus]));
        assert!(Cli::try_parse_from(["dereverb", "bench", "--out", "o", "--methods", "magic"]).is_err());
    }
}
