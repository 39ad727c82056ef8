use std::path::{Path, PathBuf};
use std::time::Instant;

use dereverb_core::evalkit::{
    corpus_from_clips, fit_synthetic_prior, reverb_ir, run_benchmark, synth_reverb, synth_voice,
    synthetic_corpus, BenchmarkConfig, CorpusSpec, ReverbSpec,
};
use dereverb_core::pipeline::{dereverberate_detailed, wpe_only, DereverbConfig, Progress, StftConfig};
use dereverb_core::prior::{DenoiserPrior, GaussianShrinkagePrior};
use dereverb_core::spectral::{istft, read_wav, stft, write_wav, AudioClip, ComplexSpectrogram};
use serde::Serialize;

use crate::args::{BenchArgs, Cli, Command, FitPriorArgs, Mode, RunArgs, SynthArgs, VoiceArgs};
use crate::config::{build_prior, load_bench_config, load_dereverb_config, load_gaussian, to_toml, PriorSpec};
use crate::manifest::{default_manifest_path, write_atomic, RunManifest};
use crate::{CliError, CliResult};

pub fn dispatch(cli: Cli, args: &[String]) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads {n} ignored");
        }
    }
    match cli.command {
        Command::Run(a) => cmd_run(&a, args),
        Command::Bench(a) => cmd_bench(&a, args),
        Command::Synth(a) => cmd_synth(&a, args),
        Command::Voice(a) => cmd_voice(&a, args),
        Command::FitPrior(a) => cmd_fit_prior(&a, args),
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("missing {what}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string(value).map_err(|e| CliError::io(path.display(), e))?;
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize)]
struct SpectrogramDump {
    frames: usize,
    bins: usize,
    window_size: usize,
    hop_size: usize,
    dc_dropped: bool,
    re: Vec<f64>,
    im: Vec<f64>,
}

fn dump_spectrogram(dir: &Path, name: &str, s: &ComplexSpectrogram) -> CliResult<()> {
    let dump = SpectrogramDump {
        frames: s.frames(),
        bins: s.bins(),
        window_size: s.window_size(),
        hop_size: s.hop_size(),
        dc_dropped: s.dc_dropped(),
        re: s.data().iter().map(|c| c.re).collect(),
        im: s.data().iter().map(|c| c.im).collect(),
    };
    write_json(&dir.join(format!("{name}.json")), &dump)
}

/// Effective pipeline config for `run`, after the file, flags, seed and mode.
pub fn resolve_run_config(a: &RunArgs) -> CliResult<DereverbConfig> {
    let mut cfg = load_dereverb_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    if let Some(seed) = a.seed {
        cfg.ddrm.seed = seed;
    }
    if a.mode == Mode::Proposed {
        cfg.refine.n_refine = 0;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn cmd_run(a: &RunArgs, args: &[String]) -> CliResult<()> {
    let cfg = resolve_run_config(a)?;
    if a.print_config {
        print!("{}", to_toml(&cfg)?);
        return Ok(());
    }
    let input = required(&a.input, "input path")?;
    let output = required(&a.output, "output path")?;
    let prior_spec: PriorSpec = a.prior.parse()?;
    let mut manifest = RunManifest::new("run", args, json(&cfg), Some(cfg.ddrm.seed));
    manifest.notes = serde_json::json!({ "mode": format!("{:?}", a.mode), "prior": a.prior });

    let clock = Instant::now();
    let clip = read_wav(input)?;
    manifest.input(input)?;
    let wet = stft(&clip, cfg.stft.window, cfg.stft.hop)?;
    manifest.time("analysis", clock.elapsed().as_secs_f64());
    if let Some(dir) = &a.dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        dump_spectrogram(dir, "wet", &wet)?;
    }

    let estimate = match a.mode {
        Mode::WpeOnly => {
            let clock = Instant::now();
            let (est, bank) = wpe_only(&wet, &cfg.wpe)?;
            manifest.time("wpe", clock.elapsed().as_secs_f64());
            if let Some(dir) = &a.dump_dir {
                write_json(&dir.join("wpe_filters.json"), &bank)?;
            }
            est
        }
        Mode::Full | Mode::Proposed => {
            let clock = Instant::now();
            let prior = build_prior(&prior_spec, &wet, clip.sample_rate, &cfg)?;
            if let PriorSpec::Oracle(p) | PriorSpec::Gaussian(p) = &prior_spec {
                manifest.input(p)?;
            }
            manifest.time("prior", clock.elapsed().as_secs_f64());
            let hook = |p: Progress| log::debug!("{}: {}/{}", p.stage, p.done, p.total);
            let out = dereverberate_detailed(&wet, prior.as_ref(), &cfg, Some(&hook))?;
            for (stage, secs) in &out.timings {
                manifest.time(stage.to_string(), *secs);
            }
            log::info!("refinement halved its step {} times", out.refine_halvings);
            if let Some(dir) = &a.dump_dir {
                dump_spectrogram(dir, "first_pass", &out.first_pass)?;
                write_json(&dir.join("wpe_filters.json"), &out.wpe_filters)?;
                if let Some(r) = &out.refined_filters {
                    write_json(&dir.join("refined_filters.json"), r)?;
                }
                write_json(&dir.join("trace.json"), &(&out.first_trace, &out.second_trace))?;
            }
            out.output
        }
    };
    if let Some(dir) = &a.dump_dir {
        dump_spectrogram(dir, "output", &estimate)?;
    }
    let clock = Instant::now();
    let audio = istft(&estimate, clip.sample_rate)?;
    write_wav(output, &audio, a.format.into())?;
    manifest.time("synthesis", clock.elapsed().as_secs_f64());
    manifest.output(output)?;
    let mpath = a.manifest.clone().unwrap_or_else(|| default_manifest_path(output));
    manifest.write(&mpath)
}

/// Effective benchmark config and corpus for `bench`.
pub fn resolve_bench(a: &BenchArgs) -> CliResult<(BenchmarkConfig, CorpusSpec)> {
    let mut cfg = if a.quick && a.config.is_none() {
        BenchmarkConfig::quick()
    } else {
        load_bench_config(a.config.as_deref())?
    };
    a.overrides.apply(&mut cfg.pipeline);
    cfg.pipeline.ddrm.seed = a.seed;
    if let Some(m) = &a.methods {
        cfg.methods = m.clone();
    }
    if let Some(t) = a.oracle_taps {
        cfg.oracle_taps = t;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let mut corpus = CorpusSpec { clips: a.clips, seed: a.seed, ..CorpusSpec::default() };
    if a.quick {
        corpus.sample_rate = 8000;
        corpus.duration = 0.8;
    }
    if let Some(d) = a.duration {
        corpus.duration = d;
    }
    if corpus.clips == 0 || !(corpus.duration > 0.0) {
        return Err(CliError::Config("corpus needs at least one clip of positive length".into()));
    }
    Ok((cfg, corpus))
}

fn load_corpus_dir(dir: &Path) -> CliResult<Vec<(String, AudioClip)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("no .wav files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok((name, read_wav(p)?))
        })
        .collect()
}

fn cmd_bench(a: &BenchArgs, args: &[String]) -> CliResult<()> {
    let (cfg, mut corpus) = resolve_bench(a)?;
    if a.print_config {
        print!("{}", to_toml(&cfg)?);
        return Ok(());
    }
    let out = required(&a.out, "--out directory")?;
    if !a.synthetic && a.corpus.is_none() {
        return Err(CliError::Config("choose --synthetic or --corpus <dir>".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out.display(), e))?;
    let mut manifest = RunManifest::new("bench", args, json(&cfg), Some(a.seed));

    let clock = Instant::now();
    let cases = match &a.corpus {
        Some(dir) => {
            let clips = load_corpus_dir(dir)?;
            let rate = clips[0].1.sample_rate;
            if clips.iter().any(|c| c.1.sample_rate != rate) {
                return Err(CliError::Config("corpus files differ in sample rate".into()));
            }
            corpus.sample_rate = rate;
            corpus.clips = clips.len();
            corpus_from_clips(clips, &corpus)?
        }
        None => synthetic_corpus(&corpus)?,
    };
    let prior: Box<dyn DenoiserPrior> = match a.prior.parse::<PriorSpec>()? {
        PriorSpec::Synthetic => Box::new(fit_synthetic_prior(&corpus, a.prior_clips, &cfg.pipeline.stft)?),
        PriorSpec::Gaussian(p) => {
            manifest.input(&p)?;
            Box::new(load_gaussian(&p, &cfg.pipeline)?)
        }
        other => return Err(CliError::Config(format!("benchmark priors must be synthetic or gaussian, got {other:?}"))),
    };
    manifest.time("corpus", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let report = run_benchmark(&cases, &cfg, prior.as_ref())?;
    manifest.time("benchmark", clock.elapsed().as_secs_f64());
    for f in &report.failures {
        log::warn!("case {} ({}): {}", f.case, f.clip, f.message);
    }
    let text = report.render_text();
    let json_path = out.join("report.json");
    let text_path = out.join("report.txt");
    write_atomic(&json_path, report.to_json()?.as_bytes())?;
    write_atomic(&text_path, text.as_bytes())?;
    manifest.output(&json_path)?;
    manifest.output(&text_path)?;
    manifest.notes = serde_json::json!({ "corpus": corpus, "prior": a.prior, "prior_clips": a.prior_clips });
    manifest.write(&out.join("manifest.json"))?;
    print!("{}", report.render_summary());
    Ok(())
}

fn cmd_synth(a: &SynthArgs, args: &[String]) -> CliResult<()> {
    let spec = ReverbSpec {
        rt60: a.rt60,
        pre_delay: a.pre_delay,
        wet_dry_mix: a.mix,
        ir_kind: a.kind,
        seed: a.seed,
        snr_db: a.snr,
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let dry = read_wav(&a.input)?;
    let mut manifest = RunManifest::new("synth", args, json(&spec), Some(a.seed));
    manifest.input(&a.input)?;
    let wet = synth_reverb(&dry, &spec)?;
    write_wav(&a.output, &wet, a.format.into())?;
    manifest.output(&a.output)?;
    if let Some(p) = &a.ir_out {
        let ir = AudioClip::new(reverb_ir(&spec, dry.sample_rate)?, dry.sample_rate)?;
        write_wav(p, &ir, a.format.into())?;
        manifest.output(p)?;
    }
    manifest.write(&a.manifest.clone().unwrap_or_else(|| default_manifest_path(&a.output)))
}

fn cmd_voice(a: &VoiceArgs, args: &[String]) -> CliResult<()> {
    let clip = synth_voice(a.seed, a.duration, a.rate).map_err(|e| CliError::Config(e.to_string()))?;
    write_wav(&a.output, &clip, a.format.into())?;
    let mut manifest = RunManifest::new(
        "voice",
        args,
        serde_json::json!({ "duration": a.duration, "rate": a.rate }),
        Some(a.seed),
    );
    manifest.output(&a.output)?;
    manifest.write(&default_manifest_path(&a.output))
}

fn cmd_fit_prior(a: &FitPriorArgs, args: &[String]) -> CliResult<()> {
    let stft_cfg = StftConfig { window: a.window, hop: a.hop };
    let mut manifest = RunManifest::new("fit-prior", args, json(&stft_cfg), a.synthetic.map(|_| a.seed));
    let prior = match a.synthetic {
        Some(n) => {
            if !a.inputs.is_empty() {
                return Err(CliError::Config("give either input files or --synthetic, not both".into()));
            }
            let corpus = CorpusSpec { seed: a.seed, sample_rate: a.rate, duration: a.duration, ..CorpusSpec::default() };
            fit_synthetic_prior(&corpus, n, &stft_cfg)?
        }
        None => {
            if a.inputs.is_empty() {
                return Err(CliError::Config("no input files".into()));
            }
            let mut specs = Vec::with_capacity(a.inputs.len());
            let mut rate = None;
            for p in &a.inputs {
                let clip = read_wav(p)?;
                if rate.is_some_and(|r| r != clip.sample_rate) {
                    return Err(CliError::Config("input files differ in sample rate".into()));
                }
                rate = Some(clip.sample_rate);
                manifest.input(p)?;
                let s = stft(&clip, a.window, a.hop)?;
                specs.push(dereverb_core::spectral::drop_dc(&s)?.0);
            }
            let source = a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
            let mut prior = GaussianShrinkagePrior::fit(&specs, a.mode.into(), &source)?;
            if let Some(r) = rate {
                prior = prior.with_sample_rate(r);
            }
            prior
        }
    };
    prior.save(&a.output)?;
    manifest.output(&a.output)?;
    manifest.write(&default_manifest_path(&a.output))
}
