//! Command-line front end for `dereverb-core`: argument parsing, TOML configs,
//! run manifests and the `run`, `bench`, `synth`, `voice` and `fit-prior` commands.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;

use dereverb_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const NUMERICAL: i32 = 5;
}

pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected failure
  2  invalid command-line usage
  3  configuration error (config file, flag value, prior selection, input too short)
  4  I/O error (unreadable or unwritable file, unsupported WAV, malformed data file)
  5  numerical failure (singular system or non-finite values; message names the stage)";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io(_) => exit::IO,
            CliError::Core(e) => match e.root() {
                _ if e.is_numerical() => exit::NUMERICAL,
                Error::Io(_) | Error::Wav(_) | Error::UnsupportedAudio(_) | Error::Json(_) | Error::Format(_) => {
                    exit::IO
                }
                _ => exit::CONFIG,
            },
        }
    }

    pub fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match args::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match commands::dispatch(cli, &recorded) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dereverb_core::Stage;

    #[test]
    fn core_errors_map_to_documented_codes() {
        let num = CliError::Core(Error::Singular { band: 3 }.at(Stage::Wpe));
        assert_eq!(num.exit_code(), exit::NUMERICAL);
        let io = CliError::Core(Error::UnsupportedAudio("stereo".into()));
        assert_eq!(io.exit_code(), exit::IO);
        let cfg = CliError::Core(Error::TooFewFrames { needed: 10, got: 3 }.at(Stage::Wpe));
        assert_eq!(cfg.exit_code(), exit::CONFIG);
        assert_eq!(CliError::Config("x".into()).exit_code(), exit::CONFIG);
    }

    #[test]
    fn help_lists_exit_codes() {
        assert_eq!(run(["dereverb", "--help"]), exit::OK);
        assert_eq!(run(["dereverb", "frobnicate"]), exit::USAGE);
        for code in 0..=5 {
            assert!(EXIT_CODES.contains(&format!("  {code}  ")));
        }
    }
}
