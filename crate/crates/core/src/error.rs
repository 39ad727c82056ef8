use std::fmt;

/// Processing stage attached to errors raised inside the end-to-end pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Analysis,
    Wpe,
    Factorize,
    FirstPass,
    Refine,
    SecondPass,
    Synthesis,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Analysis => "analysis",
            Stage::Wpe => "wpe",
            Stage::Factorize => "factorize",
            Stage::FirstPass => "ddrm-pass-1",
            Stage::Refine => "refine",
            Stage::SecondPass => "ddrm-pass-2",
            Stage::Synthesis => "synthesis",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("clip of {len} samples is shorter than the {window}-sample window")]
    ClipTooShort { len: usize, window: usize },
    #[error("window {window} with hop {hop} does not satisfy the overlap-add constraint")]
    NonCola { window: usize, hop: usize },
    #[error("not enough frames: need more than {needed}, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("normal equations are singular in band {band}")]
    Singular { band: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with any stage tag removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::Singular { .. } | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
