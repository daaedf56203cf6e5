use haptex_core::align::AlignError;
use haptex_core::corpus::CorpusError;
use haptex_core::eval::EvalError;
use haptex_core::render::RenderError;
use haptex_core::synth::SynthError;
use haptex_core::vae::VaeError;
use thiserror::Error;

/// Every failure a command or endpoint can report. Each kind has a fixed exit
/// code and a stable string code for JSON bodies.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("embedding not found: {0:?}")]
    EmbeddingNotFound(String),
    #[error("{0}")]
    Corpus(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Signal(String),
    #[error("{0}")]
    Render(String),
    #[error("{0}")]
    Eval(String),
    #[error("not found: {0}")]
    NotFound(String),
}

impl ServiceError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
            Self::EmbeddingNotFound(_) => 4,
            Self::Corpus(_) => 5,
            Self::Model(_) => 6,
            Self::Signal(_) => 7,
            Self::Render(_) => 8,
            Self::Eval(_) => 9,
            Self::NotFound(_) => 10,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Usage(_) => "bad_request",
            Self::Io(_) => "io_error",
            Self::EmbeddingNotFound(_) => "embedding_not_found",
            Self::Corpus(_) => "corpus_error",
            Self::Model(_) => "model_error",
            Self::Signal(_) => "signal_error",
            Self::Render(_) => "render_error",
            Self::Eval(_) => "eval_error",
            Self::NotFound(_) => "not_found",
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        Self::Usage(format!("invalid JSON: {e}"))
    }
}

impl From<CorpusError> for ServiceError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::NotFound(_) | CorpusError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Corpus(e.to_string()),
        }
    }
}

impl From<VaeError> for ServiceError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Io(_) => Self::Io(e.to_string()),
            VaeError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => Self::Model(e.to_string()),
        }
    }
}

impl From<AlignError> for ServiceError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::MissingEmbedding(c) => Self::EmbeddingNotFound(c),
            AlignError::DimensionMismatch { .. } | AlignError::NonFinite => Self::Usage(e.to_string()),
            AlignError::Vae(v) => v.into(),
            _ => Self::Model(e.to_string()),
        }
    }
}

impl From<SynthError> for ServiceError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Wav(_) => Self::Io(e.to_string()),
            _ => Self::Signal(e.to_string()),
        }
    }
}

impl From<RenderError> for ServiceError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Io(_) => Self::Io(e.to_string()),
            RenderError::InvalidScript(_) | RenderError::InvalidConfig(_) | RenderError::Json(_) => Self::Usage(e.to_string()),
            _ => Self::Render(e.to_string()),
        }
    }
}

impl From<EvalError> for ServiceError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => Self::Io(e.to_string()),
            EvalError::Csv(_) => Self::Usage(e.to_string()),
            _ => Self::Eval(e.to_string()),
        }
    }
}
