use std::path::PathBuf;

use ocrrestore_neural::NeuralError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("window size must be odd and positive, got {0}")]
    EvenWindow(usize),
    #[error("ground-truth table: {0}")]
    Table(String),
    #[error("lexicon {0} has no valid entries")]
    EmptyLexicon(String),
    #[error("no word reaches the minimum frequency of {min_count}")]
    EmptyVocabulary { min_count: usize },
    #[error("word {0:?} is not in the embedding vocabulary")]
    UnknownWord(String),
    #[error("correct-word list is empty")]
    EmptyCorrectList,
    #[error("cannot corrupt an empty word")]
    EmptyWord,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty token stream")]
    EmptyStream,
    #[error("empty input")]
    EmptyInput,
    #[error("character {0:?} is outside the alphabet")]
    NonAlphabetChar(char),
    #[error("id {0} is outside the character vocabulary")]
    UnknownId(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model was trained with window {trained}, asked to correct with window {requested}")]
    WindowMismatch { trained: usize, requested: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("malformed input {path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures of the numeric core (non-finite values and the like).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Neural(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
