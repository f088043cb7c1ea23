//! Declarative run configuration: defaults, then a TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use ocrrestore::corpus::{Engine, Window};
use ocrrestore::embedding::SgnsConfig;
use ocrrestore::errorgen::NoiseConfig;
use ocrrestore::models::{GruConfig, TransformerConfig};
use ocrrestore::pairgen::ExtractionConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream; copied into each model section.
    pub seed: u64,
    pub threads: usize,
    pub window: usize,
    pub noise_rate: f64,
    pub engine: Option<String>,
    pub beam: usize,
    pub post: bool,
    /// Field delimiter of ground-truth tables.
    pub delimiter: char,
    pub paths: Paths,
    pub embedding: SgnsConfig,
    pub extraction: ExtractionConfig,
    pub generator: GruConfig,
    pub corrector: TransformerConfig,
}

/// Input files; each may also be given as a flag of the same name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub neighbors: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 1,
            window: 3,
            noise_rate: NoiseConfig::default().noise_rate,
            engine: None,
            beam: 3,
            post: true,
            delimiter: ',',
            paths: Paths::default(),
            embedding: SgnsConfig::default(),
            extraction: ExtractionConfig::default(),
            generator: GruConfig::default(),
            corrector: TransformerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Propagates the root seed and checks ranges, including that the
    /// window is odd.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.embedding.seed = self.seed;
        self.generator.seed = self.seed;
        self.corrector.seed = self.seed;
        if let Some(e) = &self.engine {
            Engine::parse(e).ok_or_else(|| CliError::usage(format!("unknown engine {e:?}")))?;
        }
        Window::new(self.window)?;
        if self.beam == 0 {
            return Err(CliError::usage("beam width must be at least 1"));
        }
        if !self.delimiter.is_ascii() {
            return Err(CliError::usage("delimiter must be a single ASCII character"));
        }
        self.noise().validate()?;
        self.embedding.validate()?;
        self.generator.validate()?;
        self.corrector.validate()?;
        Ok(self)
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to toml")
    }
}
