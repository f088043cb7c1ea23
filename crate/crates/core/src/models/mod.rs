//! Sequence-to-sequence models: the GRU error generator and the transformer
//! corrector, their training loop, decoding and persistence.

pub mod beam;
pub mod checkpoint;
pub mod correct;
pub mod gru;
pub mod train;
pub mod transformer;

use std::fmt;

use ocrrestore_neural::{Graph, ParamStore, Real, Var};
use serde::{Deserialize, Serialize};

use crate::encoding::{CharVocab, EncodedBatch, EOS};
use crate::error::{Error, Result};
use crate::rng;

pub use beam::{beam_decode, beam_search, greedy_decode, BeamHypothesis, Scorer};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use correct::{correct_tokens, BeamCorrector, Corrector, IdentityCorrector, TransformerScorer};
pub use gru::{GruConfig, GruNet};
pub use train::{train_corrector, TrainOptions};
pub use transformer::{TransformerConfig, TransformerNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    GruGenerator,
    TransformerCorrector,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::GruGenerator => "gru_generator",
            ModelKind::TransformerCorrector => "transformer_corrector",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Provenance stored with every trained model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    /// Hex digest of the clean training data.
    pub data_fingerprint: String,
    /// What produced the training sources (corruptor or pair file).
    pub data_source: String,
    /// Window the model was trained with; 1 for the generator.
    pub window: usize,
    pub loss_history: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub checkpoint_policy: String,
    pub stop_reason: String,
}

impl Manifest {
    /// `epoch,mean_loss` rows, epochs counted from 1.
    pub fn loss_history_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    Gru(GruNet),
    Transformer(TransformerNet),
}

impl Network {
    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Gru(_) => ModelKind::GruGenerator,
            Network::Transformer(_) => ModelKind::TransformerCorrector,
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        match self {
            Network::Gru(n) => serde_json::to_value(&n.config),
            Network::Transformer(n) => serde_json::to_value(&n.config),
        }
        .expect("configs serialize")
    }

    fn build<T: Real>(
        kind: ModelKind,
        config: &serde_json::Value,
        vocab_size: usize,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::InvalidConfig(e.to_string());
        match kind {
            ModelKind::GruGenerator => {
                let cfg: GruConfig = serde_json::from_value(config.clone()).map_err(bad)?;
                let mut r = rng::stream(cfg.seed, &[rng::INIT]);
                Ok(Network::Gru(GruNet::new(store, &cfg, vocab_size, &mut r)?))
            }
            ModelKind::TransformerCorrector => {
                let cfg: TransformerConfig = serde_json::from_value(config.clone()).map_err(bad)?;
                let mut r = rng::stream(cfg.seed, &[rng::INIT]);
                Ok(Network::Transformer(TransformerNet::new(
                    store, &cfg, vocab_size, &mut r,
                )?))
            }
        }
    }

    /// Training objective for one batch: cross-entropy for the corrector,
    /// the anti-copy loss for the generator. `teacher` drives the
    /// generator's scheduled feeding; without it the gold symbol is fed.
    pub fn batch_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &EncodedBatch,
        teacher: Option<&mut rng::Prng>,
    ) -> Result<Var> {
        match self {
            Network::Transformer(n) => n.loss(g, &batch.sources, batch.src_len, &batch.labels, batch.tgt_len),
            Network::Gru(n) => {
                let feeding = match teacher {
                    Some(r) => gru::Feeding::Mixed(n.config.teacher_forcing, r),
                    None => gru::Feeding::Gold,
                };
                n.loss(g, &batch.sources, batch.src_len, &batch.labels, batch.tgt_len, feeding)
            }
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Network::Gru(n) => n.config.lr,
            Network::Transformer(n) => n.config.lr,
        }
    }
}

/// Parameters, architecture, vocabulary and provenance of one model.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    network: Network,
    store: ParamStore<f32>,
    vocab: CharVocab,
    manifest: Manifest,
}

impl Seq2SeqModel {
    pub(crate) fn from_parts(network: Network, store: ParamStore<f32>, vocab: CharVocab, manifest: Manifest) -> Self {
        Self {
            network,
            store,
            vocab,
            manifest,
        }
    }

    /// Fresh model of `kind` with parameters drawn from the config's seed.
    pub fn build(kind: ModelKind, config: &serde_json::Value, vocab: CharVocab) -> Result<Self> {
        let mut store = ParamStore::new();
        let network = Network::build(kind, config, vocab.len(), &mut store)?;
        let seed = config.get("seed").and_then(|s| s.as_u64()).unwrap_or_default();
        Ok(Self::from_parts(
            network,
            store,
            vocab,
            Manifest {
                seed,
                ..Manifest::default()
            },
        ))
    }

    pub fn kind(&self) -> ModelKind {
        self.network.kind()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub(crate) fn parts_mut(&mut self) -> (&Network, &mut ParamStore<f32>, &mut Manifest) {
        (&self.network, &mut self.store, &mut self.manifest)
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::KindMismatch {
                expected: kind.name().into(),
                found: self.kind().name().into(),
            });
        }
        Ok(())
    }

    pub fn transformer(&self) -> Result<&TransformerNet> {
        match &self.network {
            Network::Transformer(n) => Ok(n),
            _ => Err(Error::KindMismatch {
                expected: ModelKind::TransformerCorrector.name().into(),
                found: self.kind().name().into(),
            }),
        }
    }

    pub fn gru(&self) -> Result<&GruNet> {
        match &self.network {
            Network::Gru(n) => Ok(n),
            _ => Err(Error::KindMismatch {
                expected: ModelKind::GruGenerator.name().into(),
                found: self.kind().name().into(),
            }),
        }
    }

    /// Symbols a decoder may emit: the letters and `<eos>`.
    pub fn output_mask(&self) -> Vec<bool> {
        (0..self.vocab.len())
            .map(|i| i == EOS || self.vocab.is_letter(i))
            .collect()
    }
}

pub fn build_transformer(cfg: &TransformerConfig, vocab: CharVocab) -> Result<Seq2SeqModel> {
    cfg.validate()?;
    Seq2SeqModel::build(
        ModelKind::TransformerCorrector,
        &serde_json::to_value(cfg).expect("config serializes"),
        vocab,
    )
}

pub fn build_gru(cfg: &GruConfig, vocab: CharVocab) -> Result<Seq2SeqModel> {
    cfg.validate()?;
    Seq2SeqModel::build(
        ModelKind::GruGenerator,
        &serde_json::to_value(cfg).expect("config serializes"),
        vocab,
    )
}
