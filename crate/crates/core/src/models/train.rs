//! Mini-batch Adam training with plateau stopping and best-epoch selection.

use log::{error, info};
use ocrrestore_neural::{AdamState, Graph};

use super::{build_transformer, Seq2SeqModel, TransformerConfig};
use crate::encoding::BatchSource;
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_POLICY: &str = "best_epoch_mean_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub max_epochs: usize,
    /// Stop after this many epochs without an improvement of `min_delta`.
    pub patience: usize,
    pub min_delta: f64,
}

impl TrainOptions {
    pub fn with_max_epochs(max_epochs: usize) -> Self {
        Self {
            max_epochs,
            patience: 3,
            min_delta: 1e-4,
        }
    }
}

/// Trains `model` in place on `source`. Records the loss history in the
/// manifest and leaves the parameters of the lowest-loss epoch in place.
pub fn fit(model: &mut Seq2SeqModel, source: &mut dyn BatchSource, opts: &TrainOptions) -> Result<()> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seed = model.manifest().seed;
    let (network, store, manifest) = model.parts_mut();
    let mut adam = AdamState::new(store, network.lr());
    manifest.window = source.window().size();
    manifest.data_fingerprint = format!("{:016x}", source.fingerprint());
    manifest.data_source = source.describe();
    manifest.checkpoint_policy = CHECKPOINT_POLICY.into();
    manifest.loss_history.clear();
    let mut best: Option<(f64, usize, _)> = None;
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    manifest.stop_reason = "max_epochs".into();
    for epoch in 0..opts.max_epochs {
        let batches = source.epoch(epoch)?;
        let (mut total, mut weight) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let path = [epoch as u64, bi as u64];
            let mut g = Graph::training(store, rng::stream(seed, &[rng::DROPOUT, path[0], path[1]]));
            let mut teacher = rng::stream(seed, &[rng::TEACHER, path[0], path[1]]);
            let step = network.batch_loss(&mut g, batch, Some(&mut teacher)).and_then(|loss| {
                let value = g.scalar(loss) as f64;
                let grads = g.backward(loss)?;
                Ok((value, grads))
            });
            let (value, grads) = match step {
                Ok(v) => v,
                Err(e) => {
                    error!(
                        "epoch {} batch {bi} failed: {e}; losses so far {:?}",
                        epoch + 1,
                        manifest.loss_history
                    );
                    return Err(e);
                }
            };
            store.zero_grad();
            store.accumulate(grads.params())?;
            adam.step(store)?;
            total += value * batch.batch as f64;
            weight += batch.batch;
        }
        let mean = total / weight.max(1) as f64;
        manifest.loss_history.push(mean);
        info!("epoch {} mean loss {mean:.6}", epoch + 1);
        if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
            best = Some((mean, epoch, store.clone()));
        }
        if mean < reference - opts.min_delta {
            reference = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                manifest.stop_reason = format!("plateau after epoch {}", epoch + 1);
                break;
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        *store = params;
        manifest.best_epoch = epoch;
    }
    Ok(())
}

/// Builds a transformer from `cfg` and trains it on `batches`.
pub fn train_corrector(batches: &mut dyn BatchSource, cfg: &TransformerConfig) -> Result<Seq2SeqModel> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = build_transformer(cfg, batches.vocab().clone())?;
    fit(&mut model, batches, &TrainOptions::with_max_epochs(cfg.max_epochs))?;
    Ok(model)
}
