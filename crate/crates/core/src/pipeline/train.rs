use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::TrainingRecord;
use super::derive_seed;
use crate::canvas::{extract_unmasked, mask_for_training, RasterImage};
use crate::checkpoint::{Checkpoint, TrainingState};
use crate::conditioning::AblationFlags;
use crate::config::RunConfig;
use crate::diffusion::{train_step, Adam, TrainExample};
use crate::error::{Error, Result};
use crate::model::OutpaintModel;
use crate::tape::Matrix;

/// Hooks into the training loop, mainly for tests and logging.
pub trait TrainObserver {
    /// The image handed to the vision encoder for `record`.
    fn on_visual_input(&mut self, _record: &str, _image: &RasterImage) {}

    /// The context built for `record` in the current batch.
    fn on_condition(&mut self, _record: &str, _context: &Matrix, _flags: AblationFlags) {}

    fn on_step(&mut self, _step: u64, _loss: f64) {}
}

#[derive(Debug, Default)]
pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub loss_history: Vec<f64>,
    pub checkpoint_sha256: String,
}

/// Masks, resizes and encodes every record once; encoders are frozen.
pub fn build_examples(
    records: &[TrainingRecord],
    store: &Path,
    model: &OutpaintModel,
    base_window: usize,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let path = store.join(&r.image);
        let image = RasterImage::load_png(&path)?;
        if image.content_sha256() != r.image_sha256 {
            return Err(Error::Validation(format!(
                "record {}: image {} does not match its recorded hash",
                r.id,
                path.display()
            )));
        }
        let target = image.resize(base_window, base_window)?.quantized();
        let masked = mask_for_training(&target, r.direction, r.ratio)?;
        let visible = extract_unmasked(&masked)?;
        observer.on_visual_input(&r.id, &visible);
        out.push(TrainExample {
            id: r.id.clone(),
            global: model.encode_caption(&r.global_caption)?,
            local: model.encode_caption(&r.local_caption)?,
            visual: model.encode_image(&visible)?,
            masked,
            target,
        });
    }
    Ok(out)
}

fn save_and_reload(
    ckpt: &Path,
    model: &mut OutpaintModel,
    optim: &mut Adam,
    state: &TrainingState,
) -> Result<String> {
    let sha = Checkpoint::save(ckpt, model, optim, state)?;
    let reloaded = Checkpoint::load(ckpt)?;
    *model = reloaded.model;
    *optim = reloaded.optimizer;
    Ok(sha)
}

/// Runs (or resumes) training and writes a checkpoint to `ckpt`.
///
/// Every write is followed by reloading the checkpoint, so a resumed run sees
/// exactly the same f32-rounded state as an uninterrupted one.
pub fn train(
    records: &[TrainingRecord],
    store: &Path,
    cfg: &RunConfig,
    ckpt: &Path,
    resume: Option<Checkpoint>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary> {
    if records.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    cfg.validate()?;
    let flags = cfg.train_flags()?;
    let tc = &cfg.train;
    let (mut model, mut optim, mut state) = match resume {
        Some(c) => {
            if c.model.config() != &cfg.model {
                return Err(Error::Config(
                    "checkpoint model configuration differs from the run configuration".into(),
                ));
            }
            (c.model, c.optimizer, c.training)
        }
        None => (
            OutpaintModel::init(cfg.model.clone(), tc.seed)?,
            Adam::new(tc.optimizer),
            TrainingState {
                seed: tc.seed,
                ..Default::default()
            },
        ),
    };
    optim.config = tc.optimizer;
    state.config_hash = cfg.hash();
    log::info!(
        "training {} records, mode {} with context {}x{}",
        records.len(),
        cfg.model.mode.name(),
        cfg.model.context_len(),
        cfg.model.dim
    );

    let examples = build_examples(records, store, &model, cfg.base_window, observer)?;
    let per_epoch = examples.len().div_ceil(tc.batch_size) as u64;
    let mut last_sha = String::new();

    for epoch in state.epoch..tc.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, epoch as u64)));
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let global = epoch as u64 * per_epoch + b as u64;
            if global < state.step {
                continue;
            }
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed ^ 0x7472_6169_6e00, global));
            let out = train_step(&mut model, &mut optim, &batch, flags, &mut rng)?;
            for (ex, ctx) in batch.iter().zip(&out.contexts) {
                observer.on_condition(&ex.id, ctx, flags);
            }
            state.step = global + 1;
            state.loss_history.push(out.loss);
            observer.on_step(state.step, out.loss);
            log::debug!("epoch {epoch} step {} loss {:.5}", state.step, out.loss);
            if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 {
                save_and_reload(ckpt, &mut model, &mut optim, &state)?;
            }
        }
        state.epoch = epoch + 1;
        log::info!(
            "epoch {} done, last loss {:.5}",
            epoch + 1,
            state.loss_history.last().copied().unwrap_or(f64::NAN)
        );
        last_sha = save_and_reload(ckpt, &mut model, &mut optim, &state)?;
    }
    if last_sha.is_empty() {
        last_sha = save_and_reload(ckpt, &mut model, &mut optim, &state)?;
    }
    Ok(TrainSummary {
        epochs: state.epoch,
        steps: state.step,
        loss_history: state.loss_history,
        checkpoint_sha256: last_sha,
    })
}
