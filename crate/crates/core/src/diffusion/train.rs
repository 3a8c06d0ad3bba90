use rand::Rng;
use rand_distr::StandardNormal;

use super::{denoiser_on_tape, encode_image, encode_mask, Adam, LatentGrid};
use crate::canvas::{MaskedImage, RasterImage, CHANNELS};
use crate::conditioning::{condition_on_tape, AblationFlags, TokenEmbeddings};
use crate::error::{Error, Result};
use crate::model::OutpaintModel;
use crate::params::ParamStore;
use crate::tape::{Matrix, Tape};

/// One training item with its frozen embeddings already computed.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub masked: MaskedImage,
    pub target: RasterImage,
    pub global: TokenEmbeddings,
    pub local: TokenEmbeddings,
    pub visual: TokenEmbeddings,
}

/// The diffusion step and noise drawn for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub t: usize,
    pub eps: Matrix,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Mean loss over the batch.
    pub loss: f64,
    pub example_losses: Vec<f64>,
    pub grads: ParamStore,
    /// The conditioning context built for each example.
    pub contexts: Vec<Matrix>,
}

/// Mean noise-prediction loss over `batch` and its gradient with respect to
/// every model parameter.
pub fn loss_and_grads(
    model: &OutpaintModel,
    batch: &[TrainExample],
    noise: &[StepNoise],
    flags: AblationFlags,
) -> Result<StepOutput> {
    if batch.is_empty() || batch.len() != noise.len() {
        return Err(Error::Validation(format!(
            "need one noise draw per example, got {} for {}",
            noise.len(),
            batch.len()
        )));
    }
    flags.validate()?;
    let cfg = model.denoiser_config();
    let f = cfg.downsample;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    let mut ctx_vars = Vec::with_capacity(batch.len());
    for (ex, nz) in batch.iter().zip(noise) {
        let g = tape.leaf(ex.global.data().clone());
        let l = tape.leaf(ex.local.data().clone());
        let v = tape.leaf(ex.visual.data().clone());
        let ctx = condition_on_tape(&mut tape, &bound, g, l, v, model.config().mode, flags)?;
        ctx_vars.push(ctx);

        let x0 = encode_image(&ex.target, f)?;
        let eps = LatentGrid::new(x0.height(), x0.width(), nz.eps.clone())?;
        let x_t = model.schedule().add_noise(&x0, nz.t, &eps)?;
        let masked = encode_image(ex.masked.image(), f)?;
        let mask = encode_mask(&ex.masked, f)?;
        let input = ndarray::concatenate(
            ndarray::Axis(1),
            &[x_t.data().view(), masked.data().view(), mask.data().view()],
        )
        .map_err(|e| Error::Geometry(e.to_string()))?;
        let input = tape.leaf(input);
        let pred = denoiser_on_tape(
            &mut tape,
            &bound,
            &cfg,
            input,
            nz.t,
            ctx,
            x0.height(),
            x0.width(),
        )?;
        let target = tape.leaf(nz.eps.clone());
        losses.push(tape.mse(pred, target));
    }
    let total = tape.sum(&losses);
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let example_losses: Vec<f64> = losses.iter().map(|&v| tape.scalar(v)).collect();
    let loss = tape.scalar(mean);
    for (ex, &lv) in batch.iter().zip(&example_losses) {
        if !lv.is_finite() {
            return Err(Error::Training {
                step: 0,
                record: ex.id.clone(),
                loss: lv,
            });
        }
    }
    let grads = tape.backward(mean);
    Ok(StepOutput {
        loss,
        example_losses,
        grads: bound.gradients(&tape, &grads),
        contexts: ctx_vars.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Draws `t ~ U{1..T}` and standard normal noise for every example.
pub fn draw_noise(model: &OutpaintModel, batch: &[TrainExample], rng: &mut impl Rng) -> Vec<StepNoise> {
    let f = model.config().downsample.max(1);
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=model.schedule().steps());
            let n = (ex.target.height() / f) * (ex.target.width() / f);
            let eps = Matrix::from_shape_simple_fn((n, CHANNELS), || rng.sample(StandardNormal));
            StepNoise { t, eps }
        })
        .collect()
}

/// One optimizer update; returns the batch output with `step` filled into any
/// training error.
pub fn train_step(
    model: &mut OutpaintModel,
    optim: &mut Adam,
    batch: &[TrainExample],
    flags: AblationFlags,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    let noise = draw_noise(model, batch, rng);
    let out = loss_and_grads(model, batch, &noise, flags).map_err(|e| match e {
        Error::Training { record, loss, .. } => Error::Training {
            step: optim.step_count() + 1,
            record,
            loss,
        },
        other => other,
    })?;
    optim.update(model.params_mut(), &out.grads);
    if !model.params().all_finite() {
        return Err(Error::Training {
            step: optim.step_count(),
            record: batch[0].id.clone(),
            loss: f64::NAN,
        });
    }
    Ok(out)
}
