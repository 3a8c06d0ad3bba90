use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{decode_latent, denoise, encode_image, encode_mask, LatentGrid};
use crate::canvas::{MaskedImage, RasterImage, CHANNELS};
use crate::conditioning::ConditionVector;
use crate::error::{Error, Result};
use crate::model::OutpaintModel;
use crate::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// DDIM steps, at most the schedule length.
    pub steps: usize,
    pub seed: u64,
    /// Classifier-free guidance against an all-zero context; off when `None`.
    pub guidance_scale: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 20,
            seed: 0,
            guidance_scale: None,
        }
    }
}

/// Fills the masked strip of `input`; kept pixels are copied back verbatim.
pub fn sample_inpaint(
    model: &OutpaintModel,
    input: &MaskedImage,
    condition: &ConditionVector,
    opts: &SampleOptions,
) -> Result<RasterImage> {
    let cfg = model.denoiser_config();
    if condition.mode() != model.config().mode {
        return Err(Error::Validation(format!(
            "condition built for {} but the model uses {}",
            condition.mode().name(),
            model.config().mode.name()
        )));
    }
    let f = cfg.downsample;
    let schedule = model.schedule();
    let timesteps = schedule.ddim_timesteps(opts.steps)?;
    let masked = encode_image(input.image(), f)?;
    let mask = encode_mask(input, f)?;
    let (h, w) = (masked.height(), masked.width());

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = Matrix::from_shape_simple_fn((h * w, CHANNELS), || rng.sample(StandardNormal));
    let mut x = LatentGrid::new(h, w, init)?;
    let null = opts
        .guidance_scale
        .map(|_| ConditionVector::new(Matrix::zeros(condition.context().dim()), condition.mode(), model.config().tokens))
        .transpose()?;

    for (i, &t) in timesteps.iter().enumerate() {
        let mut eps = denoise(&x, t, &masked, &mask, condition, &cfg, model.params())?;
        if let (Some(s), Some(null)) = (opts.guidance_scale, &null) {
            let eps_u = denoise(&x, t, &masked, &mask, null, &cfg, model.params())?;
            eps = LatentGrid::new(h, w, eps_u.data() + &((eps.data() - eps_u.data()) * s))?;
        }
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        x = schedule.ddim_step(&x, &eps, t, t_prev)?;
    }
    let decoded = decode_latent(&x, f)?;
    input.restore_kept(&decoded)
}
