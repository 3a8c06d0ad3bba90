//! A toy latent diffusion model for masked-window inpainting.
//!
//! Images enter latent space through a fixed codec (average-pool encode,
//! nearest-neighbour decode, values mapped to `[-1, 1]`). The denoiser sees the
//! channel stack `[x_t ; masked latent ; mask]` and cross-attends over the
//! conditioning context.

mod denoiser;
mod optim;
mod sample;
mod schedule;
mod train;

pub use denoiser::{denoise, denoiser_on_tape, timestep_embedding, DenoiserConfig};
pub use optim::{Adam, AdamConfig};
pub use sample::{sample_inpaint, SampleOptions};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{draw_noise, loss_and_grads, train_step, StepNoise, StepOutput, TrainExample};

use crate::canvas::{MaskedImage, RasterImage, CHANNELS};
use crate::error::{Error, Result};
use crate::tape::Matrix;

/// A `height x width` grid of latent cells, stored as `(height*width) x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    data: Matrix,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, data: Matrix) -> Result<Self> {
        if data.nrows() != height * width || data.ncols() == 0 {
            return Err(Error::Geometry(format!(
                "latent data {:?} does not fit a {height}x{width} grid",
                data.dim()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("latent contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            data: Matrix::zeros((height * width, channels)),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub(crate) fn check_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.height != other.height || self.width != other.width || self.channels() != other.channels() {
            return Err(Error::Geometry(format!(
                "latent shapes differ: {}x{}x{} vs {}x{}x{}",
                self.height,
                self.width,
                self.channels(),
                other.height,
                other.width,
                other.channels()
            )));
        }
        Ok(())
    }

    pub(crate) fn map_data(&self, f: impl FnOnce(&Matrix) -> Matrix) -> LatentGrid {
        LatentGrid {
            height: self.height,
            width: self.width,
            data: f(&self.data),
        }
    }
}

fn check_factor(height: usize, width: usize, factor: usize) -> Result<()> {
    if factor == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
        return Err(Error::Geometry(format!(
            "{height}x{width} is not divisible by the latent factor {factor}"
        )));
    }
    Ok(())
}

/// Average-pools `factor x factor` blocks and maps `[0, 1]` to `[-1, 1]`.
pub fn encode_image(image: &RasterImage, factor: usize) -> Result<LatentGrid> {
    check_factor(image.height(), image.width(), factor)?;
    let (lh, lw) = (image.height() / factor, image.width() / factor);
    let mut data = Matrix::zeros((lh * lw, CHANNELS));
    let px = image.data();
    let norm = (factor * factor) as f64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            let cell = (y / factor) * lw + x / factor;
            let i = (y * image.width() + x) * CHANNELS;
            for c in 0..CHANNELS {
                data[[cell, c]] += px[i + c];
            }
        }
    }
    data.mapv_inplace(|v| 2.0 * v / norm - 1.0);
    LatentGrid::new(lh, lw, data)
}

/// Fraction of masked pixels per latent cell, as one channel.
pub fn encode_mask(masked: &MaskedImage, factor: usize) -> Result<LatentGrid> {
    let (h, w) = (masked.image().height(), masked.image().width());
    check_factor(h, w, factor)?;
    let (lh, lw) = (h / factor, w / factor);
    let mut data = Matrix::zeros((lh * lw, 1));
    for (i, &m) in masked.mask().iter().enumerate() {
        let (y, x) = (i / w, i % w);
        data[[(y / factor) * lw + x / factor, 0]] += f64::from(m);
    }
    data.mapv_inplace(|v| v / (factor * factor) as f64);
    LatentGrid::new(lh, lw, data)
}

/// Nearest-neighbour upsampling back to pixels, clamped to `[0, 1]`.
pub fn decode_latent(latent: &LatentGrid, factor: usize) -> Result<RasterImage> {
    if latent.channels() != CHANNELS {
        return Err(Error::Geometry(format!(
            "decoder needs {CHANNELS} latent channels, got {}",
            latent.channels()
        )));
    }
    let (h, w) = (latent.height * factor, latent.width * factor);
    RasterImage::from_fn(h, w, |y, x| {
        let cell = (y / factor) * latent.width + x / factor;
        let mut rgb = [0.0; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            *v = ((latent.data[[cell, c]] + 1.0) / 2.0).clamp(0.0, 1.0);
        }
        rgb
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::{mask_for_training, Direction, MaskRatio};

    #[test]
    fn codec_round_trips_blockwise_constant_images() {
        let img = RasterImage::from_fn(8, 12, |y, x| {
            let v = ((y / 4) * 3 + x / 4) as f64 / 6.0;
            [v, 1.0 - v, 0.25]
        })
        .unwrap();
        let lat = encode_image(&img, 4).unwrap();
        assert_eq!((lat.height(), lat.width(), lat.channels()), (2, 3, 3));
        let back = decode_latent(&lat, 4).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_latent_is_binary_for_aligned_strips() {
        let img = RasterImage::filled(16, 16, 0.3).unwrap();
        let m = mask_for_training(&img, Direction::Right, MaskRatio::HALF).unwrap();
        let ml = encode_mask(&m, 4).unwrap();
        for cell in 0..16 {
            let want = if cell % 4 >= 2 { 1.0 } else { 0.0 };
            assert_eq!(ml.data()[[cell, 0]], want);
        }
        // the fill value encodes to zero
        let lat = encode_image(m.image(), 4).unwrap();
        assert!(lat.data()[[3, 0]].abs() < 1e-12);
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let img = RasterImage::filled(10, 8, 0.3).unwrap();
        assert!(matches!(encode_image(&img, 4), Err(Error::Geometry(_))));
    }
}
