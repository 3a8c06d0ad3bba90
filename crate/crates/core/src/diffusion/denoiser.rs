//! Noise-prediction network.
//!
//! Per latent cell: an input projection of `[x_t ; masked ; mask]` plus a
//! timestep embedding, then `blocks` residual stages of (3x3 conv, SiLU) and
//! single-head cross-attention over every context row, then an output
//! projection back to the latent channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LatentGrid;
use crate::conditioning::ConditionVector;
use crate::error::{Error, Result};
use crate::params::{init_weight, zeros_row, BoundParams, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub attn_dim: usize,
    /// Residual conv + cross-attention stages.
    pub blocks: usize,
    /// Context rows `M` the cross-attention expects.
    pub context_len: usize,
    pub context_dim: usize,
    /// Pixel-to-latent downsampling factor `f`.
    pub downsample: usize,
    /// Diffusion steps `T`.
    pub timesteps: usize,
}

impl DenoiserConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("latent_channels", self.latent_channels),
            ("base_channels", self.base_channels),
            ("attn_dim", self.attn_dim),
            ("context_len", self.context_len),
            ("context_dim", self.context_dim),
            ("downsample", self.downsample),
            ("timesteps", self.timesteps),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("denoiser {name} must be positive")));
            }
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(
                "denoiser base_channels must be even for the timestep embedding".into(),
            ));
        }
        Ok(())
    }

    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let c = self.base_channels;
        let a = self.attn_dim;
        let d = self.context_dim;
        store.insert("unet.time.w1", init_weight(rng, c, c));
        store.insert("unet.time.b1", zeros_row(c));
        store.insert("unet.time.w2", init_weight(rng, c, c));
        store.insert("unet.time.b2", zeros_row(c));
        store.insert("unet.in.w", init_weight(rng, self.input_channels(), c));
        store.insert("unet.in.b", zeros_row(c));
        for i in 0..self.blocks {
            store.insert(format!("unet.block{i}.conv.w"), init_weight(rng, 9 * c, c));
            store.insert(format!("unet.block{i}.conv.b"), zeros_row(c));
            store.insert(format!("unet.block{i}.attn.q"), init_weight(rng, c, a));
            store.insert(format!("unet.block{i}.attn.k"), init_weight(rng, d, a));
            store.insert(format!("unet.block{i}.attn.v"), init_weight(rng, d, a));
            store.insert(format!("unet.block{i}.attn.o"), init_weight(rng, a, c));
        }
        store.insert("unet.out.w", init_weight(rng, c, self.latent_channels));
        store.insert("unet.out.b", zeros_row(self.latent_channels));
    }

    /// Expected `(name, shape)` of every denoiser parameter.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let c = self.base_channels;
        let a = self.attn_dim;
        let d = self.context_dim;
        let mut v = vec![
            ("unet.time.w1".to_string(), (c, c)),
            ("unet.time.b1".to_string(), (1, c)),
            ("unet.time.w2".to_string(), (c, c)),
            ("unet.time.b2".to_string(), (1, c)),
            ("unet.in.w".to_string(), (self.input_channels(), c)),
            ("unet.in.b".to_string(), (1, c)),
        ];
        for i in 0..self.blocks {
            v.push((format!("unet.block{i}.conv.w"), (9 * c, c)));
            v.push((format!("unet.block{i}.conv.b"), (1, c)));
            v.push((format!("unet.block{i}.attn.q"), (c, a)));
            v.push((format!("unet.block{i}.attn.k"), (d, a)));
            v.push((format!("unet.block{i}.attn.v"), (d, a)));
            v.push((format!("unet.block{i}.attn.o"), (a, c)));
        }
        v.push(("unet.out.w".to_string(), (c, self.latent_channels)));
        v.push(("unet.out.b".to_string(), (1, self.latent_channels)));
        v
    }
}

/// Sinusoidal embedding of `t` as a `1 x dim` row (`dim` even).
pub fn timestep_embedding(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros((1, dim));
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[[0, j]] = angle.sin();
        out[[0, half + j]] = angle.cos();
    }
    out
}

/// Builds the denoiser graph; `input` is `N x (2C+1)` and `context` is `M x d`.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &DenoiserConfig,
    input: Var,
    t: usize,
    context: Var,
    height: usize,
    width: usize,
) -> Result<Var> {
    let (m, d) = tape.value(context).dim();
    if m != cfg.context_len || d != cfg.context_dim {
        return Err(Error::Config(format!(
            "denoiser expects a {}x{} context, got {m}x{d}",
            cfg.context_len, cfg.context_dim
        )));
    }
    let (n, ch) = tape.value(input).dim();
    if n != height * width || ch != cfg.input_channels() {
        return Err(Error::Geometry(format!(
            "denoiser input {n}x{ch} does not match a {height}x{width}x{} grid",
            cfg.input_channels()
        )));
    }
    let c = cfg.base_channels;

    let temb = tape.leaf(timestep_embedding(t, c));
    let te = tape.matmul(temb, bound.var("unet.time.w1")?);
    let te = tape.add_row(te, bound.var("unet.time.b1")?);
    let te = tape.silu(te);
    let te = tape.matmul(te, bound.var("unet.time.w2")?);
    let te = tape.add_row(te, bound.var("unet.time.b2")?);

    let h = tape.matmul(input, bound.var("unet.in.w")?);
    let h = tape.add_row(h, bound.var("unet.in.b")?);
    let h = tape.add_row(h, te);
    let mut h = tape.silu(h);

    let inv_sqrt = 1.0 / (cfg.attn_dim as f64).sqrt();
    for i in 0..cfg.blocks {
        let p = tape.im2col3(h, height, width);
        let conv = tape.matmul(p, bound.var(&format!("unet.block{i}.conv.w"))?);
        let conv = tape.add_row(conv, bound.var(&format!("unet.block{i}.conv.b"))?);
        let conv = tape.silu(conv);
        h = tape.add(h, conv);

        let q = tape.matmul(h, bound.var(&format!("unet.block{i}.attn.q"))?);
        let k = tape.matmul(context, bound.var(&format!("unet.block{i}.attn.k"))?);
        let v = tape.matmul(context, bound.var(&format!("unet.block{i}.attn.v"))?);
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax_rows(scores);
        let o = tape.matmul(attn, v);
        let o = tape.matmul(o, bound.var(&format!("unet.block{i}.attn.o"))?);
        h = tape.add(h, o);
    }

    let out = tape.matmul(h, bound.var("unet.out.w")?);
    Ok(tape.add_row(out, bound.var("unet.out.b")?))
}

/// Predicted noise for `x_t` at step `t`.
pub fn denoise(
    x_t: &LatentGrid,
    t: usize,
    masked_latent: &LatentGrid,
    mask_latent: &LatentGrid,
    condition: &ConditionVector,
    cfg: &DenoiserConfig,
    params: &ParamStore,
) -> Result<LatentGrid> {
    let (h, w) = (x_t.height(), x_t.width());
    for g in [masked_latent, mask_latent] {
        if g.height() != h || g.width() != w {
            return Err(Error::Geometry(format!(
                "latent inputs disagree: {h}x{w} vs {}x{}",
                g.height(),
                g.width()
            )));
        }
    }
    if x_t.channels() != cfg.latent_channels
        || masked_latent.channels() != cfg.latent_channels
        || mask_latent.channels() != 1
    {
        return Err(Error::Geometry("latent channel counts do not match the denoiser".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = tape.leaf(
        ndarray::concatenate(
            ndarray::Axis(1),
            &[x_t.data().view(), masked_latent.data().view(), mask_latent.data().view()],
        )
        .expect("rows agree"),
    );
    let ctx = tape.leaf(condition.context().clone());
    let out = denoiser_on_tape(&mut tape, &bound, cfg, input, t, ctx, h, w)?;
    LatentGrid::new(h, w, tape.value(out).clone())
}
