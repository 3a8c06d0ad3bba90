//! Text-guided infinite image outpainting.
//!
//! A square image grows one strip at a time. Each strip is inpainted by a
//! latent diffusion model conditioned on a global caption, an LLM-proposed
//! local caption for the next strip, and visual features of the canvas so far.

pub mod canvas;
pub mod caption;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tape;

pub use canvas::{Canvas, Direction, MaskRatio, MaskedImage, RasterImage};
pub use caption::{Caption, CaptionKind, CaptionService, LlmBackend};
pub use conditioning::{Ablation, AblationFlags, ConditionMode, ConditionVector};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ModelConfig, OutpaintModel};
