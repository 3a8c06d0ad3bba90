//! Caption and visual embeddings, the fusion MLP, and assembly of the
//! cross-attention context.
//!
//! Three context layouts are supported, for `L` tokens of width `d`:
//!
//! | mode           | context                                     | rows |
//! |----------------|---------------------------------------------|------|
//! | `dual`         | `[P·E_i ; MLP(E_g ‖ E_l)]`                  | 2L   |
//! | `all_in_mlp`   | `MLP(E_g ‖ E_l ‖ P·E_i)`                    | L    |
//! | `all_in_xattn` | `[P·E_i ; E_g ; E_l]`                       | 3L   |
//!
//! `‖` joins along the feature axis (per token) and `;` along the token axis.
//! `P` is a learned bias-free `d x d` projection of the frozen visual tokens.
//! Ablated inputs are replaced by zero matrices before fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canvas::{RasterImage, Rect};
use crate::caption::{Caption, CaptionKind};
use crate::error::{Error, Result};
use crate::params::{init_weight, zeros_row, BoundParams, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    TextGlobal,
    TextLocal,
    Visual,
    /// Output of the fusion MLP.
    TextFused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    data: Matrix,
    source: EmbeddingSource,
}

impl TokenEmbeddings {
    pub fn new(data: Matrix, source: EmbeddingSource) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Validation("embeddings must be non-empty".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("embeddings contain non-finite values".into()));
        }
        Ok(Self { data, source })
    }

    pub fn tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    /// Mean over tokens.
    pub fn pooled(&self) -> Vec<f64> {
        let n = self.tokens() as f64;
        self.data.columns().into_iter().map(|c| c.sum() / n).collect()
    }
}

/// Frozen caption encoder producing exactly `tokens() x dim()` embeddings.
pub trait TextEncoder: Send + Sync {
    fn tokens(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Matrix>;
}

/// Frozen image encoder with a fixed native input resolution.
pub trait VisionEncoder: Send + Sync {
    fn tokens(&self) -> usize;
    fn dim(&self) -> usize;
    /// Side of the square input the encoder expects.
    fn input_size(&self) -> usize;
    /// Encodes an image already resized to `input_size()`.
    fn encode_native(&self, image: &RasterImage) -> Result<Matrix>;
}

pub fn encode_text(caption: &Caption, enc: &dyn TextEncoder) -> Result<TokenEmbeddings> {
    let source = match caption.kind() {
        CaptionKind::Global => EmbeddingSource::TextGlobal,
        _ => EmbeddingSource::TextLocal,
    };
    encode_text_as(caption.text(), source, enc)
}

pub fn encode_text_as(
    text: &str,
    source: EmbeddingSource,
    enc: &dyn TextEncoder,
) -> Result<TokenEmbeddings> {
    if text.trim().is_empty() {
        return Err(Error::Validation("cannot encode an empty caption".into()));
    }
    let m = enc.encode(text)?;
    check_shape(&m, enc.tokens(), enc.dim(), "text encoder")?;
    TokenEmbeddings::new(m, source)
}

/// Resizes to the encoder's native square input, then encodes.
pub fn encode_visual(image: &RasterImage, enc: &dyn VisionEncoder) -> Result<TokenEmbeddings> {
    let n = enc.input_size();
    let native = image.resize(n, n)?;
    let m = enc.encode_native(&native)?;
    check_shape(&m, enc.tokens(), enc.dim(), "vision encoder")?;
    TokenEmbeddings::new(m, EmbeddingSource::Visual)
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::Validation(format!(
            "{what} produced {:?}, expected ({rows}, {cols})",
            m.dim()
        )));
    }
    Ok(())
}

fn seed_from(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Hash-seeded word embeddings plus a small sinusoidal position code.
///
/// Words are lowercase alphanumeric runs. The sequence is
/// `<bos> w1 .. wn <eos>`, truncated to `tokens` (the last slot keeps `<eos>`)
/// and padded with `<pad>`.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    tokens: usize,
    dim: usize,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(tokens: usize, dim: usize, seed: u64) -> Self {
        assert!(tokens >= 2 && dim >= 1, "text encoder needs >= 2 tokens");
        Self { tokens, dim, seed }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut seq = vec!["<bos>".to_string()];
        seq.extend(words.into_iter().take(self.tokens - 2));
        seq.push("<eos>".to_string());
        seq.resize(self.tokens, "<pad>".to_string());
        seq
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[
            &self.seed.to_le_bytes(),
            b"text",
            token.as_bytes(),
        ]));
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect()
    }
}

impl TextEncoder for ToyTextEncoder {
    fn tokens(&self) -> usize {
        self.tokens
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Matrix> {
        if text.trim().is_empty() {
            return Err(Error::Validation("cannot encode an empty caption".into()));
        }
        let mut out = Matrix::zeros((self.tokens, self.dim));
        for (pos, tok) in self.tokenize(text).iter().enumerate() {
            let v = self.token_vector(tok);
            for (j, x) in v.into_iter().enumerate() {
                let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / self.dim as f64);
                let angle = pos as f64 * freq;
                let p = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                out[[pos, j]] = x + 0.1 * p;
            }
        }
        Ok(out)
    }
}

/// Patch-mean features through a fixed seeded affine map.
///
/// The native square input is cut into a `rows x cols` grid with
/// `rows * cols = tokens` (as square as `tokens` allows); each patch's mean
/// RGB, centred to `[-1, 1]`, is mapped by the same `4 x dim` matrix
/// (last row acts as bias). A constant image therefore encodes to identical rows.
#[derive(Debug, Clone)]
pub struct ToyVisionEncoder {
    tokens: usize,
    dim: usize,
    input_size: usize,
    grid: (usize, usize),
    map: Matrix,
}

impl ToyVisionEncoder {
    pub fn new(tokens: usize, dim: usize, input_size: usize, seed: u64) -> Self {
        let rows = (1..=tokens)
            .filter(|r| tokens.is_multiple_of(*r) && r * r <= tokens)
            .max()
            .unwrap_or(1);
        let grid = (rows, tokens / rows);
        assert!(
            input_size >= grid.0.max(grid.1),
            "input size {input_size} too small for a {grid:?} patch grid"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[&seed.to_le_bytes(), b"vision"]));
        let map = Matrix::from_shape_simple_fn((4, dim), || rng.sample::<f64, _>(StandardNormal) * 0.5);
        Self {
            tokens,
            dim,
            input_size,
            grid,
            map,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn affine_map(&self) -> &Matrix {
        &self.map
    }

    pub fn patch_rect(&self, index: usize) -> Rect {
        let (gr, gc) = self.grid;
        let n = self.input_size;
        let (r, c) = (index / gc, index % gc);
        let (top, bottom) = (r * n / gr, (r + 1) * n / gr);
        let (left, right) = (c * n / gc, (c + 1) * n / gc);
        Rect::new(top, left, bottom - top, right - left)
    }
}

impl VisionEncoder for ToyVisionEncoder {
    fn tokens(&self) -> usize {
        self.tokens
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn encode_native(&self, image: &RasterImage) -> Result<Matrix> {
        if image.height() != self.input_size || image.width() != self.input_size {
            return Err(Error::Geometry(format!(
                "vision encoder expects {0}x{0}, got {1}x{2}",
                self.input_size,
                image.height(),
                image.width()
            )));
        }
        let mut feats = Matrix::zeros((self.tokens, 4));
        for i in 0..self.tokens {
            let m = image.region_mean(self.patch_rect(i));
            for c in 0..3 {
                feats[[i, c]] = 2.0 * m[c] - 1.0;
            }
            feats[[i, 3]] = 1.0;
        }
        Ok(feats.dot(&self.map))
    }
}

/// A two-layer perceptron `x -> gelu(x W1 + b1) W2 + b2`, applied per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl FusionParams {
    pub fn new(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        let p = Self { w1, b1, w2, b2 };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros((input, hidden)),
            b1: zeros_row(hidden),
            w2: Matrix::zeros((hidden, output)),
            b2: zeros_row(output),
        }
    }

    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: init_weight(rng, input, hidden),
            b1: zeros_row(hidden),
            w2: init_weight(rng, hidden, output),
            b2: zeros_row(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn validate(&self) -> Result<()> {
        let h = self.w1.ncols();
        let ok = self.b1.dim() == (1, h)
            && self.w2.nrows() == h
            && self.b2.dim() == (1, self.w2.ncols());
        if !ok {
            return Err(Error::Validation(format!(
                "inconsistent MLP shapes: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                self.w1.dim(),
                self.b1.dim(),
                self.w2.dim(),
                self.b2.dim()
            )));
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Validation("MLP parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn store_into(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.w1"), self.w1.clone());
        store.insert(format!("{prefix}.b1"), self.b1.clone());
        store.insert(format!("{prefix}.w2"), self.w2.clone());
        store.insert(format!("{prefix}.b2"), self.b2.clone());
    }

    pub fn from_store(prefix: &str, store: &ParamStore) -> Result<Self> {
        Self::new(
            store.get(&format!("{prefix}.w1"))?.clone(),
            store.get(&format!("{prefix}.b1"))?.clone(),
            store.get(&format!("{prefix}.w2"))?.clone(),
            store.get(&format!("{prefix}.b2"))?.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    Dual,
    AllInMlp,
    AllInXattn,
}

impl ConditionMode {
    pub fn context_len(self, tokens: usize) -> usize {
        match self {
            ConditionMode::Dual => 2 * tokens,
            ConditionMode::AllInMlp => tokens,
            ConditionMode::AllInXattn => 3 * tokens,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionMode::Dual => "dual",
            ConditionMode::AllInMlp => "all_in_mlp",
            ConditionMode::AllInXattn => "all_in_xattn",
        }
    }
}

/// Which conditioning inputs are live; a disabled input becomes a zero matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_global: bool,
    pub use_local: bool,
    pub use_visual: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// No global caption.
    Gc,
    /// No LLM local caption.
    Llm,
    /// No visual feature.
    Clip,
    /// Global caption only.
    All,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gc" => Ok(Ablation::Gc),
            "llm" => Ok(Ablation::Llm),
            "clip" => Ok(Ablation::Clip),
            "all" => Ok(Ablation::All),
            other => Err(Error::Validation(format!(
                "unknown ablation {other:?} (expected gc, llm, clip or all)"
            ))),
        }
    }
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        use_global: true,
        use_local: true,
        use_visual: true,
    };

    pub fn from_ablations(ablations: &[Ablation]) -> Result<Self> {
        let mut f = Self::FULL;
        for a in ablations {
            match a {
                Ablation::Gc => f.use_global = false,
                Ablation::Llm => f.use_local = false,
                Ablation::Clip => f.use_visual = false,
                Ablation::All => {
                    f.use_local = false;
                    f.use_visual = false;
                }
            }
        }
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.use_global || self.use_local || self.use_visual) {
            return Err(Error::Validation(
                "at least one conditioning input must stay enabled".into(),
            ));
        }
        Ok(())
    }
}

/// The denoiser's cross-attention context.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    context: Matrix,
    mode: ConditionMode,
}

impl ConditionVector {
    pub fn new(context: Matrix, mode: ConditionMode, tokens: usize) -> Result<Self> {
        if context.nrows() != mode.context_len(tokens) {
            return Err(Error::Validation(format!(
                "{} context needs {} rows, got {}",
                mode.name(),
                mode.context_len(tokens),
                context.nrows()
            )));
        }
        if !context.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("context contains non-finite values".into()));
        }
        Ok(Self { context, mode })
    }

    pub fn context(&self) -> &Matrix {
        &self.context
    }

    pub fn mode(&self) -> ConditionMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.context.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.context.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.context.ncols()
    }
}

pub const FUSION_PREFIX: &str = "cond.fusion";
pub const VISUAL_PROJ: &str = "cond.visual_proj";

/// Trainable conditioning parameters for one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionParams {
    /// Absent in `all_in_xattn`.
    pub fusion: Option<FusionParams>,
    pub visual_proj: Matrix,
}

impl ConditionParams {
    /// Fresh parameters; the visual projection starts as the identity.
    pub fn init(mode: ConditionMode, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fusion = match mode {
            ConditionMode::Dual => Some(FusionParams::init(2 * dim, hidden, dim, rng)),
            ConditionMode::AllInMlp => Some(FusionParams::init(3 * dim, hidden, dim, rng)),
            ConditionMode::AllInXattn => None,
        };
        Self {
            fusion,
            visual_proj: Matrix::eye(dim),
        }
    }

    pub fn store_into(&self, store: &mut ParamStore) {
        if let Some(f) = &self.fusion {
            f.store_into(FUSION_PREFIX, store);
        }
        store.insert(VISUAL_PROJ, self.visual_proj.clone());
    }

    pub fn from_store(mode: ConditionMode, store: &ParamStore) -> Result<Self> {
        let fusion = match mode {
            ConditionMode::AllInXattn => None,
            _ => Some(FusionParams::from_store(FUSION_PREFIX, store)?),
        };
        Ok(Self {
            fusion,
            visual_proj: store.get(VISUAL_PROJ)?.clone(),
        })
    }
}

/// MLP over the rows of `x`, on the tape.
pub fn mlp_on_tape(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w1 = bound.var(&format!("{prefix}.w1"))?;
    let b1 = bound.var(&format!("{prefix}.b1"))?;
    let w2 = bound.var(&format!("{prefix}.w2"))?;
    let b2 = bound.var(&format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2);
    Ok(tape.add_row(o, b2))
}

/// Builds the context on `tape` from already-encoded (frozen) inputs.
#[allow(clippy::too_many_arguments)]
pub fn condition_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    global: Var,
    local: Var,
    visual: Var,
    mode: ConditionMode,
    flags: AblationFlags,
) -> Result<Var> {
    flags.validate()?;
    let (l, d) = tape.value(global).dim();
    for (v, what) in [(local, "local"), (visual, "visual")] {
        if tape.value(v).dim() != (l, d) {
            return Err(Error::Validation(format!(
                "{what} embeddings {:?} do not match global {:?}",
                tape.value(v).dim(),
                (l, d)
            )));
        }
    }
    let g = if flags.use_global { global } else { tape.leaf(Matrix::zeros((l, d))) };
    let lo = if flags.use_local { local } else { tape.leaf(Matrix::zeros((l, d))) };
    let vi = if flags.use_visual {
        let p = bound.var(VISUAL_PROJ)?;
        if tape.value(p).dim() != (d, d) {
            return Err(Error::Validation(format!(
                "visual projection {:?} does not map width {d}",
                tape.value(p).dim()
            )));
        }
        tape.matmul(visual, p)
    } else {
        tape.leaf(Matrix::zeros((l, d)))
    };
    Ok(match mode {
        ConditionMode::Dual => {
            let cat = tape.concat_cols(&[g, lo]);
            let t = mlp_on_tape(tape, bound, FUSION_PREFIX, cat)?;
            tape.concat_rows(&[vi, t])
        }
        ConditionMode::AllInMlp => {
            let cat = tape.concat_cols(&[g, lo, vi]);
            mlp_on_tape(tape, bound, FUSION_PREFIX, cat)?
        }
        ConditionMode::AllInXattn => tape.concat_rows(&[vi, g, lo]),
    })
}

fn check_pair(a: &TokenEmbeddings, b: &TokenEmbeddings) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Validation(format!(
            "embedding shapes differ: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

fn check_mlp(p: &FusionParams, input: usize, dim: usize) -> Result<()> {
    p.validate()?;
    if p.input_dim() != input || p.output_dim() != dim {
        return Err(Error::Validation(format!(
            "MLP maps {} -> {}, need {input} -> {dim}",
            p.input_dim(),
            p.output_dim()
        )));
    }
    Ok(())
}

/// `E_t = MLP(E_g ‖ E_l)`, token by token.
pub fn fuse_text(
    global: &TokenEmbeddings,
    local: &TokenEmbeddings,
    p: &FusionParams,
) -> Result<TokenEmbeddings> {
    if global.source != EmbeddingSource::TextGlobal || local.source != EmbeddingSource::TextLocal {
        return Err(Error::Validation(format!(
            "fuse_text expects (text_global, text_local), got ({:?}, {:?})",
            global.source, local.source
        )));
    }
    check_pair(global, local)?;
    check_mlp(p, 2 * global.dim(), global.dim())?;
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    p.store_into(FUSION_PREFIX, &mut store);
    let bound = store.bind(&mut tape);
    let g = tape.leaf(global.data.clone());
    let l = tape.leaf(local.data.clone());
    let cat = tape.concat_cols(&[g, l]);
    let out = mlp_on_tape(&mut tape, &bound, FUSION_PREFIX, cat)?;
    TokenEmbeddings::new(tape.value(out).clone(), EmbeddingSource::TextFused)
}

fn run_condition(
    global: &TokenEmbeddings,
    local: &TokenEmbeddings,
    visual: &TokenEmbeddings,
    p: &ConditionParams,
    mode: ConditionMode,
    flags: AblationFlags,
) -> Result<ConditionVector> {
    check_pair(global, local)?;
    check_pair(global, visual)?;
    let d = global.dim();
    match (mode, &p.fusion) {
        (ConditionMode::Dual, Some(f)) => check_mlp(f, 2 * d, d)?,
        (ConditionMode::AllInMlp, Some(f)) => check_mlp(f, 3 * d, d)?,
        (ConditionMode::AllInXattn, _) => {}
        (m, None) => {
            return Err(Error::Validation(format!(
                "{} mode needs fusion parameters",
                m.name()
            )))
        }
    }
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    p.store_into(&mut store);
    let bound = store.bind(&mut tape);
    let g = tape.leaf(global.data.clone());
    let l = tape.leaf(local.data.clone());
    let v = tape.leaf(visual.data.clone());
    let w = condition_on_tape(&mut tape, &bound, g, l, v, mode, flags)?;
    ConditionVector::new(tape.value(w).clone(), mode, global.tokens())
}

/// Context for `mode` with ablation `flags` applied.
pub fn build_condition(
    global: &TokenEmbeddings,
    local: &TokenEmbeddings,
    visual: &TokenEmbeddings,
    p: &ConditionParams,
    mode: ConditionMode,
    flags: AblationFlags,
) -> Result<ConditionVector> {
    run_condition(global, local, visual, p, mode, flags)
}

pub fn build_condition_all_in_mlp(
    global: &TokenEmbeddings,
    local: &TokenEmbeddings,
    visual: &TokenEmbeddings,
    p: &ConditionParams,
) -> Result<ConditionVector> {
    run_condition(global, local, visual, p, ConditionMode::AllInMlp, AblationFlags::FULL)
}

pub fn build_condition_all_in_xattn(
    global: &TokenEmbeddings,
    local: &TokenEmbeddings,
    visual: &TokenEmbeddings,
    p: &ConditionParams,
) -> Result<ConditionVector> {
    run_condition(global, local, visual, p, ConditionMode::AllInXattn, AblationFlags::FULL)
}
