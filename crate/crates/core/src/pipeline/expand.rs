use std::path::Path;

use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::canvas::{Canvas, Direction, RasterImage};
use crate::caption::{Caption, CaptionKind, CaptionService};
use crate::checkpoint::write_atomic;
use crate::conditioning::{AblationFlags, ConditionMode};
use crate::diffusion::{sample_inpaint, SampleOptions};
use crate::error::{Error, Result};
use crate::model::OutpaintModel;

pub const STATE_FILE: &str = "state.json";
pub const INITIAL_PNG: &str = "initial.png";
pub const CANVAS_PNG: &str = "canvas.png";

/// Receives the image handed to the vision encoder at each expansion step.
pub trait ExpandObserver {
    fn on_visual_input(&mut self, _step: usize, _image: &RasterImage) {}
}

impl ExpandObserver for () {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLog {
    pub index: usize,
    pub direction: Direction,
    /// `None` when the local caption path is ablated.
    pub local_caption: Option<String>,
    pub seed: u64,
    /// Hash of the canvas after this step.
    pub canvas_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandSettings {
    pub shift: usize,
    pub sampling_steps: usize,
    pub guidance_scale: Option<f64>,
    pub master_seed: u64,
    pub flags: AblationFlags,
}

/// Everything needed to continue or replay an expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionLog {
    pub base_window: usize,
    pub global_caption: Caption,
    pub mode: ConditionMode,
    pub settings: ExpandSettings,
    pub checkpoint_sha256: String,
    pub initial_sha256: String,
    pub canvas_sha256: String,
    pub steps: Vec<StepLog>,
}

impl ExpansionLog {
    pub fn plan(&self) -> Vec<Direction> {
        self.steps.iter().map(|s| s.direction).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionState {
    pub log: ExpansionLog,
    pub initial: RasterImage,
    pub canvas: Canvas,
}

/// Returned when a step fails; `state` holds every completed step, or is
/// `None` when the expansion could not start.
#[derive(Debug)]
pub struct ExpandFailure {
    pub step: usize,
    pub error: Error,
    pub state: Option<Box<ExpansionState>>,
}

impl std::fmt::Display for ExpandFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "expansion step {} failed: {}", self.step, self.error)
    }
}

impl std::error::Error for ExpandFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl ExpansionState {
    /// A fresh state with no steps taken.
    pub fn start(
        image: RasterImage,
        global_caption: Caption,
        model: &OutpaintModel,
        checkpoint_sha256: &str,
        settings: ExpandSettings,
    ) -> Result<Self> {
        if global_caption.kind() != CaptionKind::Global {
            return Err(Error::Validation("expansion needs a global caption".into()));
        }
        settings.flags.validate()?;
        let initial = image.quantized();
        let canvas = Canvas::new(initial.clone(), settings.shift)?;
        let f = model.config().downsample;
        if canvas.base_window() % f != 0 || !settings.shift.is_multiple_of(f) {
            return Err(Error::Geometry(format!(
                "base window {} and shift {} must be multiples of {f}",
                canvas.base_window(),
                settings.shift
            )));
        }
        model.schedule().ddim_timesteps(settings.sampling_steps)?;
        let sha = initial.content_sha256();
        Ok(Self {
            log: ExpansionLog {
                base_window: canvas.base_window(),
                global_caption,
                mode: model.config().mode,
                settings,
                checkpoint_sha256: checkpoint_sha256.to_string(),
                initial_sha256: sha.clone(),
                canvas_sha256: sha,
                steps: Vec::new(),
            },
            initial,
            canvas,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.log.steps.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.initial.save_png(&dir.join(INITIAL_PNG))?;
        self.canvas.image().save_png(&dir.join(CANVAS_PNG))?;
        write_atomic(&dir.join(STATE_FILE), &serde_json::to_vec_pretty(&self.log)?)
    }

    pub fn parse_log(bytes: &[u8]) -> Result<ExpansionLog> {
        let log: ExpansionLog = serde_json::from_slice(bytes)
            .map_err(|e| Error::Validation(format!("invalid expansion state: {e}")))?;
        if log.steps.iter().enumerate().any(|(i, s)| s.index != i) {
            return Err(Error::Validation("step log indices are not consecutive".into()));
        }
        Ok(log)
    }

    /// Loads a saved state; both PNGs must match the hashes in the log.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let log = Self::parse_log(&bytes)?;
        let initial = RasterImage::load_png(&dir.join(INITIAL_PNG))?;
        let image = RasterImage::load_png(&dir.join(CANVAS_PNG))?;
        if initial.content_sha256() != log.initial_sha256 || image.content_sha256() != log.canvas_sha256 {
            return Err(Error::Validation(format!(
                "{} does not match the saved images",
                path.display()
            )));
        }
        let canvas = Canvas::restore(image, log.base_window, log.settings.shift, &log.plan())?;
        Ok(Self { log, initial, canvas })
    }
}

/// Per-step sampling seed.
pub fn step_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, index as u64)
}

fn check_model(state: &ExpansionState, model: &OutpaintModel, checkpoint_sha256: &str) -> Result<()> {
    if state.log.checkpoint_sha256 != checkpoint_sha256 {
        return Err(Error::Validation(format!(
            "state was produced with checkpoint {}, not {checkpoint_sha256}",
            state.log.checkpoint_sha256
        )));
    }
    if state.log.mode != model.config().mode {
        return Err(Error::Validation("state and model use different condition modes".into()));
    }
    Ok(())
}

/// Generates one strip; the caption is `None` only when the local path is ablated.
fn run_step(
    state: &ExpansionState,
    model: &OutpaintModel,
    direction: Direction,
    local: Option<&Caption>,
    seed: u64,
    observer: &mut dyn ExpandObserver,
) -> Result<Canvas> {
    let s = &state.log.settings;
    let input = state.canvas.build_step_input(direction)?;
    let index = state.steps_taken();
    observer.on_visual_input(index, state.canvas.image());
    let condition = model.condition(&state.log.global_caption, local, state.canvas.image(), s.flags)?;
    let opts = SampleOptions {
        steps: s.sampling_steps,
        seed,
        guidance_scale: s.guidance_scale,
    };
    let window = sample_inpaint(model, &input, &condition, &opts)?.quantized();
    state.canvas.composite(&window, direction)
}

/// Runs `steps` more expansion steps towards `direction`.
///
/// Each step asks the LLM for the next strip's caption from the current edge
/// window (skipped when the local path is ablated), conditions on the whole
/// canvas as the visual input, and samples the masked strip.
pub fn expand_from(
    mut state: ExpansionState,
    steps: usize,
    direction: Direction,
    captions: &CaptionService<'_>,
    model: &OutpaintModel,
    checkpoint_sha256: &str,
    observer: &mut dyn ExpandObserver,
) -> std::result::Result<ExpansionState, ExpandFailure> {
    if let Err(error) = check_model(&state, model, checkpoint_sha256) {
        return Err(ExpandFailure {
            step: state.steps_taken(),
            error,
            state: Some(Box::new(state)),
        });
    }
    for _ in 0..steps {
        let index = state.steps_taken();
        let seed = step_seed(state.log.settings.master_seed, index);
        let result = (|| {
            let local = if state.log.settings.flags.use_local {
                let window = state.canvas.local_window(direction)?;
                Some(captions.inference_local_caption(&window, direction)?)
            } else {
                None
            };
            let canvas = run_step(&state, model, direction, local.as_ref(), seed, observer)?;
            Ok::<_, Error>((canvas, local))
        })();
        match result {
            Ok((canvas, local)) => {
                let sha = canvas.image().content_sha256();
                log::info!("step {index}: {direction}, canvas {}x{}", canvas.image().height(), canvas.image().width());
                state.log.steps.push(StepLog {
                    index,
                    direction,
                    local_caption: local.map(|c| c.text().to_string()),
                    seed,
                    canvas_sha256: sha.clone(),
                });
                state.log.canvas_sha256 = sha;
                state.canvas = canvas;
            }
            Err(error) => {
                return Err(ExpandFailure {
                    step: index,
                    error,
                    state: Some(Box::new(state)),
                })
            }
        }
    }
    Ok(state)
}

/// Starts from `image` and runs `steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn expand(
    image: RasterImage,
    global_caption: Caption,
    steps: usize,
    direction: Direction,
    captions: &CaptionService<'_>,
    model: &OutpaintModel,
    checkpoint_sha256: &str,
    settings: ExpandSettings,
    observer: &mut dyn ExpandObserver,
) -> std::result::Result<ExpansionState, ExpandFailure> {
    let state = ExpansionState::start(image, global_caption, model, checkpoint_sha256, settings)
        .map_err(|error| ExpandFailure {
            step: 0,
            error,
            state: None,
        })?;
    expand_from(state, steps, direction, captions, model, checkpoint_sha256, observer)
}

/// Rebuilds the canvas from the log alone, without any LLM calls.
///
/// Fails with a validation error when a regenerated step does not hash to the
/// logged value.
pub fn replay(
    log: &ExpansionLog,
    initial: &RasterImage,
    model: &OutpaintModel,
    checkpoint_sha256: &str,
) -> Result<Canvas> {
    if initial.content_sha256() != log.initial_sha256 {
        return Err(Error::Validation("initial image does not match the log".into()));
    }
    let mut state = ExpansionState {
        log: ExpansionLog {
            steps: Vec::new(),
            canvas_sha256: log.initial_sha256.clone(),
            ..log.clone()
        },
        initial: initial.clone(),
        canvas: Canvas::new(initial.clone(), log.settings.shift)?,
    };
    check_model(&state, model, checkpoint_sha256)?;
    for entry in &log.steps {
        let local = match (&entry.local_caption, log.settings.flags.use_local) {
            (Some(t), true) => Some(Caption::new(t.clone(), CaptionKind::LocalInference)?),
            (None, false) => None,
            _ => {
                return Err(Error::Validation(format!(
                    "step {}: local caption presence disagrees with the ablation flags",
                    entry.index
                )))
            }
        };
        let canvas = run_step(&state, model, entry.direction, local.as_ref(), entry.seed, &mut ())?;
        let sha = canvas.image().content_sha256();
        if sha != entry.canvas_sha256 {
            return Err(Error::Validation(format!(
                "step {} replays to canvas {sha}, log says {}",
                entry.index, entry.canvas_sha256
            )));
        }
        state.log.steps.push(entry.clone());
        state.canvas = canvas;
    }
    Ok(state.canvas)
}
