use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};
use outpaint_core::caption::{
    CaptionService, HttpBackend, LlmBackend, Recorder, RetryPolicy, StubBackend, Transcript,
    TranscriptBackend,
};
use outpaint_core::checkpoint::Checkpoint;
use outpaint_core::config::{BackendKind, RunConfig};
use outpaint_core::eval::{self, compare_runs, Metric, RunScores, ToyClassifier};
use outpaint_core::pipeline::{self, ExpandSettings, ExpansionState, NoopObserver, PrepareOptions};
use outpaint_core::{Ablation, Caption, CaptionKind, Direction, Error, RasterImage, Result};

#[derive(Parser)]
#[command(name = "outpaint", version, about = "Text-guided infinite image outpainting")]
struct Cli {
    /// More log output (repeat for trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Stub,
    Transcript,
    Http,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Stub => BackendKind::Stub,
            BackendArg::Transcript => BackendKind::Transcript,
            BackendArg::Http => BackendKind::Http,
        }
    }
}

#[derive(clap::Args)]
struct BackendOpts {
    /// LLM backend; defaults to the config file's choice.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,

    /// JSONL transcript replayed by the transcript backend.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate global captions and training records from image/caption pairs.
    PrepareData {
        /// Directory of <stem>.png + <stem>.txt pairs.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Imagined local captions per image.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the conditioning and denoiser parameters.
    Train {
        /// Record store written by prepare-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; sidecar and loss CSV are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<Ablation>,
    },
    /// Grow an image strip by strip.
    Expand {
        /// Square PNG whose side is the base window.
        #[arg(long, required_unless_present = "resume_from")]
        image: Option<PathBuf>,
        /// Global caption describing the whole expanded scene.
        #[arg(long, required_unless_present = "resume_from")]
        caption: Option<String>,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shift: Option<usize>,
        #[arg(long)]
        sampling_steps: Option<usize>,
        /// Output directory for canvas.png, initial.png and state.json.
        #[arg(long, default_value = "expansion")]
        out: PathBuf,
        /// Continue a saved expansion instead of starting from --image.
        #[arg(long)]
        resume_from: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rebuild a saved expansion from its log without LLM calls.
    Replay {
        /// Directory written by expand.
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Where to write the replayed canvas.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score expanded canvases.
    Evaluate {
        #[arg(long)]
        images: PathBuf,
        /// JSONL of {"file", "caption"} with global captions.
        #[arg(long)]
        captions: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "is,clipsim")]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        splits: Option<usize>,
        /// Use the encoders configured in this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tabulate scores of several runs.
    Compare {
        /// JSON array of {variant, dataset, factor, is, clip}.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn make_backend(cfg: &RunConfig) -> Result<Box<dyn LlmBackend>> {
    Ok(match cfg.llm.backend {
        BackendKind::Stub => Box::new(StubBackend::new()),
        BackendKind::Transcript => {
            let path = cfg.llm.transcript.as_deref().ok_or_else(|| {
                Error::Config("the transcript backend needs --transcript".into())
            })?;
            Box::new(TranscriptBackend::load(path)?)
        }
        BackendKind::Http => Box::new(HttpBackend::from_env()?),
    })
}

fn apply_backend(cfg: &mut RunConfig, opts: &BackendOpts) {
    if let Some(b) = opts.backend {
        cfg.llm.backend = b.into();
    }
    if let Some(t) = &opts.transcript {
        cfg.llm.transcript = Some(t.clone());
    }
}

fn retry(cfg: &RunConfig) -> RetryPolicy {
    RetryPolicy {
        max_attempts: cfg.llm.max_attempts,
        ..RetryPolicy::default()
    }
}

fn write_sorted_transcript(recorder: &Recorder<Box<dyn LlmBackend>>, path: &Path) -> Result<()> {
    let mut entries = recorder.transcript().entries().to_vec();
    entries.sort_by(|a, b| {
        (&a.prompt_sha256, &a.image_sha256).cmp(&(&b.prompt_sha256, &b.image_sha256))
    });
    entries.dedup_by(|a, b| a.prompt_sha256 == b.prompt_sha256 && a.image_sha256 == b.image_sha256);
    std::fs::write(path, Transcript::new(entries).to_jsonl()).map_err(|e| Error::io(path, e))
}

fn prepare_data(
    pairs: &Path,
    out: &Path,
    k: Option<usize>,
    backend: &BackendOpts,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply_backend(&mut cfg, backend);
    if let Some(k) = k {
        cfg.llm.k = k;
    }
    cfg.validate()?;
    let recorder = Recorder::new(make_backend(&cfg)?);
    let found = pipeline::discover_pairs(pairs)?;
    let opts = PrepareOptions {
        k: cfg.llm.k,
        ratio: cfg.train.ratio,
        parallelism: cfg.llm.parallelism,
        retry: retry(&cfg),
    };
    let report = pipeline::prepare_dataset(&found, &recorder, &opts, out)?;
    write_sorted_transcript(&recorder, &out.join("transcript.jsonl"))?;
    cfg.echo_into(out)?;
    info!(
        "{} pairs: {} processed, {} reused, {} skipped, {} records written",
        report.pairs,
        report.processed,
        report.reused,
        report.skipped.len(),
        report.records_written
    );
    println!("{}", out.join(pipeline::RECORDS_FILE).display());
    if report.processed + report.reused == 0 {
        return Err(Error::Backend {
            backend: report.backend,
            message: "every pair failed".into(),
            retryable: false,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    resume: bool,
    epochs: Option<usize>,
    seed: Option<u64>,
    ablate: Vec<Ablation>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if !ablate.is_empty() {
        cfg.train.ablate = ablate;
    }
    cfg.validate()?;
    info!(
        "condition mode {}: denoiser context M = {} rows of width {}",
        cfg.model.mode.name(),
        cfg.model.context_len(),
        cfg.model.dim
    );
    let records = pipeline::load_records(data)?;
    let prior = if resume { Some(Checkpoint::load(out)?) } else { None };
    let summary = pipeline::train(&records, data, &cfg, out, prior, &mut NoopObserver)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        cfg.echo_into(dir)?;
    }
    println!(
        "{} steps, final loss {:.5}, checkpoint {}",
        summary.steps,
        summary.loss_history.last().copied().unwrap_or(f64::NAN),
        summary.checkpoint_sha256
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn expand(
    image: Option<&Path>,
    caption: Option<&str>,
    steps: usize,
    direction: Direction,
    ckpt: &Path,
    ablate: Vec<Ablation>,
    seed: Option<u64>,
    shift: Option<usize>,
    sampling_steps: Option<usize>,
    out: &Path,
    resume_from: Option<&Path>,
    backend: &BackendOpts,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply_backend(&mut cfg, backend);
    if !ablate.is_empty() {
        cfg.expand.ablate = ablate;
    }
    if let Some(s) = seed {
        cfg.expand.seed = s;
    }
    if let Some(s) = sampling_steps {
        cfg.expand.sampling_steps = s;
    }
    let flags = cfg.expand_flags()?;
    let checkpoint = Checkpoint::load(ckpt)?;
    cfg.model = checkpoint.model.config().clone();
    let llm = Recorder::new(make_backend(&cfg)?);
    let service = CaptionService::new(&llm).with_retry(retry(&cfg));

    let state = match resume_from {
        Some(dir) => ExpansionState::load(dir)?,
        None => {
            let image = RasterImage::load_png(image.expect("clap requires --image"))?;
            let shift = shift.unwrap_or(image.width() / 2);
            cfg.base_window = image.width();
            cfg.shift = shift;
            cfg.validate()?;
            let global = Caption::new(caption.expect("clap requires --caption"), CaptionKind::Global)?;
            ExpansionState::start(
                image,
                global,
                &checkpoint.model,
                &checkpoint.archive_sha256,
                ExpandSettings {
                    shift,
                    sampling_steps: cfg.expand.sampling_steps,
                    guidance_scale: cfg.expand.guidance_scale,
                    master_seed: cfg.expand.seed,
                    flags,
                },
            )?
        }
    };
    let result = pipeline::expand_from(
        state,
        steps,
        direction,
        &service,
        &checkpoint.model,
        &checkpoint.archive_sha256,
        &mut (),
    );
    cfg.echo_into(out)?;
    match result {
        Ok(state) => {
            state.save(out)?;
            let img = state.canvas.image();
            info!("{} LLM calls", llm.call_count());
            println!("{}x{} {}", img.width(), img.height(), out.join(pipeline::CANVAS_PNG).display());
            Ok(())
        }
        Err(failure) => {
            if let Some(state) = &failure.state {
                state.save(out)?;
                error!(
                    "kept {} completed steps in {}; continue with --resume-from",
                    state.steps_taken(),
                    out.display()
                );
            }
            error!("step {} failed", failure.step);
            Err(failure.error)
        }
    }
}

fn replay(state: &Path, ckpt: &Path, out: Option<&Path>) -> Result<()> {
    let saved = ExpansionState::load(state)?;
    let checkpoint = Checkpoint::load(ckpt)?;
    let canvas = pipeline::replay(&saved.log, &saved.initial, &checkpoint.model, &checkpoint.archive_sha256)?;
    if canvas.image().content_sha256() != saved.log.canvas_sha256 {
        return Err(Error::Validation("replayed canvas differs from the saved canvas".into()));
    }
    if let Some(p) = out {
        canvas.image().save_png(p)?;
    }
    println!("replayed {} steps, canvas {}", saved.log.steps.len(), saved.log.canvas_sha256);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    images: &Path,
    captions: &Path,
    metrics: &[String],
    out: &Path,
    splits: Option<usize>,
    ckpt: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let metrics = metrics
        .iter()
        .map(|m| m.parse::<Metric>())
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = load_config(config)?;
    if let Some(s) = splits {
        cfg.eval.splits = s;
    }
    if let Some(p) = ckpt {
        cfg.model = Checkpoint::load(p)?.model.config().clone();
    }
    cfg.validate()?;
    let text = std::fs::read_to_string(captions).map_err(|e| Error::io(captions, e))?;
    let entries = eval::parse_eval_captions(&text)?;
    let (text_enc, vision_enc) = cfg.model.encoders();
    let classifier = ToyClassifier::new(10, cfg.eval.classifier_seed);
    let reports = eval::evaluate_directory(
        images,
        &entries,
        &metrics,
        cfg.eval.splits,
        &classifier,
        text_enc.as_ref(),
        vision_enc.as_ref(),
        &cfg.hash(),
    )?;
    std::fs::write(out, serde_json::to_vec_pretty(&reports).map_err(Error::from)?)
        .map_err(|e| Error::io(out, e))?;
    for r in &reports {
        println!("{:<8} {:>10.4}  (n = {})", r.metric, r.value, r.samples);
    }
    Ok(())
}

fn compare(runs: &Path, csv: Option<&Path>) -> Result<()> {
    let bytes = std::fs::read(runs).map_err(|e| Error::io(runs, e))?;
    let scores: Vec<RunScores> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Validation(format!("invalid runs file: {e}")))?;
    let table = compare_runs(&scores);
    print!("{}", table.to_text());
    if let Some(p) = csv {
        std::fs::write(p, table.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData {
            pairs,
            out,
            k,
            backend,
            config,
        } => prepare_data(&pairs, &out, k, &backend, config.as_deref()),
        Command::Train {
            data,
            config,
            out,
            resume,
            epochs,
            seed,
            ablate,
        } => train(&data, config.as_deref(), &out, resume, epochs, seed, ablate),
        Command::Expand {
            image,
            caption,
            steps,
            direction,
            ckpt,
            ablate,
            seed,
            shift,
            sampling_steps,
            out,
            resume_from,
            backend,
            config,
        } => expand(
            image.as_deref(),
            caption.as_deref(),
            steps,
            direction,
            &ckpt,
            ablate,
            seed,
            shift,
            sampling_steps,
            &out,
            resume_from.as_deref(),
            &backend,
            config.as_deref(),
        ),
        Command::Replay { state, ckpt, out } => replay(&state, &ckpt, out.as_deref()),
        Command::Evaluate {
            images,
            captions,
            metrics,
            out,
            splits,
            ckpt,
            config,
        } => evaluate(
            &images,
            &captions,
            &metrics,
            &out,
            splits,
            ckpt.as_deref(),
            config.as_deref(),
        ),
        Command::Compare { runs, csv } => compare(&runs, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
