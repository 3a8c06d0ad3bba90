//! Dataset preparation, training and expansion driven end to end.

mod common;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use outpaint_core::canvas::{Direction, MaskRatio, RasterImage};
use outpaint_core::caption::{CaptionKind, CaptionService, LlmBackend, Recorder, RetryPolicy, StubBackend};
use outpaint_core::checkpoint::Checkpoint;
use outpaint_core::conditioning::{Ablation, AblationFlags, ConditionMode};
use outpaint_core::error::{Error, Result};
use outpaint_core::model::{ModelConfig, OutpaintModel};
use outpaint_core::pipeline::{
    discover_pairs, expand, expand_from, load_records, prepare_dataset, replay, train, ExpandObserver,
    ExpandSettings, ExpansionState, NoopObserver, PrepareOptions, TrainObserver, TrainingRecord,
};
use outpaint_core::tape::Matrix;
use outpaint_core::RunConfig;

fn prepare(dir: &Path, n: usize) -> Vec<TrainingRecord> {
    let src = dir.join("pairs");
    std::fs::create_dir_all(&src).unwrap();
    for i in 0..n {
        common::scene(i, 16).save_png(&src.join(format!("s{i:02}.png"))).unwrap();
        std::fs::write(src.join(format!("s{i:02}.txt")), format!("a landscape with hill {i}")).unwrap();
    }
    let pairs = discover_pairs(&src).unwrap();
    let opts = PrepareOptions {
        k: 2,
        ..PrepareOptions::default()
    };
    prepare_dataset(&pairs, &StubBackend, &opts, &dir.join("data")).unwrap();
    load_records(&dir.join("data")).unwrap()
}

fn small_config(mode: ConditionMode, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            tokens: 4,
            dim: 16,
            fusion_hidden: 16,
            base_channels: 16,
            attn_dim: 8,
            blocks: 1,
            mode,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.epochs = epochs;
    cfg
}

#[derive(Default)]
struct Captured {
    visual: Vec<(String, RasterImage)>,
    contexts: Vec<Matrix>,
}

impl TrainObserver for Captured {
    fn on_visual_input(&mut self, record: &str, image: &RasterImage) {
        self.visual.push((record.to_string(), image.clone()));
    }

    fn on_condition(&mut self, _record: &str, context: &Matrix, _flags: AblationFlags) {
        self.contexts.push(context.clone());
    }
}

#[test]
fn prepared_records_cover_every_direction() {
    let dir = tempfile::tempdir().unwrap();
    let records = prepare(dir.path(), 3);
    assert_eq!(records.len(), 12);
    for (i, chunk) in records.chunks(4).enumerate() {
        let dirs: Vec<Direction> = chunk.iter().map(|r| r.direction).collect();
        assert_eq!(dirs, Direction::ALL.to_vec());
        for r in chunk {
            assert_eq!(r.local_caption.text(), format!("a landscape with hill {i}"));
            assert_eq!(r.local_caption.kind(), CaptionKind::Annotated);
            assert_eq!(r.global_caption.kind(), CaptionKind::Global);
            assert_eq!(r.ratio, MaskRatio::HALF);
            assert_eq!(r.provenance.k, 2);
        }
        assert!(chunk.iter().all(|r| r.global_caption == chunk[0].global_caption));
    }
}

#[test]
fn vision_encoder_only_sees_the_unmasked_region() {
    let dir = tempfile::tempdir().unwrap();
    let records = prepare(dir.path(), 2);
    let cfg = small_config(ConditionMode::Dual, 1);
    let mut seen = Captured::default();
    train(&records, &dir.path().join("data"), &cfg, &dir.path().join("m.ckpt"), None, &mut seen).unwrap();
    assert_eq!(seen.visual.len(), 8);
    for (id, image) in &seen.visual {
        let r = records.iter().find(|r| &r.id == id).unwrap();
        let i: usize = id[1..3].parse().unwrap();
        let full = common::scene(i, 16).quantized();
        let expected = match r.direction {
            Direction::Left => full.crop(outpaint_core::canvas::Rect::new(0, 8, 16, 8)),
            Direction::Right => full.crop(outpaint_core::canvas::Rect::new(0, 0, 16, 8)),
            Direction::Top => full.crop(outpaint_core::canvas::Rect::new(8, 0, 8, 16)),
            Direction::Bottom => full.crop(outpaint_core::canvas::Rect::new(0, 0, 8, 16)),
        }
        .unwrap();
        assert_eq!(image, &expected, "{id}");
    }
}

fn zero_rows(ctx: &Matrix, rows: std::ops::Range<usize>) -> bool {
    rows.into_iter().all(|r| ctx.row(r).iter().all(|&v| v == 0.0))
}

#[test]
fn training_ablations_zero_the_matching_context_rows() {
    let dir = tempfile::tempdir().unwrap();
    let records = prepare(dir.path(), 2);
    let l = 4;
    let cases: [(ConditionMode, Ablation, std::ops::Range<usize>); 3] = [
        (ConditionMode::Dual, Ablation::Clip, 0..l),
        (ConditionMode::AllInXattn, Ablation::Gc, l..2 * l),
        (ConditionMode::AllInXattn, Ablation::Llm, 2 * l..3 * l),
    ];
    for (mode, ablation, rows) in cases {
        let mut cfg = small_config(mode, 1);
        cfg.train.ablate = vec![ablation];
        let mut seen = Captured::default();
        let ckpt = dir.path().join(format!("{}-{ablation:?}.ckpt", mode.name()));
        train(&records, &dir.path().join("data"), &cfg, &ckpt, None, &mut seen).unwrap();
        assert_eq!(seen.contexts.len(), records.len());
        for ctx in &seen.contexts {
            assert_eq!(ctx.nrows(), mode.context_len(l));
            assert!(zero_rows(ctx, rows.clone()), "{} {ablation:?}", mode.name());
            assert!(!zero_rows(ctx, 0..ctx.nrows()));
        }
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let records = prepare(dir.path(), 5);
    let store = dir.path().join("data");
    let mut cfg = small_config(ConditionMode::Dual, 3);
    cfg.train.checkpoint_every = 2;

    let full_path = dir.path().join("full.ckpt");
    let full = train(&records, &store, &cfg, &full_path, None, &mut NoopObserver).unwrap();

    let part_path = dir.path().join("part.ckpt");
    let mut short = cfg.clone();
    short.train.epochs = 1;
    train(&records, &store, &short, &part_path, None, &mut NoopObserver).unwrap();
    let resumed = train(
        &records,
        &store,
        &cfg,
        &part_path,
        Some(Checkpoint::load(&part_path).unwrap()),
        &mut NoopObserver,
    )
    .unwrap();

    assert_eq!(resumed.steps, full.steps);
    assert_eq!(resumed.loss_history, full.loss_history);
    assert_eq!(resumed.checkpoint_sha256, full.checkpoint_sha256);
    assert_eq!(
        std::fs::read(&full_path).unwrap(),
        std::fs::read(&part_path).unwrap()
    );

    let mut other = cfg.clone();
    other.model.tokens = 5;
    let err = train(&records, &store, &other, &part_path, Some(Checkpoint::load(&part_path).unwrap()), &mut NoopObserver);
    assert!(matches!(err, Err(Error::Config(_))));
}

fn expand_model() -> OutpaintModel {
    OutpaintModel::init(small_config(ConditionMode::Dual, 1).model, 9).unwrap()
}

fn settings(flags: AblationFlags) -> ExpandSettings {
    ExpandSettings {
        shift: 8,
        sampling_steps: 3,
        guidance_scale: None,
        master_seed: 42,
        flags,
    }
}

fn global() -> outpaint_core::Caption {
    common::caption("a wide valley under a pale sky", CaptionKind::Global)
}

#[derive(Default)]
struct VisualSizes(Vec<(usize, usize, usize)>);

impl ExpandObserver for VisualSizes {
    fn on_visual_input(&mut self, step: usize, image: &RasterImage) {
        self.0.push((step, image.height(), image.width()));
    }
}

#[test]
fn expansion_is_deterministic_and_calls_the_llm_once_per_step() {
    let model = expand_model();
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let backend = Recorder::new(StubBackend);
        let mut sizes = VisualSizes::default();
        let state = expand(
            common::scene(4, 16),
            global(),
            5,
            Direction::Right,
            &CaptionService::new(&backend),
            &model,
            "ck",
            settings(AblationFlags::FULL),
            &mut sizes,
        )
        .unwrap();
        (state, backend.call_count(), sizes.0)
    };
    let (a, calls, sizes) = run();
    let (b, _, _) = run();
    assert_eq!(calls, 5);
    assert_eq!(a.log, b.log);
    assert_eq!(a.canvas, b.canvas);
    assert_eq!((a.canvas.image().height(), a.canvas.image().width()), (16, 56));
    assert_eq!(sizes, (0..5).map(|i| (i, 16, 16 + 8 * i)).collect::<Vec<_>>());
    assert!(a.log.steps.iter().all(|s| s.local_caption.as_deref().unwrap().starts_with("continuation(right)")));

    a.save(dir.path()).unwrap();
    let loaded = ExpansionState::load(dir.path()).unwrap();
    assert_eq!(loaded, a);
    let replayed = replay(&a.log, &a.initial, &model, "ck").unwrap();
    assert_eq!(replayed, a.canvas);
    assert!(matches!(replay(&a.log, &a.initial, &model, "other"), Err(Error::Validation(_))));
}

#[test]
fn earlier_pixels_survive_later_steps() {
    let model = expand_model();
    let backend = StubBackend;
    let service = CaptionService::new(&backend);
    let mut state =
        ExpansionState::start(common::scene(2, 16), global(), &model, "ck", settings(AblationFlags::FULL)).unwrap();
    let mut previous = state.canvas.image().clone();
    for (i, d) in [Direction::Left, Direction::Left, Direction::Left].into_iter().enumerate() {
        state = expand_from(state, 1, d, &service, &model, "ck", &mut ()).unwrap();
        let img = state.canvas.image();
        let old = img
            .crop(outpaint_core::canvas::Rect::new(0, 8, 16, previous.width()))
            .unwrap();
        assert_eq!(old, previous, "step {i}");
        previous = img.clone();
    }
}

#[test]
fn split_runs_equal_a_single_run() {
    let model = expand_model();
    let backend = StubBackend;
    let service = CaptionService::new(&backend);
    let start = || {
        ExpansionState::start(common::scene(5, 16), global(), &model, "ck", settings(AblationFlags::FULL)).unwrap()
    };
    let whole = expand_from(start(), 5, Direction::Bottom, &service, &model, "ck", &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = expand_from(start(), 2, Direction::Bottom, &service, &model, "ck", &mut ()).unwrap();
    first.save(dir.path()).unwrap();
    let resumed = ExpansionState::load(dir.path()).unwrap();
    let rest = expand_from(resumed, 3, Direction::Bottom, &service, &model, "ck", &mut ()).unwrap();
    assert_eq!(rest.log, whole.log);
    assert_eq!(rest.canvas, whole.canvas);
}

#[test]
fn zero_steps_and_empty_logs_give_back_the_input() {
    let model = expand_model();
    let backend = Recorder::new(StubBackend);
    let image = common::scene(6, 16).quantized();
    let state = expand(
        image.clone(),
        global(),
        0,
        Direction::Top,
        &CaptionService::new(&backend),
        &model,
        "ck",
        settings(AblationFlags::FULL),
        &mut (),
    )
    .unwrap();
    assert_eq!(state.canvas.image(), &image);
    assert_eq!(backend.call_count(), 0);
    assert_eq!(replay(&state.log, &state.initial, &model, "ck").unwrap().into_image(), image);
}

#[test]
fn tampered_logs_fail_to_replay() {
    let model = expand_model();
    let backend = StubBackend;
    let state = expand(
        common::scene(7, 16),
        global(),
        3,
        Direction::Top,
        &CaptionService::new(&backend),
        &model,
        "ck",
        settings(AblationFlags::FULL),
        &mut (),
    )
    .unwrap();

    let mut caption = state.log.clone();
    caption.steps[1].local_caption = Some("a completely different strip".into());
    assert!(matches!(replay(&caption, &state.initial, &model, "ck"), Err(Error::Validation(_))));

    let mut seed = state.log.clone();
    seed.steps[2].seed ^= 1;
    assert!(matches!(replay(&seed, &state.initial, &model, "ck"), Err(Error::Validation(_))));

    let mut missing = state.log.clone();
    missing.steps[0].local_caption = None;
    assert!(matches!(replay(&missing, &state.initial, &model, "ck"), Err(Error::Validation(_))));
}

#[test]
fn llm_ablation_skips_the_backend() {
    let model = expand_model();
    let backend = Recorder::new(StubBackend);
    let flags = AblationFlags::from_ablations(&[Ablation::Llm]).unwrap();
    let state = expand(
        common::scene(8, 16),
        global(),
        3,
        Direction::Right,
        &CaptionService::new(&backend),
        &model,
        "ck",
        settings(flags),
        &mut (),
    )
    .unwrap();
    assert_eq!(backend.call_count(), 0);
    assert!(state.log.steps.iter().all(|s| s.local_caption.is_none()));
    assert_eq!(replay(&state.log, &state.initial, &model, "ck").unwrap(), state.canvas);
}

/// Fails every multimodal call after the first `ok` calls.
struct FailsAfter {
    ok: usize,
    calls: AtomicUsize,
}

impl LlmBackend for FailsAfter {
    fn id(&self) -> &str {
        "flaky"
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete_text(&self, prompt: &str) -> Result<String> {
        StubBackend.complete_text(prompt)
    }

    fn complete_multimodal(&self, image: &RasterImage, prompt: &str) -> Result<String> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(Error::Backend {
                backend: "flaky".into(),
                message: "unavailable".into(),
                retryable: true,
            });
        }
        StubBackend.complete_multimodal(image, prompt)
    }
}

#[test]
fn a_failed_step_keeps_the_completed_ones() {
    let model = expand_model();
    let flaky = FailsAfter {
        ok: 2,
        calls: AtomicUsize::new(0),
    };
    let service = CaptionService::new(&flaky).with_retry(RetryPolicy::immediate(2));
    let failure = expand(
        common::scene(9, 16),
        global(),
        4,
        Direction::Left,
        &service,
        &model,
        "ck",
        settings(AblationFlags::FULL),
        &mut (),
    )
    .unwrap_err();
    assert_eq!(failure.step, 2);
    assert!(matches!(failure.error, Error::Backend { .. }));
    let partial = *failure.state.unwrap();
    assert_eq!(partial.steps_taken(), 2);
    assert_eq!(flaky.calls.load(Ordering::SeqCst), 4);

    let stub = StubBackend;
    let finished = expand_from(partial, 2, Direction::Left, &CaptionService::new(&stub), &model, "ck", &mut ()).unwrap();
    let direct = expand(
        common::scene(9, 16),
        global(),
        4,
        Direction::Left,
        &CaptionService::new(&stub),
        &model,
        "ck",
        settings(AblationFlags::FULL),
        &mut (),
    )
    .unwrap();
    assert_eq!(finished.log, direct.log);
}
