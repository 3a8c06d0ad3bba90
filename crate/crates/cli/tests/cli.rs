use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use outpaint_core::RasterImage;
use tempfile::TempDir;

fn outpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_outpaint"))
        .args(args)
        .env_remove("LLM_ENDPOINT")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = outpaint(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scene(i: usize, side: usize) -> RasterImage {
    RasterImage::from_fn(side, side, |y, x| {
        let t = (i as f64 * 0.37).sin().abs();
        [
            (y as f64 / side as f64) * 0.8 + 0.1,
            t,
            (x as f64 / side as f64) * (1.0 - t),
        ]
    })
    .unwrap()
    .quantized()
}

fn write_pairs(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        scene(i, 16).save_png(&dir.join(format!("p{i}.png"))).unwrap();
        std::fs::write(dir.join(format!("p{i}.txt")), format!("a quiet valley number {i}")).unwrap();
    }
}

/// Records and a checkpoint shared by the tests that only read them.
struct Trained {
    _dir: TempDir,
    pairs: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let pairs = dir.path().join("pairs");
        write_pairs(&pairs, 10);
        let data = dir.path().join("data");
        let ckpt = dir.path().join("ck/model.ckpt");
        ok(&["prepare-data", "--pairs", s(&pairs), "--out", s(&data), "--backend", "stub"]);
        ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1"]);
        Trained {
            _dir: dir,
            pairs,
            data,
            ckpt,
        }
    })
}

#[test]
fn prepare_data_writes_one_record_per_direction() {
    let t = trained();
    let records = std::fs::read_to_string(t.data.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 40);
}

#[test]
fn transcript_replay_reproduces_records_byte_for_byte() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("data");
    let transcript = t.data.join("transcript.jsonl");
    ok(&[
        "prepare-data", "--pairs", s(&t.pairs), "--out", s(&again), "--backend", "transcript", "--transcript",
        s(&transcript),
    ]);
    assert_eq!(
        std::fs::read(again.join("records.jsonl")).unwrap(),
        std::fs::read(t.data.join("records.jsonl")).unwrap()
    );
}

#[test]
fn http_backend_without_endpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs");
    write_pairs(&pairs, 1);
    let out = outpaint(&["prepare-data", "--pairs", s(&pairs), "--out", s(&dir.path().join("d")), "--backend", "http"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LLM_ENDPOINT"));
}

#[test]
fn expansion_widths_follow_the_step_count() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let start = dir.path().join("start.png");
    scene(2, 512).save_png(&start).unwrap();
    for (steps, width) in [("4", 1536), ("8", 2560)] {
        let out_dir = dir.path().join(format!("run{steps}"));
        ok(&[
            "expand", "--image", s(&start), "--caption", "a valley that goes on forever", "--steps", steps,
            "--direction", "right", "--ckpt", s(&t.ckpt), "--sampling-steps", "1", "--out", s(&out_dir),
        ]);
        let canvas = RasterImage::load_png(&out_dir.join("canvas.png")).unwrap();
        assert_eq!((canvas.height(), canvas.width()), (512, width));
        ok(&["replay", "--state", s(&out_dir), "--ckpt", s(&t.ckpt)]);
    }
}

#[test]
fn llm_ablation_makes_no_calls() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let start = dir.path().join("start.png");
    scene(4, 16).save_png(&start).unwrap();
    let expand = |ablate: &str, out: &str| {
        let mut args = vec![
            "expand", "--image", s(&start), "--caption", "a long coastline", "--steps", "3", "--direction", "top",
            "--ckpt", s(&t.ckpt), "--sampling-steps", "2",
        ];
        let out_dir = dir.path().join(out);
        let out_dir = out_dir.to_str().unwrap().to_string();
        args.extend(["--out", &out_dir]);
        if !ablate.is_empty() {
            args.extend(["--ablate", ablate]);
        }
        String::from_utf8(ok(&args).stderr).unwrap()
    };
    assert!(expand("", "full").contains("3 LLM calls"));
    assert!(expand("llm", "nollm").contains("0 LLM calls"));
}

#[test]
fn evaluate_rejects_fid_and_oversized_splits() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    scene(0, 16).save_png(&images.join("a.png")).unwrap();
    let captions = dir.path().join("captions.jsonl");
    std::fs::write(&captions, "{\"file\":\"a.png\",\"caption\":\"a valley\"}\n").unwrap();
    let scores = dir.path().join("scores.json");
    let base = ["evaluate", "--images", s(&images), "--captions", s(&captions), "--out", s(&scores)];

    let fid = outpaint(&[&base[..], &["--metrics", "fid"]].concat());
    assert_eq!(fid.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&fid.stderr).contains("fid"));

    let splits = outpaint(&[&base[..], &["--splits", "2"]].concat());
    assert_eq!(splits.status.code(), Some(2));

    ok(&[&base[..], &["--splits", "1", "--ckpt", s(&t.ckpt)]].concat());
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&scores).unwrap()).unwrap();
    assert!(doc.to_string().contains("clip"));
}

#[test]
fn xattn_config_reports_the_context_length() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"model": {"mode": "all_in_xattn"}, "train": {"epochs": 1}}"#).unwrap();
    let out = ok(&[
        "train", "--data", s(&t.data), "--config", s(&config), "--out", s(&dir.path().join("x.ckpt")),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("M = 24 rows"));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"model": {"heads": 4}}"#).unwrap();
    let out = outpaint(&["train", "--data", s(&t.data), "--config", s(&config), "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
}
