use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canvas::{Direction, MaskRatio, RasterImage};
use crate::caption::{Caption, CaptionKind, CaptionService, LlmBackend, RetryPolicy};
use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const REPORT_FILE: &str = "prepare_report.json";

/// An image with its human caption, as found in a pairs directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePair {
    pub stem: String,
    pub image: PathBuf,
    pub caption: String,
}

/// Finds `<stem>.png` + `<stem>.txt` pairs in `dir`, sorted by stem.
pub fn discover_pairs(dir: &Path) -> Result<Vec<SourcePair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let txt = path.with_extension("txt");
        if !txt.is_file() {
            log::warn!("{} has no caption file, skipping", path.display());
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("{} has a non-UTF-8 name", path.display())))?
            .to_string();
        let raw = std::fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
        pairs.push(SourcePair {
            stem,
            image: path,
            caption: raw.split_whitespace().collect::<Vec<_>>().join(" "),
        });
    }
    pairs.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    /// Imagined local captions behind the global caption.
    pub k: usize,
}

/// One (image, direction) training item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub id: String,
    /// Path relative to the store directory.
    pub image: String,
    pub image_sha256: String,
    pub direction: Direction,
    pub ratio: MaskRatio,
    pub global_caption: Caption,
    /// The annotated caption, verbatim.
    pub local_caption: Caption,
    pub provenance: Provenance,
}

impl TrainingRecord {
    fn validate(&self) -> Result<()> {
        if self.global_caption.kind() != CaptionKind::Global
            || self.local_caption.kind() != CaptionKind::Annotated
        {
            return Err(Error::Validation(format!(
                "record {}: caption kinds must be (global, annotated)",
                self.id
            )));
        }
        let p = Path::new(&self.image);
        if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Validation(format!(
                "record {}: image path must stay inside the store",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn parse_records(text: &str) -> Result<Vec<TrainingRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TrainingRecord = serde_json::from_str(line)
            .map_err(|e| Error::Validation(format!("record line {}: {e}", i + 1)))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Reads `records.jsonl` from a store directory.
pub fn load_records(store: &Path) -> Result<Vec<TrainingRecord>> {
    let path = store.join(RECORDS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_records(&text)
}

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub k: usize,
    pub ratio: MaskRatio,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            k: crate::caption::DEFAULT_IMAGINED,
            ratio: MaskRatio::HALF,
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub stem: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub backend: String,
    pub pairs: usize,
    pub processed: usize,
    /// Pairs already present in the store from an earlier run.
    pub reused: usize,
    pub records_written: usize,
    pub skipped: Vec<SkippedPair>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn records_for_pair(
    pair: &SourcePair,
    service: &CaptionService<'_>,
    opts: &PrepareOptions,
    out: &Path,
) -> Result<Vec<TrainingRecord>> {
    let bytes = std::fs::read(&pair.image).map_err(|e| Error::io(&pair.image, e))?;
    let image = RasterImage::from_png_bytes(&bytes)?;
    let sha = image.content_sha256();
    let annotated = Caption::new(pair.caption.clone(), CaptionKind::Annotated)?;
    let record = service.build_caption_record(&annotated, opts.k)?;
    let rel = format!("{IMAGES_DIR}/{}.png", pair.stem);
    let dest = out.join(&rel);
    std::fs::write(&dest, &bytes).map_err(|e| Error::io(&dest, e))?;
    let records = Direction::ALL
        .iter()
        .map(|&d| TrainingRecord {
            id: format!("{}-{}", pair.stem, d.name()),
            image: rel.clone(),
            image_sha256: sha.clone(),
            direction: d,
            ratio: opts.ratio,
            global_caption: record.global.clone(),
            local_caption: record.annotated.clone(),
            provenance: Provenance {
                backend: service.backend().id().to_string(),
                k: opts.k,
            },
        })
        .collect();
    Ok(records)
}

/// Generates global captions and appends four records per pair to
/// `out/records.jsonl`.
///
/// Pairs whose four records are already in the store are left alone, so an
/// interrupted run can be repeated. Pairs that still fail after retries are
/// listed in the report and skipped.
pub fn prepare_dataset(
    pairs: &[SourcePair],
    backend: &dyn LlmBackend,
    opts: &PrepareOptions,
    out: &Path,
) -> Result<PrepareReport> {
    if pairs.is_empty() {
        return Err(Error::Validation("no image/caption pairs to prepare".into()));
    }
    if opts.k == 0 || opts.parallelism == 0 {
        return Err(Error::Validation("k and parallelism must be positive".into()));
    }
    let started_unix = unix_now();
    let images = out.join(IMAGES_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records_path = out.join(RECORDS_FILE);
    let existing = if records_path.exists() {
        load_records(out)?
    } else {
        Vec::new()
    };
    let done: HashSet<&str> = existing.iter().map(|r| r.id.as_str()).collect();
    let (todo, reused): (Vec<&SourcePair>, Vec<&SourcePair>) = pairs.iter().partition(|p| {
        !Direction::ALL
            .iter()
            .all(|d| done.contains(format!("{}-{}", p.stem, d.name()).as_str()))
    });

    let service = CaptionService::new(backend).with_retry(opts.retry);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<TrainingRecord>>> = pool.install(|| {
        todo.par_iter()
            .map(|p| records_for_pair(p, &service, opts, out))
            .collect()
    });

    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(|e| Error::io(&records_path, e))?;
    let mut skipped = Vec::new();
    let mut written = 0;
    for (pair, result) in todo.iter().zip(results) {
        match result {
            Ok(records) => {
                let mut buf = String::new();
                for r in &records {
                    buf.push_str(&serde_json::to_string(r)?);
                    buf.push('\n');
                }
                file.write_all(buf.as_bytes())
                    .map_err(|e| Error::io(&records_path, e))?;
                written += records.len();
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", pair.stem);
                skipped.push(SkippedPair {
                    stem: pair.stem.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    file.flush().map_err(|e| Error::io(&records_path, e))?;
    let report = PrepareReport {
        backend: backend.id().to_string(),
        pairs: pairs.len(),
        processed: todo.len() - skipped.len(),
        reused: reused.len(),
        records_written: written,
        skipped,
        started_unix,
        finished_unix: unix_now(),
    };
    let report_path = out.join(REPORT_FILE);
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
        .map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::StubBackend;

    fn write_pair(dir: &Path, stem: &str, caption: &str, shade: f64) {
        RasterImage::filled(8, 8, shade)
            .unwrap()
            .save_png(&dir.join(format!("{stem}.png")))
            .unwrap();
        std::fs::write(dir.join(format!("{stem}.txt")), caption).unwrap();
    }

    #[test]
    fn four_records_per_pair_with_verbatim_local_caption() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_pair(src.path(), "b", "a dog  on\nthe grass", 0.2);
        write_pair(src.path(), "a", "a red boat", 0.6);
        let pairs = discover_pairs(src.path()).unwrap();
        assert_eq!(pairs[0].stem, "a");
        assert_eq!(pairs[1].caption, "a dog on the grass");
        let report =
            prepare_dataset(&pairs, &StubBackend, &PrepareOptions::default(), out.path()).unwrap();
        assert_eq!(report.records_written, 8);
        let recs = load_records(out.path()).unwrap();
        assert_eq!(recs.len(), 8);
        assert_eq!(recs[4].id, "b-top");
        assert_eq!(recs[4].local_caption.text(), "a dog on the grass");
        assert!(out.path().join("images/a.png").is_file());

        let again =
            prepare_dataset(&pairs, &StubBackend, &PrepareOptions::default(), out.path()).unwrap();
        assert_eq!(again.reused, 2);
        assert_eq!(load_records(out.path()).unwrap().len(), 8);
    }

    #[test]
    fn records_reject_escaping_paths() {
        let line = r#"{"id":"x","image":"../x.png","image_sha256":"0","direction":"left","ratio":[1,1],"global_caption":{"text":"g","kind":"global"},"local_caption":{"text":"l","kind":"annotated"},"provenance":{"backend":"stub","k":1}}"#;
        assert!(parse_records(line).is_err());
        assert_eq!(parse_records(&line.replace("../", "")).unwrap().len(), 1);
    }
}
