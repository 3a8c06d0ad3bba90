//! Inception Score and CLIP similarity over expanded canvases.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::canvas::RasterImage;
use crate::caption::{Caption, CaptionKind};
use crate::conditioning::{encode_text, encode_visual, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::tape::{softmax_rows, Matrix};

const KL_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_SPLITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(Vec<f64>);

impl ClassProbabilities {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Validation("probability vector is empty".into()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation("probabilities must be finite and nonnegative".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Validation(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub splits: Option<usize>,
    pub config_hash: String,
}

/// `exp(mean_x KL(p(y|x) || p(y)))` per contiguous split, averaged over splits.
pub fn inception_score(
    probs: &[ClassProbabilities],
    splits: usize,
    config_hash: &str,
) -> Result<MetricReport> {
    if splits == 0 {
        return Err(Error::Validation("split count must be at least 1".into()));
    }
    if probs.len() < splits {
        return Err(Error::Validation(format!(
            "{} samples cannot fill {splits} splits",
            probs.len()
        )));
    }
    let c = probs[0].classes();
    if probs.iter().any(|p| p.classes() != c) {
        return Err(Error::Validation("probability vectors differ in length".into()));
    }
    let n = probs.len();
    let mut total = 0.0;
    for s in 0..splits {
        let part = &probs[s * n / splits..(s + 1) * n / splits];
        total += split_score(part, c);
    }
    let value = total / splits as f64;
    if !value.is_finite() {
        return Err(Error::Validation("inception score is not finite".into()));
    }
    Ok(MetricReport {
        metric: "is".into(),
        value,
        samples: n,
        splits: Some(splits),
        config_hash: config_hash.to_string(),
    })
}

fn split_score(part: &[ClassProbabilities], classes: usize) -> f64 {
    let m = part.len() as f64;
    // identical rows are their own marginal; averaging them could drift by an ulp
    let marginal = if part.iter().all(|p| p == &part[0]) {
        part[0].as_slice().to_vec()
    } else {
        let mut acc = vec![0.0; classes];
        for p in part {
            for (a, v) in acc.iter_mut().zip(p.as_slice()) {
                *a += v / m;
            }
        }
        acc
    };
    let mut kl_sum = 0.0;
    for p in part {
        let kl: f64 = p
            .as_slice()
            .iter()
            .zip(&marginal)
            .map(|(&px, &py)| {
                if px <= 0.0 {
                    0.0
                } else {
                    px * (px.max(KL_FLOOR).ln() - py.max(KL_FLOOR).ln())
                }
            })
            .sum();
        kl_sum += kl;
    }
    (kl_sum / m).exp()
}

/// Produces class probabilities for an image.
pub trait Classifier: Send + Sync {
    fn classes(&self) -> usize;

    fn predict(&self, image: &RasterImage) -> Result<ClassProbabilities>;
}

/// Seeded linear map over an 8x8 thumbnail followed by softmax.
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    weights: Matrix,
}

const THUMB: usize = 8;

impl ToyClassifier {
    pub fn new(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = THUMB * THUMB * 3;
        let scale = 4.0 / (inputs as f64).sqrt();
        let weights = Matrix::from_shape_simple_fn((inputs, classes), || {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        Self { weights }
    }
}

impl Default for ToyClassifier {
    fn default() -> Self {
        Self::new(10, 0)
    }
}

impl Classifier for ToyClassifier {
    fn classes(&self) -> usize {
        self.weights.ncols()
    }

    fn predict(&self, image: &RasterImage) -> Result<ClassProbabilities> {
        let thumb = image.resize(THUMB, THUMB)?;
        let x = Matrix::from_shape_vec(
            (1, THUMB * THUMB * 3),
            thumb.data().iter().map(|v| 2.0 * v - 1.0).collect(),
        )
        .expect("thumbnail size");
        let p = softmax_rows(x.dot(&self.weights).view());
        let mut v: Vec<f64> = p.iter().copied().collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        ClassProbabilities::new(v)
    }
}

/// `100 * cos(a, b)`, or `None` when either vector has zero norm.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(100.0 * dot / (na * nb))
}

/// Mean of `100 * cos(pool(E_img), pool(E_text))` over whole-canvas/global-caption pairs.
pub fn clip_sim(
    pairs: &[(RasterImage, Caption)],
    text: &dyn TextEncoder,
    vision: &dyn VisionEncoder,
    config_hash: &str,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Validation("CLIPSIM needs at least one pair".into()));
    }
    if text.dim() != vision.dim() {
        return Err(Error::Validation(format!(
            "encoder widths differ: text {} vs vision {}",
            text.dim(),
            vision.dim()
        )));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for (i, (image, caption)) in pairs.iter().enumerate() {
        let ei = encode_visual(image, vision)?.pooled();
        let et = encode_text(caption, text)?.pooled();
        match cosine_score(&ei, &et) {
            Some(s) => scores.push(s),
            None => log::warn!("pair {i} has a zero-norm embedding and is excluded"),
        }
    }
    if scores.is_empty() {
        return Err(Error::Validation("every pair had a zero-norm embedding".into()));
    }
    Ok(MetricReport {
        metric: "clipsim".into(),
        value: scores.iter().sum::<f64>() / scores.len() as f64,
        samples: scores.len(),
        splits: None,
        config_hash: config_hash.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Is,
    Clipsim,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "is" => Ok(Metric::Is),
            "clipsim" | "clip" => Ok(Metric::Clipsim),
            m @ ("fid" | "kid") => Err(Error::Validation(format!(
                "{m} is not supported: it compares against ground-truth images, and outpainted \
                 regions have none"
            ))),
            other => Err(Error::Validation(format!(
                "unknown metric {other:?} (expected is or clipsim)"
            ))),
        }
    }
}

/// One line of the evaluation captions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCaption {
    /// PNG file name relative to the images directory.
    pub file: String,
    pub caption: String,
}

pub fn parse_eval_captions(text: &str) -> Result<Vec<EvalCaption>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: EvalCaption = serde_json::from_str(line)
            .map_err(|e| Error::Validation(format!("captions line {}: {e}", i + 1)))?;
        let p = Path::new(&e.file);
        if p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return Err(Error::Validation(format!(
                "captions line {}: file must be a plain relative path",
                i + 1
            )));
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Validation("captions file lists no images".into()));
    }
    Ok(out)
}

/// Scores every listed canvas with the requested metrics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_directory(
    images: &Path,
    captions: &[EvalCaption],
    metrics: &[Metric],
    splits: usize,
    classifier: &dyn Classifier,
    text: &dyn TextEncoder,
    vision: &dyn VisionEncoder,
    config_hash: &str,
) -> Result<Vec<MetricReport>> {
    if metrics.is_empty() {
        return Err(Error::Validation("no metrics requested".into()));
    }
    let mut pairs = Vec::with_capacity(captions.len());
    for e in captions {
        let path: PathBuf = images.join(&e.file);
        let img = RasterImage::load_png(&path)?;
        pairs.push((img, Caption::new(e.caption.clone(), CaptionKind::Global)?));
    }
    let mut out = Vec::new();
    for m in metrics {
        out.push(match m {
            Metric::Is => {
                let probs = pairs
                    .iter()
                    .map(|(img, _)| classifier.predict(img))
                    .collect::<Result<Vec<_>>>()?;
                inception_score(&probs, splits, config_hash)?
            }
            Metric::Clipsim => clip_sim(&pairs, text, vision, config_hash)?,
        });
    }
    Ok(out)
}

/// One cell group of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub variant: String,
    pub dataset: String,
    /// Expansion steps, e.g. 4 for x4.
    pub factor: usize,
    pub is: Option<f64>,
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub const MISSING_CELL: &str = "-";

/// Variants as rows; columns grouped by factor, then dataset, then (IS, CLIP).
pub fn compare_runs(runs: &[RunScores]) -> ComparisonTable {
    let mut variants: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    let mut factors: Vec<usize> = Vec::new();
    let mut cells: BTreeMap<(&str, &str, usize), &RunScores> = BTreeMap::new();
    for r in runs {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !factors.contains(&r.factor) {
            factors.push(r.factor);
        }
        cells.insert((&r.variant, &r.dataset, r.factor), r);
    }
    factors.sort_unstable();
    let mut header = vec!["Method".to_string()];
    for f in &factors {
        for d in &datasets {
            header.push(format!("x{f} {d} IS"));
            header.push(format!("x{f} {d} CLIP"));
        }
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| MISSING_CELL.to_string(), |v| format!("{v:.2}"));
    let rows = variants
        .iter()
        .map(|v| {
            let mut row = vec![v.to_string()];
            for &f in &factors {
                for d in &datasets {
                    let c = cells.get(&(*v, *d, f));
                    row.push(fmt(c.and_then(|c| c.is)));
                    row.push(fmt(c.and_then(|c| c.clip)));
                }
            }
            row
        })
        .collect();
    ComparisonTable { header, rows }
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let width = |i: usize| {
            std::iter::once(&self.header[i])
                .chain(self.rows.iter().map(|r| &r[i]))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        };
        let widths: Vec<usize> = (0..cols).map(width).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}", w = *w))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let esc = |s: &String| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.clone()
            }
        };
        std::iter::once(&self.header)
            .chain(&self.rows)
            .map(|r| r.iter().map(esc).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> ClassProbabilities {
        ClassProbabilities::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_distributions_score_one() {
        let probs = vec![p(&[0.2, 0.3, 0.5]); 6];
        assert_eq!(inception_score(&probs, 1, "").unwrap().value, 1.0);
        assert_eq!(inception_score(&probs, 3, "").unwrap().value, 1.0);
    }

    #[test]
    fn distinct_one_hots_score_class_count() {
        let r = inception_score(&[p(&[1.0, 0.0]), p(&[0.0, 1.0])], 1, "").unwrap();
        assert!((r.value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_splits_is_rejected() {
        assert!(inception_score(&[p(&[1.0])], 2, "").is_err());
        assert!(inception_score(&[p(&[1.0])], 0, "").is_err());
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        assert!(ClassProbabilities::new(vec![0.5, 0.4]).is_err());
        assert!(ClassProbabilities::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn toy_classifier_outputs_distributions() {
        let c = ToyClassifier::default();
        let img = RasterImage::from_fn(12, 20, |y, x| [x as f64 / 20.0, y as f64 / 12.0, 0.3]).unwrap();
        let pr = c.predict(&img).unwrap();
        assert_eq!(pr.classes(), 10);
    }

    #[test]
    fn cosine_extremes() {
        assert!((cosine_score(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn fid_is_refused_with_reason() {
        let e = "fid".parse::<Metric>().unwrap_err().to_string();
        assert!(e.contains("ground-truth"));
    }

    #[test]
    fn table_layout_and_missing_cells() {
        let runs = vec![
            RunScores { variant: "ours".into(), dataset: "coco".into(), factor: 8, is: Some(2.0), clip: Some(30.0) },
            RunScores { variant: "ours".into(), dataset: "coco".into(), factor: 4, is: Some(3.0), clip: None },
            RunScores { variant: "w/o llm".into(), dataset: "coco".into(), factor: 4, is: Some(1.5), clip: Some(20.0) },
        ];
        let t = compare_runs(&runs);
        assert_eq!(t.header, ["Method", "x4 coco IS", "x4 coco CLIP", "x8 coco IS", "x8 coco CLIP"]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0], ["ours", "3.00", MISSING_CELL, "2.00", "30.00"]);
        assert_eq!(t.rows[1][3], MISSING_CELL);
        assert!(t.to_csv().starts_with("Method,x4 coco IS"));
        assert_eq!(t.to_text().lines().count(), 3);
    }

    #[test]
    fn eval_captions_reject_traversal() {
        assert!(parse_eval_captions(r#"{"file":"../a.png","caption":"x"}"#).is_err());
        assert_eq!(parse_eval_captions(r#"{"file":"a.png","caption":"x"}"#).unwrap().len(), 1);
    }
}
