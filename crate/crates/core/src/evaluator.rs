//! Image- and pixel-level ROC AUC over a test set.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{IntraError, Result};
use crate::metrics::roc_auc;
use crate::scoring::{anomaly_map, parallel_map, AnomalyMap, ReferenceDiff};
use crate::training::Inpainter;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub defect: String,
    pub anomalous: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub category: String,
    /// `None` when the test set holds a single class.
    pub image_auc: Option<f64>,
    /// Over all pixels of all test images pooled.
    pub pixel_auc: Option<f64>,
    /// Mean of per-image pixel AUCs over images whose mask has both classes.
    pub mean_image_pixel_auc: Option<f64>,
    pub scores: Vec<ImageScore>,
    pub runtime_seconds: f64,
    /// Effective run configuration, `key = value` lines.
    pub config_text: String,
}

fn auc_if_defined(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Ok(None);
    }
    roc_auc(scores, labels).map(Some)
}

/// Metrics from precomputed maps at the working resolution, one per test
/// image in dataset order.
pub fn score_maps(dataset: &Dataset, maps: &[AnomalyMap]) -> Result<EvaluationReport> {
    if maps.len() != dataset.test.len() {
        return Err(IntraError::invalid(format!("{} maps for {} test images", maps.len(), dataset.test.len())));
    }
    if maps.is_empty() {
        return Err(IntraError::Dataset(format!("category {} has no test images", dataset.category)));
    }
    let image_scores: Vec<f64> = maps.iter().map(|m| m.score).collect();
    let image_auc = auc_if_defined(&image_scores, &dataset.image_labels())?;

    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    let mut per_image = Vec::new();
    for (sample, map) in dataset.test.iter().zip(maps) {
        let (h, w) = sample.original_size;
        let resized = map.resized(h, w);
        let truth = sample.ground_truth();
        let scores: Vec<f64> = resized.data().iter().map(|&v| v as f64).collect();
        let labels: Vec<bool> = truth.data().iter().map(|&v| v > 0.5).collect();
        if let Some(a) = auc_if_defined(&scores, &labels)? {
            per_image.push(a);
        }
        pixel_scores.extend(scores);
        pixel_labels.extend(labels);
    }
    let pixel_auc = auc_if_defined(&pixel_scores, &pixel_labels)?;
    let mean_image_pixel_auc = (!per_image.is_empty()).then(|| per_image.iter().sum::<f64>() / per_image.len() as f64);

    Ok(EvaluationReport {
        category: dataset.category.clone(),
        image_auc,
        pixel_auc,
        mean_image_pixel_auc,
        scores: dataset
            .test
            .iter()
            .zip(image_scores)
            .map(|(s, score)| ImageScore {
                name: s.name.clone(),
                defect: s.defect.clone(),
                anomalous: s.anomalous,
                score,
            })
            .collect(),
        runtime_seconds: 0.0,
        config_text: String::new(),
    })
}

/// Anomaly maps for every test image, in dataset order.
pub fn test_maps<M: Inpainter + Sync + ?Sized>(
    model: &M,
    reference: &ReferenceDiff,
    dataset: &Dataset,
    batch_size: usize,
    workers: usize,
) -> Result<Vec<AnomalyMap>> {
    parallel_map(&dataset.test, workers, |s| anomaly_map(model, &s.image, Some(reference), batch_size))
}

pub fn evaluate_category<M: Inpainter + Sync + ?Sized>(
    model: &M,
    reference: &ReferenceDiff,
    dataset: &Dataset,
    batch_size: usize,
    workers: usize,
) -> Result<EvaluationReport> {
    let start = Instant::now();
    let maps = test_maps(model, reference, dataset, batch_size, workers)?;
    let mut report = score_maps(dataset, &maps)?;
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("undefined".to_string(), |v| v.to_string())
}

fn parse_opt(v: &str) -> Result<Option<f64>> {
    if v == "undefined" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| IntraError::invalid(format!("bad metric value `{v}`")))
}

impl EvaluationReport {
    pub const CSV_HEADER: &'static str = "name,defect,anomalous,score";

    /// One `key = value` line per metric, then one `score` line per image and
    /// the configuration as `config.<key>` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        line("category", self.category.clone());
        line("image_auc", opt(self.image_auc));
        line("pixel_auc", opt(self.pixel_auc));
        line("mean_image_pixel_auc", opt(self.mean_image_pixel_auc));
        line("num_images", self.scores.len().to_string());
        line("runtime_seconds", self.runtime_seconds.to_string());
        for s in &self.scores {
            line("score", format!("{} {} {} {}", s.defect, s.name, s.anomalous, s.score));
        }
        for l in self.config_text.lines() {
            line(&format!("config.{}", l.split_once('=').map_or(l, |(k, _)| k).trim()), l.split_once('=').map_or("", |(_, v)| v).trim().to_string());
        }
        out
    }

    pub fn parse(text: &str) -> Result<EvaluationReport> {
        let mut r = EvaluationReport {
            category: String::new(),
            image_auc: None,
            pixel_auc: None,
            mean_image_pixel_auc: None,
            scores: Vec::new(),
            runtime_seconds: 0.0,
            config_text: String::new(),
        };
        let mut expected = None;
        for raw in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = raw
                .split_once(" = ")
                .ok_or_else(|| IntraError::invalid(format!("bad report line `{raw}`")))?;
            match k {
                "category" => r.category = v.to_string(),
                "image_auc" => r.image_auc = parse_opt(v)?,
                "pixel_auc" => r.pixel_auc = parse_opt(v)?,
                "mean_image_pixel_auc" => r.mean_image_pixel_auc = parse_opt(v)?,
                "num_images" => expected = Some(v.parse::<usize>().map_err(|_| IntraError::invalid("bad num_images"))?),
                "runtime_seconds" => r.runtime_seconds = v.parse().map_err(|_| IntraError::invalid("bad runtime"))?,
                "score" => {
                    let parts: Vec<&str> = v.split(' ').collect();
                    let [defect, name, anomalous, score] = parts[..] else {
                        return Err(IntraError::invalid(format!("bad score line `{raw}`")));
                    };
                    r.scores.push(ImageScore {
                        name: name.to_string(),
                        defect: defect.to_string(),
                        anomalous: anomalous.parse().map_err(|_| IntraError::invalid("bad label"))?,
                        score: score.parse().map_err(|_| IntraError::invalid("bad score"))?,
                    });
                }
                _ => match k.strip_prefix("config.") {
                    Some(key) => writeln!(r.config_text, "{key} = {v}").expect("string write"),
                    None => return Err(IntraError::invalid(format!("unknown report key `{k}`"))),
                },
            }
        }
        if expected != Some(r.scores.len()) {
            return Err(IntraError::invalid("report score count does not match num_images"));
        }
        Ok(r)
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for s in &self.scores {
            writeln!(out, "{},{},{},{}", s.name, s.defect, s.anomalous as u8, s.score).expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| IntraError::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv()).map_err(|e| IntraError::io(path, e))
    }
}
