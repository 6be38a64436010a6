//! Dice evaluation of a trained segmenter on held-out target images and
//! side-by-side comparison of adaptation methods.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::PairedSample;
use crate::error::{invalid, Result};
use crate::losses::dice_from_labels;
use crate::models::Segmenter;

/// How the segmenter's training data was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaMethod {
    SpCyclegan,
    DefaultCyclegan,
    NoDa,
}

impl DaMethod {
    pub const ALL: [DaMethod; 3] = [Self::SpCyclegan, Self::DefaultCyclegan, Self::NoDa];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SpCyclegan => "sp_cyclegan",
            Self::DefaultCyclegan => "default_cyclegan",
            Self::NoDa => "no_da",
        }
    }
}

impl std::fmt::Display for DaMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The ± reported next to every mean.
pub const UNCERTAINTY: &str = "standard error of the per-image mean (sample sd / sqrt(n))";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl ClassStat {
    /// Mean and standard error; a single observation has zero spread.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        let n = scores.len();
        if n == 0 {
            return Err(invalid("no scores to summarize"));
        }
        let mean = scores.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let ss: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        };
        Ok(Self { mean, se, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    /// Dice per reported class, in the order of `MetricsRecord::per_class_dsc`.
    pub dsc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub direction: String,
    pub da_method: DaMethod,
    /// Class id → statistics over test images.
    pub per_class_dsc: BTreeMap<u32, ClassStat>,
    pub overall_mean_dsc: f64,
    /// Standard error of the per-image class-averaged Dice.
    pub overall_se: f64,
    pub uncertainty: String,
    #[serde(skip)]
    pub per_image: Vec<ImageScore>,
}

/// Classes that enter the report: the foreground class for a binary
/// segmenter, every class (background included) otherwise.
pub fn reported_classes(num_classes: usize) -> Vec<u32> {
    if num_classes == 1 {
        vec![1]
    } else {
        (0..num_classes as u32).collect()
    }
}

/// Hard-predicts every test image and aggregates per-image Dice scores.
pub fn evaluate(
    segmenter: &Segmenter,
    test_set: &[PairedSample],
    da_method: DaMethod,
    direction: &str,
) -> Result<MetricsRecord> {
    if test_set.is_empty() {
        return Err(invalid("test set is empty"));
    }
    let label_classes = segmenter.num_classes().max(2);
    let classes = reported_classes(segmenter.num_classes());
    let device = Device::Cpu;
    let mut per_image = Vec::with_capacity(test_set.len());
    for sample in test_set {
        let label = sample
            .label
            .as_ref()
            .ok_or_else(|| invalid(format!("test sample {} is unlabelled", sample.name)))?;
        if let Some(&v) = label.data.iter().find(|&&v| v as usize >= label_classes) {
            return Err(invalid(format!(
                "test sample {} has class {v} but the segmenter predicts {label_classes} classes",
                sample.name
            )));
        }
        let x: Tensor = sample.image.to_tensor(&device)?.unsqueeze(0)?;
        let pred = segmenter.forward(&x)?.hard_labels()?.to_vec()?;
        let truth: Vec<u32> = label.data.iter().map(|&v| v as u32).collect();
        per_image.push(ImageScore {
            name: sample.name.clone(),
            dsc: classes
                .iter()
                .map(|&c| dice_from_labels(&pred, &truth, c))
                .collect(),
        });
    }
    summarize(per_image, &classes, da_method, direction)
}

/// Aggregates per-image scores into a record.
pub fn summarize(
    per_image: Vec<ImageScore>,
    classes: &[u32],
    da_method: DaMethod,
    direction: &str,
) -> Result<MetricsRecord> {
    if let Some(bad) = per_image.iter().find(|s| s.dsc.len() != classes.len()) {
        return Err(invalid(format!(
            "image {} has {} scores for {} classes",
            bad.name,
            bad.dsc.len(),
            classes.len()
        )));
    }
    let mut per_class_dsc = BTreeMap::new();
    for (k, &c) in classes.iter().enumerate() {
        let scores: Vec<f64> = per_image.iter().map(|s| s.dsc[k]).collect();
        per_class_dsc.insert(c, ClassStat::from_scores(&scores)?);
    }
    let averaged: Vec<f64> = per_image
        .iter()
        .map(|s| s.dsc.iter().sum::<f64>() / s.dsc.len() as f64)
        .collect();
    let overall = ClassStat::from_scores(&averaged)?;
    let overall_mean_dsc =
        per_class_dsc.values().map(|s| s.mean).sum::<f64>() / per_class_dsc.len() as f64;
    Ok(MetricsRecord {
        direction: direction.to_string(),
        da_method,
        per_class_dsc,
        overall_mean_dsc,
        overall_se: overall.se,
        uncertainty: UNCERTAINTY.to_string(),
        per_image,
    })
}

/// Per-image Dice as CSV: `image,class_<id>,...`.
pub fn per_image_csv(record: &MetricsRecord) -> String {
    let mut out = String::from("image");
    for c in record.per_class_dsc.keys() {
        let _ = write!(out, ",class_{c}");
    }
    out.push('\n');
    for s in &record.per_image {
        out.push_str(&s.name);
        for d in &s.dsc {
            let _ = write!(out, ",{d}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub da_method: DaMethod,
    pub overall: ClassStat,
    pub per_class: BTreeMap<u32, ClassStat>,
    pub best_overall: bool,
    /// Classes for which this row has the highest mean.
    pub best_classes: Vec<u32>,
    /// Interval `mean ± se` overlaps the top row's.
    pub statistically_even: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub direction: String,
    pub uncertainty: String,
    /// Sorted by overall mean Dice, best first.
    pub rows: Vec<ComparisonRow>,
}

fn overlaps(a: &ClassStat, b: &ClassStat) -> bool {
    (a.mean - b.mean).abs() <= a.se + b.se
}

pub fn compare_methods(records: &[MetricsRecord]) -> Result<Comparison> {
    let first = records
        .first()
        .ok_or_else(|| invalid("nothing to compare"))?;
    for r in records {
        if r.direction != first.direction {
            return Err(invalid(format!(
                "cannot compare directions {} and {}",
                first.direction, r.direction
            )));
        }
        if r.per_class_dsc.keys().ne(first.per_class_dsc.keys()) {
            return Err(invalid("records report different class sets"));
        }
    }
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    // Stable: equal means keep their input order.
    sorted.sort_by(|a, b| b.overall_mean_dsc.total_cmp(&a.overall_mean_dsc));

    let best_of = |get: &dyn Fn(&MetricsRecord) -> f64| {
        sorted.iter().map(|r| get(r)).fold(f64::NEG_INFINITY, f64::max)
    };
    let best_overall = best_of(&|r| r.overall_mean_dsc);
    let best_class: BTreeMap<u32, f64> = first
        .per_class_dsc
        .keys()
        .map(|&c| (c, best_of(&|r| r.per_class_dsc[&c].mean)))
        .collect();
    let stat = |r: &MetricsRecord| ClassStat {
        mean: r.overall_mean_dsc,
        se: r.overall_se,
        n: r.per_image.len().max(r.per_class_dsc.values().next().map_or(0, |s| s.n)),
    };
    let top = stat(sorted[0]);
    let rows = sorted
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            da_method: r.da_method,
            overall: stat(r),
            per_class: r.per_class_dsc.clone(),
            best_overall: r.overall_mean_dsc == best_overall,
            best_classes: best_class
                .iter()
                .filter(|(c, &m)| r.per_class_dsc[c].mean == m)
                .map(|(&c, _)| c)
                .collect(),
            statistically_even: i > 0 && overlaps(&top, &stat(r)),
        })
        .collect();
    Ok(Comparison {
        direction: first.direction.clone(),
        uncertainty: UNCERTAINTY.to_string(),
        rows,
    })
}

fn cell(s: &ClassStat, best: bool) -> String {
    format!("{:.4} ± {:.4}{}", s.mean, s.se, if best { " *" } else { "" })
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let classes: Vec<u32> = self
            .rows
            .first()
            .map(|r| r.per_class.keys().copied().collect())
            .unwrap_or_default();
        let mut header = vec!["Method".to_string(), "Mean Overall DSC".to_string()];
        header.extend(classes.iter().map(|c| format!("Class {c} DSC")));
        header.push("Note".to_string());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.da_method.to_string(), cell(&r.overall, r.best_overall)];
                line.extend(
                    classes
                        .iter()
                        .map(|c| cell(&r.per_class[c], r.best_classes.contains(c))),
                );
                line.push(if r.statistically_even {
                    "statistically even".to_string()
                } else {
                    String::new()
                });
                line
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|k| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|line| line[k].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let render = |line: &[String]| {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = format!("Direction: {}\n", self.direction);
        out.push_str(&render(&header));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for line in &body {
            out.push_str(&render(line));
            out.push('\n');
        }
        let _ = writeln!(out, "± is the {UNCERTAINTY}; * marks the best value per column.");
        out
    }

    /// Writes `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join(format!("{stem}.json")), json)?;
        fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}
