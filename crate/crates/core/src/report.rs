//! Metric grids, training curves and sample images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{compose, AugmentationKind, AugmentationSet, AugmentationSpec, SetName};
use crate::calibration::{eval_accuracy, Classifier};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelSnapshot;
use crate::rng::RandomStream;
use crate::trainer::{finetune, RunManifest, TrainConfig};

/// Row of a metric grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Clean,
    Set(SetName),
}

impl Condition {
    /// Clean, the seven single corruptions in table order, Combined+, Combined−.
    pub fn all() -> Vec<Condition> {
        let mut rows = vec![Condition::Clean];
        rows.extend(
            AugmentationKind::ALL
                .iter()
                .map(|&k| Condition::Set(SetName::Single(k))),
        );
        rows.push(Condition::Set(SetName::CombinedPlus));
        rows.push(Condition::Set(SetName::CombinedMinus));
        rows
    }

    pub fn label(self) -> String {
        match self {
            Condition::Clean => "Clean".to_string(),
            Condition::Set(name) => name.to_string(),
        }
    }
}

/// Accuracy under one condition. Image `i` uses `RandomStream::new(seed).derive(i)`,
/// the same convention as [`eval_accuracy`].
pub fn condition_accuracy<C: Classifier + ?Sized>(
    model: &C,
    val: &LabeledDataset,
    condition: Condition,
    specs: &[AugmentationSpec],
    seed: u64,
) -> Result<f64> {
    match condition {
        Condition::Clean => eval_accuracy(model, val, None, seed),
        Condition::Set(SetName::Single(kind)) => {
            let spec = specs
                .iter()
                .find(|s| s.kind() == kind)
                .ok_or_else(|| Error::contract(format!("no {kind} spec to evaluate")))?;
            eval_accuracy(model, val, Some(spec), seed)
        }
        Condition::Set(name) => {
            if val.is_empty() {
                return Err(Error::contract(
                    "cannot evaluate accuracy on an empty dataset",
                ));
            }
            let set = AugmentationSet::select(name, specs)?;
            let root = RandomStream::new(seed);
            let mut correct = 0;
            for (c, chunk) in val.images().chunks(256).enumerate() {
                let base = c * 256;
                let aug = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, img)| compose(img, &set, &root.derive((base + j) as u64)))
                    .collect::<Result<Vec<Image>>>()?;
                let preds = model.classify(&aug.iter().collect::<Vec<_>>())?;
                correct += preds
                    .iter()
                    .zip(&val.labels()[base..])
                    .filter(|(p, l)| p == l)
                    .count();
            }
            Ok(correct as f64 / val.len() as f64)
        }
    }
}

/// Ten-condition accuracy column for one model.
pub fn evaluate_column<C: Classifier + ?Sized>(
    model: &C,
    val: &LabeledDataset,
    specs: &[AugmentationSpec],
    seed: u64,
) -> Result<Vec<f64>> {
    Condition::all()
        .into_iter()
        .map(|c| condition_accuracy(model, val, c, specs, seed))
        .collect()
}

/// Accuracy matrix: rows are conditions, the first column is the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricGrid {
    columns: Vec<String>,
    rows: Vec<String>,
    /// `cells[row][column]`, fractions in `[0, 1]`.
    cells: Vec<Vec<f64>>,
}

/// Serialized grid with percentages rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub columns: Vec<String>,
    pub rows: Vec<GridRow>,
    /// `None` for the baseline column.
    pub average_improvement: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub condition: String,
    pub values: Vec<f64>,
}

pub const AVERAGE_LABEL: &str = "Average improvement";

fn percent(v: f64) -> f64 {
    (v * 10_000.0).round() / 100.0
}

impl MetricGrid {
    /// `columns[0]` must be the baseline. Every column needs one value per
    /// condition in [`Condition::all`] order.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let rows: Vec<String> = Condition::all().into_iter().map(Condition::label).collect();
        if columns.is_empty() {
            return Err(Error::contract(
                "a metric grid needs at least the baseline column",
            ));
        }
        if let Some((name, v)) = columns.iter().find(|(_, v)| v.len() != rows.len()) {
            return Err(Error::contract(format!(
                "column {name} has {} values, expected {}",
                v.len(),
                rows.len()
            )));
        }
        let cells = (0..rows.len())
            .map(|r| columns.iter().map(|(_, v)| v[r]).collect())
            .collect();
        Ok(MetricGrid {
            columns: columns.into_iter().map(|(n, _)| n).collect(),
            rows,
            cells,
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn get(&self, row: usize, column: usize) -> f64 {
        self.cells[row][column]
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.cells.iter().map(|r| r[c]).collect())
    }

    /// Mean over all ten rows (Clean included) of `column − baseline`.
    pub fn average_improvement(&self, column: usize) -> f64 {
        let sum: f64 = self.cells.iter().map(|r| r[column] - r[0]).sum();
        sum / self.cells.len() as f64
    }

    /// Mean of `column − baseline` over the chosen rows.
    pub fn mean_improvement_over(&self, column: usize, rows: &[usize]) -> f64 {
        rows.iter()
            .map(|&r| self.cells[r][column] - self.cells[r][0])
            .sum::<f64>()
            / rows.len() as f64
    }

    pub fn to_table(&self) -> GridTable {
        GridTable {
            columns: self.columns.clone(),
            rows: self
                .rows
                .iter()
                .zip(&self.cells)
                .map(|(name, vals)| GridRow {
                    condition: name.clone(),
                    values: vals.iter().map(|&v| percent(v)).collect(),
                })
                .collect(),
            average_improvement: (0..self.columns.len())
                .map(|c| (c > 0).then(|| percent(self.average_improvement(c))))
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_table())? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let table = self.to_table();
        let mut out = String::from("condition");
        for c in &table.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in &table.rows {
            out.push_str(&row.condition);
            for v in &row.values {
                let _ = write!(out, ",{v:.2}");
            }
            out.push('\n');
        }
        out.push_str(AVERAGE_LABEL);
        for v in &table.average_improvement {
            match v {
                Some(v) => {
                    let _ = write!(out, ",{v:.2}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
        out
    }
}

impl GridTable {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("condition") {
            return Err(Error::Format {
                offset: 0,
                detail: "grid CSV must start with a 'condition' column".into(),
            });
        }
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut average = None;
        for rec in reader.records() {
            let rec = rec?;
            let offset = rec.position().map_or(0, |p| p.byte() as usize);
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format {
                    offset,
                    detail: format!("'{s}' is not a number"),
                })
            };
            let name = rec.get(0).unwrap_or_default().to_string();
            if name == AVERAGE_LABEL {
                average = Some(
                    rec.iter()
                        .skip(1)
                        .map(|s| {
                            if s.is_empty() {
                                Ok(None)
                            } else {
                                parse(s).map(Some)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            } else {
                rows.push(GridRow {
                    condition: name,
                    values: rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?,
                });
            }
        }
        let average_improvement = average.ok_or_else(|| Error::Format {
            offset: text.len(),
            detail: format!("missing '{AVERAGE_LABEL}' row"),
        })?;
        Ok(GridTable {
            columns,
            rows,
            average_improvement,
        })
    }
}

/// Curve series: clean first, then the seven corruptions in table order.
pub fn curve_series() -> Vec<String> {
    std::iter::once("Clean".to_string())
        .chain(AugmentationKind::ALL.iter().map(|k| k.short().to_string()))
        .collect()
}

/// Per-epoch accuracy in percent for each series, read from a finetune
/// manifest.
pub fn curves(manifest: &RunManifest) -> Result<Vec<(usize, Vec<f64>)>> {
    manifest
        .epochs
        .iter()
        .map(|r| {
            let mut vals = vec![percent(r.clean_accuracy)];
            for k in AugmentationKind::ALL {
                let v = r.augmented_accuracy.get(k.short()).ok_or_else(|| {
                    Error::Manifest(format!("epoch {} has no {} accuracy", r.epoch, k.short()))
                })?;
                vals.push(percent(*v));
            }
            Ok((r.epoch, vals))
        })
        .collect()
}

pub fn curves_csv(manifest: &RunManifest) -> Result<String> {
    let mut out = String::from("epoch");
    for s in curve_series() {
        out.push(',');
        out.push_str(&s);
    }
    out.push('\n');
    for (epoch, vals) in curves(manifest)? {
        let _ = write!(out, "{}", epoch + 1);
        for v in vals {
            let _ = write!(out, ",{v:.2}");
        }
        out.push('\n');
    }
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#000000", "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Line chart of [`curves`], accuracy in percent against epoch.
pub fn curves_svg(manifest: &RunManifest, title: &str) -> Result<String> {
    let data = curves(manifest)?;
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 110.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let last = data.last().map_or(1, |(e, _)| e + 1).max(2);
    let x = |epoch: usize| left + pw * (epoch as f64 - 1.0) / (last as f64 - 1.0);
    let y = |pct: f64| top + ph * (1.0 - pct / 100.0);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="#dddddd"/>"##,
            left + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{tick}</text>"#,
            left - 6.0,
            ty + 4.0
        );
    }
    let step = (last / 10).max(1);
    for e in (1..=last).filter(|e| e % step == 0 || *e == 1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#,
            x(e),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, name) in curve_series().iter().enumerate() {
        let points: Vec<String> = data
            .iter()
            .map(|(e, v)| format!("{:.2},{:.2}", x(e + 1), y(v[i])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i],
            points.join(" ")
        );
        let ly = top + 14.0 * i as f64 + 8.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"/>"#,
            lx + 18.0,
            PALETTE[i]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One finetuned model of a grid.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub label: String,
    pub snapshot: ModelSnapshot,
    pub manifest: RunManifest,
}

/// Evaluates the baseline, finetunes one model per `(label, config)` and
/// assembles the grid. Each run's manifest gets its grid column.
pub fn run_grid(
    baseline: &ModelSnapshot,
    train: &LabeledDataset,
    val: &LabeledDataset,
    specs: &[AugmentationSpec],
    runs: &[(String, TrainConfig)],
    eval_seed: u64,
) -> Result<(MetricGrid, Vec<GridRun>)> {
    let mut columns = vec![(
        "Baseline".to_string(),
        evaluate_column(baseline, val, specs, eval_seed)?,
    )];
    let mut out = Vec::with_capacity(runs.len());
    for (label, cfg) in runs {
        let (snapshot, mut manifest) = finetune(baseline, train, val, cfg)?;
        let col = evaluate_column(&snapshot, val, specs, eval_seed)?;
        manifest.final_grid = Condition::all()
            .into_iter()
            .map(Condition::label)
            .zip(col.iter().copied())
            .collect();
        columns.push((label.clone(), col));
        out.push(GridRun {
            label: label.clone(),
            snapshot,
            manifest,
        });
    }
    Ok((MetricGrid::from_columns(columns)?, out))
}

fn upscale(img: &Image, factor: usize) -> Image {
    let f = factor.max(1);
    let (h, w) = (img.height() * f, img.width() * f);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&img.pixel(y / f, x / f));
        }
    }
    Image::from_clipped(h, w, data)
}

/// Writes the clean image, each single corruption and both combined sets as
/// PNGs (nearest-neighbour upscaled by `scale`). Returns the paths written.
pub fn write_samples(
    img: &Image,
    specs: &[AugmentationSpec],
    seed: u64,
    scale: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rng = RandomStream::new(seed);
    let mut written = Vec::new();
    let mut save = |name: &str, im: &Image| -> Result<()> {
        let path = dir.join(format!("{name}.png"));
        upscale(im, scale).write_png(&path)?;
        written.push(path);
        Ok(())
    };
    save("clean", img)?;
    for spec in specs {
        save(spec.kind().key(), &spec.apply(img, &mut rng.derive(0)))?;
    }
    for (name, file) in [
        (SetName::CombinedPlus, "combined_plus"),
        (SetName::CombinedMinus, "combined_minus"),
    ] {
        if let Ok(set) = AugmentationSet::select(name, specs) {
            save(file, &compose(img, &set, &rng)?)?;
        }
    }
    Ok(written)
}
