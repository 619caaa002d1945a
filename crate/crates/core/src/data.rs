//! Labeled image datasets: CIFAR-10 binary batches, class-balanced
//! subsets, and a procedurally generated stand-in for offline runs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{hsl_to_rgb, AugmentationSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDigest {
    pub file: String,
    pub sha256: String,
}

/// Where a dataset came from, recorded into run manifests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: String,
    pub sources: Vec<SourceDigest>,
    pub subset_seed: Option<u64>,
    pub subset_per_class: Option<usize>,
    /// SHA-256 of the selected source indices, when subsetted.
    pub subset_digest: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
            split,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Keeps the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// Applies a corruption to every image with a per-image child stream of
    /// `rng`; labels are kept.
    pub fn augmented(&self, spec: &AugmentationSpec, rng: &RandomStream) -> LabeledDataset {
        let images = self
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| spec.apply(img, &mut rng.derive(i as u64)))
            .collect();
        LabeledDataset {
            images,
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Decodes concatenated 3073-byte records: one label byte, then the red,
/// green and blue 32×32 planes in row-major order.
pub fn decode_cifar10_records(bytes: &[u8]) -> Result<(Vec<Image>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            detail: format!(
                "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                offset: r * CIFAR_RECORD,
                detail: format!("label byte {label} out of range"),
            });
        }
        let chw: Vec<f64> = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
        images.push(Image::from_chw(CIFAR_SIDE, CIFAR_SIDE, &chw)?);
        labels.push(label);
    }
    Ok((images, labels))
}

fn read_batch_file(dir: &Path, name: &str) -> Result<(Vec<u8>, SourceDigest)> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = (CIFAR_RECORD * CIFAR_BATCH_RECORDS) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::FileSize {
            path,
            expected,
            found: bytes.len() as u64,
        });
    }
    let digest = SourceDigest {
        file: name.to_string(),
        sha256: hex_digest(&bytes),
    };
    Ok((bytes, digest))
}

/// Loads the five training batches and the test batch from the standard
/// `cifar-10-batches-bin` directory. Returns `(train, val)`.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train_images = Vec::with_capacity(50_000);
    let mut train_labels = Vec::with_capacity(50_000);
    let mut train_sources = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let (bytes, digest) = read_batch_file(dir, name)?;
        let (imgs, labels) = decode_cifar10_records(&bytes)?;
        train_images.extend(imgs);
        train_labels.extend(labels);
        train_sources.push(digest);
    }
    let (bytes, digest) = read_batch_file(dir, CIFAR_TEST_FILE)?;
    let (val_images, val_labels) = decode_cifar10_records(&bytes)?;

    let mut train = LabeledDataset::new(train_images, train_labels, 10, Split::Train)?;
    train.provenance = Provenance {
        origin: format!("cifar10:{}", dir.display()),
        sources: train_sources,
        ..Provenance::default()
    };
    let mut val = LabeledDataset::new(val_images, val_labels, 10, Split::Val)?;
    val.provenance = Provenance {
        origin: format!("cifar10:{}", dir.display()),
        sources: vec![digest],
        ..Provenance::default()
    };
    Ok((train, val))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Subsetting
// ---------------------------------------------------------------------------

/// Class-balanced sample of exactly `per_class` images per class, returned
/// in ascending source order.
pub fn subset(ds: &LabeledDataset, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let indices = subset_indices(ds, per_class, seed)?;
    let mut out = ds.select(&indices);
    let idx_bytes: Vec<u8> = indices
        .iter()
        .flat_map(|&i| (i as u64).to_le_bytes())
        .collect();
    out.provenance.subset_seed = Some(seed);
    out.provenance.subset_per_class = Some(per_class);
    out.provenance.subset_digest = Some(hex_digest(&idx_bytes));
    Ok(out)
}

pub fn subset_indices(ds: &LabeledDataset, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let root = RandomStream::new(seed);
    let mut chosen = Vec::with_capacity(per_class * ds.classes);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::contract(format!(
                "class {c} has {} members, {per_class} requested",
                members.len()
            )));
        }
        root.derive(c as u64).shuffle(members);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Procedural 32×32 images whose class fixes a base hue and the orientation
/// of a sinusoidal lightness grating. Per-image jitter in hue, frequency,
/// phase and pixel noise keeps the task non-trivial. Classes are interleaved
/// (`label = i % classes`).
pub fn synth_dataset(n_per_class: usize, classes: usize, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::contract(
            "synthetic dataset needs at least two classes",
        ));
    }
    let root = RandomStream::new(seed);
    let n = n_per_class * classes;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let mut rng = root.derive(i as u64);
        let hue =
            (360.0 * c as f64 / classes as f64 + rng.uniform_range(-8.0, 8.0)).rem_euclid(360.0);
        let theta = std::f64::consts::PI * c as f64 / classes as f64 + rng.uniform_range(-0.1, 0.1);
        let freq = rng.uniform_range(1.5, 2.5);
        let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        let sat = rng.uniform_range(0.5, 0.8);
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(CIFAR_SIDE * CIFAR_SIDE * 3);
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                let u = (x as f64 * ct + y as f64 * st) / CIFAR_SIDE as f64;
                let wave = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).sin();
                let l = 0.3 + 0.4 * wave;
                let (r, g, b) = hsl_to_rgb(hue, sat, l);
                for v in [r, g, b] {
                    data.push(v + 0.02 * rng.normal());
                }
            }
        }
        images.push(Image::from_clipped(CIFAR_SIDE, CIFAR_SIDE, data));
        labels.push(c);
    }
    let mut ds = LabeledDataset::new(images, labels, classes, Split::Train)?;
    ds.provenance.origin =
        format!("synthetic:seed={seed},per_class={n_per_class},classes={classes}");
    Ok(ds)
}
