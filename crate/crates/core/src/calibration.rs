//! Strength calibration: find the corruption strength that costs a given
//! amount of validation accuracy.

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationKind, AugmentationSpec, PresetManifest};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelSnapshot;
use crate::rng::RandomStream;

pub const DEFAULT_TARGET_DROP: f64 = 0.10;
pub const DEFAULT_TOLERANCE: f64 = 0.005;
pub const DEFAULT_MAX_ITER: usize = 30;
const EVAL_CHUNK: usize = 256;

/// Anything that maps images to class indices.
pub trait Classifier {
    fn classify(&self, images: &[&Image]) -> Result<Vec<usize>>;
}

impl Classifier for ModelSnapshot {
    fn classify(&self, images: &[&Image]) -> Result<Vec<usize>> {
        self.predict(images, 64)
    }
}

impl<T: Classifier + ?Sized> Classifier for &T {
    fn classify(&self, images: &[&Image]) -> Result<Vec<usize>> {
        (**self).classify(images)
    }
}

/// Top-1 accuracy on `dataset`, optionally after corrupting every image.
/// Image `i` draws its noise from `RandomStream::new(seed).derive(i)`.
pub fn eval_accuracy<C: Classifier + ?Sized>(
    model: &C,
    dataset: &LabeledDataset,
    spec: Option<&AugmentationSpec>,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract(
            "cannot evaluate accuracy on an empty dataset",
        ));
    }
    let root = RandomStream::new(seed);
    let mut correct = 0usize;
    for (c, chunk) in dataset.images().chunks(EVAL_CHUNK).enumerate() {
        let base = c * EVAL_CHUNK;
        let preds = match spec {
            None => model.classify(&chunk.iter().collect::<Vec<_>>())?,
            Some(spec) => {
                let aug: Vec<Image> = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, img)| spec.apply(img, &mut root.derive((base + j) as u64)))
                    .collect();
                model.classify(&aug.iter().collect::<Vec<_>>())?
            }
        };
        if preds.len() != chunk.len() {
            return Err(Error::contract(format!(
                "classifier returned {} predictions for {} images",
                preds.len(),
                chunk.len()
            )));
        }
        correct += preds
            .iter()
            .zip(&dataset.labels()[base..base + chunk.len()])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTask {
    /// Starting spec; only its knob is searched, companions stay fixed.
    pub base: AugmentationSpec,
    pub target_drop: f64,
    pub tolerance: f64,
    pub lo: f64,
    pub hi: f64,
    pub max_iter: usize,
    pub eval_seed: u64,
}

impl CalibrationTask {
    /// Defaults for `kind`, with companions taken from the CIFAR-10 presets.
    pub fn new(kind: AugmentationKind) -> Self {
        let base = PresetManifest::builtin()
            .get("cifar10", kind)
            .unwrap_or_else(|_| AugmentationSpec::identity(kind));
        let (lo, hi) = default_bounds(kind);
        CalibrationTask {
            base,
            target_drop: DEFAULT_TARGET_DROP,
            tolerance: DEFAULT_TOLERANCE,
            lo,
            hi,
            max_iter: DEFAULT_MAX_ITER,
            eval_seed: 0,
        }
    }

    pub fn kind(&self) -> AugmentationKind {
        self.base.kind()
    }

    /// Knob value at which the corruption is a no-op.
    pub fn identity_knob(&self) -> f64 {
        if decreasing_knob(self.kind()) {
            self.hi
        } else {
            self.lo
        }
    }

    /// Strongest knob value inside the bounds.
    pub fn extreme_knob(&self) -> f64 {
        if decreasing_knob(self.kind()) {
            self.lo
        } else {
            self.hi
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::param(
                "bounds",
                format!("need lo < hi, got [{}, {}]", self.lo, self.hi),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_drop) {
            return Err(Error::param(
                "target_drop",
                format!("{} outside [0, 1]", self.target_drop),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::param(
                "tolerance",
                format!("{} must be positive", self.tolerance),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::param("max_iter", "must be at least 1"));
        }
        self.base.with_knob(self.lo)?;
        self.base.with_knob(self.hi)?;
        Ok(())
    }
}

// B− and S− get stronger as the knob goes down.
fn decreasing_knob(kind: AugmentationKind) -> bool {
    matches!(
        kind,
        AugmentationKind::BrightnessMinus | AugmentationKind::SaturationMinus
    )
}

fn default_bounds(kind: AugmentationKind) -> (f64, f64) {
    match kind {
        AugmentationKind::BrightnessPlus => (0.0, 1.0),
        AugmentationKind::BrightnessMinus => (-1.0, 0.0),
        AugmentationKind::SaturationPlus => (1.0, 20.0),
        AugmentationKind::SaturationMinus => (0.0, 1.0),
        AugmentationKind::GaussianNoise => (0.0, 1.0),
        // σ = 0.01 with a 3-tap kernel is an exact identity
        AugmentationKind::GaussianBlur => (0.01, 5.0),
        AugmentationKind::AdditiveSap => (0.0, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub knob: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionResult {
    pub knob: f64,
    pub drop: f64,
    pub saturated: bool,
    pub iterations: usize,
    pub probes: Vec<Probe>,
}

/// Bisection on a drop function that grows from `identity` toward `extreme`.
///
/// Returns the extreme point flagged as saturated when even it falls short of
/// the target.
pub fn bisect<F>(
    identity: f64,
    extreme: f64,
    target: f64,
    tolerance: f64,
    max_iter: usize,
    mut drop_at: F,
) -> Result<BisectionResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut probes = Vec::new();
    let mut probe = |knob: f64, probes: &mut Vec<Probe>| -> Result<f64> {
        let drop = drop_at(knob)?;
        if !drop.is_finite() {
            return Err(Error::NonFinite("accuracy drop"));
        }
        probes.push(Probe { knob, drop });
        Ok(drop)
    };
    let done = |knob, drop, saturated, iterations, probes| {
        Ok(BisectionResult {
            knob,
            drop,
            saturated,
            iterations,
            probes,
        })
    };

    let d_id = probe(identity, &mut probes)?;
    if (d_id - target).abs() <= tolerance {
        return done(identity, d_id, false, 0, probes);
    }
    let d_ex = probe(extreme, &mut probes)?;
    if d_ex < target - tolerance {
        return done(extreme, d_ex, true, 0, probes);
    }
    if (d_ex - target).abs() <= tolerance && d_id > target {
        return done(extreme, d_ex, false, 0, probes);
    }
    if d_id > target + tolerance {
        return Err(Error::Calibration {
            detail: format!(
                "drop at the identity end is already {d_id:.4}, above target {target:.4}"
            ),
            lo: identity.min(extreme),
            hi: identity.max(extreme),
        });
    }

    let (mut a, mut da, mut b, mut db) = (identity, d_id, extreme, d_ex);
    for it in 1..=max_iter {
        let m = 0.5 * (a + b);
        let dm = probe(m, &mut probes)?;
        if (dm - target).abs() <= tolerance {
            return done(m, dm, false, it, probes);
        }
        if dm < da - tolerance || dm > db + tolerance {
            return Err(Error::Calibration {
                detail: format!(
                    "non-monotone drop: {dm:.4} at {m} outside bracket drops [{da:.4}, {db:.4}]"
                ),
                lo: a.min(b),
                hi: a.max(b),
            });
        }
        if dm < target {
            a = m;
            da = dm;
        } else {
            b = m;
            db = dm;
        }
    }
    Err(Error::Calibration {
        detail: format!("no point within ±{tolerance} of {target} after {max_iter} iterations"),
        lo: a.min(b),
        hi: a.max(b),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub spec: AugmentationSpec,
    pub clean_accuracy: f64,
    pub augmented_accuracy: f64,
    pub measured_drop: f64,
    pub saturated: bool,
    pub iterations: usize,
    pub probes: Vec<Probe>,
}

/// Searches the task's knob so that accuracy drops by `target_drop` relative
/// to clean accuracy on `valset`.
pub fn calibrate<C: Classifier + ?Sized>(
    model: &C,
    valset: &LabeledDataset,
    task: &CalibrationTask,
) -> Result<CalibrationOutcome> {
    task.validate()?;
    let clean = eval_accuracy(model, valset, None, task.eval_seed)?;
    if task.target_drop == 0.0 {
        let spec = task.base.with_knob(task.identity_knob())?;
        let acc = eval_accuracy(model, valset, Some(&spec), task.eval_seed)?;
        return Ok(CalibrationOutcome {
            spec,
            clean_accuracy: clean,
            augmented_accuracy: acc,
            measured_drop: clean - acc,
            saturated: false,
            iterations: 0,
            probes: vec![Probe {
                knob: task.identity_knob(),
                drop: clean - acc,
            }],
        });
    }
    let r = bisect(
        task.identity_knob(),
        task.extreme_knob(),
        task.target_drop,
        task.tolerance,
        task.max_iter,
        |k| {
            let spec = task.base.with_knob(k)?;
            Ok(clean - eval_accuracy(model, valset, Some(&spec), task.eval_seed)?)
        },
    )?;
    Ok(CalibrationOutcome {
        spec: task.base.with_knob(r.knob)?,
        clean_accuracy: clean,
        augmented_accuracy: clean - r.drop,
        measured_drop: r.drop,
        saturated: r.saturated,
        iterations: r.iterations,
        probes: r.probes,
    })
}

/// Calibrates every kind and collects the results into a preset manifest
/// under `dataset`.
pub fn calibrate_all<C: Classifier + ?Sized>(
    model: &C,
    valset: &LabeledDataset,
    tasks: &[CalibrationTask],
    dataset: &str,
) -> Result<(PresetManifest, Vec<CalibrationOutcome>)> {
    let mut manifest = PresetManifest::default();
    let mut outcomes = Vec::with_capacity(tasks.len());
    for task in tasks {
        let out = calibrate(model, valset, task)?;
        manifest.insert(dataset, out.spec);
        outcomes.push(out);
    }
    Ok((manifest, outcomes))
}
