use std::path::{Path, PathBuf};

use fmatune_core::data::{load_cifar10, subset, synth_dataset, Split};
use fmatune_core::model::ConvBlock;
use fmatune_core::trainer::RateStage;
use fmatune_core::{
    ArchitectureDescriptor, AugmentationSpec, LabeledDataset, ModelSnapshot, PresetManifest,
};

use crate::args::{ArchName, GlobalArgs};
use crate::CliError;

const SYNTH_CLASSES: usize = 10;
const SYNTH_VAL_KEY: u64 = 0x5641_4c00;

/// Fixed locations of the artifacts under `--out-dir`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(g: &GlobalArgs) -> Self {
        Layout {
            root: g.out_dir.clone(),
        }
    }

    pub fn baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }

    pub fn calibration_dir(&self) -> PathBuf {
        self.root.join("calibration")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, slug: &str) -> PathBuf {
        self.runs_dir().join(slug)
    }

    pub fn grid_dir(&self) -> PathBuf {
        self.root.join("grid")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub fn baseline_path(g: &GlobalArgs) -> PathBuf {
    g.baseline
        .clone()
        .unwrap_or_else(|| Layout::new(g).baseline_dir().join("model.snap"))
}

pub fn presets_path(g: &GlobalArgs) -> PathBuf {
    g.presets
        .clone()
        .unwrap_or_else(|| Layout::new(g).calibration_dir().join("presets.toml"))
}

pub fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "missing {}: {hint}",
            path.display()
        )))
    }
}

pub fn load_snapshot(path: &Path, hint: &str) -> Result<ModelSnapshot, CliError> {
    require(path, hint)?;
    Ok(ModelSnapshot::load(path)?)
}

pub fn load_baseline(g: &GlobalArgs) -> Result<ModelSnapshot, CliError> {
    load_snapshot(
        &baseline_path(g),
        "run `fmatune train-baseline` or pass --baseline",
    )
}

/// The seven calibrated specs in report order.
pub fn specs(g: &GlobalArgs) -> Result<Vec<AugmentationSpec>, CliError> {
    let manifest = if g.builtin_presets {
        PresetManifest::builtin()
    } else {
        let path = presets_path(g);
        require(
            &path,
            "run `fmatune calibrate`, pass --presets or use --builtin-presets",
        )?;
        PresetManifest::load(&path)?
    };
    ordered(&manifest, &g.preset_dataset)
}

/// Calibrated specs when present, the bundled ones otherwise.
pub fn specs_or_builtin(g: &GlobalArgs) -> Result<Vec<AugmentationSpec>, CliError> {
    if g.builtin_presets || (g.presets.is_none() && !presets_path(g).exists()) {
        return ordered(&PresetManifest::builtin(), &g.preset_dataset);
    }
    specs(g)
}

fn ordered(m: &PresetManifest, dataset: &str) -> Result<Vec<AugmentationSpec>, CliError> {
    fmatune_core::AugmentationKind::ALL
        .iter()
        .map(|&k| m.get(dataset, k).map_err(CliError::from))
        .collect()
}

pub fn has_data(g: &GlobalArgs) -> bool {
    g.synthetic.is_some() || g.data_dir.is_some()
}

pub fn datasets(g: &GlobalArgs) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    if let Some(n) = g.synthetic {
        if n == 0 {
            return Err(CliError::usage(
                "--synthetic needs at least one image per class",
            ));
        }
        let train = synth_dataset(n, SYNTH_CLASSES, g.seed)?;
        let mut val = synth_dataset(
            g.val_per_class.unwrap_or((n / 4).max(1)),
            SYNTH_CLASSES,
            g.seed ^ SYNTH_VAL_KEY,
        )?;
        val.split = Split::Val;
        return Ok((train, val));
    }
    let dir = g.data_dir.as_ref().ok_or_else(|| {
        CliError::usage(
            "no data source: pass --data-dir DIR (CIFAR-10 binary batches) or --synthetic N",
        )
    })?;
    require(dir, "the CIFAR-10 data directory does not exist")?;
    let (mut train, mut val) = load_cifar10(dir)?;
    if let Some(n) = g.train_per_class {
        train = subset(&train, n, g.seed)?;
    }
    if let Some(n) = g.val_per_class {
        val = subset(&val, n, g.seed)?;
    }
    Ok((train, val))
}

pub fn parse_schedule(s: &str) -> Result<Vec<RateStage>, CliError> {
    s.split(',')
        .map(|part| {
            let (rate, epochs) = part.split_once(':').ok_or_else(|| {
                CliError::usage(format!("schedule stage '{part}' is not rate:epochs"))
            })?;
            Ok(RateStage {
                rate: rate
                    .trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("bad rate '{rate}'")))?,
                epochs: epochs
                    .trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("bad epoch count '{epochs}'")))?,
            })
        })
        .collect()
}

pub fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad {what} value '{v}'")))
        })
        .collect()
}

pub fn architecture(name: ArchName) -> ArchitectureDescriptor {
    match name {
        ArchName::Default => ArchitectureDescriptor::default(),
        ArchName::Tiny => ArchitectureDescriptor {
            blocks: vec![
                ConvBlock {
                    filters: 8,
                    repeats: 1,
                },
                ConvBlock {
                    filters: 16,
                    repeats: 1,
                },
            ],
            dense: vec![],
            ..ArchitectureDescriptor::default()
        },
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_parses_stages() {
        let s = parse_schedule("0.01:20, 1e-4:10").unwrap();
        assert_eq!(
            s,
            vec![
                RateStage {
                    rate: 0.01,
                    epochs: 20
                },
                RateStage {
                    rate: 1e-4,
                    epochs: 10
                }
            ]
        );
        assert_eq!(parse_schedule("0.01").unwrap_err().code, crate::EXIT_USAGE);
    }

    #[test]
    fn tiny_arch_is_valid() {
        architecture(ArchName::Tiny).validate().unwrap();
    }
}
