//! Augmentation scheduling: individual (IA) versus combined (CA) strategies.
//!
//! Under CA the `Combined+` set is used on even epochs and `Combined−` on
//! odd epochs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{compose, AugmentationSet, AugmentationSpec, SetName};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ia,
    Ca,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ia => "IA",
            Strategy::Ca => "CA",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ia" => Ok(Strategy::Ia),
            "ca" => Ok(Strategy::Ca),
            other => Err(Error::param(
                "strategy",
                format!("unknown strategy '{other}' (ia, ca)"),
            )),
        }
    }
}

/// How often the CA strategy switches between its two sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    #[default]
    PerEpoch,
    /// Switch every batch. Experimental; kept for ablations.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyConfig {
    Individual {
        set: AugmentationSet,
    },
    Combined {
        plus: AugmentationSet,
        minus: AugmentationSet,
        alternation: Alternation,
    },
}

pub const PARITY_RULE: &str = "even epoch -> Combined+, odd epoch -> Combined-";

impl StrategyConfig {
    pub fn individual(spec: AugmentationSpec) -> Self {
        StrategyConfig::Individual {
            set: AugmentationSet::single(spec),
        }
    }

    pub fn combined(plus: AugmentationSet, minus: AugmentationSet) -> Result<Self> {
        if plus.name() != SetName::CombinedPlus || minus.name() != SetName::CombinedMinus {
            return Err(Error::contract(format!(
                "CA needs Combined+ and Combined-, got {} and {}",
                plus.name(),
                minus.name()
            )));
        }
        Ok(StrategyConfig::Combined {
            plus,
            minus,
            alternation: Alternation::PerEpoch,
        })
    }

    /// CA over the Combined+ and Combined− members of `specs`.
    pub fn ca_from_specs(specs: &[AugmentationSpec]) -> Result<Self> {
        Self::combined(
            AugmentationSet::select(SetName::CombinedPlus, specs)?,
            AugmentationSet::select(SetName::CombinedMinus, specs)?,
        )
    }

    pub fn with_alternation(mut self, alt: Alternation) -> Self {
        if let StrategyConfig::Combined { alternation, .. } = &mut self {
            *alternation = alt;
        }
        self
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            StrategyConfig::Individual { .. } => Strategy::Ia,
            StrategyConfig::Combined { .. } => Strategy::Ca,
        }
    }

    /// Set used throughout `epoch` (per-epoch alternation).
    pub fn select_set(&self, epoch: usize) -> &AugmentationSet {
        match self {
            StrategyConfig::Individual { set } => set,
            StrategyConfig::Combined { plus, minus, .. } => {
                if epoch.is_multiple_of(2) {
                    plus
                } else {
                    minus
                }
            }
        }
    }

    /// Set for one batch, honoring the alternation granularity.
    pub fn select_for_batch(&self, epoch: usize, batch: usize) -> &AugmentationSet {
        match self {
            StrategyConfig::Combined {
                plus,
                minus,
                alternation: Alternation::PerBatch,
            } => {
                if (epoch + batch).is_multiple_of(2) {
                    plus
                } else {
                    minus
                }
            }
            _ => self.select_set(epoch),
        }
    }

    /// Every set the strategy can select.
    pub fn sets(&self) -> Vec<&AugmentationSet> {
        match self {
            StrategyConfig::Individual { set } => vec![set],
            StrategyConfig::Combined { plus, minus, .. } => vec![plus, minus],
        }
    }
}

/// Stream for the augmented copy of source image `index` in `epoch`.
pub fn pair_stream(seed: u64, epoch: usize, index: usize) -> RandomStream {
    RandomStream::new(seed)
        .derive(epoch as u64)
        .derive(index as u64)
}

/// Returns the untouched clean image and its augmented copy.
pub fn make_pair(img: &Image, set: &AugmentationSet, rng: &RandomStream) -> Result<(Image, Image)> {
    let aug = compose(img, set, rng)?;
    Ok((img.clone(), aug))
}

/// Index-aligned clean/augmented batch.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub clean: Vec<Image>,
    pub augmented: Vec<Image>,
    pub labels: Vec<usize>,
    pub sources: Vec<usize>,
}

/// Builds pairs for the given source indices. The augmentation noise of each
/// image depends on `(seed, epoch, source index)` only, so pairs are the same
/// whatever order the indices come in.
pub fn make_pairs(
    ds: &LabeledDataset,
    indices: &[usize],
    set: &AugmentationSet,
    seed: u64,
    epoch: usize,
) -> Result<PairBatch> {
    let mut batch = PairBatch {
        clean: Vec::with_capacity(indices.len()),
        augmented: Vec::with_capacity(indices.len()),
        labels: Vec::with_capacity(indices.len()),
        sources: indices.to_vec(),
    };
    for &i in indices {
        let (c, a) = make_pair(&ds.images()[i], set, &pair_stream(seed, epoch, i))?;
        batch.clean.push(c);
        batch.augmented.push(a);
        batch.labels.push(ds.labels()[i]);
    }
    Ok(batch)
}

/// Clean dataset followed by one labeled augmented copy per set.
pub fn at_extend_all(
    ds: &LabeledDataset,
    sets: &[&AugmentationSet],
    rng: &RandomStream,
) -> Result<LabeledDataset> {
    let mut images = ds.images().to_vec();
    let mut labels = ds.labels().to_vec();
    for (s, set) in sets.iter().enumerate() {
        let set_rng = rng.derive(s as u64);
        for (i, img) in ds.images().iter().enumerate() {
            images.push(compose(img, set, &set_rng.derive(i as u64))?);
            labels.push(ds.labels()[i]);
        }
    }
    let mut out = LabeledDataset::new(images, labels, ds.classes(), ds.split)?;
    out.provenance = ds.provenance.clone();
    Ok(out)
}

/// Clean dataset plus one augmented copy (size doubles).
pub fn at_extend(
    ds: &LabeledDataset,
    set: &AugmentationSet,
    rng: &RandomStream,
) -> Result<LabeledDataset> {
    at_extend_all(ds, &[set], rng)
}
