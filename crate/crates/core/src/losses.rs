//! Training objectives: cross-entropy, the feature-map augmentation (FMA)
//! regularizer, the stability-training (ST) regularizer, and their
//! combination per finetuning method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelSnapshot};
use crate::tensor::Tensor;

/// Finetuning method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Augmentation training: labeled augmented copies join the batch.
    At,
    /// Stability training: softmax-output consistency regularizer.
    St,
    /// Feature-map consistency regularizer.
    Fma,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::At, Method::St, Method::Fma];

    pub fn label(self) -> &'static str {
        match self {
            Method::At => "AT",
            Method::St => "ST",
            Method::Fma => "FMA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "at" => Ok(Method::At),
            "st" => Ok(Method::St),
            "fma" => Ok(Method::Fma),
            other => Err(Error::param(
                "method",
                format!("unknown method '{other}' (at, st, fma)"),
            )),
        }
    }
}

/// Distance between clean and augmented softmax outputs for ST.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StDistance {
    /// `KL(p_clean || p_aug)`.
    #[default]
    Kl,
    /// Squared Euclidean distance between probability vectors.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    /// Weight of the FMA term.
    pub gamma: f64,
    /// Weight of the ST term.
    pub st_weight: f64,
    /// Floor for the clean feature-map mean in the FMA denominator.
    pub epsilon_mean: f64,
    #[serde(default)]
    pub st_distance: StDistance,
}

impl LossConfig {
    pub fn new(method: Method) -> Self {
        LossConfig {
            method,
            gamma: 1.0,
            st_weight: 1.0,
            epsilon_mean: DEFAULT_EPSILON_MEAN,
            st_distance: StDistance::Kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::param(
                "gamma",
                format!("{} must be a finite value >= 0", self.gamma),
            ));
        }
        if !(self.st_weight >= 0.0 && self.st_weight.is_finite()) {
            return Err(Error::param(
                "st_weight",
                format!("{} must be a finite value >= 0", self.st_weight),
            ));
        }
        if !(self.epsilon_mean > 0.0) {
            return Err(Error::param("epsilon_mean", "must be positive"));
        }
        Ok(())
    }
}

pub const DEFAULT_EPSILON_MEAN: f64 = 1e-8;

/// Default grid searched for the FMA weight.
pub const GAMMA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy(g: &mut Graph, logp: NodeId, labels: &[usize]) -> Result<NodeId> {
    let picked = g.gather(logp, labels)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

/// Layer-averaged, size-normalized squared difference between clean and
/// augmented feature maps, each scaled by the clean map's mean.
///
/// For a batch, every sample is normalized by the mean of its own clean tap
/// and the per-sample losses are averaged.
pub fn fma_loss(
    g: &mut Graph,
    taps_clean: &[NodeId],
    taps_aug: &[NodeId],
    epsilon_mean: f64,
) -> Result<NodeId> {
    if taps_clean.is_empty() {
        return Err(Error::contract("FMA loss needs at least one tapped layer"));
    }
    if taps_clean.len() != taps_aug.len() {
        return Err(Error::dim(
            "tap list",
            format!(
                "{} clean taps vs {} augmented",
                taps_clean.len(),
                taps_aug.len()
            ),
        ));
    }
    let mut acc: Option<NodeId> = None;
    for (layer, (&fc, &fa)) in taps_clean.iter().zip(taps_aug).enumerate() {
        if g.shape(fc) != g.shape(fa) {
            return Err(Error::dim(
                format!("tap {layer}"),
                format!("{:?} vs {:?}", g.shape(fc), g.shape(fa)),
            ));
        }
        let n = g.shape(fc)[0];
        let kappa = g.value(fc).sample_len();
        let mean = g.sample_mean(fc)?;
        let denom = g.clamp_min(mean, epsilon_mean)?;
        let diff = g.sub(fc, fa)?;
        let ratio = g.div_sample(diff, denom)?;
        let sq = g.square(ratio)?;
        let s = g.sum(sq)?;
        let term = g.scale(s, 1.0 / (kappa as f64 * n as f64))?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    g.scale(acc.expect("nonempty"), 1.0 / taps_clean.len() as f64)
}

/// Batch-mean divergence between clean and augmented softmax outputs.
pub fn st_loss(
    g: &mut Graph,
    logp_clean: NodeId,
    logp_aug: NodeId,
    distance: StDistance,
) -> Result<NodeId> {
    if g.shape(logp_clean) != g.shape(logp_aug) {
        return Err(Error::dim(
            "logits",
            format!("{:?} vs {:?}", g.shape(logp_clean), g.shape(logp_aug)),
        ));
    }
    let n = g.shape(logp_clean)[0];
    let pc = g.exp(logp_clean)?;
    let per = match distance {
        StDistance::Kl => {
            let d = g.sub(logp_clean, logp_aug)?;
            g.mul(pc, d)?
        }
        StDistance::L2 => {
            let pa = g.exp(logp_aug)?;
            let d = g.sub(pc, pa)?;
            g.square(d)?
        }
    };
    let s = g.sum(per)?;
    g.scale(s, 1.0 / n as f64)
}

/// Scalar nodes of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: NodeId,
    /// Cross-entropy on the clean batch (AT: on clean plus augmented).
    pub task: NodeId,
    /// Unweighted FMA or ST term; `None` for AT.
    pub regularizer: Option<NodeId>,
}

/// Builds the method's loss on `g`.
///
/// `batch_aug[i]` must be the augmented copy of `batch_clean[i]`. FMA and ST
/// never look at labels for the augmented branch; AT reuses the clean labels
/// for the augmented copies.
pub fn total_loss(
    g: &mut Graph,
    config: &LossConfig,
    model: &ModelSnapshot,
    params: &BoundParams,
    batch_clean: &Tensor,
    batch_aug: &Tensor,
    labels: &[usize],
) -> Result<LossTerms> {
    config.validate()?;
    if batch_clean.shape() != batch_aug.shape() {
        return Err(Error::contract(format!(
            "clean batch {:?} and augmented batch {:?} are not aligned",
            batch_clean.shape(),
            batch_aug.shape()
        )));
    }
    if labels.len() != batch_clean.shape()[0] {
        return Err(Error::contract(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch_clean.shape()[0]
        )));
    }
    match config.method {
        Method::At => {
            let both = Tensor::concat_batch(&[batch_clean, batch_aug])?;
            let x = g.constant(both);
            let out = model.forward(g, params, x, false)?;
            let logp = g.log_softmax(out.logits)?;
            let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
            let task = cross_entropy(g, logp, &doubled)?;
            Ok(LossTerms {
                total: task,
                task,
                regularizer: None,
            })
        }
        Method::St | Method::Fma => {
            let want_taps = config.method == Method::Fma;
            let xc = g.constant(batch_clean.clone());
            let clean = model.forward(g, params, xc, want_taps)?;
            let xa = g.constant(batch_aug.clone());
            let aug = model.forward(g, params, xa, want_taps)?;
            let logp_clean = g.log_softmax(clean.logits)?;
            let task = cross_entropy(g, logp_clean, labels)?;
            let (reg, weight) = if want_taps {
                (
                    fma_loss(g, &clean.taps, &aug.taps, config.epsilon_mean)?,
                    config.gamma,
                )
            } else {
                let logp_aug = g.log_softmax(aug.logits)?;
                (
                    st_loss(g, logp_clean, logp_aug, config.st_distance)?,
                    config.st_weight,
                )
            };
            let weighted = g.scale(reg, weight)?;
            let total = g.add(task, weighted)?;
            Ok(LossTerms {
                total,
                task,
                regularizer: Some(reg),
            })
        }
    }
}

/// Clean-only cross-entropy (baseline stage).
pub fn task_loss(
    g: &mut Graph,
    model: &ModelSnapshot,
    params: &BoundParams,
    batch: &Tensor,
    labels: &[usize],
) -> Result<NodeId> {
    if labels.len() != batch.shape()[0] {
        return Err(Error::contract(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.shape()[0]
        )));
    }
    let x = g.constant(batch.clone());
    let out = model.forward(g, params, x, false)?;
    let logp = g.log_softmax(out.logits)?;
    cross_entropy(g, logp, labels)
}
