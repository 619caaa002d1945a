//! Small VGG-style classifier with named feature-map taps.
//!
//! The network is a stack of conv blocks (3×3 convolutions with ReLU,
//! followed by 2×2 max pooling), then ReLU dense layers and a linear output
//! layer. Taps expose post-ReLU conv activations for the feature-map loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub repeats: usize,
}

/// Which activations are exposed as feature-map taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPolicy {
    /// Final ReLU output of each conv block (before pooling).
    #[default]
    BlockOutputs,
    /// Every conv layer's ReLU output.
    EveryConv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blocks: Vec<ConvBlock>,
    pub dense: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub taps: TapPolicy,
}

impl Default for ArchitectureDescriptor {
    /// 32×32×3 input, conv blocks (16,2)-(32,2)-(64,2), dense 128, 10 classes.
    fn default() -> Self {
        ArchitectureDescriptor {
            height: 32,
            width: 32,
            channels: 3,
            blocks: vec![
                ConvBlock {
                    filters: 16,
                    repeats: 2,
                },
                ConvBlock {
                    filters: 32,
                    repeats: 2,
                },
                ConvBlock {
                    filters: 64,
                    repeats: 2,
                },
            ],
            dense: vec![128],
            classes: 10,
            taps: TapPolicy::BlockOutputs,
        }
    }
}

pub const KERNEL: usize = 3;

impl ArchitectureDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("architecture needs at least two classes"));
        }
        if self.blocks.is_empty() {
            return Err(Error::contract(
                "architecture needs at least one conv block",
            ));
        }
        if self.blocks.iter().any(|b| b.filters == 0 || b.repeats == 0) {
            return Err(Error::contract(
                "conv blocks need positive filters and repeats",
            ));
        }
        if self.dense.contains(&0) {
            return Err(Error::contract("dense widths must be positive"));
        }
        let div = 1usize << self.blocks.len();
        if !self.height.is_multiple_of(div)
            || !self.width.is_multiple_of(div)
            || self.height < div
            || self.width < div
        {
            return Err(Error::contract(format!(
                "input {}x{} cannot be pooled {} times",
                self.height,
                self.width,
                self.blocks.len()
            )));
        }
        Ok(())
    }

    pub fn tap_count(&self) -> usize {
        match self.taps {
            TapPolicy::BlockOutputs => self.blocks.len(),
            TapPolicy::EveryConv => self.blocks.iter().map(|b| b.repeats).sum(),
        }
    }

    fn flat_features(&self) -> usize {
        let div = 1usize << self.blocks.len();
        let last = self.blocks.last().map_or(self.channels, |b| b.filters);
        last * (self.height / div) * (self.width / div)
    }

    /// Parameter names and shapes in network order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.channels;
        for (b, block) in self.blocks.iter().enumerate() {
            for r in 0..block.repeats {
                out.push((
                    format!("block{b}.conv{r}.weight"),
                    vec![block.filters, c_in, KERNEL, KERNEL],
                ));
                out.push((format!("block{b}.conv{r}.bias"), vec![block.filters]));
                c_in = block.filters;
            }
        }
        let mut d_in = self.flat_features();
        for (i, &w) in self
            .dense
            .iter()
            .chain(std::iter::once(&self.classes))
            .enumerate()
        {
            out.push((format!("fc{i}.weight"), vec![d_in, w]));
            out.push((format!("fc{i}.bias"), vec![w]));
            d_in = w;
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub epoch: usize,
    pub seed: u64,
}

/// Network parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    descriptor: ArchitectureDescriptor,
    params: BTreeMap<String, Tensor>,
    pub meta: SnapshotMeta,
}

/// Parameter leaves of one graph, in network order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    nodes: Vec<(String, NodeId)>,
}

impl BoundParams {
    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub taps: Vec<NodeId>,
}

impl ModelSnapshot {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(descriptor: ArchitectureDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let root = RandomStream::new(seed);
        let mut params = BTreeMap::new();
        for (i, (name, shape)) in descriptor.parameter_layout().into_iter().enumerate() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = root.derive(i as u64);
                Tensor::from_fn(&shape, |_| rng.uniform_range(-bound, bound))
            };
            params.insert(name, t);
        }
        Ok(ModelSnapshot {
            descriptor,
            params,
            meta: SnapshotMeta { epoch: 0, seed },
        })
    }

    pub fn zeros(descriptor: ArchitectureDescriptor) -> Result<Self> {
        descriptor.validate()?;
        let params = descriptor
            .parameter_layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Ok(ModelSnapshot {
            descriptor,
            params,
            meta: SnapshotMeta::default(),
        })
    }

    pub fn from_parts(
        descriptor: ArchitectureDescriptor,
        params: BTreeMap<String, Tensor>,
        meta: SnapshotMeta,
    ) -> Result<Self> {
        descriptor.validate()?;
        let layout = descriptor.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::contract(format!(
                "architecture has {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::dim(
                        name.clone(),
                        format!("expected {shape:?}, got {:?}", t.shape()),
                    ));
                }
                None => return Err(Error::contract(format!("missing parameter {name}"))),
            }
        }
        Ok(ModelSnapshot {
            descriptor,
            params,
            meta,
        })
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g` as a leaf, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let nodes = self
            .descriptor
            .parameter_layout()
            .into_iter()
            .map(|(name, _)| {
                let t = self.params[&name].clone();
                let id = if trainable { g.param(t) } else { g.constant(t) };
                (name, id)
            })
            .collect();
        BoundParams { nodes }
    }

    /// Runs the network on an `N×C×H×W` input node already in `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        input: NodeId,
        want_taps: bool,
    ) -> Result<ForwardOutput> {
        let d = &self.descriptor;
        let s = g.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "input rank",
                format!("expected NCHW, got {s:?}"),
            ));
        }
        for (axis, (&got, want)) in ["channel axis", "height axis", "width axis"]
            .iter()
            .zip(s[1..].iter().zip([d.channels, d.height, d.width]))
        {
            if got != want {
                return Err(Error::dim(
                    *axis,
                    format!("model expects {want}, got {got}"),
                ));
            }
        }
        let mut p = params.nodes.iter().map(|(_, id)| *id);
        let mut next = || {
            p.next()
                .ok_or_else(|| Error::contract("parameter binding too short"))
        };
        let mut taps = Vec::new();
        let mut x = input;
        for block in &d.blocks {
            for r in 0..block.repeats {
                let (w, b) = (next()?, next()?);
                let c = g.conv2d(x, w, b, 1, KERNEL / 2)?;
                x = g.relu(c)?;
                let is_tap = match d.taps {
                    TapPolicy::EveryConv => true,
                    TapPolicy::BlockOutputs => r + 1 == block.repeats,
                };
                if want_taps && is_tap {
                    taps.push(x);
                }
            }
            x = g.maxpool2(x)?;
        }
        x = g.flatten(x)?;
        for _ in &d.dense {
            let (w, b) = (next()?, next()?);
            let h = g.dense(x, w, b)?;
            x = g.relu(h)?;
        }
        let (w, b) = (next()?, next()?);
        let logits = g.dense(x, w, b)?;
        Ok(ForwardOutput { logits, taps })
    }

    /// Standalone forward pass on a batch tensor with constant parameters.
    pub fn forward_batch(&self, batch: &Tensor, want_taps: bool) -> Result<(Graph, ForwardOutput)> {
        if batch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("input batch values must lie in [0, 1]"));
        }
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &params, x, want_taps)?;
        Ok((g, out))
    }

    /// Arg-max class (first on ties) for each image.
    pub fn predict(&self, images: &[&Image], batch_size: usize) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let batch = batch_tensor(chunk)?;
            let (g, out) = self.forward_batch(&batch, false)?;
            preds.extend(argmax_rows(g.value(out.logits)));
        }
        Ok(preds)
    }

    pub fn set_params(&mut self, params: BTreeMap<String, Tensor>) -> Result<()> {
        let checked =
            ModelSnapshot::from_parts(self.descriptor.clone(), params, self.meta.clone())?;
        self.params = checked.params;
        Ok(())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Binary snapshot container
// ---------------------------------------------------------------------------

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"FMASNAP\0";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    descriptor: ArchitectureDescriptor,
    meta: SnapshotMeta,
}

impl ModelSnapshot {
    /// Layout: magic, `u32` version, `u32`-length-prefixed JSON header, `u32`
    /// tensor count, then per tensor `u32` name length, name, `u32` rank,
    /// `u64` dims and little-endian `f64` values. All integers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&SnapshotHeader {
            descriptor: self.descriptor.clone(),
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + self.parameter_count() * 8);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != SNAPSHOT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "not a model snapshot (bad magic)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let hlen = r.u32("header length")? as usize;
        let at = r.pos;
        let htext = std::str::from_utf8(r.take(hlen, "header")?).map_err(|e| Error::Format {
            offset: at,
            detail: format!("header is not UTF-8: {e}"),
        })?;
        let header: SnapshotHeader = serde_json::from_str(htext).map_err(|e| Error::Format {
            offset: at,
            detail: format!("header: {e}"),
        })?;
        let count = r.u32("tensor count")? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    detail: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Format {
                    offset: r.pos - 4,
                    detail: format!("implausible rank {rank} for {name}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n: usize = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .unwrap_or(usize::MAX);
            let at = r.pos;
            let raw = r.take(n.saturating_mul(8), "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at,
                detail: e.to_string(),
            })?;
            params.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        ModelSnapshot::from_parts(header.descriptor, params, header.meta)
    }

    /// Writes the snapshot atomically (temporary file, then rename).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
