#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::Write;

use fmatune_core::calibration::Classifier;
use fmatune_core::data::Split;
use fmatune_core::model::{ArchitectureDescriptor, BoundParams, ConvBlock};
use fmatune_core::{
    augment, Graph, Image, LabeledDataset, ModelSnapshot, NodeId, RandomStream, Result, Tensor,
};

/// Writes straight to stderr so the line shows up even when the harness
/// captures test output.
pub fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] criterion {criterion:>2} {status} {name}: {detail}"
    );
}

pub fn report_not_run(criterion: u32, name: &str, why: &str) {
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] criterion {criterion:>2} NOT RUN {name}: {why}"
    );
}

// ---------------------------------------------------------------------------
// Nested-loop kernels
// ---------------------------------------------------------------------------

pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [f, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (x0 * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + yy as usize) * wd + xx as usize];
                                acc += xv * w[((fi * c + ci) * k + i) * k + j];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + y) * ow + x0] = acc;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

/// Gradients of `sum(conv(x) ⊙ gout)` with respect to input, weight and bias.
pub fn naive_conv2d_grads(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    gout: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, wd] = xs;
    let [f, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; f];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for x0 in 0..ow {
                    let go = gout[((ni * f + fi) * oh + y) * ow + x0];
                    gb[fi] += go;
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (x0 * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + yy as usize) * wd + xx as usize;
                                let wi = ((fi * c + ci) * k + i) * k + j;
                                gx[xi] += go * w[wi];
                                gw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn naive_maxpool2(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..2 {
                        for j in 0..2 {
                            m = m.max(x[((ni * c + ci) * h + 2 * y + i) * w + 2 * x0 + j]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

pub fn naive_dense(x: &[f64], n: usize, d: usize, w: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut acc = b[j];
            for l in 0..d {
                acc += x[i * d + l] * w[l * k + j];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Finite differences on model parameters
// ---------------------------------------------------------------------------

/// Two conv layers on 4×4 inputs, three classes, 103 parameters.
pub fn toy_descriptor() -> ArchitectureDescriptor {
    ArchitectureDescriptor {
        height: 4,
        width: 4,
        channels: 3,
        blocks: vec![
            ConvBlock {
                filters: 2,
                repeats: 1,
            },
            ConvBlock {
                filters: 2,
                repeats: 1,
            },
        ],
        dense: vec![],
        classes: 3,
        ..ArchitectureDescriptor::default()
    }
}

pub type LossBuilder<'a> = dyn Fn(&mut Graph, &ModelSnapshot, &BoundParams) -> Result<NodeId> + 'a;

/// Max relative error `|a − n| / max(|a|, |n|, 1e-6)` between tape gradients
/// and central differences with step `h`, over every parameter entry.
pub fn gradient_check(model: &ModelSnapshot, loss: &LossBuilder<'_>, h: f64) -> f64 {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let root = loss(&mut g, model, &params).unwrap();
    g.backward(root).unwrap();
    let analytic: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(name, id)| {
            (
                name.to_string(),
                g.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(id))),
            )
        })
        .collect();
    let value = |m: &ModelSnapshot| {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let r = loss(&mut g, m, &p).unwrap();
        g.value(r).item()
    };
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let mut plus = model.clone();
            plus.param_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = model.clone();
            minus.param_mut(name).unwrap().data_mut()[i] -= h;
            let num = (value(&plus) - value(&minus)) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

pub fn random_batch(n: usize, h: usize, w: usize, rng: &mut RandomStream) -> Vec<Image> {
    (0..n)
        .map(|_| Image::new(h, w, (0..h * w * 3).map(|_| rng.uniform()).collect()).unwrap())
        .collect()
}

// ---------------------------------------------------------------------------
// Closed-form calibration oracle
// ---------------------------------------------------------------------------

/// Predicts class 1 when the mean HSL lightness is at least 0.5.
pub struct LightnessThreshold;

impl Classifier for LightnessThreshold {
    fn classify(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(images
            .iter()
            .map(|img| {
                let n = (img.height() * img.width()) as f64;
                let mean: f64 = img
                    .data()
                    .chunks_exact(3)
                    .map(|p| augment::rgb_to_hsl(p[0], p[1], p[2]).2)
                    .sum::<f64>()
                    / n;
                usize::from(mean >= 0.5)
            })
            .collect())
    }
}

/// Constant gray images: class 0 levels evenly spaced in [0.1, 0.5), class 1
/// in [0.5, 0.9). The threshold classifier is perfect on clean data and
/// brightening by Δ ≤ 0.4 flips a fraction Δ/0.4 of class 0, so the overall
/// drop is 1.25·Δ.
pub fn gray_levels(per_class: usize) -> LabeledDataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class {
        let t = (i as f64 + 0.5) / per_class as f64;
        for (class, base) in [(0usize, 0.1), (1, 0.5)] {
            let v = base + 0.4 * t;
            images.push(Image::filled(2, 2, [v, v, v]));
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, 2, Split::Val).unwrap()
}
