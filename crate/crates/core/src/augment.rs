//! Photometric, noise and blur corruptions.
//!
//! Every function returns an image clipped to `[0, 1]`. Compositions clip
//! after each stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    BrightnessPlus,
    BrightnessMinus,
    SaturationPlus,
    SaturationMinus,
    GaussianNoise,
    GaussianBlur,
    AdditiveSap,
}

impl AugmentationKind {
    /// Table order used in reports: B+, B−, GB, GN, SAP, S+, S−.
    pub const ALL: [AugmentationKind; 7] = [
        AugmentationKind::BrightnessPlus,
        AugmentationKind::BrightnessMinus,
        AugmentationKind::GaussianBlur,
        AugmentationKind::GaussianNoise,
        AugmentationKind::AdditiveSap,
        AugmentationKind::SaturationPlus,
        AugmentationKind::SaturationMinus,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AugmentationKind::BrightnessPlus => "brightness_plus",
            AugmentationKind::BrightnessMinus => "brightness_minus",
            AugmentationKind::SaturationPlus => "saturation_plus",
            AugmentationKind::SaturationMinus => "saturation_minus",
            AugmentationKind::GaussianNoise => "gaussian_noise",
            AugmentationKind::GaussianBlur => "gaussian_blur",
            AugmentationKind::AdditiveSap => "additive_sap",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            AugmentationKind::BrightnessPlus => "B+",
            AugmentationKind::BrightnessMinus => "B-",
            AugmentationKind::SaturationPlus => "S+",
            AugmentationKind::SaturationMinus => "S-",
            AugmentationKind::GaussianNoise => "GN",
            AugmentationKind::GaussianBlur => "GB",
            AugmentationKind::AdditiveSap => "SAP",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            AugmentationKind::GaussianNoise | AugmentationKind::AdditiveSap
        )
    }

    /// Position in the fixed composition order:
    /// photometric, then blur, then Gaussian noise, then SAP.
    pub fn stage(self) -> u8 {
        match self {
            AugmentationKind::BrightnessPlus | AugmentationKind::BrightnessMinus => 0,
            AugmentationKind::SaturationPlus | AugmentationKind::SaturationMinus => 1,
            AugmentationKind::GaussianBlur => 2,
            AugmentationKind::GaussianNoise => 3,
            AugmentationKind::AdditiveSap => 4,
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        AugmentationKind::ALL
            .into_iter()
            .find(|k| k.key() == norm || k.short().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::param("kind", format!("unknown augmentation '{s}'")))
    }
}

/// Parameters of one corruption function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentationParams {
    Brightness { delta: f64 },
    Saturation { alpha: f64 },
    GaussianNoise { mean: f64, sigma: f64 },
    GaussianBlur { size: usize, sigma: f64 },
    AdditiveSap { p: f64, q: f64, rho: f64 },
}

/// A corruption type together with its parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRecord", into = "SpecRecord")]
pub struct AugmentationSpec {
    kind: AugmentationKind,
    params: AugmentationParams,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, params: AugmentationParams) -> Result<Self> {
        use AugmentationKind as K;
        use AugmentationParams as P;
        let ok = matches!(
            (kind, params),
            (K::BrightnessPlus | K::BrightnessMinus, P::Brightness { .. })
                | (K::SaturationPlus | K::SaturationMinus, P::Saturation { .. })
                | (K::GaussianNoise, P::GaussianNoise { .. })
                | (K::GaussianBlur, P::GaussianBlur { .. })
                | (K::AdditiveSap, P::AdditiveSap { .. })
        );
        if !ok {
            return Err(Error::param(
                "kind",
                format!("{params:?} do not belong to {kind}"),
            ));
        }
        validate_params(&params)?;
        Ok(AugmentationSpec { kind, params })
    }

    pub fn brightness(kind: AugmentationKind, delta: f64) -> Result<Self> {
        Self::new(kind, AugmentationParams::Brightness { delta })
    }

    pub fn saturation(kind: AugmentationKind, alpha: f64) -> Result<Self> {
        Self::new(kind, AugmentationParams::Saturation { alpha })
    }

    pub fn gaussian_noise(mean: f64, sigma: f64) -> Result<Self> {
        Self::new(
            AugmentationKind::GaussianNoise,
            AugmentationParams::GaussianNoise { mean, sigma },
        )
    }

    pub fn gaussian_blur(size: usize, sigma: f64) -> Result<Self> {
        Self::new(
            AugmentationKind::GaussianBlur,
            AugmentationParams::GaussianBlur { size, sigma },
        )
    }

    pub fn additive_sap(p: f64, q: f64, rho: f64) -> Result<Self> {
        Self::new(
            AugmentationKind::AdditiveSap,
            AugmentationParams::AdditiveSap { p, q, rho },
        )
    }

    /// Parameters under which the corruption leaves any image unchanged.
    pub fn identity(kind: AugmentationKind) -> Self {
        use AugmentationParams as P;
        let params = match kind {
            AugmentationKind::BrightnessPlus | AugmentationKind::BrightnessMinus => {
                P::Brightness { delta: 0.0 }
            }
            AugmentationKind::SaturationPlus | AugmentationKind::SaturationMinus => {
                P::Saturation { alpha: 1.0 }
            }
            AugmentationKind::GaussianNoise => P::GaussianNoise {
                mean: 0.0,
                sigma: 0.0,
            },
            AugmentationKind::GaussianBlur => P::GaussianBlur {
                size: 1,
                sigma: 1.0,
            },
            AugmentationKind::AdditiveSap => P::AdditiveSap {
                p: 0.0,
                q: 0.5,
                rho: 0.0,
            },
        };
        AugmentationSpec { kind, params }
    }

    pub fn kind(&self) -> AugmentationKind {
        self.kind
    }

    pub fn params(&self) -> AugmentationParams {
        self.params
    }

    /// The single strength-like parameter: Δ, α, σ (noise or blur) or p.
    pub fn knob(&self) -> f64 {
        match self.params {
            AugmentationParams::Brightness { delta } => delta,
            AugmentationParams::Saturation { alpha } => alpha,
            AugmentationParams::GaussianNoise { sigma, .. } => sigma,
            AugmentationParams::GaussianBlur { sigma, .. } => sigma,
            AugmentationParams::AdditiveSap { p, .. } => p,
        }
    }

    pub fn knob_name(&self) -> &'static str {
        match self.params {
            AugmentationParams::Brightness { .. } => "delta",
            AugmentationParams::Saturation { .. } => "alpha",
            AugmentationParams::GaussianNoise { .. } | AugmentationParams::GaussianBlur { .. } => {
                "sigma"
            }
            AugmentationParams::AdditiveSap { .. } => "p",
        }
    }

    /// Copy with the strength parameter replaced, companions kept.
    pub fn with_knob(&self, value: f64) -> Result<Self> {
        let params = match self.params {
            AugmentationParams::Brightness { .. } => {
                AugmentationParams::Brightness { delta: value }
            }
            AugmentationParams::Saturation { .. } => {
                AugmentationParams::Saturation { alpha: value }
            }
            AugmentationParams::GaussianNoise { mean, .. } => {
                AugmentationParams::GaussianNoise { mean, sigma: value }
            }
            AugmentationParams::GaussianBlur { size, .. } => {
                AugmentationParams::GaussianBlur { size, sigma: value }
            }
            AugmentationParams::AdditiveSap { q, rho, .. } => {
                AugmentationParams::AdditiveSap { p: value, q, rho }
            }
        };
        Self::new(self.kind, params)
    }

    pub fn apply(&self, img: &Image, rng: &mut RandomStream) -> Image {
        match self.params {
            AugmentationParams::Brightness { delta } => brightness(img, delta),
            AugmentationParams::Saturation { alpha } => saturation_unchecked(img, alpha),
            AugmentationParams::GaussianNoise { mean, sigma } => {
                noise_unchecked(img, mean, sigma, rng)
            }
            AugmentationParams::GaussianBlur { size, sigma } => blur_unchecked(img, size, sigma),
            AugmentationParams::AdditiveSap { p, q, rho } => sap_unchecked(img, p, q, rho, rng),
        }
    }
}

fn validate_params(params: &AugmentationParams) -> Result<()> {
    let finite = |name: &'static str, v: f64| {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::param(name, format!("{v} is not finite")))
        }
    };
    let unit = |name: &'static str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::param(name, format!("{v} outside [0, 1]")))
        }
    };
    match *params {
        AugmentationParams::Brightness { delta } => finite("delta", delta),
        AugmentationParams::Saturation { alpha } => {
            finite("alpha", alpha)?;
            if alpha < 0.0 {
                return Err(Error::param("alpha", format!("{alpha} is negative")));
            }
            Ok(())
        }
        AugmentationParams::GaussianNoise { mean, sigma } => {
            finite("mean", mean)?;
            finite("sigma", sigma)?;
            if sigma < 0.0 {
                return Err(Error::param("sigma", format!("{sigma} is negative")));
            }
            Ok(())
        }
        AugmentationParams::GaussianBlur { size, sigma } => {
            if size % 2 == 0 {
                return Err(Error::param(
                    "size",
                    format!("kernel size {size} must be odd"),
                ));
            }
            finite("sigma", sigma)?;
            if sigma <= 0.0 {
                return Err(Error::param("sigma", format!("{sigma} must be positive")));
            }
            Ok(())
        }
        AugmentationParams::AdditiveSap { p, q, rho } => {
            unit("p", p)?;
            unit("q", q)?;
            finite("rho", rho)?;
            if rho < 0.0 {
                return Err(Error::param("rho", format!("{rho} is negative")));
            }
            Ok(())
        }
    }
}

/// Flat key-value form used in preset manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRecord {
    kind: AugmentationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
}

impl TryFrom<SpecRecord> for AugmentationSpec {
    type Error = Error;

    fn try_from(r: SpecRecord) -> Result<Self> {
        let need = |name: &'static str, v: Option<f64>| {
            v.ok_or_else(|| Error::param(name, format!("missing for {}", r.kind)))
        };
        let params = match r.kind {
            AugmentationKind::BrightnessPlus | AugmentationKind::BrightnessMinus => {
                AugmentationParams::Brightness {
                    delta: need("delta", r.delta)?,
                }
            }
            AugmentationKind::SaturationPlus | AugmentationKind::SaturationMinus => {
                AugmentationParams::Saturation {
                    alpha: need("alpha", r.alpha)?,
                }
            }
            AugmentationKind::GaussianNoise => AugmentationParams::GaussianNoise {
                mean: r.mean.unwrap_or(0.0),
                sigma: need("sigma", r.sigma)?,
            },
            AugmentationKind::GaussianBlur => AugmentationParams::GaussianBlur {
                size: r
                    .size
                    .ok_or_else(|| Error::param("size", "missing for gaussian_blur"))?,
                sigma: need("sigma", r.sigma)?,
            },
            AugmentationKind::AdditiveSap => AugmentationParams::AdditiveSap {
                p: need("p", r.p)?,
                q: need("q", r.q)?,
                rho: need("rho", r.rho)?,
            },
        };
        AugmentationSpec::new(r.kind, params)
    }
}

impl From<AugmentationSpec> for SpecRecord {
    fn from(s: AugmentationSpec) -> Self {
        let mut r = SpecRecord {
            kind: s.kind,
            delta: None,
            alpha: None,
            mean: None,
            sigma: None,
            size: None,
            p: None,
            q: None,
            rho: None,
        };
        match s.params {
            AugmentationParams::Brightness { delta } => r.delta = Some(delta),
            AugmentationParams::Saturation { alpha } => r.alpha = Some(alpha),
            AugmentationParams::GaussianNoise { mean, sigma } => {
                r.mean = Some(mean);
                r.sigma = Some(sigma);
            }
            AugmentationParams::GaussianBlur { size, sigma } => {
                r.size = Some(size);
                r.sigma = Some(sigma);
            }
            AugmentationParams::AdditiveSap { p, q, rho } => {
                r.p = Some(p);
                r.q = Some(q);
                r.rho = Some(rho);
            }
        }
        r
    }
}

// ---------------------------------------------------------------------------
// Corruption functions
// ---------------------------------------------------------------------------

/// Adds `delta` to every channel value.
pub fn brightness(img: &Image, delta: f64) -> Image {
    img.map_values(|v| v + delta)
}

/// Scales HSL saturation by `alpha`.
pub fn saturation(img: &Image, alpha: f64) -> Result<Image> {
    validate_params(&AugmentationParams::Saturation { alpha })?;
    Ok(saturation_unchecked(img, alpha))
}

fn saturation_unchecked(img: &Image, alpha: f64) -> Image {
    if alpha == 1.0 {
        return img.clone();
    }
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let (h, s, l) = rgb_to_hsl(px[0], px[1], px[2]);
        let (r, g, b) = hsl_to_rgb(h, (alpha * s).clamp(0.0, 1.0), l);
        data.extend([r, g, b]);
    }
    Image::from_clipped(img.height(), img.width(), data)
}

/// Hexcone RGB→HSL with `L = (max + min) / 2`. Hue in degrees `[0, 360)`.
pub fn rgb_to_hsl(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = (max + min) / 2.0;
    let d = max - min;
    if d == 0.0 {
        return (0.0, 0.0, l);
    }
    let s = d / (1.0 - (2.0 * l - 1.0).abs());
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    (h, s.min(1.0), l)
}

pub fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (f64, f64, f64) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    (r1 + m, g1 + m, b1 + m)
}

/// Adds i.i.d. `N(mean, sigma²)` noise to every channel value.
pub fn gaussian_noise(img: &Image, mean: f64, sigma: f64, rng: &mut RandomStream) -> Result<Image> {
    validate_params(&AugmentationParams::GaussianNoise { mean, sigma })?;
    Ok(noise_unchecked(img, mean, sigma, rng))
}

fn noise_unchecked(img: &Image, mean: f64, sigma: f64, rng: &mut RandomStream) -> Image {
    if sigma == 0.0 && mean == 0.0 {
        return img.clone();
    }
    img.map_values(|v| v + mean + sigma * rng.normal())
}

/// Normalized `size×size` Gaussian kernel, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 - r;
            let dx = (i % size) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// Per-channel convolution with a normalized Gaussian kernel, reflect padding.
pub fn gaussian_blur(img: &Image, size: usize, sigma: f64) -> Result<Image> {
    validate_params(&AugmentationParams::GaussianBlur { size, sigma })?;
    Ok(blur_unchecked(img, size, sigma))
}

fn blur_unchecked(img: &Image, size: usize, sigma: f64) -> Image {
    let kernel = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let center = src[(y * w + x) * 3 + c];
                // Weighted sum of differences from the center: with weights
                // summing to one this equals the plain weighted sum, and a
                // flat neighbourhood maps to itself exactly.
                let mut acc = 0.0;
                for ky in 0..size {
                    let sy = reflect(y as isize + ky as isize - r, h);
                    for kx in 0..size {
                        let sx = reflect(x as isize + kx as isize - r, w);
                        acc += kernel[ky * size + kx] * (src[(sy * w + sx) * 3 + c] - center);
                    }
                }
                out[(y * w + x) * 3 + c] = center + acc;
            }
        }
    }
    Image::from_clipped(h, w, out)
}

/// Additive salt-and-pepper noise. One Bernoulli(`p`) draw per pixel
/// location; a hit adds `+rho` (probability `q`) or `-rho` to all channels.
pub fn additive_sap(
    img: &Image,
    p: f64,
    q: f64,
    rho: f64,
    rng: &mut RandomStream,
) -> Result<Image> {
    validate_params(&AugmentationParams::AdditiveSap { p, q, rho })?;
    Ok(sap_unchecked(img, p, q, rho, rng))
}

fn sap_unchecked(img: &Image, p: f64, q: f64, rho: f64, rng: &mut RandomStream) -> Image {
    if p == 0.0 {
        return img.clone();
    }
    let mut data = img.data().to_vec();
    for px in data.chunks_exact_mut(3) {
        if rng.uniform() < p {
            let shift = if rng.uniform() < q { rho } else { -rho };
            for v in px {
                *v += shift;
            }
        }
    }
    Image::from_clipped(img.height(), img.width(), data)
}

// ---------------------------------------------------------------------------
// Sets and composition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetName {
    CombinedPlus,
    CombinedMinus,
    Single(AugmentationKind),
}

impl fmt::Display for SetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetName::CombinedPlus => f.write_str("Combined+"),
            SetName::CombinedMinus => f.write_str("Combined-"),
            SetName::Single(k) => f.write_str(k.short()),
        }
    }
}

impl SetName {
    /// Corruption kinds belonging to the set.
    pub fn members(self) -> Vec<AugmentationKind> {
        match self {
            SetName::CombinedPlus => PLUS_MEMBERS.to_vec(),
            SetName::CombinedMinus => MINUS_MEMBERS.to_vec(),
            SetName::Single(k) => vec![k],
        }
    }
}

const PLUS_MEMBERS: [AugmentationKind; 5] = [
    AugmentationKind::BrightnessPlus,
    AugmentationKind::SaturationPlus,
    AugmentationKind::GaussianBlur,
    AugmentationKind::GaussianNoise,
    AugmentationKind::AdditiveSap,
];

const MINUS_MEMBERS: [AugmentationKind; 5] = [
    AugmentationKind::BrightnessMinus,
    AugmentationKind::SaturationMinus,
    AugmentationKind::GaussianBlur,
    AugmentationKind::GaussianNoise,
    AugmentationKind::AdditiveSap,
];

/// Ordered list of corruptions applied one after the other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSet {
    name: SetName,
    specs: Vec<AugmentationSpec>,
}

impl AugmentationSet {
    pub fn single(spec: AugmentationSpec) -> Self {
        AugmentationSet {
            name: SetName::Single(spec.kind()),
            specs: vec![spec],
        }
    }

    /// Builds a combined set from presets, sorted into composition order.
    /// Membership must match the set name exactly.
    pub fn combined(name: SetName, specs: &[AugmentationSpec]) -> Result<Self> {
        let members: &[AugmentationKind] = match name {
            SetName::CombinedPlus => &PLUS_MEMBERS,
            SetName::CombinedMinus => &MINUS_MEMBERS,
            SetName::Single(_) => {
                return Err(Error::contract(
                    "use AugmentationSet::single for one corruption",
                ))
            }
        };
        let mut kinds: Vec<_> = specs.iter().map(|s| s.kind()).collect();
        kinds.sort();
        let mut want = members.to_vec();
        want.sort();
        if kinds != want {
            return Err(Error::contract(format!(
                "{name} must contain exactly {want:?}, got {kinds:?}"
            )));
        }
        let mut specs = specs.to_vec();
        specs.sort_by_key(|s| s.kind().stage());
        Ok(AugmentationSet { name, specs })
    }

    /// Builds `Combined+` or `Combined−` from a preset manifest section.
    pub fn from_presets(name: SetName, presets: &PresetManifest, dataset: &str) -> Result<Self> {
        let members: &[AugmentationKind] = match name {
            SetName::CombinedPlus => &PLUS_MEMBERS,
            SetName::CombinedMinus => &MINUS_MEMBERS,
            SetName::Single(k) => return presets.get(dataset, k).map(AugmentationSet::single),
        };
        let specs = members
            .iter()
            .map(|&k| presets.get(dataset, k))
            .collect::<Result<Vec<_>>>()?;
        Self::combined(name, &specs)
    }

    /// Picks the members of `name` out of a list holding one spec per kind.
    pub fn select(name: SetName, specs: &[AugmentationSpec]) -> Result<Self> {
        let picked = name
            .members()
            .into_iter()
            .map(|k| {
                specs
                    .iter()
                    .find(|s| s.kind() == k)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("no {k} spec for {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match name {
            SetName::Single(_) => Ok(AugmentationSet::single(picked[0])),
            _ => Self::combined(name, &picked),
        }
    }

    pub fn name(&self) -> SetName {
        self.name
    }

    pub fn specs(&self) -> &[AugmentationSpec] {
        &self.specs
    }

    pub fn kinds(&self) -> Vec<AugmentationKind> {
        self.specs.iter().map(|s| s.kind()).collect()
    }
}

/// Applies every corruption of `set` in order. Stage `i` draws from the
/// child stream `rng.derive(i)`, so the output is a pure function of
/// `(img, set, rng seed)`.
pub fn compose(img: &Image, set: &AugmentationSet, rng: &RandomStream) -> Result<Image> {
    if set.specs.is_empty() {
        return Err(Error::contract("cannot compose an empty augmentation set"));
    }
    let mut cur = img.clone();
    for (i, spec) in set.specs.iter().enumerate() {
        let mut stage_rng = rng.derive(i as u64);
        cur = spec.apply(&cur, &mut stage_rng);
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Preset manifests
// ---------------------------------------------------------------------------

/// Corruption presets keyed `dataset/kind`, stored as TOML tables:
///
/// ```toml
/// [cifar10.brightness_plus]
/// kind = "brightness_plus"
/// delta = 0.39
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PresetManifest {
    entries: BTreeMap<String, BTreeMap<AugmentationKind, AugmentationSpec>>,
}

const BUILTIN_PRESETS: &str = include_str!("../presets/corruptions.toml");

impl PresetManifest {
    /// Strengths producing a roughly 10% absolute accuracy drop on the
    /// reference CIFAR-10 and ImageNet classifiers.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PRESETS).expect("builtin presets parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, BTreeMap<String, SpecRecord>> =
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (dataset, table) in raw {
            let mut specs = BTreeMap::new();
            for (key, record) in table {
                let kind: AugmentationKind = key.parse()?;
                if record.kind != kind {
                    return Err(Error::Manifest(format!(
                        "{dataset}/{key} declares kind {}",
                        record.kind
                    )));
                }
                specs.insert(kind, AugmentationSpec::try_from(record)?);
            }
            entries.insert(dataset, specs);
        }
        Ok(PresetManifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        let raw: BTreeMap<&str, BTreeMap<&str, SpecRecord>> = self
            .entries
            .iter()
            .map(|(d, t)| {
                (
                    d.as_str(),
                    t.iter()
                        .map(|(k, s)| (k.key(), SpecRecord::from(*s)))
                        .collect(),
                )
            })
            .collect();
        toml::to_string(&raw).expect("preset manifest serializes")
    }

    pub fn insert(&mut self, dataset: &str, spec: AugmentationSpec) {
        self.entries
            .entry(dataset.to_string())
            .or_default()
            .insert(spec.kind(), spec);
    }

    pub fn get(&self, dataset: &str, kind: AugmentationKind) -> Result<AugmentationSpec> {
        self.entries
            .get(dataset)
            .and_then(|t| t.get(&kind))
            .copied()
            .ok_or_else(|| Error::Manifest(format!("no preset {dataset}/{kind}")))
    }

    /// Looks up a `dataset/kind` name such as `cifar10/brightness_plus`.
    pub fn by_name(&self, name: &str) -> Result<AugmentationSpec> {
        let (dataset, kind) = name
            .split_once('/')
            .ok_or_else(|| Error::Manifest(format!("preset name '{name}' is not dataset/kind")))?;
        self.get(dataset, kind.parse()?)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn specs(&self, dataset: &str) -> Vec<AugmentationSpec> {
        self.entries
            .get(dataset)
            .map(|t| t.values().copied().collect())
            .unwrap_or_default()
    }
}
