//! Makeup layers, the natural palette, compositing and the colorfulness
//! intensity measure.
//!
//! A [`MakeupLayer`] is an opacity blend of one palette color over one soft
//! region mask. Plans (ordered layer lists) serialize to JSON and are the
//! exchange format between the attack, the studio service and stream
//! evaluation.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Rgb};
use crate::seeds;
use crate::synthface::{Region, RegionMaskSet};

/// Maximum cumulative opacity per region.
pub const DEFAULT_OPACITY_CAP: f64 = 0.8;
/// Extra blur radius, in pixels of the attack image, applied to region masks.
pub const DEFAULT_FEATHER: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MakeupError {
    #[error("region {0} has no mask")]
    UnknownRegion(Region),
    #[error("image is {image:?} but masks are {masks:?}")]
    SizeMismatch {
        image: (usize, usize),
        masks: (usize, usize),
    },
    #[error("unknown palette entry '{0}'")]
    UnknownEntry(String),
    #[error("layer color {color:?} does not match palette entry '{entry}'")]
    ColorMismatch { entry: String, color: Rgb },
    #[error("palette entry '{entry}' is not allowed on region {region}")]
    RegionNotAllowed { entry: String, region: Region },
    #[error("opacity {opacity} on region {region} exceeds the cap {cap}")]
    OpacityCap {
        region: Region,
        opacity: f64,
        cap: f64,
    },
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("invalid palette: {0}")]
    InvalidPalette(String),
    #[error("perturbation shapes differ")]
    ShapeMismatch,
    #[error("random makeup reached intensity {achieved:.4} below the required {required:.4}")]
    IntensityNotReached {
        achieved: f64,
        required: f64,
        layers: Vec<MakeupLayer>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Contour,
    Eyeshadow,
    Blush,
    Lipstick,
    Brow,
}

impl Role {
    /// `(saturation, value)` bounds of natural colors for this role.
    fn bounds(self) -> ((f64, f64), (f64, f64)) {
        match self {
            Role::Contour => ((0.15, 0.7), (0.2, 0.85)),
            Role::Eyeshadow => ((0.1, 0.75), (0.15, 0.85)),
            Role::Blush => ((0.2, 0.7), (0.6, 1.0)),
            Role::Lipstick => ((0.3, 0.95), (0.3, 0.95)),
            Role::Brow => ((0.1, 0.7), (0.08, 0.5)),
        }
    }
}

/// Hue in degrees `[0, 360)`, saturation and value of an RGB color.
pub fn rgb_to_hsv(c: Rgb) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d <= 0.0 {
        0.0
    } else if max == c[0] {
        60.0 * ((c[1] - c[2]) / d)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / d + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / d + 4.0)
    };
    (h.rem_euclid(360.0), s, max)
}

/// Browns, reds and neutral pinks within the role's saturation/value bounds.
pub fn is_natural(color: Rgb, role: Role) -> bool {
    if color.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return false;
    }
    let (h, s, v) = rgb_to_hsv(color);
    let hue_ok = h <= 50.0 || h >= 330.0;
    let ((s0, s1), (v0, v1)) = role.bounds();
    hue_ok && (s0..=s1).contains(&s) && (v0..=v1).contains(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub id: String,
    pub color: Rgb,
    pub role: Role,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

impl Default for Palette {
    fn default() -> Self {
        use Region::*;
        let e = |id: &str, color: Rgb, role, regions: &[Region]| PaletteEntry {
            id: id.to_string(),
            color,
            role,
            regions: regions.to_vec(),
        };
        Palette {
            entries: vec![
                e("contour_dark_brown", [0.40, 0.28, 0.22], Role::Contour, &[ForeheadContour, JawContour, NoseSides]),
                e("contour_light_brown", [0.62, 0.46, 0.36], Role::Contour, &[ForeheadContour, JawContour, NoseSides, NoseRidge]),
                e("shadow_brown", [0.45, 0.30, 0.22], Role::Eyeshadow, &[LeftEyelid, RightEyelid]),
                e("shadow_taupe", [0.55, 0.46, 0.42], Role::Eyeshadow, &[LeftEyelid, RightEyelid]),
                e("shadow_bronze", [0.60, 0.42, 0.25], Role::Eyeshadow, &[LeftEyelid, RightEyelid]),
                e("blush_rose", [0.86, 0.52, 0.55], Role::Blush, &[LeftCheek, RightCheek]),
                e("blush_peach", [0.93, 0.62, 0.50], Role::Blush, &[LeftCheek, RightCheek]),
                e("lip_red", [0.70, 0.12, 0.16], Role::Lipstick, &[Lips]),
                e("lip_nude", [0.72, 0.45, 0.40], Role::Lipstick, &[Lips]),
                e("lip_berry", [0.55, 0.15, 0.28], Role::Lipstick, &[Lips]),
                e("brow_dark", [0.22, 0.15, 0.12], Role::Brow, &[LeftBrow, RightBrow]),
                e("brow_soft", [0.38, 0.27, 0.20], Role::Brow, &[LeftBrow, RightBrow]),
            ],
        }
    }
}

impl Palette {
    pub fn validate(&self) -> Result<(), MakeupError> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(MakeupError::InvalidPalette(format!("duplicate id '{}'", e.id)));
            }
            if e.regions.is_empty() {
                return Err(MakeupError::InvalidPalette(format!("'{}' lists no regions", e.id)));
            }
            if !is_natural(e.color, e.role) {
                return Err(MakeupError::InvalidPalette(format!(
                    "'{}' color {:?} is not a natural {:?} color",
                    e.id, e.color, e.role
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Option<&PaletteEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Entries usable on `region`, in palette order.
    pub fn allowed(&self, region: Region) -> impl Iterator<Item = &PaletteEntry> {
        self.entries.iter().filter(move |e| e.regions.contains(&region))
    }

    /// Checks a single layer against the palette and the opacity cap.
    pub fn validate_layer(&self, layer: &MakeupLayer, cap: f64) -> Result<(), MakeupError> {
        if !(0.0..=1.0).contains(&layer.opacity) {
            return Err(MakeupError::InvalidLayer(format!("opacity {}", layer.opacity)));
        }
        if !(layer.feather >= 0.0 && layer.feather.is_finite()) {
            return Err(MakeupError::InvalidLayer(format!("feather {}", layer.feather)));
        }
        let entry = self
            .entry(&layer.entry_id)
            .ok_or_else(|| MakeupError::UnknownEntry(layer.entry_id.clone()))?;
        if entry.color != layer.color {
            return Err(MakeupError::ColorMismatch {
                entry: entry.id.clone(),
                color: layer.color,
            });
        }
        if !entry.regions.contains(&layer.region) {
            return Err(MakeupError::RegionNotAllowed {
                entry: entry.id.clone(),
                region: layer.region,
            });
        }
        if layer.opacity > cap + 1e-9 {
            return Err(MakeupError::OpacityCap {
                region: layer.region,
                opacity: layer.opacity,
                cap,
            });
        }
        Ok(())
    }

    /// Validates every layer and the cumulative opacity per region.
    pub fn validate_plan(&self, layers: &[MakeupLayer], cap: f64) -> Result<(), MakeupError> {
        for l in layers {
            self.validate_layer(l, cap)?;
        }
        for (region, opacity) in opacity_ledger(layers) {
            if opacity > cap + 1e-9 {
                return Err(MakeupError::OpacityCap { region, opacity, cap });
            }
        }
        Ok(())
    }
}

/// Cumulative opacity per region.
pub fn opacity_ledger(layers: &[MakeupLayer]) -> BTreeMap<Region, f64> {
    let mut out = BTreeMap::new();
    for l in layers {
        *out.entry(l.region).or_insert(0.0) += l.opacity;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakeupLayer {
    pub region: Region,
    pub entry_id: String,
    pub color: Rgb,
    pub opacity: f64,
    #[serde(default)]
    pub feather: f64,
}

impl MakeupLayer {
    pub fn from_entry(entry: &PaletteEntry, region: Region, opacity: f64, feather: f64) -> Self {
        Self {
            region,
            entry_id: entry.id.clone(),
            color: entry.color,
            opacity,
            feather,
        }
    }
}

/// A makeup recipe as exported by the attack and the studio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakeupPlan {
    pub layers: Vec<MakeupLayer>,
    #[serde(default)]
    pub dodged: Option<bool>,
    #[serde(default)]
    pub distance: Option<f64>,
    #[serde(default)]
    pub intensity: Option<f64>,
}

impl MakeupPlan {
    pub fn from_layers(layers: Vec<MakeupLayer>) -> Self {
        Self {
            layers,
            dodged: None,
            distance: None,
            intensity: None,
        }
    }
}

/// Blends one layer: `out = img * (1 - a*m) + color * a*m`, clamped to `[0, 1]`.
pub fn apply_layer(
    image: &Image,
    layer: &MakeupLayer,
    masks: &RegionMaskSet,
) -> Result<Image, MakeupError> {
    let mut out = image.clone();
    apply_layer_in_place(&mut out, layer, masks)?;
    Ok(out)
}

fn apply_layer_in_place(
    image: &mut Image,
    layer: &MakeupLayer,
    masks: &RegionMaskSet,
) -> Result<(), MakeupError> {
    if (image.width(), image.height()) != (masks.width(), masks.height()) {
        return Err(MakeupError::SizeMismatch {
            image: (image.width(), image.height()),
            masks: (masks.width(), masks.height()),
        });
    }
    let mask = masks
        .get(layer.region)
        .ok_or(MakeupError::UnknownRegion(layer.region))?;
    if layer.opacity <= 0.0 {
        return Ok(());
    }
    let radius = layer.feather.round().max(0.0) as usize;
    let feathered;
    let mask = if radius > 0 {
        feathered = mask.feathered(radius, image.width(), image.height());
        &feathered
    } else {
        mask
    };
    let w = image.width();
    let data = image.data_mut();
    for (x, y, m) in mask.iter() {
        let a = layer.opacity * m;
        let base = (y * w + x) * 3;
        for c in 0..3 {
            let v = data[base + c];
            data[base + c] = (v * (1.0 - a) + layer.color[c] * a).clamp(0.0, 1.0);
        }
    }
    Ok(())
}

/// Applies layers in order.
pub fn composite(
    image: &Image,
    layers: &[MakeupLayer],
    masks: &RegionMaskSet,
) -> Result<Image, MakeupError> {
    let mut out = image.clone();
    for l in layers {
        apply_layer_in_place(&mut out, l, masks)?;
    }
    Ok(out)
}

/// Colorfulness of a makeup perturbation, in the 0-255 convention.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct IntensityScore {
    pub value: f64,
}

/// Hasler-Suesstrunk colorfulness of a signed difference image given in
/// `[0, 1]` units, after scaling by `scale` (255 for the usual convention).
pub fn colorfulness(perturbation: &Image, scale: f64) -> IntensityScore {
    let n = (perturbation.width() * perturbation.height()) as f64;
    if n == 0.0 {
        return IntensityScore { value: 0.0 };
    }
    let (mut s_rg, mut s_yb, mut q_rg, mut q_yb) = (0.0, 0.0, 0.0, 0.0);
    for px in perturbation.data().chunks_exact(3) {
        let (r, g, b) = (px[0] * scale, px[1] * scale, px[2] * scale);
        let rg = r - g;
        let yb = 0.5 * (r + g) - b;
        s_rg += rg;
        s_yb += yb;
        q_rg += rg * rg;
        q_yb += yb * yb;
    }
    let (m_rg, m_yb) = (s_rg / n, s_yb / n);
    let var_rg = (q_rg / n - m_rg * m_rg).max(0.0);
    let var_yb = (q_yb / n - m_yb * m_yb).max(0.0);
    let value = (var_rg + var_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt();
    IntensityScore { value }
}

/// Colorfulness of `with_makeup - without`.
pub fn intensity(with_makeup: &Image, without: &Image) -> Result<IntensityScore, MakeupError> {
    let d = with_makeup
        .diff(without)
        .map_err(|_| MakeupError::ShapeMismatch)?;
    Ok(colorfulness(&d, 255.0))
}

/// Knobs of the random-makeup baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMakeupConfig {
    pub min_layers: usize,
    pub max_layers: usize,
    pub opacity_step: f64,
    pub opacity_cap: f64,
    pub retries: usize,
    pub feather: f64,
}

impl Default for RandomMakeupConfig {
    fn default() -> Self {
        Self {
            min_layers: 2,
            max_layers: 5,
            opacity_step: 0.1,
            opacity_cap: DEFAULT_OPACITY_CAP,
            retries: 16,
            feather: DEFAULT_FEATHER,
        }
    }
}

/// Draws random palette makeup whose intensity reaches `min_intensity`.
///
/// Each draw picks distinct regions uniformly, a uniform allowed color per
/// region and a uniform opacity on the step grid. After `retries` failed
/// draws the strongest one has its opacities raised step by step up to the
/// cap.
pub fn random_makeup(
    palette: &Palette,
    masks: &RegionMaskSet,
    seed: u64,
    min_intensity: IntensityScore,
    base_image: &Image,
    config: &RandomMakeupConfig,
) -> Result<Vec<MakeupLayer>, MakeupError> {
    let regions: Vec<Region> = masks
        .regions()
        .filter(|r| palette.allowed(*r).next().is_some())
        .collect();
    if regions.is_empty() || config.min_layers == 0 || config.max_layers < config.min_layers {
        return Err(MakeupError::InvalidLayer("no drawable regions".into()));
    }
    let steps = ((config.opacity_cap / config.opacity_step) + 1e-9).floor().max(1.0) as usize;
    let mut rng = seeds::rng(seed);
    let score = |layers: &[MakeupLayer]| -> Result<f64, MakeupError> {
        let img = composite(base_image, layers, masks)?;
        Ok(intensity(&img, base_image)?.value)
    };
    let mut best: Option<(f64, Vec<MakeupLayer>)> = None;
    for _ in 0..config.retries.max(1) {
        let n = rng
            .random_range(config.min_layers..=config.max_layers)
            .min(regions.len());
        let mut pool = regions.clone();
        pool.shuffle(&mut rng);
        let layers: Vec<MakeupLayer> = pool[..n]
            .iter()
            .map(|&region| {
                let options: Vec<&PaletteEntry> = palette.allowed(region).collect();
                let entry = options.choose(&mut rng).expect("region has entries");
                let k = rng.random_range(1..=steps);
                MakeupLayer::from_entry(entry, region, k as f64 * config.opacity_step, config.feather)
            })
            .collect();
        let s = score(&layers)?;
        if s >= min_intensity.value {
            return Ok(layers);
        }
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, layers));
        }
    }
    let (mut achieved, mut layers) = best.expect("at least one draw");
    loop {
        let mut raised = false;
        for l in &mut layers {
            let next = ((l.opacity + config.opacity_step) * 1e9).round() / 1e9;
            if next <= config.opacity_cap + 1e-9 {
                l.opacity = next;
                raised = true;
            }
        }
        if !raised {
            break;
        }
        achieved = score(&layers)?;
        if achieved >= min_intensity.value {
            return Ok(layers);
        }
    }
    Err(MakeupError::IntensityNotReached {
        achieved,
        required: min_intensity.value,
        layers,
    })
}
