//! The offline attack: gradient heatmaps, region ranking and a greedy
//! palette search that stops once the surrogate no longer matches the
//! attacker.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{input_gradient_with, EmbedderError, Embedding, EmbeddingModel};
use crate::frpipeline::cosine_distance;
use crate::image::{gray_png, Image, ImageError};
use crate::makeup::{
    apply_layer, composite, intensity, opacity_ledger, MakeupError, MakeupLayer, MakeupPlan, Palette,
    DEFAULT_FEATHER, DEFAULT_OPACITY_CAP,
};
use crate::seeds;
use crate::synthface::{Region, RegionMaskSet};

/// Surrogate cosine distance at which the attacker counts as dodged.
pub const DEFAULT_THRESHOLD: f64 = 0.368;
pub const DEFAULT_MAX_ITERATIONS: usize = 24;
pub const DEFAULT_OPACITY_STEP: f64 = 0.1;
/// Side of the box filter applied to the raw saliency.
pub const SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error(transparent)]
    Makeup(#[from] MakeupError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid context: {0}")]
    InvalidContext(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("every region is at its opacity cap")]
    Exhausted,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub threshold: f64,
    pub max_iterations: usize,
    pub opacity_step: f64,
    pub opacity_cap: f64,
    pub feather: f64,
    /// Palette entries tried per region; `None` tries all allowed entries.
    #[serde(default)]
    pub candidates_per_region: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            opacity_step: DEFAULT_OPACITY_STEP,
            opacity_cap: DEFAULT_OPACITY_CAP,
            feather: DEFAULT_FEATHER,
            candidates_per_region: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.threshold >= 0.0 && self.threshold < 2.0) {
            return Err(AttackError::InvalidConfig(format!("threshold {}", self.threshold)));
        }
        if self.max_iterations == 0 {
            return Err(AttackError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.opacity_step > 0.0 && self.opacity_step <= self.opacity_cap && self.opacity_cap <= 1.0) {
            return Err(AttackError::InvalidConfig("opacity step/cap".into()));
        }
        if !(self.feather >= 0.0) {
            return Err(AttackError::InvalidConfig("feather".into()));
        }
        Ok(())
    }
}

/// Everything the attacker holds: the surrogate, their photos, the
/// negative identity and the makeup regions of the base photo.
#[derive(Debug, Clone)]
pub struct AttackContext {
    surrogate: Arc<EmbeddingModel>,
    base: Image,
    positives: Vec<Image>,
    negatives: Vec<Image>,
    negative_index: usize,
    masks: RegionMaskSet,
    palette: Palette,
    positive_embeddings: Vec<Embedding>,
    reference: Embedding,
    negative_embedding: Embedding,
}

impl AttackContext {
    /// Builds the context, drawing the negative uniformly from `negatives`
    /// with `seed`.
    pub fn new(
        surrogate: Arc<EmbeddingModel>,
        base: Image,
        positives: Vec<Image>,
        negatives: Vec<Image>,
        masks: RegionMaskSet,
        palette: Palette,
        seed: u64,
    ) -> Result<Self, AttackError> {
        if negatives.is_empty() {
            return Err(AttackError::InvalidContext("no negative images".into()));
        }
        let idx = seeds::rng(seeds::derive(seed, "negative", 0)).random_range(0..negatives.len());
        Self::with_negative(surrogate, base, positives, negatives, idx, masks, palette)
    }

    pub fn with_negative(
        surrogate: Arc<EmbeddingModel>,
        base: Image,
        positives: Vec<Image>,
        negatives: Vec<Image>,
        negative_index: usize,
        masks: RegionMaskSet,
        palette: Palette,
    ) -> Result<Self, AttackError> {
        if positives.is_empty() {
            return Err(AttackError::InvalidContext("the positive set X is empty".into()));
        }
        if negative_index >= negatives.len() {
            return Err(AttackError::InvalidContext("negative index out of range".into()));
        }
        if (masks.width(), masks.height()) != (base.width(), base.height()) {
            return Err(AttackError::InvalidContext("masks do not match the base image".into()));
        }
        palette.validate()?;
        let positive_embeddings = positives
            .iter()
            .map(|p| surrogate.embed(p))
            .collect::<Result<Vec<_>, _>>()?;
        let reference = Embedding::normalized_mean(&positive_embeddings)
            .ok_or_else(|| AttackError::InvalidContext("positive embeddings cancel out".into()))?;
        let negative_embedding = surrogate.embed(&negatives[negative_index])?;
        surrogate.embed(&base)?;
        Ok(Self {
            surrogate,
            base,
            positives,
            negatives,
            negative_index,
            masks,
            palette,
            positive_embeddings,
            reference,
            negative_embedding,
        })
    }

    pub fn surrogate(&self) -> &EmbeddingModel {
        &self.surrogate
    }

    pub fn base(&self) -> &Image {
        &self.base
    }

    pub fn positives(&self) -> &[Image] {
        &self.positives
    }

    pub fn negative(&self) -> &Image {
        &self.negatives[self.negative_index]
    }

    pub fn negative_index(&self) -> usize {
        self.negative_index
    }

    pub fn masks(&self) -> &RegionMaskSet {
        &self.masks
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    /// Normalized mean embedding of the positive set.
    pub fn reference(&self) -> &Embedding {
        &self.reference
    }

    /// `1 - cos(M_s(X), M_s(image))`.
    pub fn distance(&self, image: &Image) -> Result<f64, AttackError> {
        let e = self.surrogate.embed(image)?;
        Ok(cosine_distance(&self.reference.0, &e.0).expect("unit embeddings"))
    }
}

/// Normalized per-pixel saliency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Smoothed saliency range before min-max normalization.
    pub raw_min: f64,
    pub raw_max: f64,
}

impl Heatmap {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        gray_png(self.width, self.height, &self.values)
    }
}

/// Mean over the `window x window` neighbourhood clipped to the image.
fn box_smooth(values: &[f64], width: usize, height: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    let mut horiz = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(width - 1));
            let s: f64 = values[y * width + x0..=y * width + x1].iter().sum();
            horiz[y * width + x] = s / (x1 - x0 + 1) as f64;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(height - 1));
        for x in 0..width {
            let s: f64 = (y0..=y1).map(|yy| horiz[yy * width + x]).sum();
            out[y * width + x] = s / (y1 - y0 + 1) as f64;
        }
    }
    out
}

/// Builds a heatmap from an `[h, w, 3]` gradient: channel L2 norm, box
/// smoothing and min-max normalization (a constant map becomes zero).
pub fn heatmap_from_gradient(grad: &[f64], width: usize, height: usize) -> Heatmap {
    let mag: Vec<f64> = grad
        .chunks_exact(3)
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .collect();
    let smooth = box_smooth(&mag, width, height, SMOOTHING_WINDOW);
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        smooth.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; smooth.len()]
    };
    Heatmap {
        width,
        height,
        values,
        raw_min: lo,
        raw_max: hi,
    }
}

/// Saliency of the attack loss on `image`.
pub fn heatmap(ctx: &AttackContext, image: &Image) -> Result<Heatmap, AttackError> {
    let g = input_gradient_with(
        &ctx.surrogate,
        image,
        &ctx.positive_embeddings,
        &ctx.negative_embedding,
    )?;
    Ok(heatmap_from_gradient(g.data(), image.width(), image.height()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    /// Descending by score; ties by region name.
    pub ranked: Vec<(Region, f64)>,
    /// Regions whose mask is empty.
    pub excluded: Vec<Region>,
}

/// Mask-weighted mean heatmap per region.
pub fn region_scores(heatmap: &Heatmap, masks: &RegionMaskSet) -> RegionScores {
    let mut ranked = Vec::new();
    let mut excluded = Vec::new();
    for (region, mask) in masks.iter() {
        let (mut num, mut den) = (0.0, 0.0);
        for (x, y, m) in mask.iter() {
            if x < heatmap.width && y < heatmap.height {
                num += heatmap.values[y * heatmap.width + x] * m;
                den += m;
            }
        }
        if den > 0.0 {
            ranked.push((region, num / den));
        } else {
            excluded.push(region);
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name().cmp(b.0.name())));
    RegionScores { ranked, excluded }
}

/// Current image plus the layers that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    pub image: Image,
    pub layers: Vec<MakeupLayer>,
}

impl AttackState {
    pub fn new(base: &Image) -> Self {
        Self {
            image: base.clone(),
            layers: Vec::new(),
        }
    }

    pub fn ledger(&self) -> BTreeMap<Region, f64> {
        opacity_ledger(&self.layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entry_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub region: Region,
    pub entry_id: String,
    /// Cumulative opacity on the region after this step.
    pub opacity: f64,
    pub distance: f64,
    pub candidates: Vec<Candidate>,
}

fn round9(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// One greedy step on the highest-ranked region still below its cap. The
/// region holds one layer whose opacity grows by the step; every allowed
/// color is tried at the new opacity.
pub fn attack_step(
    state: &AttackState,
    ctx: &AttackContext,
    config: &AttackConfig,
) -> Result<(AttackState, StepRecord), AttackError> {
    let hm = heatmap(ctx, &state.image)?;
    step_with_heatmap(state, ctx, config, &hm)
}

pub(crate) fn step_with_heatmap(
    state: &AttackState,
    ctx: &AttackContext,
    config: &AttackConfig,
    hm: &Heatmap,
) -> Result<(AttackState, StepRecord), AttackError> {
    let ledger = state.ledger();
    let scores = region_scores(hm, &ctx.masks);
    let region = scores
        .ranked
        .iter()
        .map(|(r, _)| *r)
        .find(|r| {
            let used = ledger.get(r).copied().unwrap_or(0.0);
            used + config.opacity_step <= config.opacity_cap + 1e-9
                && ctx.palette.allowed(*r).next().is_some()
        })
        .ok_or(AttackError::Exhausted)?;
    let opacity = round9(ledger.get(&region).copied().unwrap_or(0.0) + config.opacity_step);
    // The region keeps a single layer: earlier layers on it are folded into
    // the candidate, which takes the place of the first of them.
    let slot = state.layers.iter().position(|l| l.region == region);
    let (prefix_image, prefix, suffix) = match slot {
        Some(i) => {
            let prefix = state.layers[..i].to_vec();
            let suffix: Vec<MakeupLayer> = state.layers[i..]
                .iter()
                .filter(|l| l.region != region)
                .cloned()
                .collect();
            (composite(&ctx.base, &prefix, &ctx.masks)?, prefix, suffix)
        }
        None => (state.image.clone(), state.layers.clone(), Vec::new()),
    };
    let limit = config.candidates_per_region.unwrap_or(usize::MAX);
    let mut best: Option<(f64, MakeupLayer, Image)> = None;
    let mut candidates = Vec::new();
    for entry in ctx.palette.allowed(region).take(limit) {
        let layer = MakeupLayer::from_entry(entry, region, opacity, config.feather);
        let mut img = apply_layer(&prefix_image, &layer, &ctx.masks)?;
        if !suffix.is_empty() {
            img = composite(&img, &suffix, &ctx.masks)?;
        }
        let d = ctx.distance(&img)?;
        candidates.push(Candidate {
            entry_id: entry.id.clone(),
            distance: d,
        });
        if best.as_ref().is_none_or(|(bd, _, _)| d > *bd) {
            best = Some((d, layer, img));
        }
    }
    let (distance, layer, image) = best.ok_or(AttackError::Exhausted)?;
    let entry_id = layer.entry_id.clone();
    let mut layers = prefix;
    layers.push(layer);
    layers.extend(suffix);
    Ok((
        AttackState { image, layers },
        StepRecord {
            iteration: 0,
            region,
            entry_id,
            opacity,
            distance,
            candidates,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Dodged,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub layers: Vec<MakeupLayer>,
    pub trace: Vec<StepRecord>,
    pub outcome: Outcome,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub threshold: f64,
    pub intensity: f64,
    pub negative_index: usize,
    #[serde(skip)]
    pub final_image: Option<Image>,
    /// Heatmap computed before each step.
    #[serde(skip)]
    pub heatmaps: Vec<Heatmap>,
}

impl AttackResult {
    pub fn to_json(&self) -> Result<String, AttackError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn plan(&self) -> MakeupPlan {
        MakeupPlan {
            layers: self.layers.clone(),
            dodged: Some(self.outcome == Outcome::Dodged),
            distance: Some(self.final_distance),
            intensity: Some(self.intensity),
        }
    }

    /// Writes `result.json`, `plan.json`, `final.png` and one grayscale
    /// `heatmap_NN.png` per iteration.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), AttackError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("result.json"), self.to_json()?)?;
        std::fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&self.plan())?)?;
        if let Some(img) = &self.final_image {
            std::fs::write(dir.join("final.png"), img.to_png()?)?;
        }
        for (i, h) in self.heatmaps.iter().enumerate() {
            std::fs::write(dir.join(format!("heatmap_{i:02}.png")), h.to_png()?)?;
        }
        Ok(())
    }
}

/// Repeats heatmap and greedy step until the surrogate distance reaches the
/// threshold or the budget runs out.
pub fn run_attack(ctx: &AttackContext, config: &AttackConfig) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let initial_distance = ctx.distance(&ctx.base)?;
    let mut state = AttackState::new(&ctx.base);
    let mut distance = initial_distance;
    let mut trace = Vec::new();
    let mut heatmaps = Vec::new();
    let mut outcome = if distance >= config.threshold {
        Outcome::Dodged
    } else {
        Outcome::BudgetExhausted
    };
    if outcome != Outcome::Dodged {
        for iteration in 0..config.max_iterations {
            let hm = heatmap(ctx, &state.image)?;
            let step = step_with_heatmap(&state, ctx, config, &hm);
            heatmaps.push(hm);
            let (next, mut record) = match step {
                Ok(s) => s,
                Err(AttackError::Exhausted) => break,
                Err(e) => return Err(e),
            };
            record.iteration = iteration;
            distance = record.distance;
            state = next;
            trace.push(record);
            if distance >= config.threshold {
                outcome = Outcome::Dodged;
                break;
            }
        }
    }
    let intensity = intensity(&state.image, &ctx.base)?.value;
    Ok(AttackResult {
        layers: state.layers,
        trace,
        outcome,
        initial_distance,
        final_distance: distance,
        threshold: config.threshold,
        intensity,
        negative_index: ctx.negative_index,
        final_image: Some(state.image),
        heatmaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gradient_gives_zero_heatmap() {
        let h = heatmap_from_gradient(&vec![0.3; 8 * 8 * 3], 8, 8);
        assert!(h.is_zero());
    }

    #[test]
    fn heatmap_peaks_at_one() {
        let mut g = vec![0.0; 16 * 16 * 3];
        g[(5 * 16 + 7) * 3] = 2.0;
        let h = heatmap_from_gradient(&g, 16, 16);
        let max = h.values.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn box_smooth_preserves_constants() {
        let s = box_smooth(&[2.0; 30], 6, 5, 5);
        assert!(s.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
