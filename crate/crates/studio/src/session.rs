//! One interactive attack session: the attacker's context plus a layer
//! stack that is always replayable over the base photo.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use facedodge::attack::{attack_step, heatmap, region_scores, AttackConfig, AttackContext, AttackState, RegionScores, StepRecord};
use facedodge::image::Image;
use facedodge::makeup::{apply_layer, intensity, MakeupLayer, MakeupPlan};
use facedodge::synthface::Region;
use serde::{Deserialize, Serialize};

use crate::StudioError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub identity: Option<String>,
    pub distance: f64,
    pub threshold: f64,
    pub dodged: bool,
    pub ledger: BTreeMap<Region, f64>,
    pub intensity: f64,
    pub layers: Vec<MakeupLayer>,
    pub negative_index: usize,
    pub created: u64,
    pub updated: u64,
}

/// Heatmap of the current image with its per-region scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapView {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub raw_min: f64,
    pub raw_max: f64,
    pub scores: RegionScores,
    /// Grayscale PNG, base64.
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub plan: MakeupPlan,
    /// Current image as PNG, base64.
    pub image_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    AddLayer { layer: MakeupLayer },
    Undo,
    AutoStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResult {
    pub state: SessionSummary,
    /// Present for `auto_step`.
    pub step: Option<StepRecord>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub(crate) fn b64(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    identity: Option<String>,
    ctx: AttackContext,
    config: AttackConfig,
    state: AttackState,
    distance: f64,
    /// States before each applied action, for undo.
    history: Vec<(AttackState, f64)>,
    created: u64,
    updated: u64,
}

impl Session {
    pub fn new(
        id: String,
        identity: Option<String>,
        ctx: AttackContext,
        config: AttackConfig,
    ) -> Result<Self, StudioError> {
        let distance = ctx.distance(ctx.base())?;
        let state = AttackState::new(ctx.base());
        let t = now();
        Ok(Self {
            id,
            identity,
            ctx,
            config,
            state,
            distance,
            history: Vec::new(),
            created: t,
            updated: t,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn context(&self) -> &AttackContext {
        &self.ctx
    }

    pub fn state(&self) -> &AttackState {
        &self.state
    }

    pub fn image(&self) -> &Image {
        &self.state.image
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn dodged(&self) -> bool {
        self.distance >= self.config.threshold
    }

    pub fn summary(&self) -> Result<SessionSummary, StudioError> {
        Ok(SessionSummary {
            id: self.id.clone(),
            identity: self.identity.clone(),
            distance: self.distance,
            threshold: self.config.threshold,
            dodged: self.dodged(),
            ledger: self.state.ledger(),
            intensity: intensity(&self.state.image, self.ctx.base())
                .map_err(StudioError::RejectedLayer)?
                .value,
            layers: self.state.layers.clone(),
            negative_index: self.ctx.negative_index(),
            created: self.created,
            updated: self.updated,
        })
    }

    /// Applies an action; on error the session is left untouched.
    pub fn apply(&mut self, action: Action) -> Result<ActionResult, StudioError> {
        let step = match action {
            Action::AddLayer { layer } => {
                self.add_layer(layer)?;
                None
            }
            Action::Undo => {
                self.undo()?;
                None
            }
            Action::AutoStep => Some(self.auto_step()?),
        };
        Ok(ActionResult {
            state: self.summary()?,
            step,
        })
    }

    pub fn add_layer(&mut self, layer: MakeupLayer) -> Result<(), StudioError> {
        let mut layers = self.state.layers.clone();
        layers.push(layer);
        self.ctx.palette().validate_plan(&layers, self.config.opacity_cap)?;
        let layer = layers.last().expect("just pushed");
        let image = apply_layer(&self.state.image, layer, self.ctx.masks())?;
        let distance = self.ctx.distance(&image)?;
        self.commit(AttackState { image, layers }, distance);
        Ok(())
    }

    /// Restores the state before the most recent action.
    pub fn undo(&mut self) -> Result<(), StudioError> {
        let (state, distance) = self.history.pop().ok_or(StudioError::EmptyHistory)?;
        self.state = state;
        self.distance = distance;
        self.updated = now();
        Ok(())
    }

    pub fn auto_step(&mut self) -> Result<StepRecord, StudioError> {
        let (state, record) = attack_step(&self.state, &self.ctx, &self.config)?;
        let distance = record.distance;
        self.commit(state, distance);
        Ok(record)
    }

    fn commit(&mut self, state: AttackState, distance: f64) {
        let previous = std::mem::replace(&mut self.state, state);
        self.history.push((previous, self.distance));
        self.distance = distance;
        self.updated = now();
    }

    pub fn heatmap(&self) -> Result<HeatmapView, StudioError> {
        let hm = heatmap(&self.ctx, &self.state.image)?;
        let scores = region_scores(&hm, self.ctx.masks());
        let png = b64(&hm.to_png()?);
        Ok(HeatmapView {
            width: hm.width,
            height: hm.height,
            values: hm.values,
            raw_min: hm.raw_min,
            raw_max: hm.raw_max,
            scores,
            png,
        })
    }

    pub fn export(&self) -> Result<Export, StudioError> {
        let summary = self.summary()?;
        let plan = MakeupPlan {
            layers: self.state.layers.clone(),
            dodged: Some(summary.dodged),
            distance: Some(self.distance),
            intensity: Some(summary.intensity),
        };
        Ok(Export {
            plan,
            image_png: b64(&self.state.image.to_png()?),
        })
    }
}
