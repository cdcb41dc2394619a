//! Session-oriented HTTP service for crafting makeup attacks by hand.
//!
//! A session holds one attacker's context (surrogate, photos, negative,
//! region masks) and a stack of makeup layers. Clients add or undo layers,
//! ask for a greedy suggestion, inspect the saliency heatmap and export the
//! resulting plan. Every score is computed by the same library calls the
//! batch attack uses.
//!
//! Endpoints:
//!
//! | method | path                      | body / response                       |
//! |--------|---------------------------|---------------------------------------|
//! | POST   | `/sessions`               | [`CreateSession`] → 201 [`SessionSummary`] |
//! | GET    | `/sessions/{id}`          | [`SessionSummary`]                    |
//! | POST   | `/sessions/{id}/actions`  | [`Action`] → [`ActionResult`]         |
//! | GET    | `/sessions/{id}/heatmap`  | [`HeatmapView`]                       |
//! | GET    | `/sessions/{id}/export`   | [`Export`]                            |

mod error;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use facedodge::attack::AttackContext;
use facedodge::embedder::EmbeddingModel;
use facedodge::frpipeline::align;
use facedodge::harness::{attack_context, negative_photos, population, ExperimentConfig, Population};
use facedodge::image::{Image, ImageError};
use facedodge::seeds;
use facedodge::synthface::{region_masks, FaceLandmarks};
use serde::{Deserialize, Serialize};

pub use error::StudioError;
pub use session::{Action, ActionResult, Export, HeatmapView, Session, SessionSummary};

/// Where a session's photos come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CreateSession {
    /// A participant of the configured synthetic population, e.g. `P01`.
    Synthetic { identity: String },
    /// Raw photos (base64 PNG) with one landmark set per photo. The first
    /// photo is the one made up; the rest form the positive set.
    Upload {
        images: Vec<String>,
        #[serde(default)]
        landmarks: Option<Vec<FaceLandmarks>>,
    },
}

pub struct Studio {
    config: ExperimentConfig,
    population: Population,
    surrogate: Arc<EmbeddingModel>,
    negatives: Vec<Image>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl Studio {
    pub fn new(config: ExperimentConfig, surrogate: Arc<EmbeddingModel>) -> Result<Self, StudioError> {
        config.validate()?;
        let population = population(&config);
        let negatives = negative_photos(&config, &population, surrogate.input_size())?;
        Ok(Self {
            config,
            population,
            surrogate,
            negatives,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn create_session(&self, request: CreateSession) -> Result<SessionSummary, StudioError> {
        let id = format!("s{:04}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let (identity, ctx) = match request {
            CreateSession::Synthetic { identity } => {
                let person = self
                    .population
                    .participants
                    .iter()
                    .find(|p| p.id == identity)
                    .ok_or_else(|| StudioError::UnknownIdentity(identity.clone()))?;
                let ctx = attack_context(&self.config, &self.population, person, self.surrogate.clone())?;
                (Some(identity), ctx)
            }
            CreateSession::Upload { images, landmarks } => (None, self.upload_context(&id, &images, landmarks)?),
        };
        let session = Session::new(id.clone(), identity, ctx, self.config.attack.clone())?;
        let summary = session.summary()?;
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(summary)
    }

    fn upload_context(
        &self,
        id: &str,
        images: &[String],
        landmarks: Option<Vec<FaceLandmarks>>,
    ) -> Result<AttackContext, StudioError> {
        let landmarks = landmarks.ok_or_else(|| {
            StudioError::InvalidUpload("landmarks are required: one landmark set per uploaded photo".into())
        })?;
        if images.len() < 2 {
            return Err(StudioError::InvalidUpload(
                "at least two photos are needed: the base photo and one positive".into(),
            ));
        }
        if landmarks.len() != images.len() {
            return Err(StudioError::InvalidUpload(format!(
                "{} photos but {} landmark sets",
                images.len(),
                landmarks.len()
            )));
        }
        let (h, w) = self.surrogate.input_size();
        let mut aligned = Vec::with_capacity(images.len());
        for (i, (data, lm)) in images.iter().zip(&landmarks).enumerate() {
            use base64::Engine;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(data)
                .map_err(|e| StudioError::InvalidUpload(format!("photo {i}: {e}")))?;
            let image = Image::from_png(&bytes).map_err(|e: ImageError| StudioError::InvalidUpload(format!("photo {i}: {e}")))?;
            lm.validate(image.width(), image.height())
                .map_err(|e| StudioError::InvalidUpload(format!("landmarks {i}: {e}")))?;
            aligned.push(align(&image, lm, w, h).map_err(|e| StudioError::InvalidUpload(format!("photo {i}: {e}")))?);
        }
        let (base, base_lm) = aligned.remove(0);
        let masks = region_masks(&base_lm, w, h)?;
        let positives = aligned.into_iter().map(|(i, _)| i).collect();
        let seed = seeds::derive(self.config.seeds.attack, &format!("upload/{id}"), 0);
        Ok(AttackContext::new(
            self.surrogate.clone(),
            base,
            positives,
            self.negatives.clone(),
            masks,
            self.config.palette.clone(),
            seed,
        )?)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, StudioError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| StudioError::SessionNotFound(id.to_string()))
    }

    /// Runs `f` on one session. Calls on the same session are serialized.
    pub fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, StudioError>,
    ) -> Result<T, StudioError> {
        let session = self.session(id)?;
        let mut guard = session.lock().expect("session poisoned");
        f(&mut guard)
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StudioError> + Send + 'static,
) -> Result<T, StudioError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StudioError::Worker(e.to_string()))?
}

async fn create(
    State(studio): State<Arc<Studio>>,
    Json(request): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionSummary>), StudioError> {
    let summary = blocking(move || studio.create_session(request)).await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn show(
    State(studio): State<Arc<Studio>>,
    Path(id): Path<String>,
) -> Result<Json<SessionSummary>, StudioError> {
    blocking(move || studio.with_session(&id, |s| s.summary())).await.map(Json)
}

async fn act(
    State(studio): State<Arc<Studio>>,
    Path(id): Path<String>,
    Json(action): Json<Action>,
) -> Result<Json<ActionResult>, StudioError> {
    blocking(move || studio.with_session(&id, |s| s.apply(action))).await.map(Json)
}

async fn heatmap(
    State(studio): State<Arc<Studio>>,
    Path(id): Path<String>,
) -> Result<Json<HeatmapView>, StudioError> {
    blocking(move || studio.with_session(&id, |s| s.heatmap())).await.map(Json)
}

async fn export(
    State(studio): State<Arc<Studio>>,
    Path(id): Path<String>,
) -> Result<Json<Export>, StudioError> {
    blocking(move || studio.with_session(&id, |s| s.export())).await.map(Json)
}

pub fn router(studio: Arc<Studio>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/actions", post(act))
        .route("/sessions/{id}/heatmap", get(heatmap))
        .route("/sessions/{id}/export", get(export))
        .with_state(studio)
}

/// Serves the studio until the process is stopped.
pub async fn serve(studio: Arc<Studio>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(studio)).await
}
