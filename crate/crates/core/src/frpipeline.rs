//! The surveillance face-recognition pipeline: detection stub, alignment,
//! gallery matching, persistency alarms and stream metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbedderError, Embedding, EmbeddingModel};
use crate::image::Image;
use crate::synthface::{BoundingBox, FaceLandmarks, Frame, FrameStream, Point};

/// Smallest accepted face, in pixels per side.
pub const MIN_FACE_SIZE: f64 = 15.0;
/// Cosine-distance threshold of the deployed system.
pub const IDENTIFICATION_THRESHOLD: f64 = 0.42;
/// Recognized frames needed before an alarm is raised.
pub const PERSISTENCY_THRESHOLD: usize = 7;

/// Canonical left eye, right eye and mouth center on a 112x112 crop.
const TEMPLATE_112: [(f64, f64); 3] = [
    (38.2946, 51.6963),
    (73.5318, 51.5014),
    ((41.5493 + 70.7299) / 2.0, (92.3655 + 92.2041) / 2.0),
];


/// Interocular distance in the surrogate's 160x160 aligned crop. Makeup
/// feather radii are expressed relative to this scale.
pub fn reference_interocular() -> f64 {
    let p = canonical_points(160, 160);
    p[0].distance(p[1])
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vectors have different lengths")]
    LengthMismatch,
    #[error("empty gallery")]
    EmptyGallery,
    #[error("duplicate identity '{0}'")]
    DuplicateIdentity(String),
    #[error("empty stream")]
    EmptyStream,
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Canonical landmark positions for a `width x height` crop.
pub fn canonical_points(width: usize, height: usize) -> [Point; 3] {
    TEMPLATE_112.map(|(x, y)| {
        Point::new(
            (x + 0.5) * width as f64 / 112.0 - 0.5,
            (y + 0.5) * height as f64 / 112.0 - 0.5,
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub bbox: BoundingBox,
    pub landmarks: FaceLandmarks,
    pub accepted: bool,
}

/// Ground-truth detector with the minimum-size filter. `None` when the frame
/// carries no face.
pub fn detect(frame: &Frame) -> Option<DetectionResult> {
    detect_with(frame, MIN_FACE_SIZE)
}

pub fn detect_with(frame: &Frame, min_size: f64) -> Option<DetectionResult> {
    let gt = frame.ground_truth.as_ref()?;
    Some(DetectionResult {
        bbox: gt.bbox,
        landmarks: gt.landmarks.clone(),
        accepted: gt.bbox.width >= min_size && gt.bbox.height >= min_size,
    })
}

/// Least-squares similarity `p -> M p + t` taking `src` onto `dst`.
pub fn similarity_transform(
    src: &[Point],
    dst: &[Point],
) -> Result<([[f64; 2]; 2], [f64; 2]), PipelineError> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(PipelineError::DegenerateLandmarks("need two point pairs".into()));
    }
    let n = src.len() as f64;
    let (sx, sy) = src.iter().fold((0.0, 0.0), |a, p| (a.0 + p.x, a.1 + p.y));
    let (dx, dy) = dst.iter().fold((0.0, 0.0), |a, p| (a.0 + p.x, a.1 + p.y));
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);
    let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (px, py) = (p.x - sx, p.y - sy);
        let (qx, qy) = (q.x - dx, q.y - dy);
        num_a += px * qx + py * qy;
        num_b += px * qy - py * qx;
        den += px * px + py * py;
    }
    if !(den > 1e-9) || !den.is_finite() {
        return Err(PipelineError::DegenerateLandmarks("coincident landmarks".into()));
    }
    let (a, b) = (num_a / den, num_b / den);
    let m = [[a, -b], [b, a]];
    let t = [dx - (a * sx - b * sy), dy - (b * sx + a * sy)];
    Ok((m, t))
}

/// Warps the face so the eyes and mouth center land on the canonical
/// template of a `width x height` crop; returns the crop and its landmarks.
pub fn align(
    image: &Image,
    landmarks: &FaceLandmarks,
    width: usize,
    height: usize,
) -> Result<(Image, FaceLandmarks), PipelineError> {
    if landmarks.interocular() < 1e-6 {
        return Err(PipelineError::DegenerateLandmarks("coincident eyes".into()));
    }
    let src = [landmarks.left_eye, landmarks.right_eye, landmarks.mouth_center()];
    let (m, t) = similarity_transform(&src, &canonical_points(width, height))?;
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let mut out = Image::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 - t[0], y as f64 - t[1]);
            let sx = inv[0][0] * u + inv[0][1] * v;
            let sy = inv[1][0] * u + inv[1][1] * v;
            out.set_pixel(x, y, image.sample_bilinear(sx, sy, [0.0; 3]));
        }
    }
    Ok((out, landmarks.transformed(m, t)))
}

/// Aligns an accepted detection of a frame.
pub fn align_detection(
    frame: &Frame,
    detection: &DetectionResult,
    size: (usize, usize),
) -> Result<Image, PipelineError> {
    Ok(align(&frame.image, &detection.landmarks, size.1, size.0)?.0)
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, PipelineError> {
    if u.len() != v.len() {
        return Err(PipelineError::LengthMismatch);
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(PipelineError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub embeddings: Vec<Embedding>,
    /// Enrolled non-black-listed identity.
    pub distractor: bool,
}

/// Enrolled identities keyed by id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Gallery {
    entries: BTreeMap<String, GalleryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub identity: String,
    pub distance: f64,
}

#[derive(Serialize, Deserialize)]
struct GalleryIndex {
    identities: Vec<GalleryIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct GalleryIndexEntry {
    id: String,
    distractor: bool,
    file: String,
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an identity with its enrollment vectors (normalized on entry).
    pub fn enroll(
        &mut self,
        id: &str,
        embeddings: Vec<Embedding>,
        distractor: bool,
    ) -> Result<(), PipelineError> {
        if self.entries.contains_key(id) {
            return Err(PipelineError::DuplicateIdentity(id.to_string()));
        }
        let mut normed = Vec::with_capacity(embeddings.len());
        for e in embeddings {
            let n = e.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(PipelineError::ZeroVector);
            }
            normed.push(Embedding(e.0.iter().map(|v| v / n).collect()));
        }
        self.entries.insert(
            id.to_string(),
            GalleryEntry {
                embeddings: normed,
                distractor,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&GalleryEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GalleryEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Nearest identity by minimum distance over its enrolled vectors; ties
    /// go to the smaller id.
    pub fn nearest(&self, probe: &Embedding) -> Result<Option<Match>, PipelineError> {
        let mut best: Option<Match> = None;
        for (id, entry) in &self.entries {
            for e in &entry.embeddings {
                let d = cosine_distance(&probe.0, &e.0)?;
                if best.as_ref().is_none_or(|b| d < b.distance) {
                    best = Some(Match {
                        identity: id.clone(),
                        distance: d,
                    });
                }
            }
        }
        Ok(best)
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        let mut index = GalleryIndex {
            identities: Vec::new(),
        };
        for (k, (id, entry)) in self.entries.iter().enumerate() {
            let file = format!("{k:04}.json");
            std::fs::write(dir.join(&file), serde_json::to_string_pretty(&entry.embeddings)?)?;
            index.identities.push(GalleryIndexEntry {
                id: id.clone(),
                distractor: entry.distractor,
                file,
            });
        }
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let index: GalleryIndex =
            serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let mut g = Gallery::new();
        for e in index.identities {
            let embs: Vec<Embedding> =
                serde_json::from_str(&std::fs::read_to_string(dir.join(&e.file))?)?;
            g.enroll(&e.id, embs, e.distractor)?;
        }
        Ok(g)
    }
}

/// Returns the nearest identity when its distance is below `threshold`.
pub fn identify(
    embedding: &Embedding,
    gallery: &Gallery,
    threshold: f64,
) -> Result<Option<Match>, PipelineError> {
    if gallery.is_empty() {
        return Err(PipelineError::EmptyGallery);
    }
    Ok(gallery.nearest(embedding)?.filter(|m| m.distance < threshold))
}

/// Per-identity recognized-frame counters of one stream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlarmState {
    counts: BTreeMap<String, usize>,
    raised: BTreeMap<String, bool>,
    threshold: usize,
}

impl AlarmState {
    pub fn new(threshold: usize) -> Self {
        Self {
            counts: BTreeMap::new(),
            raised: BTreeMap::new(),
            threshold,
        }
    }

    /// Records a recognition; returns true when this call raised the alarm.
    pub fn record(&mut self, identity: &str) -> bool {
        let c = self.counts.entry(identity.to_string()).or_insert(0);
        *c += 1;
        let raised = self.raised.entry(identity.to_string()).or_insert(false);
        if !*raised && *c >= self.threshold {
            *raised = true;
            return true;
        }
        false
    }

    pub fn count(&self, identity: &str) -> usize {
        self.counts.get(identity).copied().unwrap_or(0)
    }

    pub fn is_raised(&self, identity: &str) -> bool {
        self.raised.get(identity).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameOutcome {
    NoDetection,
    DetectedUnrecognized { nearest_distance: Option<f64> },
    Recognized { identity: String, distance: f64 },
}

/// Target model, gallery and thresholds of the deployed system.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub model: EmbeddingModel,
    pub gallery: Gallery,
    pub threshold: f64,
    pub persistency: usize,
    pub min_face: f64,
}

impl Pipeline {
    pub fn new(model: EmbeddingModel, gallery: Gallery) -> Self {
        Self {
            model,
            gallery,
            threshold: IDENTIFICATION_THRESHOLD,
            persistency: PERSISTENCY_THRESHOLD,
            min_face: MIN_FACE_SIZE,
        }
    }

    pub fn new_alarm_state(&self) -> AlarmState {
        AlarmState::new(self.persistency)
    }

    fn try_frame(&self, frame: &Frame) -> Result<FrameOutcome, PipelineError> {
        let Some(det) = detect_with(frame, self.min_face) else {
            return Ok(FrameOutcome::NoDetection);
        };
        if !det.accepted {
            return Ok(FrameOutcome::NoDetection);
        }
        let aligned = align_detection(frame, &det, self.model.input_size())?;
        let emb = self.model.embed(&aligned)?;
        let nearest = self.gallery.nearest(&emb)?;
        Ok(match nearest {
            Some(m) if m.distance < self.threshold => FrameOutcome::Recognized {
                identity: m.identity,
                distance: m.distance,
            },
            other => FrameOutcome::DetectedUnrecognized {
                nearest_distance: other.map(|m| m.distance),
            },
        })
    }

    /// detect, align, embed, identify; recognitions update `alarms`. Errors
    /// inside the frame count as no detection.
    pub fn process_frame(&self, frame: &Frame, alarms: &mut AlarmState) -> FrameOutcome {
        let outcome = self
            .try_frame(frame)
            .unwrap_or(FrameOutcome::NoDetection);
        if let FrameOutcome::Recognized { identity, .. } = &outcome {
            alarms.record(identity);
        }
        outcome
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub camera: String,
    pub outcome: String,
    pub matched_id: Option<String>,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvaluation {
    pub identity: String,
    /// Frames recognized as the ground-truth identity.
    pub recognized: usize,
    /// Accepted detections not recognized as the ground-truth identity.
    pub unrecognized: usize,
    pub total_frames: usize,
    /// `None` when nothing was detected.
    pub r_rec: Option<f64>,
    /// Whether the ground-truth identity raised an alarm, per camera.
    pub alarms: BTreeMap<String, bool>,
    pub log: Vec<FrameRecord>,
}

/// `R / (R + D)`, undefined without detections.
pub fn recognition_rate(recognized: usize, unrecognized: usize) -> Option<f64> {
    let total = recognized + unrecognized;
    (total > 0).then(|| recognized as f64 / total as f64)
}

/// Percentage with at most two decimals and at least one, e.g. `31.33%`,
/// `3.0%`; `-` when undefined.
pub fn format_rate(rate: Option<f64>) -> String {
    let Some(r) = rate else {
        return "-".to_string();
    };
    let mut s = format!("{:.2}", r * 100.0);
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    format!("{s}%")
}

impl StreamEvaluation {
    pub fn formatted_rate(&self) -> String {
        format_rate(self.r_rec)
    }

    /// Per-frame log as CSV: frame, camera, outcome, matched id, distance.
    pub fn log_csv(&self) -> Result<String, PipelineError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["frame", "camera", "outcome", "matched_id", "distance"])?;
        for r in &self.log {
            w.write_record([
                r.frame.to_string(),
                r.camera.clone(),
                r.outcome.clone(),
                r.matched_id.clone().unwrap_or_default(),
                r.distance.map(|d| format!("{d:.6}")).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Runs every frame through the pipeline with one alarm state per camera.
pub fn evaluate_stream(
    pipeline: &Pipeline,
    stream: &FrameStream,
    identity: &str,
) -> Result<StreamEvaluation, PipelineError> {
    if stream.is_empty() {
        return Err(PipelineError::EmptyStream);
    }
    let mut states: BTreeMap<String, AlarmState> = BTreeMap::new();
    let (mut recognized, mut unrecognized) = (0, 0);
    let mut log = Vec::with_capacity(stream.len());
    for frame in &stream.frames {
        let state = states
            .entry(frame.camera_id.clone())
            .or_insert_with(|| pipeline.new_alarm_state());
        let outcome = pipeline.process_frame(frame, state);
        let (label, matched, distance) = match &outcome {
            FrameOutcome::NoDetection => ("no_detection", None, None),
            FrameOutcome::DetectedUnrecognized { nearest_distance } => {
                unrecognized += 1;
                ("detected_unrecognized", None, *nearest_distance)
            }
            FrameOutcome::Recognized { identity: id, distance } => {
                if id == identity {
                    recognized += 1;
                } else {
                    unrecognized += 1;
                }
                ("recognized", Some(id.clone()), Some(*distance))
            }
        };
        log.push(FrameRecord {
            frame: frame.index,
            camera: frame.camera_id.clone(),
            outcome: label.to_string(),
            matched_id: matched,
            distance,
        });
    }
    let alarms = states
        .iter()
        .map(|(cam, s)| (cam.clone(), s.is_raised(identity)))
        .collect();
    Ok(StreamEvaluation {
        identity: identity.to_string(),
        recognized,
        unrecognized,
        total_frames: stream.len(),
        r_rec: recognition_rate(recognized, unrecognized),
        alarms,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_formatting() {
        assert_eq!(format_rate(recognition_rate(47, 103)), "31.33%");
        assert_eq!(format_rate(Some(0.03)), "3.0%");
        assert_eq!(format_rate(Some(1.0)), "100.0%");
        assert_eq!(format_rate(Some(0.4757)), "47.57%");
        assert_eq!(format_rate(Some(0.125)), "12.5%");
        assert_eq!(format_rate(None), "-");
    }

    #[test]
    fn reference_interocular_matches_template() {
        let expected = (35.2372f64.powi(2) + 0.1949f64.powi(2)).sqrt() * 160.0 / 112.0;
        assert!((reference_interocular() - expected).abs() < 1e-9);
    }

    #[test]
    fn similarity_recovers_known_map() {
        let (a, b) = (1.3 * 0.8f64.cos(), 1.3 * 0.8f64.sin());
        let src = [Point::new(1.0, 2.0), Point::new(5.0, 1.0), Point::new(3.0, 7.0)];
        let dst = src.map(|p| Point::new(a * p.x - b * p.y + 4.0, b * p.x + a * p.y - 2.0));
        let (m, t) = similarity_transform(&src, &dst).unwrap();
        assert!((m[0][0] - a).abs() < 1e-12 && (m[1][0] - b).abs() < 1e-12);
        assert!((t[0] - 4.0).abs() < 1e-12 && (t[1] + 2.0).abs() < 1e-12);
    }
}
