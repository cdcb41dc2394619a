use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    masks::region_masks_for, render_face, BoundingBox, Capture, FaceLandmarks,
    IdentityParams, Point, Region, SynthError, DEFAULT_FRAME_SIZE,
};
use crate::image::{Image, Rgb};
use crate::makeup::{composite, MakeupLayer};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn mid(&self) -> f64 {
        (self.min + self.max) / 2.0
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        self.min + (self.max - self.min) * rng.random::<f64>()
    }
}

/// A simulated surveillance camera: pose/lighting jitter ranges per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraProfile {
    pub id: String,
    pub yaw_deg: Range,
    pub pitch_deg: Range,
    pub roll_deg: Range,
    pub brightness: Range,
    /// Pixels per face-local unit.
    pub scale: Range,
    /// Horizontal/vertical offset of the head center from the frame center.
    pub offset_px: Range,
    /// Everyday lip color drift strength (see [`Capture::lip_tint`]).
    pub lip_tint: Range,
    pub cheek_flush: Range,
    pub noise_sigma: f64,
    pub fps: f64,
    pub background: Rgb,
    pub image_size: usize,
}

impl CameraProfile {
    /// Higher-mounted camera: looks down on the face, brighter scene.
    pub fn corridor_high() -> Self {
        Self {
            id: "cam1".into(),
            yaw_deg: Range::new(-18.0, 18.0),
            pitch_deg: Range::new(6.0, 18.0),
            roll_deg: Range::new(-8.0, 8.0),
            brightness: Range::new(0.0, 0.08),
            scale: Range::new(46.0, 62.0),
            offset_px: Range::new(-18.0, 18.0),
            lip_tint: Range::new(0.0, 0.7),
            cheek_flush: Range::new(0.0, 0.3),
            noise_sigma: 0.02,
            fps: 10.0,
            background: [0.42, 0.44, 0.46],
            image_size: DEFAULT_FRAME_SIZE,
        }
    }

    /// Eye-level camera: frontal pitch, wider yaw, dimmer scene.
    pub fn corridor_low() -> Self {
        Self {
            id: "cam2".into(),
            yaw_deg: Range::new(-24.0, 24.0),
            pitch_deg: Range::new(-6.0, 6.0),
            roll_deg: Range::new(-6.0, 6.0),
            brightness: Range::new(-0.08, 0.0),
            scale: Range::new(42.0, 60.0),
            offset_px: Range::new(-18.0, 18.0),
            lip_tint: Range::new(0.0, 0.7),
            cheek_flush: Range::new(0.0, 0.3),
            noise_sigma: 0.025,
            fps: 10.0,
            background: [0.3, 0.33, 0.36],
            image_size: DEFAULT_FRAME_SIZE,
        }
    }

    /// Frontal, evenly lit capture used for enrollment and attack photos.
    pub fn studio() -> Self {
        Self {
            id: "studio".into(),
            yaw_deg: Range::new(-2.0, 2.0),
            pitch_deg: Range::new(-2.0, 2.0),
            roll_deg: Range::new(-2.0, 2.0),
            brightness: Range::new(-0.02, 0.02),
            scale: Range::new(60.0, 64.0),
            offset_px: Range::new(-3.0, 3.0),
            lip_tint: Range::new(0.0, 0.7),
            cheek_flush: Range::new(0.0, 0.3),
            noise_sigma: 0.01,
            fps: 1.0,
            background: [0.36, 0.39, 0.43],
            image_size: DEFAULT_FRAME_SIZE,
        }
    }

    pub fn defaults() -> Vec<CameraProfile> {
        vec![Self::corridor_high(), Self::corridor_low()]
    }

    /// The capture at the center of every range.
    pub fn center_capture(&self) -> Capture {
        self.capture(
            self.yaw_deg.mid(),
            self.pitch_deg.mid(),
            self.roll_deg.mid(),
            self.scale.mid(),
            (self.offset_px.mid(), self.offset_px.mid()),
            self.brightness.mid(),
        )
    }

    fn capture(
        &self,
        yaw: f64,
        pitch: f64,
        roll: f64,
        scale: f64,
        offset: (f64, f64),
        brightness: f64,
    ) -> Capture {
        let half = self.image_size as f64 / 2.0;
        Capture {
            image_size: self.image_size,
            scale,
            center: Point::new(half + offset.0, half + 4.0 + offset.1),
            yaw_deg: yaw,
            pitch_deg: pitch,
            roll_deg: roll,
            brightness,
            background: self.background,
            lip_tint: self.lip_tint.mid(),
            lip_hue: 0.5,
            cheek_flush: self.cheek_flush.mid(),
        }
    }

    /// Checks that the jitter ranges keep every face inside the frame and at
    /// least `min_face` pixels tall and wide.
    pub fn validate(&self, min_face: f64) -> Result<(), SynthError> {
        let ranges = [
            self.yaw_deg,
            self.pitch_deg,
            self.roll_deg,
            self.brightness,
            self.scale,
            self.offset_px,
            self.lip_tint,
            self.cheek_flush,
        ];
        if ranges.iter().any(|r| !(r.min <= r.max) || !r.min.is_finite() || !r.max.is_finite()) {
            return Err(SynthError::InvalidParams(format!("camera {}: bad range", self.id)));
        }
        if [self.lip_tint, self.cheek_flush].iter().any(|r| r.min < 0.0 || r.max > 1.0) {
            return Err(SynthError::InvalidParams(format!(
                "camera {}: lip tint and cheek flush must lie in [0, 1]",
                self.id
            )));
        }
        if self.yaw_deg.min.abs().max(self.yaw_deg.max.abs()) >= 60.0
            || self.pitch_deg.min.abs().max(self.pitch_deg.max.abs()) >= 60.0
        {
            return Err(SynthError::InvalidParams(format!(
                "camera {}: pose range too wide",
                self.id
            )));
        }
        // narrowest possible head: half-width 0.86 at maximal yaw compression
        let min_extent = 2.0 * 0.86 * self.scale.min * 60f64.to_radians().cos();
        if min_extent < min_face {
            return Err(SynthError::InvalidParams(format!(
                "camera {}: faces may shrink below {min_face}px",
                self.id
            )));
        }
        let reach = 1.45 * self.scale.max
            + self.offset_px.min.abs().max(self.offset_px.max.abs())
            + 4.0;
        if reach > self.image_size as f64 / 2.0 {
            return Err(SynthError::InvalidParams(format!(
                "camera {}: faces may leave the frame",
                self.id
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.fps > 0.0) {
            return Err(SynthError::InvalidParams(format!("camera {}: noise/fps", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub landmarks: FaceLandmarks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// Detector metadata; `None` for frames without a face.
    pub ground_truth: Option<GroundTruth>,
    pub index: usize,
    pub camera_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameStream {
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    file: String,
    camera_id: String,
    bbox: Option<BoundingBox>,
    landmarks: Option<FaceLandmarks>,
}

impl FrameStream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Writes every frame as PNG plus a `manifest.json` describing them.
    pub fn export(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let file = format!("{}_{:05}.png", f.camera_id, f.index);
            let png = f
                .image
                .to_png()
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            std::fs::write(dir.join(&file), png)?;
            entries.push(ManifestEntry {
                index: f.index,
                file,
                camera_id: f.camera_id.clone(),
                bbox: f.ground_truth.as_ref().map(|g| g.bbox),
                landmarks: f.ground_truth.as_ref().map(|g| g.landmarks.clone()),
            });
        }
        let json = serde_json::to_string_pretty(&entries).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("manifest.json"), json)
    }
}

/// Renders a face with optional makeup composited in face-aligned mask
/// coordinates, before the brightness offset and sensor noise are applied.
pub(crate) fn render_with_makeup(
    identity: &IdentityParams,
    capture: &Capture,
    makeup: Option<&[MakeupLayer]>,
) -> Result<(Image, FaceLandmarks), SynthError> {
    let (mut img, lm) = render_face(identity, capture)?;
    if let Some(layers) = makeup.filter(|l| !l.is_empty()) {
        let mut regions: Vec<Region> = layers.iter().map(|l| l.region).collect();
        regions.sort();
        regions.dedup();
        let masks = region_masks_for(&lm, img.width(), img.height(), &regions)?;
        let scale = lm.interocular() / crate::frpipeline::reference_interocular();
        let scaled: Vec<MakeupLayer> = layers
            .iter()
            .map(|l| MakeupLayer {
                feather: l.feather * scale,
                ..l.clone()
            })
            .collect();
        img = composite(&img, &scaled, &masks).map_err(|e| SynthError::Makeup(e.to_string()))?;
    }
    Ok((img, lm))
}

fn photometric<R: Rng>(img: &mut Image, brightness: f64, sigma: f64, rng: &mut R) {
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    for v in img.data_mut() {
        let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
        *v = (*v + brightness + n).clamp(0.0, 1.0);
    }
}

/// Deterministic frame stream of one identity walking past one camera.
pub fn synth_stream(
    identity: &IdentityParams,
    profile: &CameraProfile,
    n_frames: usize,
    seed: u64,
    makeup: Option<&[MakeupLayer]>,
) -> Result<FrameStream, SynthError> {
    if n_frames == 0 {
        return Err(SynthError::InvalidParams("n_frames must be >= 1".into()));
    }
    let mut rng = seeds::rng(seed);
    let mut frames = Vec::with_capacity(n_frames);
    for index in 0..n_frames {
        let yaw = profile.yaw_deg.sample(&mut rng);
        let pitch = profile.pitch_deg.sample(&mut rng);
        let roll = profile.roll_deg.sample(&mut rng);
        let scale = profile.scale.sample(&mut rng);
        let ox = profile.offset_px.sample(&mut rng);
        let oy = profile.offset_px.sample(&mut rng);
        let brightness = profile.brightness.sample(&mut rng);
        let lip_tint = profile.lip_tint.sample(&mut rng);
        let lip_hue: f64 = rng.random();
        let cheek_flush = profile.cheek_flush.sample(&mut rng);
        let noise_seed: u64 = rng.random();
        let capture = Capture {
            lip_tint,
            lip_hue,
            cheek_flush,
            ..profile.capture(yaw, pitch, roll, scale, (ox, oy), brightness)
        };
        let (mut image, landmarks) = render_with_makeup(identity, &capture, makeup)?;
        let mut noise_rng = seeds::rng(noise_seed);
        photometric(&mut image, brightness, profile.noise_sigma, &mut noise_rng);
        frames.push(Frame {
            image,
            ground_truth: Some(GroundTruth {
                bbox: landmarks.bbox,
                landmarks,
            }),
            index,
            camera_id: profile.id.clone(),
        });
    }
    Ok(FrameStream { frames })
}
