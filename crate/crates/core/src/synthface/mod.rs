//! Procedural synthetic faces.
//!
//! Identities are seed-derived parameter vectors; faces are rasterized as
//! anti-aliased 2-D vector shapes with ground-truth landmarks, from which
//! the named makeup regions are derived. Camera profiles turn an identity
//! into a jittered frame stream.

mod masks;
mod params;
mod render;
mod stream;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use masks::{region_masks, region_masks_for, RegionMask, RegionMaskSet};
pub use params::{Cohort, IdentityParams};
pub use render::{render_face, render_identity, Capture, DEFAULT_FRAME_SIZE};
pub use stream::{synth_stream, CameraProfile, Frame, FrameStream, GroundTruth, Range};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("face bounding box {0:?} leaves the {1}x{1} frame")]
    OutOfFrame(BoundingBox, usize),
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("makeup: {0}")]
    Makeup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new((self.x + other.x) / 2.0, (self.y + other.y) / 2.0)
    }

    pub fn distance(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x && p.y >= self.y && p.x <= self.x + self.width && p.y <= self.y + self.height
    }
}

/// Ground-truth landmarks in image pixel coordinates. "Left" means the
/// image-left side (smaller x on a frontal face).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceLandmarks {
    pub left_eye: Point,
    pub right_eye: Point,
    pub nose_tip: Point,
    pub mouth_left: Point,
    pub mouth_right: Point,
    pub left_brow_outer: Point,
    pub left_brow_inner: Point,
    pub right_brow_inner: Point,
    pub right_brow_outer: Point,
    /// Closed outline of the head, clockwise in image coordinates.
    pub face_oval: Vec<Point>,
    pub bbox: BoundingBox,
}

impl FaceLandmarks {
    pub fn mouth_center(&self) -> Point {
        self.mouth_left.midpoint(self.mouth_right)
    }

    pub fn eye_center(&self) -> Point {
        self.left_eye.midpoint(self.right_eye)
    }

    pub fn interocular(&self) -> f64 {
        self.left_eye.distance(self.right_eye)
    }

    fn points(&self) -> impl Iterator<Item = &Point> {
        [
            &self.left_eye,
            &self.right_eye,
            &self.nose_tip,
            &self.mouth_left,
            &self.mouth_right,
            &self.left_brow_outer,
            &self.left_brow_inner,
            &self.right_brow_inner,
            &self.right_brow_outer,
        ]
        .into_iter()
        .chain(self.face_oval.iter())
    }

    /// Applies an affine map `p -> M p + t` to every point and recomputes the box.
    pub fn transformed(&self, m: [[f64; 2]; 2], t: [f64; 2]) -> FaceLandmarks {
        let f = |p: Point| {
            Point::new(
                m[0][0] * p.x + m[0][1] * p.y + t[0],
                m[1][0] * p.x + m[1][1] * p.y + t[1],
            )
        };
        let corners = [
            Point::new(self.bbox.x, self.bbox.y),
            Point::new(self.bbox.x + self.bbox.width, self.bbox.y),
            Point::new(self.bbox.x, self.bbox.y + self.bbox.height),
            Point::new(self.bbox.x + self.bbox.width, self.bbox.y + self.bbox.height),
        ]
        .map(f);
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for c in corners {
            x0 = x0.min(c.x);
            y0 = y0.min(c.y);
            x1 = x1.max(c.x);
            y1 = y1.max(c.y);
        }
        FaceLandmarks {
            left_eye: f(self.left_eye),
            right_eye: f(self.right_eye),
            nose_tip: f(self.nose_tip),
            mouth_left: f(self.mouth_left),
            mouth_right: f(self.mouth_right),
            left_brow_outer: f(self.left_brow_outer),
            left_brow_inner: f(self.left_brow_inner),
            right_brow_inner: f(self.right_brow_inner),
            right_brow_outer: f(self.right_brow_outer),
            face_oval: self.face_oval.iter().copied().map(f).collect(),
            bbox: BoundingBox {
                x: x0,
                y: y0,
                width: x1 - x0,
                height: y1 - y0,
            },
        }
    }

    /// Mirror image about the vertical line `x = axis_x`, swapping left/right roles.
    pub fn mirrored(&self, axis_x: f64) -> FaceLandmarks {
        let f = |p: Point| Point::new(2.0 * axis_x - p.x, p.y);
        FaceLandmarks {
            left_eye: f(self.right_eye),
            right_eye: f(self.left_eye),
            nose_tip: f(self.nose_tip),
            mouth_left: f(self.mouth_right),
            mouth_right: f(self.mouth_left),
            left_brow_outer: f(self.right_brow_outer),
            left_brow_inner: f(self.right_brow_inner),
            right_brow_inner: f(self.left_brow_inner),
            right_brow_outer: f(self.left_brow_outer),
            face_oval: self.face_oval.iter().rev().copied().map(f).collect(),
            bbox: BoundingBox {
                x: 2.0 * axis_x - self.bbox.x - self.bbox.width,
                ..self.bbox
            },
        }
    }

    /// Checks that every point lies inside `width x height` and that paired
    /// points are ordered left to right.
    pub fn validate(&self, width: usize, height: usize) -> Result<(), SynthError> {
        for p in self.points() {
            if !(p.x.is_finite() && p.y.is_finite())
                || p.x < 0.0
                || p.y < 0.0
                || p.x > width as f64
                || p.y > height as f64
            {
                return Err(SynthError::DegenerateLandmarks(format!(
                    "point ({:.1}, {:.1}) outside {width}x{height}",
                    p.x, p.y
                )));
            }
        }
        if self.interocular() < 1e-6 {
            return Err(SynthError::DegenerateLandmarks("coincident eyes".into()));
        }
        if self.left_eye.x >= self.right_eye.x || self.mouth_left.x >= self.mouth_right.x {
            return Err(SynthError::DegenerateLandmarks(
                "left/right points out of order".into(),
            ));
        }
        Ok(())
    }
}

/// The named makeup regions, declared in lexicographic order of their names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    ForeheadContour,
    JawContour,
    LeftBrow,
    LeftCheek,
    LeftEyelid,
    Lips,
    NoseRidge,
    NoseSides,
    RightBrow,
    RightCheek,
    RightEyelid,
}

impl Region {
    pub const ALL: [Region; 11] = [
        Region::ForeheadContour,
        Region::JawContour,
        Region::LeftBrow,
        Region::LeftCheek,
        Region::LeftEyelid,
        Region::Lips,
        Region::NoseRidge,
        Region::NoseSides,
        Region::RightBrow,
        Region::RightCheek,
        Region::RightEyelid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::ForeheadContour => "forehead_contour",
            Region::JawContour => "jaw_contour",
            Region::LeftBrow => "left_brow",
            Region::LeftCheek => "left_cheek",
            Region::LeftEyelid => "left_eyelid",
            Region::Lips => "lips",
            Region::NoseRidge => "nose_ridge",
            Region::NoseSides => "nose_sides",
            Region::RightBrow => "right_brow",
            Region::RightCheek => "right_cheek",
            Region::RightEyelid => "right_eyelid",
        }
    }

    pub fn from_name(name: &str) -> Option<Region> {
        Region::ALL.into_iter().find(|r| r.name() == name)
    }

    /// Mirror partner under the face's symmetry axis.
    pub fn mirror(self) -> Region {
        match self {
            Region::LeftBrow => Region::RightBrow,
            Region::RightBrow => Region::LeftBrow,
            Region::LeftCheek => Region::RightCheek,
            Region::RightCheek => Region::LeftCheek,
            Region::LeftEyelid => Region::RightEyelid,
            Region::RightEyelid => Region::LeftEyelid,
            other => other,
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_order_is_lexicographic() {
        let mut names: Vec<&str> = Region::ALL.iter().map(|r| r.name()).collect();
        let declared = names.clone();
        names.sort();
        assert_eq!(names, declared);
        for r in Region::ALL {
            assert_eq!(Region::from_name(r.name()), Some(r));
            assert_eq!(r.mirror().mirror(), r);
        }
    }
}
