use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::image::Rgb;
use crate::seeds;

/// Two synthetic cohorts with shifted geometry ranges, standing in for a
/// two-group participant breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    A,
    B,
}

impl Cohort {
    pub fn label(self) -> &'static str {
        match self {
            Cohort::A => "A",
            Cohort::B => "B",
        }
    }
}

/// Geometry (face-local units, head half-width ~1, y pointing down) and
/// base colors of one synthetic identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityParams {
    pub seed: u64,
    pub cohort: Cohort,
    pub head_width: f64,
    pub head_height: f64,
    /// Half distance between eye centers.
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_width: f64,
    pub eye_openness: f64,
    pub brow_gap: f64,
    pub brow_length: f64,
    pub brow_thickness: f64,
    pub brow_arch: f64,
    pub brow_tilt: f64,
    pub nose_length: f64,
    pub nose_width: f64,
    pub mouth_height: f64,
    pub mouth_width: f64,
    pub upper_lip: f64,
    pub lower_lip: f64,
    pub lip_curve: f64,
    pub cheek_tint: f64,
    /// Darkening of the upper eyelid, in `[0, 1]`.
    pub lid_shade: f64,
    /// Darkening toward the head outline, in `[0, 1]`.
    pub contour: f64,
    pub skin: Rgb,
    pub lip: Rgb,
    pub brow: Rgb,
    pub iris: Rgb,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp_rgb(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

impl IdentityParams {
    pub fn from_seed(seed: u64, cohort: Cohort) -> Self {
        let mut rng = seeds::rng(seeds::derive(seed, "identity", cohort as u64));
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let (hw, thick) = match cohort {
            Cohort::A => ((0.86, 0.96), (0.03, 0.055)),
            Cohort::B => ((0.92, 1.0), (0.045, 0.075)),
        };
        let head_width = u(hw.0, hw.1);
        let head_height = u(1.2, 1.36);
        let eye_spacing = u(0.33, 0.41);
        let eye_height = u(-0.32, -0.2);
        let eye_width = u(0.12, 0.155);
        let eye_openness = u(0.42, 0.6);
        let brow_gap = u(0.13, 0.2);
        let brow_length = u(0.26, 0.34);
        let brow_thickness = u(thick.0, thick.1);
        let brow_arch = u(0.0, 0.08);
        let brow_tilt = u(-0.035, 0.035);
        let nose_length = u(0.12, 0.26);
        let nose_width = u(0.1, 0.16);
        let mouth_height = u(0.5, 0.62);
        let mouth_width = u(0.2, 0.29);
        let upper_lip = u(0.035, 0.065);
        let lower_lip = u(0.05, 0.085);
        let lip_curve = u(-0.03, 0.035);
        let cheek_tint = u(0.0, 0.25);
        let lid_shade = u(0.0, 0.6);
        let contour = u(0.0, 0.4);

        let tone = u(0.0, 1.0);
        let warmth = u(-0.04, 0.04);
        let mut skin = lerp_rgb([0.96, 0.81, 0.7], [0.46, 0.31, 0.23], tone);
        skin[0] += warmth;
        skin[2] -= warmth;
        let lip = [u(0.55, 0.85), u(0.22, 0.42), u(0.26, 0.42)];
        let bv = u(0.08, 0.42);
        let brow = [bv * u(1.0, 1.2), bv * u(0.78, 0.9), bv * u(0.6, 0.75)];
        let iris_family = u(0.0, 4.0);
        let iris = match iris_family as u32 {
            0 => [u(0.25, 0.4), u(0.14, 0.22), u(0.06, 0.1)],
            1 => [u(0.28, 0.4), u(0.42, 0.55), u(0.55, 0.7)],
            2 => [u(0.3, 0.4), u(0.42, 0.52), u(0.25, 0.33)],
            _ => [u(0.45, 0.55), u(0.35, 0.42), u(0.15, 0.22)],
        };
        IdentityParams {
            seed,
            cohort,
            head_width,
            head_height,
            eye_spacing,
            eye_height,
            eye_width,
            eye_openness,
            brow_gap,
            brow_length,
            brow_thickness,
            brow_arch,
            brow_tilt,
            nose_length,
            nose_width,
            mouth_height,
            mouth_width,
            upper_lip,
            lower_lip,
            lip_curve,
            cheek_tint,
            lid_shade,
            contour,
            skin,
            lip,
            brow,
            iris,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let geometry = [
            self.head_width,
            self.head_height,
            self.eye_spacing,
            self.eye_width,
            self.eye_openness,
            self.brow_gap,
            self.brow_length,
            self.brow_thickness,
            self.nose_length,
            self.nose_width,
            self.mouth_height,
            self.mouth_width,
            self.upper_lip,
            self.lower_lip,
        ];
        if geometry.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(SynthError::InvalidParams(
                "geometry values must be positive".into(),
            ));
        }
        if self.head_width > 1.05 || self.head_height > 1.45 {
            return Err(SynthError::InvalidParams("head too large".into()));
        }
        if self.eye_spacing + self.eye_width >= self.head_width
            || self.mouth_width >= self.head_width
            || self.mouth_height + self.lower_lip >= self.head_height
            || self.eye_height - self.brow_gap - self.brow_thickness <= -self.head_height
        {
            return Err(SynthError::InvalidParams(
                "features must lie inside the head outline".into(),
            ));
        }
        for c in [self.skin, self.lip, self.brow, self.iris] {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(SynthError::InvalidParams("colors must be in [0,1]".into()));
            }
        }
        for (name, v) in [
            ("cheek tint", self.cheek_tint),
            ("lid shade", self.lid_shade),
            ("contour", self.contour),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidParams(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }
}
