use serde::{Deserialize, Serialize};

use super::{BoundingBox, FaceLandmarks, IdentityParams, Point, SynthError};
use crate::image::{Image, Rgb};

pub const DEFAULT_FRAME_SIZE: usize = 256;

/// Pose, framing and lighting of one capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capture {
    pub image_size: usize,
    /// Pixels per face-local unit (head half-width is ~1 unit).
    pub scale: f64,
    /// Head center in pixel coordinates.
    pub center: Point,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    /// Additive brightness offset applied after makeup.
    pub brightness: f64,
    pub background: Rgb,
    /// Everyday lip color drift: blend weight toward the day's lip color.
    #[serde(default)]
    pub lip_tint: f64,
    /// Position of the day's lip color between berry and nude, in `[0, 1]`.
    #[serde(default)]
    pub lip_hue: f64,
    /// Extra cheek redness of the day, added to the identity's cheek tint.
    #[serde(default)]
    pub cheek_flush: f64,
}

impl Default for Capture {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_FRAME_SIZE,
            scale: 62.0,
            center: Point::new(128.0, 132.0),
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            brightness: 0.0,
            background: [0.36, 0.39, 0.43],
            lip_tint: 0.0,
            lip_hue: 0.0,
            cheek_flush: 0.0,
        }
    }
}

const DAY_LIP_BERRY: Rgb = [0.6, 0.16, 0.24];
const DAY_LIP_NUDE: Rgb = [0.78, 0.5, 0.45];

/// Face-local to pixel affine map.
#[derive(Debug, Clone, Copy)]
struct Pose {
    m: [[f64; 2]; 2],
    inv: [[f64; 2]; 2],
    c: Point,
    /// Per-unit-depth feature shift from head rotation, in face units.
    shift: (f64, f64),
}

impl Pose {
    fn new(cap: &Capture) -> Self {
        let (yaw, pitch, roll) = (
            cap.yaw_deg.to_radians(),
            cap.pitch_deg.to_radians(),
            cap.roll_deg.to_radians(),
        );
        let (sr, cr) = roll.sin_cos();
        let (cy, cp) = (yaw.cos(), pitch.cos());
        let s = cap.scale;
        let m = [[s * cr * cy, -s * sr * cp], [s * sr * cy, s * cr * cp]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        Self {
            m,
            inv,
            c: cap.center,
            shift: (yaw.sin(), pitch.sin()),
        }
    }

    fn to_image(&self, u: f64, v: f64) -> Point {
        Point::new(
            self.c.x + self.m[0][0] * u + self.m[0][1] * v,
            self.c.y + self.m[1][0] * u + self.m[1][1] * v,
        )
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.c.x, y - self.c.y);
        (
            self.inv[0][0] * dx + self.inv[0][1] * dy,
            self.inv[1][0] * dx + self.inv[1][1] * dy,
        )
    }
}

/// Depth of each feature group, controlling how far it slides under yaw/pitch.
const DEPTH_EYES: f64 = 0.25;
const DEPTH_BROWS: f64 = 0.28;
const DEPTH_NOSE: f64 = 0.45;
const DEPTH_MOUTH: f64 = 0.3;
const DEPTH_CHEEKS: f64 = 0.18;

struct Brow {
    pts: Vec<(f64, f64)>,
    half_thickness: f64,
    bounds: (f64, f64, f64, f64),
}

struct FaceGeometry<'a> {
    p: &'a IdentityParams,
    eyes: [(f64, f64); 2],
    cheeks: [(f64, f64); 2],
    nose_tip: (f64, f64),
    nose_shift: (f64, f64),
    mouth: (f64, f64),
    brows: [Brow; 2],
    lip: Rgb,
    cheek_tint: f64,
}

fn sub(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 - b.0, a.1 - b.1)
}

fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = ((ap.0 - t * ab.0).powi(2) + (ap.1 - t * ab.1).powi(2)).sqrt();
    (d, t)
}

/// Anti-aliased coverage of a signed distance (negative inside).
#[inline]
fn cover(d: f64, aa: f64) -> f64 {
    (0.5 - d / aa).clamp(0.0, 1.0)
}

#[inline]
fn ellipse_sd(u: f64, v: f64, a: f64, b: f64) -> f64 {
    ((u / a).powi(2) + (v / b).powi(2)).sqrt().mul_add(a.min(b), -a.min(b))
}

#[inline]
fn mix(c: Rgb, target: Rgb, t: f64) -> Rgb {
    [
        c[0] + (target[0] - c[0]) * t,
        c[1] + (target[1] - c[1]) * t,
        c[2] + (target[2] - c[2]) * t,
    ]
}

impl<'a> FaceGeometry<'a> {
    fn new(p: &'a IdentityParams, pose: &Pose, cap: &Capture) -> Self {
        let sh = |depth: f64| (depth * pose.shift.0, depth * pose.shift.1);
        let es = sh(DEPTH_EYES);
        let eyes = [
            (-p.eye_spacing + es.0, p.eye_height + es.1),
            (p.eye_spacing + es.0, p.eye_height + es.1),
        ];
        let cs = sh(DEPTH_CHEEKS);
        let cheeks = [
            (-(p.eye_spacing + 0.06) + cs.0, p.eye_height + 0.4 + cs.1),
            (p.eye_spacing + 0.06 + cs.0, p.eye_height + 0.4 + cs.1),
        ];
        let ns = sh(DEPTH_NOSE);
        let nose_tip = (ns.0, p.eye_height + p.nose_length + 0.12 + ns.1);
        let ms = sh(DEPTH_MOUTH);
        let mouth = (ms.0, p.mouth_height + ms.1);
        let bs = sh(DEPTH_BROWS);
        let brow = |sign: f64| {
            let base_v = p.eye_height - p.brow_gap;
            let inner = (
                sign * (p.eye_spacing - 0.45 * p.brow_length) + bs.0,
                base_v + p.brow_tilt + bs.1,
            );
            let outer = (
                sign * (p.eye_spacing + 0.55 * p.brow_length) + bs.0,
                base_v - p.brow_tilt + bs.1,
            );
            let ctrl = (
                (inner.0 + outer.0) / 2.0,
                (inner.1 + outer.1) / 2.0 - 2.0 * p.brow_arch,
            );
            let pts: Vec<(f64, f64)> = (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    let a = (1.0 - t) * (1.0 - t);
                    let b = 2.0 * t * (1.0 - t);
                    let c = t * t;
                    (
                        a * inner.0 + b * ctrl.0 + c * outer.0,
                        a * inner.1 + b * ctrl.1 + c * outer.1,
                    )
                })
                .collect();
            let ht = p.brow_thickness / 2.0;
            let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(u, v) in &pts {
                u0 = u0.min(u);
                v0 = v0.min(v);
                u1 = u1.max(u);
                v1 = v1.max(v);
            }
            let pad = ht + 0.03;
            Brow {
                pts,
                half_thickness: ht,
                bounds: (u0 - pad, v0 - pad, u1 + pad, v1 + pad),
            }
        };
        Self {
            p,
            eyes,
            cheeks,
            nose_tip,
            nose_shift: ns,
            mouth,
            brows: [brow(-1.0), brow(1.0)],
            lip: mix(p.lip, mix(DAY_LIP_BERRY, DAY_LIP_NUDE, cap.lip_hue), cap.lip_tint),
            cheek_tint: (p.cheek_tint + cap.cheek_flush).min(1.0),
        }
    }

    fn mouth_line(&self, u: f64) -> f64 {
        let x = ((u - self.mouth.0) / self.p.mouth_width).clamp(-1.0, 1.0);
        self.mouth.1 + self.p.lip_curve * (1.0 - x * x)
    }

    /// Color at a face-local point; `aa` is one pixel in face units.
    fn shade(&self, u: f64, v: f64, background: Rgb, aa: f64) -> Rgb {
        let p = self.p;
        let head_sd = ellipse_sd(u, v, p.head_width, p.head_height);
        let head_cov = cover(head_sd, aa);
        if head_cov <= 0.0 {
            return background;
        }
        let q2 = (u / p.head_width).powi(2) + (v / p.head_height).powi(2);
        let edge = ((q2 - 0.5) / 0.5).clamp(0.0, 1.0);
        let shade = 1.0 - 0.12 * q2 - p.contour * edge * edge;
        let mut c = [p.skin[0] * shade, p.skin[1] * shade, p.skin[2] * shade];

        for &(cx, cy) in &self.cheeks {
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            if d2 < 0.16 {
                let g = (-d2 / (2.0 * 0.11 * 0.11)).exp();
                c = mix(c, [0.86, 0.42, 0.42], self.cheek_tint * g * 0.7);
            }
        }

        // upper eyelid shade, under the eye itself
        let ery = p.eye_width * p.eye_openness;
        if p.lid_shade > 0.0 {
            for &(ex, ey) in &self.eyes {
                let (du, dv) = ((u - ex) / (p.eye_width * 1.2), (v - (ey - 0.8 * ery)) / (ery + 0.03));
                let d2 = du * du + dv * dv;
                if d2 < 4.0 {
                    let dark = [c[0] * 0.55, c[1] * 0.5, c[2] * 0.52];
                    c = mix(c, dark, p.lid_shade * (-d2).exp());
                }
            }
        }

        // nose: soft side shading and nostrils
        let (nx, ny) = self.nose_tip;
        let top = p.eye_height + 0.08 + self.nose_shift.1;
        if v > top - 0.05 && v < ny + 0.08 && (u - nx).abs() < p.nose_width + 0.08 {
            let t = ((v - top) / (ny - top)).clamp(0.0, 1.0);
            let ridge_u = nx * t + self.nose_shift.0 * 0.4 * (1.0 - t);
            let half = p.nose_width * (0.3 + 0.25 * t);
            let du = ((u - ridge_u).abs() - half).abs();
            let along = cover(top - v, 0.04) * cover(v - ny, 0.03);
            c = mix(c, [c[0] * 0.7, c[1] * 0.68, c[2] * 0.68], 0.45 * (-du * du / (2.0 * 0.018 * 0.018)).exp() * along);
            for sign in [-1.0, 1.0] {
                let sd = ellipse_sd(u - (nx + sign * p.nose_width * 0.5), v - (ny + 0.015), 0.04, 0.022);
                let k = cover(sd, aa);
                if k > 0.0 {
                    c = mix(c, [p.skin[0] * 0.35, p.skin[1] * 0.3, p.skin[2] * 0.3], k);
                }
            }
        }

        // eyes
        for &(ex, ey) in &self.eyes {
            let (du, dv) = (u - ex, v - ey);
            if du.abs() > p.eye_width + 0.03 || dv.abs() > ery + 0.03 {
                continue;
            }
            let sd = ellipse_sd(du, dv, p.eye_width, ery);
            let k = cover(sd, aa);
            if k > 0.0 {
                let mut e = [0.94, 0.93, 0.9];
                let r = (du * du + dv * dv).sqrt();
                let ir = 0.95 * ery;
                e = mix(e, p.iris, cover(r - ir, aa));
                e = mix(e, [0.04, 0.04, 0.05], cover(r - 0.45 * ir, aa));
                c = mix(c, e, k);
            }
            // upper lash line
            if dv < 0.0 {
                let k = cover(sd.abs() - 0.012, aa) * cover(dv + 0.2 * ery, aa);
                if k > 0.0 {
                    c = mix(c, [0.08, 0.06, 0.06], k);
                }
            }
        }

        // brows
        for b in &self.brows {
            let (u0, v0, u1, v1) = b.bounds;
            if u < u0 || u > u1 || v < v0 || v > v1 {
                continue;
            }
            let mut best = f64::MAX;
            let mut best_t = 0.0;
            let n = b.pts.len() - 1;
            for i in 0..n {
                let (d, t) = seg_distance((u, v), b.pts[i], b.pts[i + 1]);
                if d < best {
                    best = d;
                    best_t = (i as f64 + t) / n as f64;
                }
            }
            // inner end (index 0) is thickest
            let ht = b.half_thickness * (1.0 - 0.4 * best_t);
            let k = cover(best - ht, aa);
            if k > 0.0 {
                c = mix(c, p.brow, k);
            }
        }

        // lips
        let (mx, _) = self.mouth;
        let half_w = p.mouth_width;
        if (u - mx).abs() < half_w + aa && v > self.mouth.1 - 0.15 && v < self.mouth.1 + 0.2 {
            let x = ((u - mx) / half_w).clamp(-1.0, 1.0);
            let profile = (1.0 - x * x).max(0.0).sqrt();
            let line = self.mouth_line(u);
            let top = line - p.upper_lip * profile;
            let bottom = line + p.lower_lip * profile;
            let side = half_w - (u - mx).abs();
            let k = cover(top - v, aa) * cover(v - bottom, aa) * cover(-side, aa);
            if k > 0.0 {
                let lip = self.lip;
                c = mix(c, lip, k);
                let lk = cover((v - line).abs() - 0.006, aa) * cover(-side, aa);
                c = mix(c, [lip[0] * 0.45, lip[1] * 0.4, lip[2] * 0.4], lk);
            }
        }

        mix(background, c, head_cov)
    }

    fn landmarks(&self, pose: &Pose) -> FaceLandmarks {
        let p = self.p;
        let f = |(u, v): (f64, f64)| pose.to_image(u, v);
        let [lb, rb] = &self.brows;
        let n = lb.pts.len() - 1;
        let face_oval: Vec<Point> = (0..24)
            .map(|i| {
                let th = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / 24.0;
                f((p.head_width * th.cos(), p.head_height * th.sin()))
            })
            .collect();
        let mut lm = FaceLandmarks {
            left_eye: f(self.eyes[0]),
            right_eye: f(self.eyes[1]),
            nose_tip: f(self.nose_tip),
            mouth_left: f((self.mouth.0 - p.mouth_width, self.mouth_line(self.mouth.0 - p.mouth_width))),
            mouth_right: f((self.mouth.0 + p.mouth_width, self.mouth_line(self.mouth.0 + p.mouth_width))),
            left_brow_outer: f(lb.pts[n]),
            left_brow_inner: f(lb.pts[0]),
            right_brow_inner: f(rb.pts[0]),
            right_brow_outer: f(rb.pts[n]),
            face_oval,
            bbox: BoundingBox {
                x: 0.0,
                y: 0.0,
                width: 0.0,
                height: 0.0,
            },
        };
        // exact extent of the affine image of the head ellipse
        let ex = (pose.m[0][0] * p.head_width).hypot(pose.m[0][1] * p.head_height);
        let ey = (pose.m[1][0] * p.head_width).hypot(pose.m[1][1] * p.head_height);
        lm.bbox = BoundingBox {
            x: pose.c.x - ex,
            y: pose.c.y - ey,
            width: 2.0 * ex,
            height: 2.0 * ey,
        };
        lm
    }
}

/// Rasterizes the face geometry without photometric effects (no brightness
/// offset, no sensor noise). Makeup is composited on this image.
pub fn render_face(
    params: &IdentityParams,
    capture: &Capture,
) -> Result<(Image, FaceLandmarks), SynthError> {
    params.validate()?;
    if capture.image_size == 0 || !(capture.scale > 0.0) {
        return Err(SynthError::InvalidParams("empty capture".into()));
    }
    let pose = Pose::new(capture);
    let geom = FaceGeometry::new(params, &pose, capture);
    let landmarks = geom.landmarks(&pose);
    let size = capture.image_size;
    let bb = landmarks.bbox;
    if bb.x < 0.0 || bb.y < 0.0 || bb.x + bb.width > size as f64 || bb.y + bb.height > size as f64 {
        return Err(SynthError::OutOfFrame(bb, size));
    }
    let aa = 1.0 / capture.scale;
    let mut img = Image::filled(size, size, capture.background);
    let y0 = bb.y.floor().max(0.0) as usize;
    let y1 = ((bb.y + bb.height).ceil() as usize + 1).min(size);
    let x0 = bb.x.floor().max(0.0) as usize;
    let x1 = ((bb.x + bb.width).ceil() as usize + 1).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = pose.to_local(x as f64, y as f64);
            let c = geom.shade(u, v, capture.background, aa);
            img.set_pixel(x, y, c);
        }
    }
    landmarks.validate(size, size)?;
    Ok((img, landmarks))
}

/// Renders an identity under a capture, including the brightness offset.
pub fn render_identity(
    params: &IdentityParams,
    capture: &Capture,
) -> Result<(Image, FaceLandmarks), SynthError> {
    let (mut img, lm) = render_face(params, capture)?;
    if capture.brightness != 0.0 {
        for v in img.data_mut() {
            *v += capture.brightness;
        }
    }
    img.clamp01();
    Ok((img, lm))
}
