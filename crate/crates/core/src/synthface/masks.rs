use std::collections::BTreeMap;

use super::{FaceLandmarks, Point, Region, SynthError};

/// Soft edge half-width, in interocular units.
const FEATHER: f64 = 0.06;
/// Width of the forehead and jaw contour bands, in interocular units.
const CONTOUR_BAND: f64 = 0.2;

/// A soft mask stored over its bounding window; values outside the window are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl RegionMask {
    pub fn empty() -> Self {
        Self {
            x0: 0,
            y0: 0,
            width: 0,
            height: 0,
            values: Vec::new(),
        }
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.width || y >= self.y0 + self.height {
            0.0
        } else {
            self.values[(y - self.y0) * self.width + (x - self.x0)]
        }
    }

    /// `(x0, y0, width, height)` of the stored window.
    pub fn window(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.width, self.height)
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Nonzero entries as `(x, y, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values.iter().enumerate().filter_map(move |(i, &v)| {
            (v > 0.0).then(|| (self.x0 + i % self.width, self.y0 + i / self.width, v))
        })
    }

    /// Dense row-major copy over a `width x height` image.
    pub fn to_dense(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = vec![0.0; width * height];
        for (x, y, v) in self.iter() {
            if x < width && y < height {
                out[y * width + x] = v;
            }
        }
        out
    }

    /// Box-blurs the mask with the given radius in pixels, growing the window.
    pub fn feathered(&self, radius: usize, img_w: usize, img_h: usize) -> RegionMask {
        if radius == 0 || self.values.is_empty() {
            return self.clone();
        }
        let x0 = self.x0.saturating_sub(radius);
        let y0 = self.y0.saturating_sub(radius);
        let x1 = (self.x0 + self.width + radius).min(img_w);
        let y1 = (self.y0 + self.height + radius).min(img_h);
        let (w, h) = (x1 - x0, y1 - y0);
        let r = radius as isize;
        let norm = (2 * radius + 1) as f64;
        let mut horiz = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx >= 0 && (xx as usize) < w {
                        s += self.value(x0 + xx as usize, y0 + y);
                    }
                }
                horiz[y * w + x] = s / norm;
            }
        }
        let mut values = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy >= 0 && (yy as usize) < h {
                        s += horiz[yy as usize * w + x];
                    }
                }
                values[y * w + x] = s / norm;
            }
        }
        RegionMask {
            x0,
            y0,
            width: w,
            height: h,
            values,
        }
    }
}

/// Named soft masks over an image of fixed size.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskSet {
    width: usize,
    height: usize,
    masks: BTreeMap<Region, RegionMask>,
}

impl RegionMaskSet {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, region: Region) -> Option<&RegionMask> {
        self.masks.get(&region)
    }

    pub fn regions(&self) -> impl Iterator<Item = Region> + '_ {
        self.masks.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Region, &RegionMask)> {
        self.masks.iter().map(|(r, m)| (*r, m))
    }

    /// Pointwise maximum of the given regions, dense.
    pub fn union_dense(&self, regions: &[Region]) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height];
        for r in regions {
            if let Some(m) = self.masks.get(r) {
                for (x, y, v) in m.iter() {
                    let o = &mut out[y * self.width + x];
                    *o = f64::max(*o, v);
                }
            }
        }
        out
    }
}

#[inline]
fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Inside-positive soft edge for a signed distance (negative inside).
#[inline]
fn soft(sd: f64) -> f64 {
    1.0 - smoothstep(-FEATHER, FEATHER, sd)
}

fn ellipse_sd(a: f64, b: f64, ra: f64, rb: f64) -> f64 {
    let k = ((a / ra).powi(2) + (b / rb).powi(2)).sqrt();
    (k - 1.0) * ra.min(rb)
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((ap.0 - t * ab.0).powi(2) + (ap.1 - t * ab.1).powi(2)).sqrt()
}

/// Signed distance to a closed polygon, negative inside.
fn polygon_sd(p: (f64, f64), poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut d = f64::MAX;
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        d = d.min(seg_dist(p, a, b));
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) / (b.1 - a.1) * (b.0 - a.0);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    if inside {
        -d
    } else {
        d
    }
}

/// Face-aligned coordinate frame: origin at the eye midpoint, unit length
/// equal to the interocular distance, `b` pointing from eyes toward mouth.
struct LocalFrame {
    mid: Point,
    ex: (f64, f64),
    ey: (f64, f64),
    iod: f64,
}

impl LocalFrame {
    fn new(lm: &FaceLandmarks) -> Self {
        let mid = lm.eye_center();
        let iod = lm.interocular();
        let ex = (
            (lm.right_eye.x - lm.left_eye.x) / iod,
            (lm.right_eye.y - lm.left_eye.y) / iod,
        );
        Self {
            mid,
            ex,
            ey: (-ex.1, ex.0),
            iod,
        }
    }

    fn local(&self, p: Point) -> (f64, f64) {
        let d = (p.x - self.mid.x, p.y - self.mid.y);
        (
            (d.0 * self.ex.0 + d.1 * self.ex.1) / self.iod,
            (d.0 * self.ey.0 + d.1 * self.ey.1) / self.iod,
        )
    }

    fn pixel(&self, a: f64, b: f64) -> Point {
        Point::new(
            self.mid.x + self.iod * (a * self.ex.0 + b * self.ey.0),
            self.mid.y + self.iod * (a * self.ex.1 + b * self.ey.1),
        )
    }
}

enum Shape {
    Ellipses(Vec<((f64, f64), (f64, f64))>),
    Capsule((f64, f64), (f64, f64), f64),
    /// Band inside the face oval; keeps points with `b` beyond the cut
    /// (`above = true` keeps `b < cut`).
    Band { cut: f64, above: bool },
}

fn region_shape(region: Region, frame: &LocalFrame, lm: &FaceLandmarks) -> Shape {
    let l = |p: Point| frame.local(p);
    let off = |p: (f64, f64), da: f64, db: f64| (p.0 + da, p.1 + db);
    match region {
        Region::LeftEyelid => Shape::Ellipses(vec![(off(l(lm.left_eye), 0.0, -0.13), (0.25, 0.1))]),
        Region::RightEyelid => {
            Shape::Ellipses(vec![(off(l(lm.right_eye), 0.0, -0.13), (0.25, 0.1))])
        }
        Region::LeftBrow => Shape::Capsule(
            off(l(lm.left_brow_outer), 0.0, -0.02),
            off(l(lm.left_brow_inner), 0.0, -0.02),
            0.09,
        ),
        Region::RightBrow => Shape::Capsule(
            off(l(lm.right_brow_inner), 0.0, -0.02),
            off(l(lm.right_brow_outer), 0.0, -0.02),
            0.09,
        ),
        Region::LeftCheek => Shape::Ellipses(vec![(off(l(lm.left_eye), -0.1, 0.62), (0.26, 0.2))]),
        Region::RightCheek => {
            Shape::Ellipses(vec![(off(l(lm.right_eye), 0.1, 0.62), (0.26, 0.2))])
        }
        Region::Lips => {
            let (ml, mr) = (l(lm.mouth_left), l(lm.mouth_right));
            let c = ((ml.0 + mr.0) / 2.0, (ml.1 + mr.1) / 2.0);
            let ra = ((mr.0 - ml.0).powi(2) + (mr.1 - ml.1).powi(2)).sqrt() / 2.0 + 0.03;
            Shape::Ellipses(vec![(c, (ra, 0.13))])
        }
        Region::NoseRidge => {
            let tip = l(lm.nose_tip);
            Shape::Capsule((tip.0 * 0.3, 0.15), off(tip, 0.0, -0.12), 0.07)
        }
        Region::NoseSides => {
            let tip = l(lm.nose_tip);
            Shape::Ellipses(vec![
                (off(tip, -0.2, -0.18), (0.065, 0.17)),
                (off(tip, 0.2, -0.18), (0.065, 0.17)),
            ])
        }
        Region::ForeheadContour => Shape::Band {
            cut: -0.55,
            above: true,
        },
        Region::JawContour => Shape::Band {
            cut: 0.6,
            above: false,
        },
    }
}

/// Local-space bounding box `(a0, b0, a1, b1)` of a shape's support.
fn shape_bounds(shape: &Shape, oval: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let pad = FEATHER * 1.5;
    match shape {
        Shape::Ellipses(es) => es.iter().fold(
            (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
            |acc, ((ca, cb), (ra, rb))| {
                (
                    acc.0.min(ca - ra - pad),
                    acc.1.min(cb - rb - pad),
                    acc.2.max(ca + ra + pad),
                    acc.3.max(cb + rb + pad),
                )
            },
        ),
        Shape::Capsule(a, b, r) => (
            a.0.min(b.0) - r - pad,
            a.1.min(b.1) - r - pad,
            a.0.max(b.0) + r + pad,
            a.1.max(b.1) + r + pad,
        ),
        Shape::Band { cut, above } => {
            let (mut a0, mut b0, mut a1, mut b1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(a, b) in oval {
                a0 = a0.min(a);
                b0 = b0.min(b);
                a1 = a1.max(a);
                b1 = b1.max(b);
            }
            if *above {
                (a0 - pad, b0 - pad, a1 + pad, cut + pad)
            } else {
                (a0 - pad, cut - pad, a1 + pad, b1 + pad)
            }
        }
    }
}

fn shape_value(shape: &Shape, p: (f64, f64), oval: &[(f64, f64)]) -> f64 {
    match shape {
        Shape::Ellipses(es) => es
            .iter()
            .map(|((ca, cb), (ra, rb))| soft(ellipse_sd(p.0 - ca, p.1 - cb, *ra, *rb)))
            .fold(0.0, f64::max),
        Shape::Capsule(a, b, r) => soft(seg_dist(p, *a, *b) - r),
        Shape::Band { cut, above } => {
            let side = if *above {
                soft(p.1 - cut)
            } else {
                soft(cut - p.1)
            };
            if side <= 0.0 {
                return 0.0;
            }
            let sd = polygon_sd(p, oval);
            // inside the oval and within the band of its boundary
            side * soft(sd) * soft(-sd - CONTOUR_BAND)
        }
    }
}

/// Builds the soft masks of the requested regions.
pub fn region_masks_for(
    landmarks: &FaceLandmarks,
    width: usize,
    height: usize,
    regions: &[Region],
) -> Result<RegionMaskSet, SynthError> {
    let pts = [
        landmarks.left_eye,
        landmarks.right_eye,
        landmarks.nose_tip,
        landmarks.mouth_left,
        landmarks.mouth_right,
    ];
    if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(SynthError::DegenerateLandmarks("non-finite landmark".into()));
    }
    if landmarks.interocular() < 1.0 {
        return Err(SynthError::DegenerateLandmarks("coincident eyes".into()));
    }
    if landmarks.face_oval.len() < 3 {
        return Err(SynthError::DegenerateLandmarks("face oval needs 3 points".into()));
    }
    let frame = LocalFrame::new(landmarks);
    let oval: Vec<(f64, f64)> = landmarks.face_oval.iter().map(|p| frame.local(*p)).collect();
    let mut masks = BTreeMap::new();
    for &region in regions {
        let shape = region_shape(region, &frame, landmarks);
        let (a0, b0, a1, b1) = shape_bounds(&shape, &oval);
        let corners = [
            frame.pixel(a0, b0),
            frame.pixel(a1, b0),
            frame.pixel(a0, b1),
            frame.pixel(a1, b1),
        ];
        let fx0 = corners.iter().map(|p| p.x).fold(f64::MAX, f64::min).floor();
        let fy0 = corners.iter().map(|p| p.y).fold(f64::MAX, f64::min).floor();
        let fx1 = corners.iter().map(|p| p.x).fold(f64::MIN, f64::max).ceil();
        let fy1 = corners.iter().map(|p| p.y).fold(f64::MIN, f64::max).ceil();
        let x0 = fx0.clamp(0.0, width as f64) as usize;
        let y0 = fy0.clamp(0.0, height as f64) as usize;
        let x1 = (fx1 + 1.0).clamp(0.0, width as f64) as usize;
        let y1 = (fy1 + 1.0).clamp(0.0, height as f64) as usize;
        let (w, h) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
        let mut values = vec![0.0; w * h];
        for yy in 0..h {
            for xx in 0..w {
                let p = frame.local(Point::new((x0 + xx) as f64, (y0 + yy) as f64));
                values[yy * w + xx] = shape_value(&shape, p, &oval);
            }
        }
        masks.insert(
            region,
            RegionMask {
                x0,
                y0,
                width: w,
                height: h,
                values,
            },
        );
    }
    Ok(RegionMaskSet {
        width,
        height,
        masks,
    })
}

/// All eleven named region masks for a face.
pub fn region_masks(
    landmarks: &FaceLandmarks,
    width: usize,
    height: usize,
) -> Result<RegionMaskSet, SynthError> {
    region_masks_for(landmarks, width, height, &Region::ALL)
}
