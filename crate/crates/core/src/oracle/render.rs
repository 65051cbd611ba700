//! Deterministic cartoon face driven by a normalized AU+PS vector.
//!
//! Shapes live in face-local coordinates (image fractions, origin at the
//! image centre, y down). The pose maps local to image coordinates with
//! `p = centre + R(roll)·(x + shear·y, y) + (shift_x, shift_y)`. Each pixel
//! averages a fixed `S×S` grid of sub-samples, then rounds to 8 bits.

use crate::domain::{au, AupsVector, FrameImage, LandmarkSet};
use crate::error::{Error, Result};

/// Landmark order: four brow points (left outer, left inner, right inner,
/// right outer), two eyes, nose tip, mouth left, mouth right, mouth top,
/// mouth bottom, chin.
pub const LANDMARK_COUNT: usize = 12;

pub const CANONICAL_LANDMARKS: [(f64, f64); LANDMARK_COUNT] = [
    (-0.20, -0.17),
    (-0.07, -0.19),
    (0.07, -0.19),
    (0.20, -0.17),
    (-0.13, -0.08),
    (0.13, -0.08),
    (0.0, 0.04),
    (-0.11, 0.17),
    (0.11, 0.17),
    (0.0, 0.17),
    (0.0, 0.17),
    (0.0, 0.33),
];

pub const BACKGROUND: [u8; 3] = [52, 68, 96];
pub const SKIN: [u8; 3] = [232, 190, 160];
pub const SHADE: [u8; 3] = [196, 150, 124];
pub const SCLERA: [u8; 3] = [250, 250, 246];
pub const PUPIL: [u8; 3] = [30, 34, 44];
pub const BROW: [u8; 3] = [70, 48, 36];
pub const LIP: [u8; 3] = [186, 84, 92];
pub const MOUTH: [u8; 3] = [96, 0, 32];

/// Image size, anti-aliasing and pose gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSpec {
    pub height: usize,
    pub width: usize,
    /// Sub-samples per pixel side.
    pub supersample: usize,
    /// Roll angle in radians per unit normalized roll.
    pub roll_gain: f64,
    /// Horizontal shear per unit normalized yaw.
    pub yaw_shear: f64,
    /// Horizontal shift (image fraction) per unit normalized yaw.
    pub yaw_shift: f64,
    /// Vertical shift (image fraction) per unit normalized pitch.
    pub pitch_shift: f64,
}

impl RenderSpec {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            supersample: 4,
            roll_gain: 0.35,
            yaw_shear: 0.25,
            yaw_shift: 0.08,
            pitch_shift: 0.06,
        }
    }
}

/// Face geometry after applying the AUs, before the pose.
#[derive(Debug, Clone, Copy)]
struct Face {
    brows: [(f64, f64); 4],
    eye_open: f64,
    mouth_y: f64,
    mouth_half_width: f64,
    lift: f64,
    open: f64,
    raise: f64,
    chin_y: f64,
}

const EYE_RX: f64 = 0.05;
const EYE_RY: f64 = 0.035;
const PUPIL_R: f64 = 0.018;
const BROW_HALF_THICK: f64 = 0.012;
const LIP_THICK: f64 = 0.018;
const HEAD: (f64, f64, f64, f64) = (0.0, 0.02, 0.30, 0.38);
const NOSE: (f64, f64, f64, f64) = (0.0, 0.04, 0.025, 0.02);

impl Face {
    fn from_aups(v: &AupsVector) -> Self {
        let a = v.au();
        let mut brows = [
            CANONICAL_LANDMARKS[0],
            CANONICAL_LANDMARKS[1],
            CANONICAL_LANDMARKS[2],
            CANONICAL_LANDMARKS[3],
        ];
        let lower = 0.03 * a[au::BROW_LOWER];
        for (i, b) in brows.iter_mut().enumerate() {
            let inner = i == 1 || i == 2;
            let raise = if inner { 0.05 * a[au::BROW_INNER] } else { 0.05 * a[au::BROW_OUTER] };
            b.1 += lower - raise;
            if inner {
                b.0 -= b.0.signum() * 0.02 * a[au::BROW_LOWER];
            }
        }
        let open = 0.10 * a[au::JAW_DROP] + 0.04 * a[au::LIPS_PART];
        Self {
            brows,
            eye_open: EYE_RY * (1.0 - a[au::BLINK]) * (1.0 + 0.3 * a[au::LID_RAISE]),
            mouth_y: CANONICAL_LANDMARKS[7].1,
            mouth_half_width: 0.11 * (1.0 + 0.25 * a[au::LIP_STRETCH] - 0.25 * a[au::LIP_TIGHTEN]),
            lift: 0.04 * a[au::LIP_CORNER] - 0.03 * a[au::CORNER_DEPRESS],
            open,
            raise: 0.015 * a[au::UPPER_LIP_RAISE],
            chin_y: CANONICAL_LANDMARKS[11].1 + 0.06 * a[au::JAW_DROP],
        }
    }

    fn top(&self, u: f64) -> f64 {
        self.mouth_y - (0.35 * self.open + self.raise) * (1.0 - u * u) - self.lift * u * u
    }

    fn bottom(&self, u: f64) -> f64 {
        self.mouth_y + 0.65 * self.open * (1.0 - u * u) - self.lift * u * u
    }

    fn landmarks(&self) -> [(f64, f64); LANDMARK_COUNT] {
        let mw = self.mouth_half_width;
        let corner_y = self.mouth_y - self.lift;
        [
            self.brows[0],
            self.brows[1],
            self.brows[2],
            self.brows[3],
            CANONICAL_LANDMARKS[4],
            CANONICAL_LANDMARKS[5],
            CANONICAL_LANDMARKS[6],
            (-mw, corner_y),
            (mw, corner_y),
            (0.0, self.top(0.0)),
            (0.0, self.bottom(0.0)),
            (0.0, self.chin_y),
        ]
    }

    /// Colour of the face-local point `(x, y)`.
    fn colour(&self, x: f64, y: f64) -> [u8; 3] {
        let in_ellipse = |(cx, cy, rx, ry): (f64, f64, f64, f64)| {
            let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
            dx * dx + dy * dy <= 1.0
        };
        let mw = self.mouth_half_width;
        let u = x / mw;
        if u.abs() < 1.0 {
            let (t, b) = (self.top(u), self.bottom(u));
            if y > t && y < b {
                return MOUTH;
            }
            if y > t - LIP_THICK * (1.0 - 0.5 * u * u) && y < b + LIP_THICK * (1.0 - 0.5 * u * u) {
                return LIP;
            }
        }
        for pair in [(0, 1), (2, 3)] {
            let (a, b) = (self.brows[pair.0], self.brows[pair.1]);
            if segment_distance((x, y), a, b) <= BROW_HALF_THICK {
                return BROW;
            }
        }
        for &(cx, cy) in &CANONICAL_LANDMARKS[4..6] {
            if in_ellipse((cx, cy, EYE_RX, EYE_RY)) {
                if self.eye_open > 0.0 && in_ellipse((cx, cy, EYE_RX, self.eye_open)) {
                    let (dx, dy) = (x - cx, y - cy);
                    return if dx * dx + dy * dy <= PUPIL_R * PUPIL_R { PUPIL } else { SCLERA };
                }
                return SHADE;
            }
        }
        if in_ellipse(NOSE) {
            return SHADE;
        }
        let (hx, hy, hrx, hry) = HEAD;
        let chin_stretch = (self.chin_y - CANONICAL_LANDMARKS[11].1).max(0.0);
        let ry = if y > hy { hry + chin_stretch } else { hry };
        if in_ellipse((hx, hy, hrx, ry)) {
            return SKIN;
        }
        BACKGROUND
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / (abx * abx + aby * aby)).clamp(0.0, 1.0);
    let (dx, dy) = (p.0 - a.0 - t * abx, p.1 - a.1 - t * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Local ↔ image mapping for one pose.
#[derive(Debug, Clone, Copy)]
struct Pose {
    cos: f64,
    sin: f64,
    shear: f64,
    shift: (f64, f64),
}

impl Pose {
    fn new(v: &AupsVector, spec: &RenderSpec) -> Self {
        let [pitch, yaw, roll] = *v.pose();
        let theta = spec.roll_gain * roll;
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            shear: spec.yaw_shear * yaw,
            shift: (spec.yaw_shift * yaw, spec.pitch_shift * pitch),
        }
    }

    fn to_image(self, (x, y): (f64, f64)) -> (f64, f64) {
        let sx = x + self.shear * y;
        (
            0.5 + self.cos * sx - self.sin * y + self.shift.0,
            0.5 + self.sin * sx + self.cos * y + self.shift.1,
        )
    }

    fn to_local(self, (px, py): (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (px - 0.5 - self.shift.0, py - 0.5 - self.shift.1);
        let sx = self.cos * dx + self.sin * dy;
        let y = -self.sin * dx + self.cos * dy;
        (sx - self.shear * y, y)
    }
}

fn require_normalized(v: &AupsVector) -> Result<()> {
    if v.is_normalized() {
        Ok(())
    } else {
        Err(Error::Contract("the renderer expects a normalized AU+PS vector".into()))
    }
}

/// Interleaved 8-bit RGB rendering.
pub fn render_rgb8(v: &AupsVector, spec: &RenderSpec) -> Result<Vec<u8>> {
    require_normalized(v)?;
    let face = Face::from_aups(v);
    let pose = Pose::new(v, spec);
    let (h, w, s) = (spec.height, spec.width, spec.supersample.max(1));
    let samples = (s * s) as u32;
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0u32; 3];
            for si in 0..s {
                for sj in 0..s {
                    let px = (j as f64 + (sj as f64 + 0.5) / s as f64) / w as f64;
                    let py = (i as f64 + (si as f64 + 0.5) / s as f64) / h as f64;
                    let (x, y) = pose.to_local((px, py));
                    let c = face.colour(x, y);
                    for k in 0..3 {
                        acc[k] += c[k] as u32;
                    }
                }
            }
            // Integer round-half-up of the sub-sample mean.
            out.extend(acc.iter().map(|&a| ((2 * a + samples) / (2 * samples)) as u8));
        }
    }
    Ok(out)
}

/// Frame for `v`, already quantized to 8 bits.
pub fn render_face(v: &AupsVector, spec: &RenderSpec) -> Result<FrameImage> {
    FrameImage::from_rgb8(spec.height, spec.width, &render_rgb8(v, spec)?)
}

/// Deformed and posed landmarks, rounded to six decimals.
pub fn face_landmarks(v: &AupsVector, spec: &RenderSpec) -> Result<LandmarkSet> {
    require_normalized(v)?;
    let face = Face::from_aups(v);
    let pose = Pose::new(v, spec);
    let pts = face
        .landmarks()
        .iter()
        .map(|&p| {
            let (x, y) = pose.to_image(p);
            (round6(x.clamp(0.0, 1.0)), round6(y.clamp(0.0, 1.0)))
        })
        .collect();
    LandmarkSet::new(pts)
}

pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Pixels whose colour is within a small distance of the mouth interior.
pub fn mouth_pixel_count(frame: &FrameImage) -> usize {
    let rgb = frame.to_rgb8();
    rgb.chunks(3)
        .filter(|p| {
            let d: i32 = p.iter().zip(MOUTH).map(|(&a, b)| (a as i32 - b as i32).pow(2)).sum();
            d <= 30 * 30
        })
        .count()
}
