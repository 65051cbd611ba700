//! Value types shared by every stage: action units + head pose, landmark
//! sets, frames and training samples.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

pub const AU_DIM: usize = 17;
pub const POSE_DIM: usize = 3;
/// Length of the concatenated AU+PS vector.
pub const AUPS_DIM: usize = AU_DIM + POSE_DIM;

/// Intensity action units in OpenFace order.
pub const AU_NAMES: [&str; AU_DIM] = [
    "au01", "au02", "au04", "au05", "au06", "au07", "au09", "au10", "au12", "au14", "au15",
    "au17", "au20", "au23", "au25", "au26", "au45",
];
pub const POSE_NAMES: [&str; POSE_DIM] = ["pitch", "yaw", "roll"];

/// Indices into the AU block for the units the renderer draws.
pub mod au {
    pub const BROW_INNER: usize = 0; // AU01
    pub const BROW_OUTER: usize = 1; // AU02
    pub const BROW_LOWER: usize = 2; // AU04
    pub const LID_RAISE: usize = 3; // AU05
    pub const UPPER_LIP_RAISE: usize = 7; // AU10
    pub const LIP_CORNER: usize = 8; // AU12
    pub const CORNER_DEPRESS: usize = 10; // AU15
    pub const LIP_STRETCH: usize = 12; // AU20
    pub const LIP_TIGHTEN: usize = 13; // AU23
    pub const LIPS_PART: usize = 14; // AU25
    pub const JAW_DROP: usize = 15; // AU26
    pub const BLINK: usize = 16; // AU45
}

pub const AU_RAW_MAX: f64 = 5.0;
pub const POSE_RAW_MAX: f64 = FRAC_PI_2;

/// 17 action-unit intensities plus (pitch, yaw, roll).
///
/// Raw vectors hold AU in `[0, 5]` and pose in radians within `[-π/2, π/2]`;
/// normalized vectors hold AU in `[0, 1]` and pose in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AupsVector {
    au: [f64; AU_DIM],
    pose: [f64; POSE_DIM],
    normalized: bool,
}

fn check(index: usize, value: f64, lo: f64, hi: f64) -> Result<()> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(Error::Range { index, value, lo, hi })
    }
}

impl AupsVector {
    pub fn new(au: [f64; AU_DIM], pose: [f64; POSE_DIM], normalized: bool) -> Result<Self> {
        let (au_hi, pose_hi) = if normalized { (1.0, 1.0) } else { (AU_RAW_MAX, POSE_RAW_MAX) };
        for (i, &v) in au.iter().enumerate() {
            check(i, v, 0.0, au_hi)?;
        }
        for (i, &v) in pose.iter().enumerate() {
            check(AU_DIM + i, v, -pose_hi, pose_hi)?;
        }
        Ok(Self { au, pose, normalized })
    }

    /// From a 20-long slice laid out `[au…, pitch, yaw, roll]`.
    pub fn from_slice(values: &[f64], normalized: bool) -> Result<Self> {
        if values.len() != AUPS_DIM {
            return Err(Error::Shape(format!(
                "AU+PS vector needs {AUPS_DIM} values, got {}",
                values.len()
            )));
        }
        let mut au = [0.0; AU_DIM];
        let mut pose = [0.0; POSE_DIM];
        au.copy_from_slice(&values[..AU_DIM]);
        pose.copy_from_slice(&values[AU_DIM..]);
        Self::new(au, pose, normalized)
    }

    /// All-zero normalized vector; also the decoder's start token.
    pub fn zero_normalized() -> Self {
        Self {
            au: [0.0; AU_DIM],
            pose: [0.0; POSE_DIM],
            normalized: true,
        }
    }

    pub fn au(&self) -> &[f64; AU_DIM] {
        &self.au
    }

    pub fn pose(&self) -> &[f64; POSE_DIM] {
        &self.pose
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_array(&self) -> [f64; AUPS_DIM] {
        let mut out = [0.0; AUPS_DIM];
        out[..AU_DIM].copy_from_slice(&self.au);
        out[AU_DIM..].copy_from_slice(&self.pose);
        out
    }

    pub fn get(&self, index: usize) -> f64 {
        if index < AU_DIM {
            self.au[index]
        } else {
            self.pose[index - AU_DIM]
        }
    }

    /// Mean squared difference over all 20 components.
    pub fn mse(&self, other: &Self) -> f64 {
        let a = self.to_array();
        let b = other.to_array();
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / AUPS_DIM as f64
    }
}

/// Linear map from raw units into `[0,1]` AU / `[-1,1]` pose.
pub fn normalize_aups(v: &AupsVector) -> Result<AupsVector> {
    if v.normalized {
        return Err(Error::Contract("normalize_aups expects a raw vector".into()));
    }
    let au = v.au.map(|x| x / AU_RAW_MAX);
    let pose = v.pose.map(|x| x / POSE_RAW_MAX);
    AupsVector::new(au, pose, true)
}

pub fn denormalize_aups(v: &AupsVector) -> Result<AupsVector> {
    if !v.normalized {
        return Err(Error::Contract("denormalize_aups expects a normalized vector".into()));
    }
    let au = v.au.map(|x| x * AU_RAW_MAX);
    let pose = v.pose.map(|x| x * POSE_RAW_MAX);
    AupsVector::new(au, pose, false)
}

/// Ordered facial landmarks in normalized image coordinates `[0,1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(x, y)) in points.iter().enumerate() {
            check(2 * i, x, 0.0, 1.0)?;
            check(2 * i + 1, y, 0.0, 1.0)?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[x0, y0, x1, y1, …]`
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }
}

/// Pointwise mean of equally sized landmark sets.
///
/// Coordinates are summed in a canonical (sorted) order so the result is
/// bitwise independent of the order of `sets`.
pub fn average_landmarks(sets: &[LandmarkSet]) -> Result<LandmarkSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::EmptyInput("average_landmarks needs at least one set".into()))?;
    let count = first.len();
    if let Some(bad) = sets.iter().find(|s| s.len() != count) {
        return Err(Error::Shape(format!(
            "landmark sets have {} and {} points",
            count,
            bad.len()
        )));
    }
    let n = sets.len() as f64;
    let mut column = Vec::with_capacity(sets.len());
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let mut mean_of = |pick: fn(&(f64, f64)) -> f64| {
            column.clear();
            column.extend(sets.iter().map(|s| pick(&s.points[k])));
            column.sort_by(f64::total_cmp);
            (column.iter().sum::<f64>() / n).clamp(0.0, 1.0)
        };
        let x = mean_of(|p| p.0);
        let y = mean_of(|p| p.1);
        points.push((x, y));
    }
    LandmarkSet::new(points)
}

/// RGB frame with values in `[-1,1]`, stored planar (`[3, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl FrameImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "frame {height}x{width} needs {} values, got {}",
                3 * height * width,
                pixels.len()
            )));
        }
        for (i, &p) in pixels.iter().enumerate() {
            check(i, p as f64, -1.0, 1.0)?;
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Uniform frame; `0.0` gives the mid-gray used for missing priors.
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(-1.0, 1.0); 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Component `c` of pixel `(y, x)`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(to_u8(self.pixels[c * plane + i]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let plane = height * width;
        if rgb.len() != 3 * plane {
            return Err(Error::Shape(format!(
                "rgb buffer of {} bytes for {height}x{width}",
                rgb.len()
            )));
        }
        let mut pixels = vec![0.0f32; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                pixels[c * plane + i] = from_u8(rgb[3 * i + c]);
            }
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// One training example: text, per-frame AU+PS, per-frame images.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub text: String,
    aups_seq: Vec<AupsVector>,
    frames: Vec<FrameImage>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        aups_seq: Vec<AupsVector>,
        frames: Vec<FrameImage>,
    ) -> Result<Self> {
        let id = id.into();
        if aups_seq.is_empty() {
            return Err(Error::EmptyInput(format!("sample {id} has no frames")));
        }
        if aups_seq.len() != frames.len() {
            return Err(Error::Shape(format!(
                "sample {id}: {} AU+PS rows but {} frames",
                aups_seq.len(),
                frames.len()
            )));
        }
        Ok(Self {
            id,
            text: text.into(),
            aups_seq,
            frames,
        })
    }

    pub fn aups_seq(&self) -> &[AupsVector] {
        &self.aups_seq
    }

    pub fn frames(&self) -> &[FrameImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.aups_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aups_seq.is_empty()
    }
}
