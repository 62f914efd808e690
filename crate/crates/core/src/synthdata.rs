//! Deterministic parametric face-like images with exact labels for every task.
//!
//! A sample is drawn as latent [`FaceFactors`]; the image and all labels are
//! pure functions of them. Geometry lives in a head-local frame where the head
//! is centred at the origin, `x` points right, `y` points down and the image
//! half-width is 1. The local frame is rotated in-plane by `roll`.
//!
//! | element        | geometry (local frame)                                   | encodes        |
//! |----------------|----------------------------------------------------------|----------------|
//! | head ellipse   | semi-axes `0.58 + 0.10·a`, `0.72 + 0.12·a`, `a = age/100` | age            |
//! | stripes        | `0.06·sin(2π(3 + 5a)·y + phase)` inside the head          | age            |
//! | head tone      | `0.55 + 0.15·gender`                                      | gender         |
//! | eyes           | discs r=0.07 at `(±0.3 + 0.3·yaw, −0.15 + 0.2·pitch)`     | yaw, pitch     |
//! | nose           | disc r=0.05 at `(0.45·yaw, 0.2 + 0.15·pitch)`             | yaw, pitch     |
//! | mouth          | band around `y = 0.48 + 0.06c(1 − 2(x/0.25)²)`, `|x| ≤ 0.25`, half-thickness `0.02 + 0.025·o` | expression |
//! | attribute 0..5 | brow bar, glasses bar, cheek dot, chin mark, forehead band, ear notch ([`GLYPHS`]) | attributes |
//!
//! Expression `k` uses mouth curvature/openness `(c, o)` from [`MOUTH`].
//! Pixels are averaged over a 4×4 grid of subsamples (box filter).

use serde::{Deserialize, Serialize};

use qface_numerics::{Purpose, RngStream};

use crate::error::{Error, Result};
use crate::tasks::rotation::RotationLabel;

pub const NUM_EXPRESSIONS: usize = 7;
pub const NUM_ATTRIBUTES: usize = 6;
pub const NUM_ACTION_UNITS: usize = 4;
pub const ANGLE_RANGE: f64 = 0.5;
pub const DEFAULT_TRAIN: usize = 4096;
pub const DEFAULT_TEST: usize = 1024;

pub const EXPRESSION_NAMES: [&str; NUM_EXPRESSIONS] =
    ["surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral"];
pub const HAPPY: usize = 3;

/// Mouth (curvature, openness) per expression class.
pub const MOUTH: [(f64, f64); NUM_EXPRESSIONS] =
    [(0.0, 2.0), (-1.0, 1.0), (1.0, 1.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, 0.0)];

/// Subsamples per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

const BACKGROUND: f64 = 0.15;
const DARK: f64 = 0.08;
const BRIGHT: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, x1, y0, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Glyph {
    pub name: &'static str,
    pub shape: Shape,
    pub value: f64,
}

/// Attribute glyphs in bit order, drawn over the face in this order.
pub const GLYPHS: [Glyph; NUM_ATTRIBUTES] = [
    Glyph { name: "brow_bar", shape: Shape::Rect { x0: -0.42, x1: 0.42, y0: -0.46, y1: -0.40 }, value: DARK },
    Glyph { name: "glasses", shape: Shape::Rect { x0: -0.45, x1: 0.45, y0: 0.03, y1: 0.07 }, value: DARK },
    Glyph { name: "cheek_dot", shape: Shape::Disc { cx: 0.42, cy: 0.30, r: 0.06 }, value: DARK },
    Glyph { name: "chin_mark", shape: Shape::Rect { x0: -0.10, x1: 0.10, y0: 0.64, y1: 0.70 }, value: DARK },
    Glyph { name: "forehead_band", shape: Shape::Rect { x0: -0.25, x1: 0.25, y0: -0.62, y1: -0.54 }, value: BRIGHT },
    Glyph { name: "ear_notch", shape: Shape::Rect { x0: 0.50, x1: 0.70, y0: -0.05, y1: 0.05 }, value: BACKGROUND },
];
pub const GLASSES: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceFactors {
    pub expression: usize,
    pub attributes: [bool; NUM_ATTRIBUTES],
    pub action_units: [bool; NUM_ACTION_UNITS],
    pub age: f64,
    /// 0 male, 1 female.
    pub gender: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub texture_seed: u64,
}

/// Action units as fixed boolean functions of expression and attributes:
///
/// - AU0 = [happiness] ⊕ attribute 0
/// - AU1 = [surprise or fear] ⊕ attribute 1
/// - AU2 = [sadness or disgust] ⊕ attribute 2
/// - AU3 = [surprise, fear, disgust or anger] ⊕ attribute 5
pub fn derive_action_units(expression: usize, attributes: &[bool; NUM_ATTRIBUTES]) -> [bool; NUM_ACTION_UNITS] {
    [
        (expression == HAPPY) ^ attributes[0],
        matches!(expression, 0 | 1) ^ attributes[1],
        matches!(expression, 4 | 2) ^ attributes[2],
        matches!(expression, 0 | 1 | 2 | 5) ^ attributes[5],
    ]
}

pub fn sample_factors(rng: &mut RngStream) -> FaceFactors {
    let expression = rng.below(NUM_EXPRESSIONS);
    let mut attributes = [false; NUM_ATTRIBUTES];
    for a in attributes.iter_mut() {
        *a = rng.bernoulli(0.5);
    }
    let age = rng.uniform_in(0.0, 100.0);
    let gender = rng.below(2);
    let yaw = rng.uniform_in(-ANGLE_RANGE, ANGLE_RANGE);
    let pitch = rng.uniform_in(-ANGLE_RANGE, ANGLE_RANGE);
    let roll = rng.uniform_in(-ANGLE_RANGE, ANGLE_RANGE);
    let texture_seed = rng.below(1 << 16) as u64;
    FaceFactors {
        expression,
        action_units: derive_action_units(expression, &attributes),
        attributes,
        age,
        gender,
        yaw,
        pitch,
        roll,
        texture_seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceLabels {
    pub expression: usize,
    pub attributes: [bool; NUM_ATTRIBUTES],
    pub action_units: [bool; NUM_ACTION_UNITS],
    pub age: f64,
    pub gender: usize,
    #[serde(with = "rotation_serde")]
    pub rotation: RotationLabel,
}

mod rotation_serde {
    use super::RotationLabel;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &RotationLabel, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(r.matrix().iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RotationLabel, D::Error> {
        let m = <[[f64; 3]; 3]>::deserialize(d)?;
        RotationLabel::new(m).map_err(D::Error::custom)
    }
}

pub fn labels(f: &FaceFactors) -> FaceLabels {
    FaceLabels {
        expression: f.expression,
        attributes: f.attributes,
        action_units: f.action_units,
        age: f.age,
        gender: f.gender,
        rotation: RotationLabel::from_euler_zyx(f.yaw, f.pitch, f.roll),
    }
}

/// Head-local coordinates of every subsample of pixel `(px, py)`.
pub fn subsample_points(f: &FaceFactors, size: usize, px: usize, py: usize) -> Vec<(f64, f64)> {
    let (s, c) = f.roll.sin_cos();
    let mut pts = Vec::with_capacity(SUPERSAMPLE * SUPERSAMPLE);
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let u = 2.0 * (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64 - 1.0;
            let v = 2.0 * (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64 - 1.0;
            // Inverse roll takes image coordinates into the head frame.
            pts.push((c * u + s * v, -s * u + c * v));
        }
    }
    pts
}

fn shade(f: &FaceFactors, x: f64, y: f64) -> f64 {
    let a = f.age / 100.0;
    let (rx, ry) = (0.58 + 0.10 * a, 0.72 + 0.12 * a);
    let mut val = BACKGROUND;
    if (x / rx).powi(2) + (y / ry).powi(2) <= 1.0 {
        let phase = (f.texture_seed % 1024) as f64 / 1024.0 * std::f64::consts::TAU;
        val = 0.55 + 0.15 * f.gender as f64
            + 0.06 * (std::f64::consts::TAU * (3.0 + 5.0 * a) * y + phase).sin();
    }
    for (bit, glyph) in GLYPHS.iter().enumerate() {
        if bit == GLASSES {
            continue;
        }
        if f.attributes[bit] && bit != 5 && glyph.shape.contains(x, y) {
            val = glyph.value;
        }
    }
    let eye_y = -0.15 + 0.2 * f.pitch;
    for side in [-1.0, 1.0] {
        if (Shape::Disc { cx: side * 0.3 + 0.3 * f.yaw, cy: eye_y, r: 0.07 }).contains(x, y) {
            val = DARK;
        }
    }
    if (Shape::Disc { cx: 0.45 * f.yaw, cy: 0.2 + 0.15 * f.pitch, r: 0.05 }).contains(x, y) {
        val = 0.3;
    }
    let (curv, open) = MOUTH[f.expression];
    if x.abs() <= 0.25 {
        let t = x / 0.25;
        let centre = 0.48 + 0.06 * curv * (1.0 - 2.0 * t * t);
        if (y - centre).abs() <= 0.02 + 0.025 * open {
            val = DARK;
        }
    }
    if f.attributes[GLASSES] && GLYPHS[GLASSES].shape.contains(x, y) {
        val = GLYPHS[GLASSES].value;
    }
    // The ear notch cuts into the outline, so it goes last.
    if f.attributes[5] && GLYPHS[5].shape.contains(x, y) {
        val = GLYPHS[5].value;
    }
    val
}

/// Renders a `size × size` greyscale image with values in `[0, 1]`, row-major.
pub fn render(f: &FaceFactors, size: usize) -> Vec<f32> {
    let mut img = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let pts = subsample_points(f, size, px, py);
            let sum: f64 = pts.iter().map(|&(x, y)| shade(f, x, y)).sum();
            img.push((sum / pts.len() as f64).clamp(0.0, 1.0) as f32);
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub factors: FaceFactors,
    pub labels: FaceLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub split: Split,
    pub image_size: usize,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Parses and checks a manifest: version, index uniqueness, label consistency.
    pub fn from_json(s: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(s)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", m.version)));
        }
        if m.image_size == 0 || m.image_size > 4096 {
            return Err(Error::Data(format!("bad image size {}", m.image_size)));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &m.samples {
            if !seen.insert(s.index) {
                return Err(Error::Data(format!("duplicate sample index {}", s.index)));
            }
            let f = &s.factors;
            if f.expression >= NUM_EXPRESSIONS || f.gender > 1 {
                return Err(Error::Data(format!("sample {}: label out of range", s.index)));
            }
            if f.action_units != derive_action_units(f.expression, &f.attributes) {
                return Err(Error::Data(format!("sample {}: action units inconsistent with factors", s.index)));
            }
            let expected = labels(f);
            let lab = &s.labels;
            let rot_err = expected
                .rotation
                .matrix()
                .iter()
                .flatten()
                .zip(lab.rotation.matrix().iter().flatten())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if lab.expression != expected.expression
                || lab.attributes != expected.attributes
                || lab.action_units != expected.action_units
                || lab.gender != expected.gender
                || lab.age != expected.age
                || !(rot_err <= 1e-9)
            {
                return Err(Error::Data(format!("sample {}: labels do not match factors", s.index)));
            }
        }
        Ok(m)
    }
}

/// Disjoint train/test manifests: train takes indices `0..n_train`, test the
/// following `n_test`, all drawn from one data stream.
pub fn build_split(n_train: usize, n_test: usize, seed: u64, image_size: usize) -> (DatasetManifest, DatasetManifest) {
    let mut rng = RngStream::new(seed, Purpose::Data);
    let mut make = |split, range: std::ops::Range<usize>| {
        let samples = range
            .map(|index| {
                let factors = sample_factors(&mut rng);
                SampleRecord { index, labels: labels(&factors), factors }
            })
            .collect();
        DatasetManifest { version: MANIFEST_VERSION, seed, split, image_size, samples }
    };
    let train = make(Split::Train, 0..n_train);
    let test = make(Split::Test, n_train..n_train + n_test);
    (train, test)
}

/// Rounds to the 8-bit grid used by stored PGM images, so in-memory and
/// on-disk datasets are identical.
pub fn quantize(img: &[f32]) -> Vec<f32> {
    img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect()
}

/// Samples with rendered, 8-bit-quantised images held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub labels: Vec<FaceLabels>,
    pub images: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        Dataset {
            image_size: m.image_size,
            labels: m.samples.iter().map(|s| s.labels).collect(),
            images: crate::parallel::map(&m.samples, |s| quantize(&render(&s.factors, m.image_size))),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { image_size: self.image_size, labels: self.labels[..n].to_vec(), images: self.images[..n].to_vec() }
    }
}
