//! Procedural image datasets for desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassSet, Dataset, EpisodeError, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    GaussianBlobs,
    RingShapes,
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian_blobs" | "blobs" => Ok(Self::GaussianBlobs),
            "ring_shapes" | "rings" => Ok(Self::RingShapes),
            other => Err(format!(
                "unknown synthetic kind {other:?} (expected gaussian_blobs or ring_shapes)"
            )),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::GaussianBlobs => "gaussian_blobs",
            Self::RingShapes => "ring_shapes",
        })
    }
}

/// Separability knob in `[0, 1]`; 0 renders every example of a class identically.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Difficulty(pub f64);

impl Difficulty {
    pub const EASY: Self = Self(0.0);
    pub const MID: Self = Self(0.5);
    pub const HARD: Self = Self(1.0);
}

impl std::str::FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "easy" => Ok(Self::EASY),
            "mid" => Ok(Self::MID),
            "hard" => Ok(Self::HARD),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .map(Self)
                .ok_or_else(|| {
                    format!(
                        "difficulty must be easy, mid, hard or a number in [0, 1], got {other:?}"
                    )
                }),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            v if v == 0.0 => f.write_str("easy"),
            v if v == 0.5 => f.write_str("mid"),
            v if v == 1.0 => f.write_str("hard"),
            v => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::GaussianBlobs,
            n_classes: 30,
            per_class: 40,
            side: 16,
            channels: 1,
            difficulty: Difficulty::MID,
            seed: 0,
        }
    }
}

struct ClassShape {
    cx: f64,
    cy: f64,
    /// blob width, or ring radius
    size: f64,
    /// ring thickness; unused for blobs
    width: f64,
    gains: Vec<f64>,
}

fn class_shapes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<ClassShape> {
    let side = spec.side as f64;
    let mut min_sep = 0.2;
    let mut shapes: Vec<ClassShape> = Vec::with_capacity(spec.n_classes);
    let mut failures = 0;
    while shapes.len() < spec.n_classes {
        let cand = match spec.kind {
            SynthKind::GaussianBlobs => ClassShape {
                cx: rng.random_range(0.2..0.8) * side,
                cy: rng.random_range(0.2..0.8) * side,
                size: rng.random_range(0.07..0.16) * side,
                width: 0.0,
                gains: (0..spec.channels)
                    .map(|_| rng.random_range(0.5..1.0))
                    .collect(),
            },
            SynthKind::RingShapes => ClassShape {
                cx: (0.5 + rng.random_range(-0.1..0.1)) * side,
                cy: (0.5 + rng.random_range(-0.1..0.1)) * side,
                size: rng.random_range(0.12..0.38) * side,
                width: rng.random_range(0.03..0.09) * side,
                gains: (0..spec.channels)
                    .map(|_| rng.random_range(0.5..1.0))
                    .collect(),
            },
        };
        // distance in side-normalized (x, y, 2*size, 4*width) space
        let far = shapes.iter().all(|s| {
            let d2 = ((s.cx - cand.cx) / side).powi(2)
                + ((s.cy - cand.cy) / side).powi(2)
                + (2.0 * (s.size - cand.size) / side).powi(2)
                + (4.0 * (s.width - cand.width) / side).powi(2);
            d2.sqrt() >= min_sep
        });
        if far {
            shapes.push(cand);
            failures = 0;
        } else {
            failures += 1;
            if failures > 1000 {
                min_sep *= 0.9;
                failures = 0;
            }
        }
    }
    shapes
}

fn render(spec: &SynthSpec, shape: &ClassShape, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let d = spec.difficulty.0;
    let side = spec.side as f64;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let jitter = 0.08 * d * side;
    let cx = shape.cx + jitter * std_normal.sample(rng);
    let cy = shape.cy + jitter * std_normal.sample(rng);
    let size = shape.size * (0.25 * d * std_normal.sample(rng)).exp();
    let amp = 1.0 + rng.random_range(-0.4..=0.4) * d;
    let noise = 0.2 * d;
    let (dx, dy, ds, da) = (
        rng.random_range(0.0..side),
        rng.random_range(0.0..side),
        rng.random_range(0.05..0.2) * side,
        0.7 * d,
    );
    for &gain in &shape.gains {
        for i in 0..spec.side {
            for j in 0..spec.side {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                let signal = match spec.kind {
                    SynthKind::GaussianBlobs => (-r2 / (2.0 * size * size)).exp(),
                    SynthKind::RingShapes => {
                        (-(r2.sqrt() - size).powi(2) / (2.0 * shape.width * shape.width)).exp()
                    }
                };
                let clutter = da * (-((x - dx).powi(2) + (y - dy).powi(2)) / (2.0 * ds * ds)).exp();
                let mut v = gain * amp * signal + clutter;
                if noise > 0.0 {
                    v += noise * std_normal.sample(rng);
                }
                out.push(v);
            }
        }
    }
}

/// Renders `n_classes * per_class` images of shape `[channels, side, side]`.
/// Each class has its own location/size (and per-channel gain); the
/// difficulty knob scales per-example jitter, amplitude variation, a random
/// clutter bump and pixel noise.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, EpisodeError> {
    if spec.n_classes == 0 || spec.per_class == 0 || spec.side < 4 || spec.channels == 0 {
        return Err(EpisodeError::Dataset(format!(
            "synthetic spec needs positive counts and side >= 4, got {spec:?}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.difficulty.0) {
        return Err(EpisodeError::Dataset(format!(
            "difficulty {} outside [0, 1]",
            spec.difficulty.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = class_shapes(spec, &mut rng);
    let mut classes = Vec::with_capacity(spec.n_classes);
    for (c, shape) in shapes.iter().enumerate() {
        let mut crng = ChaCha8Rng::seed_from_u64(spec.seed);
        crng.set_stream(1 + c as u64);
        let examples = (0..spec.per_class)
            .map(|i| {
                let mut data = Vec::with_capacity(spec.channels * spec.side * spec.side);
                render(spec, shape, &mut crng, &mut data);
                Sample {
                    uid: (c * spec.per_class + i) as u64,
                    data,
                }
            })
            .collect();
        classes.push(ClassSet {
            id: c,
            name: format!("{}_{c:03}", spec.kind),
            examples,
        });
    }
    Dataset::new(vec![spec.channels, spec.side, spec.side], classes)
}
