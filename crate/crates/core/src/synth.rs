//! Synthetic event scenes: moving bright shapes on a dark background seen
//! through an idealized log-intensity threshold sensor.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::event_io::{parse_evt, write_evt, Event, EventStream, Polarity};
use crate::rng_from_seed;

pub const INTENSITY_FLOOR: f64 = 0.05;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeClass {
    Bar,
    Circle,
    Cross,
    Triangle,
}

pub const SHAPE_CLASSES: [ShapeClass; 4] = [ShapeClass::Bar, ShapeClass::Circle, ShapeClass::Cross, ShapeClass::Triangle];

impl ShapeClass {
    pub fn id(self) -> usize {
        SHAPE_CLASSES.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<Self> {
        SHAPE_CLASSES.get(id).copied()
    }

    /// Whether shape-local point `(u, v)` lies inside a shape of size `s`.
    fn contains(self, u: f64, v: f64, s: f64) -> bool {
        match self {
            ShapeClass::Bar => u.abs() <= s && v.abs() <= 0.3 * s,
            ShapeClass::Circle => u * u + v * v <= s * s,
            ShapeClass::Cross => {
                let arm = 0.28 * s;
                (u.abs() <= s && v.abs() <= arm) || (v.abs() <= s && u.abs() <= arm)
            }
            ShapeClass::Triangle => {
                // equilateral, circumradius s, apex at -v
                let h = 1.5 * s;
                let top = -s;
                if v < top || v > top + h {
                    return false;
                }
                let half = (v - top) / h * (s * 3f64.sqrt() / 2.0);
                u.abs() <= half
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class: ShapeClass,
    /// Shape center at frame 0, pixels.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Shape half-extent, pixels.
    pub size: f64,
    /// Orientation, radians.
    pub angle: f64,
    /// Log-intensity contrast threshold.
    pub threshold: f64,
    pub frames: usize,
    /// Microseconds between frames.
    pub frame_dt_us: u64,
    pub width: u16,
    pub height: u16,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: u16,
    pub height: u16,
    pub frames: usize,
    pub frame_dt_us: u64,
    pub threshold: f64,
    pub size_range: (f64, f64),
    pub speed_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            frames: 8,
            frame_dt_us: 1_000,
            threshold: 0.4,
            size_range: (9.0, 18.0),
            speed_range: (1.0, 2.5),
        }
    }
}

impl SceneSpec {
    /// Draws a random scene of `class` that stays mostly on the sensor.
    pub fn random<R: Rng + ?Sized>(class: ShapeClass, cfg: &SynthConfig, seed: u64, rng: &mut R) -> Self {
        let size = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let speed = rng.random_range(cfg.speed_range.0..=cfg.speed_range.1);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let velocity = (speed * heading.cos(), speed * heading.sin());
        let travel = (cfg.frames.saturating_sub(1)) as f64;
        // keep the mid-trajectory center near the middle of the sensor
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let margin = 0.3;
        let mid = (
            rng.random_range(w * margin..=w * (1.0 - margin)),
            rng.random_range(h * margin..=h * (1.0 - margin)),
        );
        let start = (mid.0 - velocity.0 * travel / 2.0, mid.1 - velocity.1 * travel / 2.0);
        SceneSpec {
            class,
            start,
            velocity,
            size,
            angle: rng.random_range(0.0..std::f64::consts::TAU),
            threshold: cfg.threshold,
            frames: cfg.frames,
            frame_dt_us: cfg.frame_dt_us,
            width: cfg.width,
            height: cfg.height,
            seed,
        }
    }

    pub fn center_at(&self, frame: usize) -> (f64, f64) {
        let f = frame as f64;
        (self.start.0 + self.velocity.0 * f, self.start.1 + self.velocity.1 * f)
    }

    /// Fraction of each pixel covered by the shape at `frame`.
    pub fn coverage(&self, frame: usize) -> Vec<f64> {
        let (w, h) = (self.width as usize, self.height as usize);
        let (cx, cy) = self.center_at(frame);
        let (sin, cos) = self.angle.sin_cos();
        let mut out = vec![0.0; w * h];
        let reach = self.size * 1.5 + 2.0;
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in 0..h {
            if (y as f64 + 0.5 - cy).abs() > reach {
                continue;
            }
            for x in 0..w {
                if (x as f64 + 0.5 - cx).abs() > reach {
                    continue;
                }
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step - cx;
                        let py = y as f64 + (sy as f64 + 0.5) * step - cy;
                        let u = cos * px + sin * py;
                        let v = -sin * px + cos * py;
                        if self.class.contains(u, v, self.size) {
                            hits += 1;
                        }
                    }
                }
                out[y * w + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            }
        }
        out
    }
}

/// Intensity image in `[0.05, 1]`, row-major.
pub fn render_frame(spec: &SceneSpec, frame: usize) -> Vec<f64> {
    spec.coverage(frame)
        .into_iter()
        .map(|c| INTENSITY_FLOOR + (1.0 - INTENSITY_FLOOR) * c)
        .collect()
}

/// Idealized event sensor: each pixel keeps a reference log intensity and
/// emits one event per threshold crossing, timestamps linearly interpolated
/// within the frame interval.
pub fn frames_to_events(frames: &[Vec<f64>], width: u16, height: u16, threshold: f64, frame_dt_us: u64) -> EventStream {
    assert!(threshold > 0.0, "contrast threshold must be positive");
    let n = width as usize * height as usize;
    let mut events = Vec::new();
    let Some(first) = frames.first() else {
        return EventStream::empty(width, height);
    };
    let mut reference: Vec<f64> = first.iter().map(|v| v.max(INTENSITY_FLOOR).ln()).collect();
    let mut prev = reference.clone();
    for (k, frame) in frames.iter().enumerate().skip(1) {
        let t0 = (k - 1) as f64 * frame_dt_us as f64;
        for p in 0..n {
            let cur = frame[p].max(INTENSITY_FLOOR).ln();
            let before = prev[p];
            let delta = cur - before;
            if delta != 0.0 {
                let (x, y) = ((p % width as usize) as u16, (p / width as usize) as u16);
                loop {
                    let diff = cur - reference[p];
                    let (polarity, step) = if diff >= threshold {
                        (Polarity::On, threshold)
                    } else if diff <= -threshold {
                        (Polarity::Off, -threshold)
                    } else {
                        break;
                    };
                    reference[p] += step;
                    let frac = ((reference[p] - before) / delta).clamp(0.0, 1.0);
                    let t = (t0 + frac * frame_dt_us as f64).round() as u64;
                    events.push(Event { t, x, y, polarity });
                }
            }
            prev[p] = cur;
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    EventStream { width, height, events }
}

pub fn simulate(spec: &SceneSpec) -> EventStream {
    let frames: Vec<Vec<f64>> = (0..spec.frames).map(|f| render_frame(spec, f)).collect();
    frames_to_events(&frames, spec.width, spec.height, spec.threshold, spec.frame_dt_us)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub stream: EventStream,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test)
    }
}

fn sample_seed(seed: u64, class: usize, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((class as u64) << 40) ^ i as u64
}

/// Number of the `n` per-class samples assigned to training (80 %).
pub fn train_count(n: usize) -> usize {
    (n * 4).div_ceil(5).min(n)
}

/// `n_per_class` scenes for each of `num_classes` shape classes; the first
/// 80 % of each class form the training split.
pub fn gen_dataset(num_classes: usize, n_per_class: usize, seed: u64, cfg: &SynthConfig) -> LabeledDataset {
    assert!((1..=SHAPE_CLASSES.len()).contains(&num_classes));
    let n_train = train_count(n_per_class);
    let mut samples = Vec::with_capacity(num_classes * n_per_class);
    for (class, shape) in SHAPE_CLASSES.iter().take(num_classes).enumerate() {
        for i in 0..n_per_class {
            let s = sample_seed(seed, class, i);
            let spec = SceneSpec::random(*shape, cfg, s, &mut rng_from_seed(s));
            samples.push(Sample {
                id: 0,
                stream: simulate(&spec),
                label: class,
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    // interleave classes so ids do not leak labels
    let order = interleaved_order(num_classes, n_per_class);
    let mut out: Vec<Sample> = order.into_iter().map(|i| samples[i].clone()).collect();
    for (id, s) in out.iter_mut().enumerate() {
        s.id = id;
    }
    LabeledDataset { num_classes, samples: out }
}

fn interleaved_order(classes: usize, per: usize) -> Vec<usize> {
    (0..per).flat_map(|i| (0..classes).map(move |c| c * per + i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: usize,
    pub stream: EventStream,
    /// Row-major `H×W`; 0 is background, `class + 1` inside the shape.
    pub class_map: Vec<u8>,
    pub split: Split,
}

pub const SEG_CLASSES: usize = SHAPE_CLASSES.len() + 1;

/// Segmentation scenes; the class map is the shape mask at the final frame.
pub fn gen_seg_dataset(n_per_class: usize, seed: u64, cfg: &SynthConfig) -> Vec<SegSample> {
    let n_train = train_count(n_per_class);
    let mut out = Vec::new();
    for i in 0..n_per_class {
        for (class, shape) in SHAPE_CLASSES.iter().enumerate() {
            let s = sample_seed(seed ^ 0x5E6, class, i);
            let spec = SceneSpec::random(*shape, cfg, s, &mut rng_from_seed(s));
            let class_map = spec
                .coverage(spec.frames - 1)
                .into_iter()
                .map(|c| if c >= 0.5 { class as u8 + 1 } else { 0 })
                .collect();
            out.push(SegSample {
                id: out.len(),
                stream: simulate(&spec),
                class_map,
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    out
}

/// Writes `NNNNN.evt` files plus `manifest.csv` (`id,class,split`).
pub fn write_dataset(ds: &LabeledDataset, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("id,class,split\n");
    for s in &ds.samples {
        fs::write(dir.join(format!("{:05}.evt", s.id)), write_evt(&s.stream))?;
        manifest.push_str(&format!("{},{},{}\n", s.id, s.label, s.split.as_str()));
    }
    fs::write(dir.join("manifest.csv"), manifest)
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_dataset(dir: &Path) -> io::Result<LabeledDataset> {
    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut samples = Vec::new();
    let mut num_classes = 0;
    for (i, line) in manifest.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || invalid(format!("manifest line {}", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let id: usize = f[0].parse().map_err(|_| bad())?;
        let label: usize = f[1].parse().map_err(|_| bad())?;
        let split = match f[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad()),
        };
        let bytes = fs::read(dir.join(format!("{id:05}.evt")))?;
        let stream = parse_evt(&bytes).map_err(|e| invalid(format!("sample {id}: {e}")))?;
        num_classes = num_classes.max(label + 1);
        samples.push(Sample { id, stream, label, split });
    }
    Ok(LabeledDataset { num_classes, samples })
}

/// Raw class-id grid with an 8-byte header: width u32 LE, height u32 LE.
pub fn write_mask(class_map: &[u8], width: u32, height: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + class_map.len());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(class_map);
    out
}

pub fn read_mask(bytes: &[u8]) -> io::Result<(u32, u32, Vec<u8>)> {
    if bytes.len() < 8 {
        return Err(invalid("mask header truncated"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if bytes.len() as u64 != 8 + w as u64 * h as u64 {
        return Err(invalid("mask size does not match header"));
    }
    Ok((w, h, bytes[8..].to_vec()))
}

pub fn write_seg_dataset(samples: &[SegSample], dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("id,split\n");
    for s in samples {
        fs::write(dir.join(format!("{:05}.evt", s.id)), write_evt(&s.stream))?;
        let mask = write_mask(&s.class_map, s.stream.width as u32, s.stream.height as u32);
        fs::write(dir.join(format!("{:05}.mask", s.id)), mask)?;
        manifest.push_str(&format!("{},{}\n", s.id, s.split.as_str()));
    }
    fs::write(dir.join("manifest.csv"), manifest)
}
