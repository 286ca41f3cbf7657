use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const SHAFT: u8 = 1;
pub const WRIST: u8 = 2;
pub const JAW: u8 = 3;
pub const CLASSES: usize = 4;
pub const CHANNELS: usize = 3;

const WAVES: usize = 6;
const JAW_HALF_BASE: f64 = 3.0;

/// Parameter ranges of one background texture family.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundFamily {
    /// Spatial frequency band, cycles per frame side.
    pub freq: (f64, f64),
    pub contrast: (f64, f64),
    pub tint: [f64; 3],
    /// Static instrument-coloured clutter per clip, inclusive range.
    pub clutter: (usize, usize),
    pub noise: f64,
}

impl BackgroundFamily {
    /// Family number `index`. Frequency bands of distinct indices are
    /// disjoint and tints differ.
    pub fn indexed(index: usize) -> Self {
        let i = index as f64;
        let theta = 1.9 * i + 0.4;
        Self {
            freq: (1.0 + 1.6 * i, 2.0 + 1.6 * i),
            contrast: (0.12, 0.24),
            tint: [
                0.58 + 0.14 * theta.cos(),
                0.38 + 0.12 * (theta + 2.1).cos(),
                0.36 + 0.12 * (theta + 4.2).cos(),
            ],
            clutter: (1, 3),
            noise: 0.04,
        }
    }

    /// Untextured, noise-free simulator look.
    pub fn flat() -> Self {
        Self {
            freq: (0.0, 0.0),
            contrast: (0.0, 0.0),
            tint: [0.3, 0.55, 0.3],
            clutter: (0, 0),
            noise: 0.0,
        }
    }
}

/// Generation recipe for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub site_id: usize,
    pub family: BackgroundFamily,
    /// Inclusive range of instruments per clip.
    pub instruments: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Upper bound on per-frame tip displacement, pixels.
    pub max_speed: f64,
    /// Frame sides must be multiples of this.
    pub alignment: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::config("frame dimensions and frame count must be positive"));
        }
        let a = self.alignment.max(1);
        if self.height % a != 0 || self.width % a != 0 {
            return Err(Error::config(format!(
                "frame {}x{} is not a multiple of {a}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.instruments;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("bad instrument range {lo}..={hi}")));
        }
        if !(self.max_speed >= MIN_SPEED) {
            return Err(Error::config(format!("max_speed {} below {MIN_SPEED}", self.max_speed)));
        }
        Ok(())
    }
}

const MIN_SPEED: f64 = 1.0;

/// Geometry and motion of one instrument. Drawn from the same distribution
/// at every site.
#[derive(Debug, Clone, PartialEq)]
pub struct Instrument {
    /// Wrist centre in the current frame, `(x, y)` pixels.
    pub tip: [f64; 2],
    /// Direction from the tip back along the shaft, radians.
    pub angle: f64,
    pub shaft_width: f64,
    pub wrist_radius: f64,
    pub jaw_length: f64,
    pub jaw_open: f64,
    pub velocity: [f64; 2],
    pub spin: f64,
    pub shade: f64,
}

/// A static shape painted into the background.
#[derive(Debug, Clone, PartialEq)]
pub enum Clutter {
    Bar { center: [f64; 2], angle: f64, length: f64, width: f64, color: [f64; 3] },
    Disc { center: [f64; 2], radius: f64, color: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub k: [f64; 2],
    pub phase: f64,
    pub gain: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub tint: [f64; 3],
    pub contrast: f64,
    pub waves: Vec<Wave>,
    pub clutter: Vec<Clutter>,
    pub instruments: Vec<Instrument>,
    pub noise: f64,
}

fn part_color(part: u8, shade: f64) -> [f64; 3] {
    let base = match part {
        SHAFT => 0.18,
        WRIST => 0.5,
        _ => 0.82,
    };
    [base + shade, base + shade + 0.02, base + shade + 0.05]
}

impl Scene {
    pub fn sample(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
        let fam = &spec.family;
        let (h, w) = (spec.height as f64, spec.width as f64);
        let contrast = uniform(rng, fam.contrast);
        let waves = if contrast > 0.0 {
            (0..WAVES)
                .map(|_| {
                    let f = uniform(rng, fam.freq);
                    let dir = rng.gen_range(0.0..PI);
                    Wave {
                        k: [2.0 * PI * f * dir.cos() / w, 2.0 * PI * f * dir.sin() / h],
                        phase: rng.gen_range(0.0..2.0 * PI),
                        gain: [1.0, rng.gen_range(0.6..1.0), rng.gen_range(0.4..0.9)],
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let n_clutter = rng.gen_range(fam.clutter.0..=fam.clutter.1);
        let clutter = (0..n_clutter)
            .map(|_| {
                let center = [rng.gen_range(0.0..w), rng.gen_range(0.0..h)];
                let part = rng.gen_range(SHAFT..=JAW);
                let color = part_color(part, rng.gen_range(-0.06..0.06));
                if rng.gen_bool(0.5) {
                    Clutter::Bar {
                        center,
                        angle: rng.gen_range(0.0..PI),
                        length: rng.gen_range(8.0..20.0),
                        width: rng.gen_range(3.0..6.0),
                        color,
                    }
                } else {
                    Clutter::Disc {
                        center,
                        radius: rng.gen_range(2.5..5.0),
                        color,
                    }
                }
            })
            .collect();
        let n_inst = rng.gen_range(spec.instruments.0..=spec.instruments.1);
        let instruments = (0..n_inst).map(|_| Instrument::sample(spec, rng)).collect();
        Scene {
            tint: fam.tint,
            contrast,
            waves,
            clutter,
            instruments,
            noise: fam.noise,
        }
    }

    fn background(&self, x: f64, y: f64) -> [f64; 3] {
        let mut px = self.tint;
        if !self.waves.is_empty() {
            let norm = self.contrast / (self.waves.len() as f64).sqrt();
            for wv in &self.waves {
                let v = (wv.k[0] * x + wv.k[1] * y + wv.phase).sin() * norm;
                for ch in 0..3 {
                    px[ch] += v * wv.gain[ch];
                }
            }
        }
        for c in &self.clutter {
            if let Some(color) = c.color_at(x, y) {
                px = color;
            }
        }
        px
    }

    /// Renders frame `f` of `frames` (the last one is the current frame).
    /// Returns `h*w*3` values and `h*w` labels.
    pub fn render(&self, f: usize, frames: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
        let dt = f as f64 - (frames as f64 - 1.0);
        let poses: Vec<Instrument> = self.instruments.iter().map(|i| i.at(dt)).collect();
        let noise = (self.noise > 0.0).then(|| Normal::new(0.0, self.noise).expect("positive std"));
        let mut img = Vec::with_capacity(h * w * CHANNELS);
        let mut mask = Vec::with_capacity(h * w);
        for yi in 0..h {
            for xi in 0..w {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                let mut px = self.background(x, y);
                let mut label = BACKGROUND;
                for inst in &poses {
                    if let Some(part) = inst.part_at(x, y) {
                        label = part;
                        px = part_color(part, inst.shade);
                    }
                }
                for v in px {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                    // stored as f32 on disk
                    img.push((v + n) as f32 as f64);
                }
                mask.push(label);
            }
        }
        (img, mask)
    }
}

impl Clutter {
    fn color_at(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        match *self {
            Clutter::Bar { center, angle, length, width, color } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let along = dx * angle.cos() + dy * angle.sin();
                let across = -dx * angle.sin() + dy * angle.cos();
                (along.abs() <= length / 2.0 && across.abs() <= width / 2.0).then_some(color)
            }
            Clutter::Disc { center, radius, color } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                (dx * dx + dy * dy <= radius * radius).then_some(color)
            }
        }
    }
}

impl Instrument {
    pub fn sample(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Instrument {
        let (h, w) = (spec.height as f64, spec.width as f64);
        let tip = [rng.gen_range(0.25 * w..0.75 * w), rng.gen_range(0.25 * h..0.75 * h)];
        // shaft leaves through the nearest half of the frame
        let out = (tip[1] - h / 2.0).atan2(tip[0] - w / 2.0);
        let angle = out + rng.gen_range(-0.9..0.9);
        let speed = rng.gen_range(MIN_SPEED..spec.max_speed.max(MIN_SPEED + 1e-9));
        let heading = rng.gen_range(0.0..2.0 * PI);
        Instrument {
            tip,
            angle,
            shaft_width: rng.gen_range(4.0..7.0),
            wrist_radius: rng.gen_range(3.0..5.0),
            jaw_length: rng.gen_range(5.0..9.0),
            jaw_open: rng.gen_range(0.3..0.8),
            velocity: [speed * heading.cos(), speed * heading.sin()],
            spin: rng.gen_range(-0.06..0.06),
            shade: rng.gen_range(-0.06..0.06),
        }
    }

    /// Pose `dt` frames after the current one (negative for history).
    pub fn at(&self, dt: f64) -> Instrument {
        Instrument {
            tip: [self.tip[0] + self.velocity[0] * dt, self.tip[1] + self.velocity[1] * dt],
            angle: self.angle + self.spin * dt,
            ..self.clone()
        }
    }

    fn in_shaft(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.tip[0], y - self.tip[1]);
        let along = dx * self.angle.cos() + dy * self.angle.sin();
        let across = -dx * self.angle.sin() + dy * self.angle.cos();
        along >= 0.0 && across.abs() <= self.shaft_width / 2.0
    }

    fn in_wrist(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.tip[0], y - self.tip[1]);
        dx * dx + dy * dy <= self.wrist_radius * self.wrist_radius
    }

    fn in_jaw(&self, x: f64, y: f64) -> bool {
        let reach = self.wrist_radius + self.jaw_length;
        let (dx, dy) = (x - self.tip[0], y - self.tip[1]);
        [-0.5, 0.5].iter().any(|&side| {
            let a = self.angle + PI + side * self.jaw_open;
            let along = dx * a.cos() + dy * a.sin();
            let across = -dx * a.sin() + dy * a.cos();
            (0.0..=reach).contains(&along) && across.abs() <= JAW_HALF_BASE * (1.0 - along / reach)
        })
    }

    /// Topmost part covering `(x, y)`: the wrist hides the jaw roots, which
    /// hide the shaft end.
    pub fn part_at(&self, x: f64, y: f64) -> Option<u8> {
        if self.in_wrist(x, y) {
            Some(WRIST)
        } else if self.in_jaw(x, y) {
            Some(JAW)
        } else if self.in_shaft(x, y) {
            Some(SHAFT)
        } else {
            None
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Mean squared difference between horizontally or vertically adjacent
/// background pixels, averaged over channels.
pub fn background_gradient_energy(img: &[f64], mask: &[u8], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut pair = |a: usize, b: usize| {
        if mask[a] == BACKGROUND && mask[b] == BACKGROUND {
            for ch in 0..CHANNELS {
                let d = img[a * CHANNELS + ch] - img[b * CHANNELS + ch];
                total += d * d;
            }
            count += CHANNELS;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                pair(i, i + 1);
            }
            if y + 1 < h {
                pair(i, i + w);
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
