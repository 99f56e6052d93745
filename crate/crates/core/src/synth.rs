//! Procedural toy "video-text" data.
//!
//! Each condition id maps to a fixed (shape, motion, palette) triple. A clip
//! draws a foreground object over a static textured background; the seed
//! picks the start position, texture phase and a per-frame jitter of the
//! object's intensity and edges, so identical conditions yield similar but
//! not identical dynamics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{quantize, Frame, VideoTensor, DEFAULT_FPS};

/// Condition ids are drawn from `0..MAX_CONDITIONS`.
pub const MAX_CONDITIONS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disk,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Translate,
    Oscillate,
    Grow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionSpec {
    pub id: usize,
    pub shape: ShapeKind,
    pub motion: MotionKind,
    pub palette: usize,
    /// +1 or -1; horizontal direction for translation, phase sign for oscillation.
    pub direction: i32,
}

impl ConditionSpec {
    pub fn from_id(id: usize) -> Result<Self> {
        if id >= MAX_CONDITIONS {
            return Err(Error::Condition(format!(
                "condition id {id} is outside 0..{MAX_CONDITIONS}"
            )));
        }
        let shape = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Bar][id % 3];
        let motion = [MotionKind::Translate, MotionKind::Oscillate, MotionKind::Grow][(id / 3) % 3];
        Ok(Self {
            id,
            shape,
            motion,
            palette: (id / 9) % 4,
            direction: if (id / 2).is_multiple_of(2) { 1 } else { -1 },
        })
    }
}

/// Clip geometry and jitter shared by every generated clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Amplitude of the per-frame object jitter, in value units.
    pub jitter: f64,
    pub fps: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            jitter: 0.05,
            fps: DEFAULT_FPS,
        }
    }
}

impl SceneConfig {
    /// Object edge length in pixels for this resolution.
    pub fn object_size(&self) -> f64 {
        (self.width.min(self.height) as f64 / 4.0).max(2.0)
    }

    /// Horizontal speed of translating objects, pixels per frame.
    pub fn translate_speed(&self) -> f64 {
        if self.frames < 2 {
            return 0.0;
        }
        let room = self.width as f64 - self.object_size() - 1.0;
        (room / (self.frames - 1) as f64).min(1.0)
    }
}

/// A generated clip with its ground-truth subject mask (`F×H×W`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub video: VideoTensor,
    pub mask: Vec<bool>,
    /// Analytic object centroid (x, y) per frame, in pixel coordinates.
    pub centroids: Vec<(f64, f64)>,
}

struct Palette {
    background: [f64; 3],
    foreground: [f64; 3],
}

fn palette(id: usize) -> Palette {
    match id {
        0 => Palette {
            background: [0.20, 0.25, 0.30],
            foreground: [0.85, 0.80, 0.30],
        },
        1 => Palette {
            background: [0.35, 0.20, 0.25],
            foreground: [0.75, 0.90, 0.85],
        },
        2 => Palette {
            background: [0.15, 0.30, 0.20],
            foreground: [0.95, 0.60, 0.70],
        },
        _ => Palette {
            background: [0.30, 0.30, 0.15],
            foreground: [0.65, 0.70, 0.95],
        },
    }
}

/// Axis-aligned extent of the object in continuous pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Fraction of pixel (x, y) covered by the object.
fn coverage(shape: ShapeKind, p: &Placement, x: usize, y: usize) -> f64 {
    let (x0, y0) = (x as f64, y as f64);
    match shape {
        ShapeKind::Square | ShapeKind::Bar => {
            interval_overlap(x0, x0 + 1.0, p.cx - p.half_w, p.cx + p.half_w)
                * interval_overlap(y0, y0 + 1.0, p.cy - p.half_h, p.cy + p.half_h)
        }
        ShapeKind::Disk => {
            const SS: usize = 4;
            let r2 = p.half_w * p.half_w;
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x0 + (sx as f64 + 0.5) / SS as f64 - p.cx;
                    let py = y0 + (sy as f64 + 0.5) / SS as f64 - p.cy;
                    if px * px + py * py <= r2 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (SS * SS) as f64
        }
    }
}

pub fn gen_moving_scene(cond: &ConditionSpec, cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    let (f_n, h, w, c) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    if f_n < 2 {
        return Err(Error::Contract(format!("moving scenes need F >= 2, got {f_n}")));
    }
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!("scenes need H, W >= 8, got {h}x{w}")));
    }
    if c != 1 && c != 3 {
        return Err(Error::Contract(format!("scenes have 1 or 3 channels, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((cond.id as u64) << 40));
    let pal = palette(cond.palette);
    let size = cfg.object_size();
    let (base_hw, base_hh) = match cond.shape {
        ShapeKind::Square | ShapeKind::Disk => (size / 2.0, size / 2.0),
        ShapeKind::Bar => ((size / 4.0).max(0.5), (size).min(h as f64 / 2.0 - 1.0)),
    };

    // static background texture
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (kx, ky) = (1.0 + (cond.palette % 2) as f64, 1.0 + (cond.id % 2) as f64);
    let mut background = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let wave = (std::f64::consts::TAU * (kx * x as f64 / w as f64 + ky * y as f64 / h as f64)
                + phase)
                .sin();
            for ch in 0..c {
                let base = if c == 1 { pal.background[0] } else { pal.background[ch] };
                background[(y * w + x) * c + ch] = base + 0.08 * wave;
            }
        }
    }

    let speed = cfg.translate_speed();
    let travel = speed * (f_n - 1) as f64;
    let margin_x = base_hw;
    let cy = rng.random_range(base_hh + 0.5..h as f64 - base_hh - 0.5);
    let placements: Vec<Placement> = match cond.motion {
        MotionKind::Translate => {
            let lo = margin_x;
            let hi = w as f64 - margin_x - travel;
            let start = if hi > lo { rng.random_range(lo..hi) } else { lo };
            (0..f_n)
                .map(|f| {
                    let offset = speed * f as f64;
                    let cx = if cond.direction > 0 {
                        start + offset
                    } else {
                        start + travel - offset
                    };
                    Placement {
                        cx,
                        cy,
                        half_w: base_hw,
                        half_h: base_hh,
                    }
                })
                .collect()
        }
        MotionKind::Oscillate => {
            let amp = (w as f64 / 2.0 - margin_x - 0.5).clamp(0.5, 1.5);
            let cx0 = w as f64 / 2.0 + rng.random_range(-0.5..0.5);
            (0..f_n)
                .map(|f| {
                    let ang = std::f64::consts::TAU * f as f64 / f_n as f64;
                    Placement {
                        cx: cx0 + cond.direction as f64 * amp * ang.sin(),
                        cy,
                        half_w: base_hw,
                        half_h: base_hh,
                    }
                })
                .collect()
        }
        MotionKind::Grow => {
            let cx = w as f64 / 2.0 + rng.random_range(-1.0..1.0);
            (0..f_n)
                .map(|f| {
                    let g = 1.0 + 0.6 * f as f64 / (f_n - 1) as f64;
                    Placement {
                        cx,
                        cy,
                        half_w: base_hw * g,
                        half_h: base_hh * g,
                    }
                })
                .collect()
        }
    };

    let mut data = Vec::with_capacity(f_n * h * w * c);
    let mut mask = Vec::with_capacity(f_n * h * w);
    let mut centroids = Vec::with_capacity(f_n);
    for p in &placements {
        let level = rng.random_range(-cfg.jitter..=cfg.jitter);
        let (mut sx, mut sy, mut sm) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let cov = coverage(cond.shape, p, x, y);
                mask.push(cov > 0.0);
                sx += cov * (x as f64 + 0.5);
                sy += cov * (y as f64 + 0.5);
                sm += cov;
                let edge = if cov > 0.0 && cov < 1.0 {
                    rng.random_range(-cfg.jitter..=cfg.jitter)
                } else {
                    0.0
                };
                for ch in 0..c {
                    let fg = if c == 1 { pal.foreground[0] } else { pal.foreground[ch] };
                    let bg = background[(y * w + x) * c + ch];
                    let v = bg * (1.0 - cov) + (fg + level + edge) * cov;
                    data.push(quantize(v));
                }
            }
        }
        centroids.push((sx / sm, sy / sm));
    }
    Ok(Scene {
        video: VideoTensor::new(f_n, h, w, c, cfg.fps, data)?,
        mask,
        centroids,
    })
}

/// Clip whose every frame is `frame`.
pub fn make_static_video(frame: &Frame, frames: usize, fps: f64) -> Result<VideoTensor> {
    if frames == 0 {
        return Err(Error::Contract("a static clip needs at least one frame".into()));
    }
    let mut data = Vec::with_capacity(frames * frame.data.len());
    for _ in 0..frames {
        data.extend_from_slice(&frame.data);
    }
    VideoTensor::new(frames, frame.height, frame.width, frame.channels, fps, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Invert,
    Posterize,
    Grayscale,
    Vignette,
}

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invert" => Ok(Self::Invert),
            "posterize" => Ok(Self::Posterize),
            "grayscale" => Ok(Self::Grayscale),
            "vignette" => Ok(Self::Vignette),
            other => Err(Error::Condition(format!("unknown style `{other}`"))),
        }
    }
}

const POSTERIZE_LEVELS: f32 = 4.0;

pub fn apply_style(clip: &VideoTensor, style: Style) -> Result<VideoTensor> {
    match style {
        Style::Invert => clip.map_values(|v| 1.0 - v),
        Style::Posterize => {
            let steps = POSTERIZE_LEVELS - 1.0;
            clip.map_values(|v| (v * steps).round() / steps)
        }
        Style::Grayscale => {
            let c = clip.channels();
            let mut data = clip.data().to_vec();
            for px in data.chunks_mut(c) {
                let mean = px.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                let g = mean as f32;
                px.iter_mut().for_each(|v| *v = g);
            }
            VideoTensor::new(
                clip.frames(),
                clip.height(),
                clip.width(),
                c,
                clip.fps(),
                data,
            )
        }
        Style::Vignette => {
            let (h, w, c) = (clip.height(), clip.width(), clip.channels());
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let rmax2 = cx * cx + cy * cy;
            let mut data = clip.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                let pix = (i / c) % (h * w);
                let (y, x) = ((pix / w) as f64, (pix % w) as f64);
                let r2 = ((y - cy).powi(2) + (x - cx).powi(2)) / rmax2;
                *v = (*v as f64 * (1.0 - 0.6 * r2)) as f32;
            }
            VideoTensor::new(clip.frames(), h, w, c, clip.fps(), data)
        }
    }
}
