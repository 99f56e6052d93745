//! Video clips and the `.vclip` dump format.
//!
//! A clip dump is two files: `<name>.vclip` holds the raw `f32` little-endian
//! payload in frame-row-column-channel order, and `<name>.vclip.json` is the
//! structured-text sidecar with the dimensions, frame rate and optional
//! provenance (condition, seed, alpha).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_FPS: f64 = 24.0;

/// Values produced by generators and samplers sit on this dyadic grid, which
/// makes `1 - x` exact in `f32`.
const GRID: f64 = (1u32 << 24) as f64;

/// Snap a value in [0, 1] onto the 2⁻²⁴ grid.
pub fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * GRID).round() / GRID) as f32
}

/// A single image, `H×W×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// F×H×W×C clip with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    fps: f64,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        fps: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Contract(format!(
                "clip dimensions must be positive, got {frames}x{height}x{width}x{channels}"
            )));
        }
        let expect = frames * height * width * channels;
        if data.len() != expect {
            return Err(Error::dim(
                "video",
                &[frames, height, width, channels],
                &[data.len()],
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("clip value {bad} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            fps,
            data,
        })
    }

    /// Clamp to [0, 1] and quantize an `F×H×W×C` tensor (leading batch of 1 allowed).
    pub fn from_tensor(t: &Tensor, fps: f64) -> Result<Self> {
        let s = t.shape();
        let dims = match s.len() {
            4 => [s[0], s[1], s[2], s[3]],
            5 if s[0] == 1 => [s[1], s[2], s[3], s[4]],
            _ => {
                return Err(Error::Contract(format!(
                    "expected an F×H×W×C tensor, got {s:?}"
                )))
            }
        };
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite value in generated clip".into()));
        }
        let data = t.data().iter().map(|&v| quantize(v)).collect();
        Self::new(dims[0], dims[1], dims[2], dims[3], fps, data)
    }

    /// Identity encoder: the latent is the clip itself, as `F×H×W×C`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.frames, self.height, self.width, self.channels],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("clip dimensions are consistent")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame_data(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame(&self, f: usize) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.frame_data(f).to_vec(),
        }
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((f * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Mean absolute difference between consecutive frames, averaged over pairs.
    pub fn mean_interframe_abs_diff(&self) -> f64 {
        if self.frames < 2 {
            return 0.0;
        }
        let n = self.frame_len();
        let total: f64 = (0..self.frames - 1)
            .map(|f| {
                let (a, b) = (self.frame_data(f), self.frame_data(f + 1));
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (x as f64 - y as f64).abs())
                    .sum::<f64>()
                    / n as f64
            })
            .sum();
        total / (self.frames - 1) as f64
    }

    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.frames,
            self.height,
            self.width,
            self.channels,
            self.fps,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The `.vclip.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipHeader {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Clip plus provenance as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub video: VideoTensor,
    pub condition: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write via a temporary file and rename, so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_payload(video: &VideoTensor) -> Vec<u8> {
    video.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_vclip(path: &Path, record: &ClipRecord) -> Result<()> {
    let v = &record.video;
    let header = ClipHeader {
        frames: v.frames,
        height: v.height,
        width: v.width,
        channels: v.channels,
        fps: v.fps,
        condition: record.condition,
        seed: record.seed,
        alpha: record.alpha,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    write_atomic(path, &encode_payload(v))?;
    write_atomic(&sidecar_path(path), text.as_bytes())?;
    Ok(())
}

pub fn read_vclip(path: &Path) -> Result<ClipRecord> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let header: ClipHeader = serde_json::from_str(&text)
        .map_err(|e| Error::format(e.column(), format!("bad clip sidecar: {e}")))?;
    let bytes = fs::read(path)?;
    let expect = header.frames * header.height * header.width * header.channels * 4;
    if bytes.len() != expect {
        return Err(Error::format(
            bytes.len().min(expect),
            format!("clip payload is {} bytes, expected {expect}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let video = VideoTensor::new(
        header.frames,
        header.height,
        header.width,
        header.channels,
        header.fps,
        data,
    )?;
    Ok(ClipRecord {
        video,
        condition: header.condition,
        seed: header.seed,
        alpha: header.alpha,
    })
}
