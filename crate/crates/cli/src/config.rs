//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use ufo_core::synth::{SceneConfig, Style};
use ufo_core::trainer::TrainConfig;
use ufo_core::video::DEFAULT_FPS;
use ufo_core::ModelConfig;

use crate::CliError;

/// Overrides the root that relative output paths resolve against.
pub const OUT_ROOT_ENV: &str = "UFO_OUT_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub ufo: UfoSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Clip geometry defaults to the model's.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub jitter: f64,
    /// Condition ids to draw from; empty means every id the model knows.
    pub conditions: Vec<usize>,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            frames: None,
            height: None,
            width: None,
            channels: None,
            jitter: SceneConfig::default().jitter,
            conditions: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UfoSection {
    pub rank: usize,
    pub style: Style,
    /// Seed for adapter initialisation.
    pub seed: u64,
}

impl Default for UfoSection {
    fn default() -> Self {
        Self {
            rank: ufo_core::adapter::DEFAULT_RANK,
            style: Style::Invert,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Cap on generations per alpha; the full seed × condition grid when absent.
    pub videos: Option<usize>,
    /// Sampling steps; the default count capped at T when absent.
    pub steps: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.1, 0.2],
            seeds: vec![0, 1],
            videos: None,
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene()?;
        for &c in &self.data.conditions {
            if c >= self.model.num_conditions {
                return Err(CliError::Usage(format!(
                    "data.conditions: id {c} is outside the model's 0..{}",
                    self.model.num_conditions
                )));
            }
        }
        if self.ufo.rank == 0 {
            return Err(CliError::Usage("ufo.rank must be positive".into()));
        }
        if let Some(s) = self.eval.steps {
            if s == 0 || s > self.model.timesteps {
                return Err(CliError::Usage(format!(
                    "eval.steps must be in 1..={}, got {s}",
                    self.model.timesteps
                )));
            }
        }
        Ok(())
    }

    /// Synthetic clip settings, checked against the model geometry.
    pub fn scene(&self) -> Result<SceneConfig, CliError> {
        let m = &self.model;
        let d = &self.data;
        for (key, given, want) in [
            ("frames", d.frames, m.frames),
            ("height", d.height, m.height),
            ("width", d.width, m.width),
            ("channels", d.channels, m.channels),
        ] {
            if let Some(g) = given {
                if g != want {
                    return Err(CliError::Usage(format!(
                        "data.{key} = {g} disagrees with model.{key} = {want}"
                    )));
                }
            }
        }
        Ok(SceneConfig {
            frames: m.frames,
            height: m.height,
            width: m.width,
            channels: m.channels,
            jitter: d.jitter,
            fps: DEFAULT_FPS,
        })
    }

    pub fn conditions(&self) -> Vec<usize> {
        if self.data.conditions.is_empty() {
            (0..self.model.num_conditions).collect()
        } else {
            self.data.conditions.clone()
        }
    }
}

/// Resolve an output path: relative paths go under `$UFO_OUT_ROOT` when set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}
