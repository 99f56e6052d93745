//! The toy video diffusion transformer.
//!
//! Frames are split into 2×2 patches; each block runs temporal self-attention
//! across the F frames of every patch position, a learned mixing of the patch
//! tokens within each frame, and a pointwise MLP, all pre-normalised with
//! residual connections. Two zero-initialised heads predict the noise and the
//! per-element covariance interpolation coefficient.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{add_adapter_terms, BoundAdapter};
use crate::autodiff::{permute_tensor, Tape, Var};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::synth::MAX_CONDITIONS;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const TABLE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Token width.
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub num_conditions: usize,
    /// Diffusion steps T.
    pub timesteps: usize,
    pub schedule: ScheduleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            patch: 2,
            dim: 64,
            depth: 2,
            num_conditions: 16,
            timesteps: 100,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.frames == 0 || self.channels == 0 || self.depth == 0 {
            return bad("frames, channels and depth must be positive".into());
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "{}x{} frames are not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            ));
        }
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad(format!("model width must be even, got {}", self.dim));
        }
        if self.num_conditions == 0 || self.num_conditions > MAX_CONDITIONS {
            return bad(format!(
                "num_conditions must be in 1..={MAX_CONDITIONS}, got {}",
                self.num_conditions
            ));
        }
        if self.timesteps < 2 {
            return bad(format!("timesteps must be at least 2, got {}", self.timesteps));
        }
        Ok(())
    }

    /// Patch tokens per frame.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Values per patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }
}

/// Affine map `y = W x + b` with `W: m×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineLayer {
    /// (m, n)
    pub fn shape(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    config: ModelConfig,
    schedule: NoiseSchedule,
    layers: IndexMap<String, AffineLayer>,
    tables: IndexMap<String, Tensor>,
}

/// Model parameters placed on a tape, in registry order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
    tables: Vec<Var>,
}

impl BoundModel {
    /// Vars in registry order: each layer's weight then bias, then tables.
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(self.tables.iter().copied())
            .collect()
    }
}

fn layer_names(depth: usize) -> Vec<String> {
    let mut names = vec!["patch_embed".to_string(), "time_embed".to_string()];
    for i in 0..depth {
        for part in [
            "temporal.q",
            "temporal.k",
            "temporal.v",
            "temporal.o",
            "spatial.mix",
            "mlp.fc1",
            "mlp.fc2",
        ] {
            names.push(format!("blocks.{i}.{part}"));
        }
    }
    names.push("head.eps".into());
    names.push("head.var".into());
    names
}

impl ModelGraph {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(config.timesteps, config.schedule)?;
        let (w, p, pd) = (config.dim, config.tokens(), config.patch_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = IndexMap::new();
        for name in layer_names(config.depth) {
            let (m, n) = match name.rsplit('.').next().unwrap() {
                "patch_embed" => (w, pd),
                "mix" => (p, p),
                "fc1" => (2 * w, w),
                "fc2" => (w, 2 * w),
                "eps" | "var" => (pd, w),
                _ => (w, w),
            };
            let mut weight = if name.starts_with("head.") {
                Tensor::zeros(&[m, n])
            } else {
                Tensor::randn(&[m, n], 1.0 / (n as f64).sqrt(), &mut rng)
            };
            weight.round_to_f32();
            layers.insert(
                name,
                AffineLayer {
                    weight,
                    bias: Tensor::zeros(&[m]),
                },
            );
        }
        let mut tables = IndexMap::new();
        for (name, rows) in [
            ("pos_table", p),
            ("frame_table", config.frames),
            ("cond_table", config.num_conditions),
        ] {
            let mut t = Tensor::randn(&[rows, w], TABLE_STD, &mut rng);
            t.round_to_f32();
            tables.insert(name.to_string(), t);
        }
        Ok(Self {
            config,
            schedule,
            layers,
            tables,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> &IndexMap<String, AffineLayer> {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&AffineLayer> {
        self.layers.get(name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut AffineLayer> {
        self.layers.get_mut(name)
    }

    pub fn tables(&self) -> &IndexMap<String, Tensor> {
        &self.tables
    }

    /// Layers an adapter may wrap: every affine map inside a block.
    pub fn adaptable_layers(&self) -> impl Iterator<Item = (&str, &AffineLayer)> {
        self.layers
            .iter()
            .filter(|(n, _)| n.starts_with("blocks."))
            .map(|(n, l)| (n.as_str(), l))
    }

    /// Hex SHA-256 over the ordered (name, m, n) of every layer.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, layer) in &self.layers {
            let (m, n) = layer.shape();
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((m as u64).to_le_bytes());
            h.update((n as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Registry of (name, shape) in payload order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, l) in &self.layers {
            out.push((format!("{name}.weight"), l.weight.shape().to_vec()));
            out.push((format!("{name}.bias"), l.bias.shape().to_vec()));
        }
        for (name, t) in &self.tables {
            out.push((name.clone(), t.shape().to_vec()));
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .values()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(self.tables.values())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .values_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(self.tables.values_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Per-layer (and per-table) hash of the exact parameter bits.
    pub fn checksums(&self) -> Vec<(String, u64)> {
        let hash = |ts: &[&Tensor]| {
            let mut h = DefaultHasher::new();
            for t in ts {
                for v in t.data() {
                    h.write_u64(v.to_bits());
                }
            }
            h.finish()
        };
        self.layers
            .iter()
            .map(|(n, l)| (n.clone(), hash(&[&l.weight, &l.bias])))
            .chain(self.tables.iter().map(|(n, t)| (n.clone(), hash(&[t]))))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let layers = self
            .layers
            .values()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), trainable),
                    tape.leaf(l.bias.clone(), trainable),
                )
            })
            .collect();
        let tables = self
            .tables
            .values()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        BoundModel { layers, tables }
    }

    fn apply(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        adapters: &[BoundAdapter],
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let i = self
            .layers
            .get_index_of(name)
            .ok_or_else(|| Error::Contract(format!("no layer named `{name}`")))?;
        let (w, b) = bound.layers[i];
        let y = tape.linear(x, w, Some(b))?;
        add_adapter_terms(tape, name, x, y, adapters)
    }

    fn table(&self, bound: &BoundModel, name: &str) -> Var {
        bound.tables[self.tables.get_index_of(name).expect("table exists")]
    }

    /// `z_t: [B, F, H, W, C]` → (ε̂, v), both `[B, F, H, W, C]`; `v` in raw
    /// units, mapped to a log-variance by the diffusion code.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        adapters: &[BoundAdapter],
        z_t: &Tensor,
        t: &[usize],
        c: &[usize],
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let [f_n, h, w, ch] = cfg.clip_shape();
        let s = z_t.shape();
        let bsz = s.first().copied().unwrap_or(0);
        if s.len() != 5 || s[1..] != [f_n, h, w, ch] {
            return Err(Error::dim("model input", &[bsz, f_n, h, w, ch], s));
        }
        if t.len() != bsz || c.len() != bsz {
            return Err(Error::Contract(format!(
                "batch of {bsz} clips needs {bsz} timesteps and conditions, got {} and {}",
                t.len(),
                c.len()
            )));
        }
        for &ti in t {
            self.schedule.check_step(ti)?;
        }
        if let Some(&bad) = c.iter().find(|&&ci| ci >= cfg.num_conditions) {
            return Err(Error::Condition(format!(
                "condition {bad} is outside the model's 0..{}",
                cfg.num_conditions
            )));
        }
        let (p, pd, dim, pt) = (cfg.tokens(), cfg.patch_dim(), cfg.dim, cfg.patch);
        let (hp, wp) = (h / pt, w / pt);

        let tokens = permute_tensor(
            &z_t.reshape(&[bsz, f_n, hp, pt, wp, pt, ch])?,
            &[0, 1, 2, 4, 3, 5, 6],
        )
        .reshape(&[bsz, f_n, p, pd])?;
        let tokens = tape.constant(tokens);
        let mut x = self.apply(tape, bound, adapters, "patch_embed", tokens)?;

        let pos = self.table(bound, "pos_table");
        x = tape.add_broadcast(x, pos)?;
        let frame_idx: Vec<usize> = (0..f_n).flat_map(|f| std::iter::repeat_n(f, p)).collect();
        let fe = tape.gather_rows(self.table(bound, "frame_table"), &frame_idx)?;
        let fe = tape.reshape(fe, &[f_n, p, dim])?;
        x = tape.add_broadcast(x, fe)?;

        let per_sample = f_n * p;
        let cond_idx: Vec<usize> = c.iter().flat_map(|&ci| std::iter::repeat_n(ci, per_sample)).collect();
        let ce = tape.gather_rows(self.table(bound, "cond_table"), &cond_idx)?;
        let tf = tape.constant(timestep_features(t, dim));
        let te = self.apply(tape, bound, adapters, "time_embed", tf)?;
        let te = tape.silu(te);
        let sample_idx: Vec<usize> = (0..bsz).flat_map(|b| std::iter::repeat_n(b, per_sample)).collect();
        let te = tape.gather_rows(te, &sample_idx)?;
        let emb = tape.add(ce, te)?;
        let emb = tape.reshape(emb, &[bsz, f_n, p, dim])?;
        x = tape.add(x, emb)?;

        let attn_scale = 1.0 / (dim as f64).sqrt();
        for i in 0..cfg.depth {
            let name = |part: &str| format!("blocks.{i}.{part}");

            let hn = tape.layer_norm(x, LN_EPS);
            let hn = tape.permute(hn, &[0, 2, 1, 3])?;
            let mut qkv = Vec::with_capacity(3);
            for part in ["temporal.q", "temporal.k", "temporal.v"] {
                let y = self.apply(tape, bound, adapters, &name(part), hn)?;
                qkv.push(tape.reshape(y, &[bsz * p, f_n, dim])?);
            }
            let scores = tape.bmm_nt(qkv[0], qkv[1])?;
            let scores = tape.scale(scores, attn_scale);
            let attn = tape.softmax(scores);
            let mixed = tape.bmm(attn, qkv[2])?;
            let mixed = tape.reshape(mixed, &[bsz, p, f_n, dim])?;
            let out = self.apply(tape, bound, adapters, &name("temporal.o"), mixed)?;
            let out = tape.permute(out, &[0, 2, 1, 3])?;
            x = tape.add(x, out)?;

            let hn = tape.layer_norm(x, LN_EPS);
            let hn = tape.permute(hn, &[0, 1, 3, 2])?;
            let out = self.apply(tape, bound, adapters, &name("spatial.mix"), hn)?;
            let out = tape.permute(out, &[0, 1, 3, 2])?;
            x = tape.add(x, out)?;

            let hn = tape.layer_norm(x, LN_EPS);
            let a = self.apply(tape, bound, adapters, &name("mlp.fc1"), hn)?;
            let a = tape.silu(a);
            let out = self.apply(tape, bound, adapters, &name("mlp.fc2"), a)?;
            x = tape.add(x, out)?;
        }

        let hn = tape.layer_norm(x, LN_EPS);
        let mut heads = [hn; 2];
        for (slot, name) in heads.iter_mut().zip(["head.eps", "head.var"]) {
            let y = self.apply(tape, bound, adapters, name, hn)?;
            let y = tape.reshape(y, &[bsz, f_n, hp, wp, pt, pt, ch])?;
            let y = tape.permute(y, &[0, 1, 2, 4, 3, 5, 6])?;
            *slot = tape.reshape(y, &[bsz, f_n, h, w, ch])?;
        }
        Ok((heads[0], heads[1]))
    }
}

/// Sinusoidal features of the timestep, `[B, dim]`.
fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((ti as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((ti as f64 * freq).cos());
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("feature shape")
}
