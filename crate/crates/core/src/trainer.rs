//! Base-model pretraining and adapter training.
//!
//! Both use the same loss, `L_simple + λ·L_vlb`, one Adam step per batch and
//! a linear warm-up. Adapter runs bind the base weights as constants and
//! verify after every step that none of them moved.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{BoundAdapter, UfoAdapterSet};
use crate::autodiff::{Tape, Var};
use crate::diffusion::{forward_diffuse_batch, loss_simple, loss_vlb, DEFAULT_VLB_WEIGHT};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::synth::{apply_style, gen_moving_scene, make_static_video, ConditionSpec, SceneConfig, Style};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub alpha_train: f64,
    pub loss_lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr_peak: 2e-4,
            warmup_steps: 500,
            alpha_train: 1.0,
            loss_lambda: DEFAULT_VLB_WEIGHT,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_peak > 0.0) || !self.lr_peak.is_finite() {
            return bad(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if self.warmup_steps > self.steps {
            return bad(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.alpha_train > 0.0 && self.alpha_train <= 1.0) {
            return bad(format!("alpha_train must be in (0, 1], got {}", self.alpha_train));
        }
        if !(self.loss_lambda >= 0.0) {
            return bad(format!("loss_lambda must be non-negative, got {}", self.loss_lambda));
        }
        Ok(())
    }
}

/// Zero at step 0, linear up to `lr_peak` at `warmup_steps`, constant after.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step == 0 {
        0.0
    } else if step >= cfg.warmup_steps {
        cfg.lr_peak
    } else {
        cfg.lr_peak * step as f64 / cfg.warmup_steps as f64
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam over a fixed list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Update in place, then round every parameter to f32.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.t);
        let c2 = 1.0 - ADAM_B2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = ADAM_B1 * m[j] + (1.0 - ADAM_B1) * gj;
                v[j] = ADAM_B2 * v[j] + (1.0 - ADAM_B2) * gj * gj;
                let upd = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                p[j] = (p[j] - upd) as f32 as f64;
            }
        }
    }
}

/// Per-layer checksums of a frozen model.
#[derive(Debug, Clone)]
pub struct FreezeGuard {
    sums: Vec<(String, u64)>,
}

impl FreezeGuard {
    pub fn arm(model: &ModelGraph) -> Self {
        Self {
            sums: model.checksums(),
        }
    }

    pub fn verify(&self, model: &ModelGraph, step: usize) -> Result<()> {
        for ((name, before), (_, after)) in self.sums.iter().zip(model.checksums()) {
            if *before != after {
                return Err(Error::FreezeViolation {
                    layer: name.clone(),
                    step,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss_simple: f64,
    pub loss_vlb: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["step", "loss_simple", "loss_vlb", "lr"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    /// Mean `loss_simple` over rows `[from, to)`.
    pub fn mean_simple(&self, from: usize, to: usize) -> f64 {
        let rows = &self.rows[from..to];
        rows.iter().map(|r| r.loss_simple).sum::<f64>() / rows.len() as f64
    }
}

/// A training example: clip `F×H×W×C` and its condition id.
#[derive(Debug, Clone)]
pub struct Example {
    pub clip: Tensor,
    pub condition: usize,
}

/// Supplies training batches.
pub trait ClipSource {
    fn next_batch(&mut self, n: usize) -> Result<Vec<Example>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamMode {
    /// Moving scenes as generated.
    Moving,
    /// One random frame of a generated scene duplicated across all frames.
    Static,
    Styled(Style),
}

/// Endless seeded stream of synthetic clips over a set of condition ids.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    scene: SceneConfig,
    conditions: Vec<usize>,
    mode: StreamMode,
    rng: ChaCha8Rng,
}

impl SyntheticStream {
    pub fn new(scene: SceneConfig, conditions: Vec<usize>, mode: StreamMode, seed: u64) -> Result<Self> {
        if conditions.is_empty() {
            return Err(Error::Contract("a synthetic stream needs at least one condition".into()));
        }
        for &c in &conditions {
            ConditionSpec::from_id(c)?;
        }
        Ok(Self {
            scene,
            conditions,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl ClipSource for SyntheticStream {
    fn next_batch(&mut self, n: usize) -> Result<Vec<Example>> {
        (0..n)
            .map(|_| {
                let condition = self.conditions[self.rng.random_range(0..self.conditions.len())];
                let seed: u64 = self.rng.random();
                let scene = gen_moving_scene(&ConditionSpec::from_id(condition)?, &self.scene, seed)?;
                let video = match self.mode {
                    StreamMode::Moving => scene.video,
                    StreamMode::Static => {
                        let f = self.rng.random_range(0..self.scene.frames);
                        make_static_video(&scene.video.frame(f), self.scene.frames, self.scene.fps)?
                    }
                    StreamMode::Styled(style) => apply_style(&scene.video, style)?,
                };
                Ok(Example {
                    clip: video.to_tensor(),
                    condition,
                })
            })
            .collect()
    }
}

struct StepOutcome {
    loss: Var,
    simple: f64,
    vlb: f64,
}

fn batch_loss(
    tape: &mut Tape,
    model: &ModelGraph,
    trainable_model: bool,
    adapter: Option<(&UfoAdapterSet, f64)>,
    batch: &[Example],
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(StepOutcome, Vec<Var>, Option<BoundAdapter>)> {
    let cfg = model.config();
    let sched = model.schedule();
    let bsz = batch.len();
    let mut shape = vec![bsz];
    shape.extend_from_slice(&cfg.clip_shape());
    let mut z0 = Vec::with_capacity(bsz * cfg.clip_len());
    for ex in batch {
        if ex.clip.shape() != cfg.clip_shape() {
            return Err(Error::dim("training clip", &cfg.clip_shape(), ex.clip.shape()));
        }
        z0.extend_from_slice(ex.clip.data());
    }
    let z0 = Tensor::new(shape.clone(), z0)?;
    let t: Vec<usize> = (0..bsz).map(|_| rng.random_range(1..=sched.len())).collect();
    let eps = Tensor::randn(&shape, 1.0, rng);
    let z_t = forward_diffuse_batch(&z0, &t, &eps, sched)?;
    let conds: Vec<usize> = batch.iter().map(|e| e.condition).collect();

    let bound = model.bind(tape, trainable_model);
    let bound_adapter = adapter.map(|(s, a)| s.bind(tape, a, true));
    let ads: Vec<BoundAdapter> = bound_adapter.iter().cloned().collect();
    let (eps_hat, v) = model.forward(tape, &bound, &ads, &z_t, &t, &conds)?;
    let eps_v = tape.constant(eps);
    let ls = loss_simple(tape, eps_v, eps_hat)?;
    let eps_hat_value = tape.value(eps_hat).clone();
    let lv = loss_vlb(tape, &z0, &z_t, &t, &eps_hat_value, v, sched)?;
    let weighted = tape.scale(lv, lambda);
    let loss = tape.add(ls, weighted)?;
    let outcome = StepOutcome {
        loss,
        simple: tape.value(ls).item(),
        vlb: tape.value(lv).item(),
    };
    Ok((outcome, bound.vars(), bound_adapter))
}

/// Numeric failures inside the loss carry no step; add it.
fn at_step<T>(r: Result<T>, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} at step {step}")),
        other => other,
    })
}

fn check_finite(o: &StepOutcome, step: usize) -> Result<()> {
    if !o.simple.is_finite() || !o.vlb.is_finite() {
        return Err(Error::Numeric(format!(
            "loss became non-finite at step {step} (simple {}, vlb {})",
            o.simple, o.vlb
        )));
    }
    Ok(())
}

fn collect_grads<'t>(tape: &'t Tape, vars: &[Var]) -> Vec<&'t Tensor> {
    vars.iter()
        .map(|&v| tape.grad(v).expect("trainable leaf has a gradient"))
        .collect()
}

/// Pretrain the base model on `data`.
pub fn train_base(model: &mut ModelGraph, data: &mut dyn ClipSource, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(&sizes);
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch = data.next_batch(cfg.batch_size)?;
        let mut tape = Tape::new();
        let (o, vars, _) = at_step(
            batch_loss(&mut tape, model, true, None, &batch, cfg.loss_lambda, &mut rng),
            step,
        )?;
        check_finite(&o, step)?;
        tape.backward(o.loss)?;
        let lr = lr_schedule(step, cfg);
        let params: Vec<&mut [f64]> = model.params_mut().into_iter().map(|t| t.data_mut()).collect();
        adam.step(params, &collect_grads(&tape, &vars), lr);
        log.rows.push(LossRow {
            step,
            loss_simple: o.simple,
            loss_vlb: o.vlb,
            lr,
        });
        if step % 500 == 0 {
            log::info!("base step {step}: simple {:.5} vlb {:.5}", o.simple, o.vlb);
        }
    }
    Ok(log)
}

/// Train `set` against the frozen `model` at `cfg.alpha_train`.
pub fn train_adapter(
    model: &ModelGraph,
    set: &mut UfoAdapterSet,
    data: &mut dyn ClipSource,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    set.check_compatible(model)?;
    let guard = FreezeGuard::arm(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = set.params_mut().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&sizes);
    set.round_to_f32();
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch = data.next_batch(cfg.batch_size)?;
        let mut tape = Tape::new();
        let (o, _, bound) = at_step(
            batch_loss(
                &mut tape,
                model,
                false,
                Some((set, cfg.alpha_train)),
                &batch,
                cfg.loss_lambda,
                &mut rng,
            ),
            step,
        )?;
        check_finite(&o, step)?;
        tape.backward(o.loss)?;
        let vars = bound.expect("adapter was bound").vars();
        let lr = lr_schedule(step, cfg);
        adam.step(set.params_mut(), &collect_grads(&tape, &vars), lr);
        guard.verify(model, step)?;
        log.rows.push(LossRow {
            step,
            loss_simple: o.simple,
            loss_vlb: o.vlb,
            lr,
        });
        if step % 500 == 0 {
            log::info!("adapter step {step}: simple {:.5} vlb {:.5}", o.simple, o.vlb);
        }
    }
    Ok(log)
}

/// Consistency training: static clips at full intensity.
pub fn train_ufo_consistency(
    model: &ModelGraph,
    set: &mut UfoAdapterSet,
    data: &mut dyn ClipSource,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if cfg.alpha_train != 1.0 {
        return Err(Error::Contract(format!(
            "consistency adapters train at alpha 1, got {}",
            cfg.alpha_train
        )));
    }
    train_adapter(model, set, data, cfg)
}

/// Style training at a fixed intensity, which becomes the set's
/// recommended inference intensity.
pub fn train_ufo_style(
    model: &ModelGraph,
    set: &mut UfoAdapterSet,
    data: &mut dyn ClipSource,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let log = train_adapter(model, set, data, cfg)?;
    set.recommended_alpha = cfg.alpha_train;
    Ok(log)
}
