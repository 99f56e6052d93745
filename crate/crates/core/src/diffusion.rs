//! Forward noising, the two training losses and the ancestral sampler.
//!
//! The covariance head outputs `v`; the predicted log-variance is
//! `log β̃_t + (v+1)/2 · (log β_t − log β̃_t)`, with `β̃_t` the (clipped)
//! posterior variance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{compose, UfoAdapterSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::video::{VideoTensor, DEFAULT_FPS};

pub const DEFAULT_SAMPLE_STEPS: usize = 30;
/// Weight of the variational term in the total loss.
pub const DEFAULT_VLB_WEIGHT: f64 = 0.001;
/// Clips denoised together by [`sample_many`].
const SAMPLE_BATCH: usize = 16;

/// The latent space is pixel space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameEncoder;

impl FrameEncoder {
    pub fn encode(&self, v: &VideoTensor) -> Tensor {
        v.to_tensor()
    }

    pub fn decode(&self, z: &Tensor) -> Result<VideoTensor> {
        VideoTensor::from_tensor(z, DEFAULT_FPS)
    }
}

/// `√ᾱ_t · z + √(1−ᾱ_t) · eps`.
pub fn forward_diffuse(z: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z.zip_map(eps, "forward_diffuse", |x, e| a * x + b * e)
}

/// Batched [`forward_diffuse`]: leading axis of `z` and `eps` is the batch.
pub fn forward_diffuse_batch(
    z: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::dim("forward_diffuse", z.shape(), eps.shape()));
    }
    if z.shape()[0] != t.len() {
        return Err(Error::dim("forward_diffuse", z.shape(), &[t.len()]));
    }
    let per = z.numel() / t.len();
    let mut out = z.clone();
    for (b, &ti) in t.iter().enumerate() {
        sched.check_step(ti)?;
        let ab = sched.alpha_bar(ti);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = b * per..(b + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Mean squared error between the true and predicted noise.
pub fn loss_simple(tape: &mut Tape, eps: Var, eps_hat: Var) -> Result<Var> {
    let d = tape.sub(eps_hat, eps)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

pub fn loss_simple_value(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(eps.clone()), tape.constant(eps_hat.clone()));
    let l = loss_simple(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

/// KL(N(μ₁, e^{lv₁}) ‖ N(μ₂, e^{lv₂})).
pub fn gaussian_kl(mu1: f64, logvar1: f64, mu2: f64, logvar2: f64) -> f64 {
    0.5 * (logvar2 - logvar1 + ((logvar1).exp() + (mu1 - mu2).powi(2)) / logvar2.exp() - 1.0)
}

/// (log β̃_t clipped, log β_t): the endpoints of the variance interpolation.
fn variance_bounds(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    (sched.posterior_log_variance_clipped(t), sched.beta(t).ln())
}

/// Mean of the variational bound over elements, in nats: the closed-form KL
/// to the forward posterior for t ≥ 2 and the Gaussian likelihood of `z0`
/// for t = 1. `eps_hat` enters as a constant, so only `v` receives gradient.
pub fn loss_vlb(
    tape: &mut Tape,
    z0: &Tensor,
    z_t: &Tensor,
    t: &[usize],
    eps_hat: &Tensor,
    v: Var,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let shape = z0.shape().to_vec();
    for other in [z_t.shape(), eps_hat.shape(), tape.shape(v)] {
        if other != shape.as_slice() {
            return Err(Error::dim("loss_vlb", &shape, other));
        }
    }
    if shape[0] != t.len() {
        return Err(Error::dim("loss_vlb", &shape, &[t.len()]));
    }
    let per = z0.numel() / t.len();
    let n = z0.numel();
    let (mut span, mut lo, mut k, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for (b, &ti) in t.iter().enumerate() {
        sched.check_step(ti)?;
        let (min_log, max_log) = variance_bounds(sched, ti);
        let beta = sched.beta(ti);
        let ab = sched.alpha_bar(ti);
        let eps_coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let (c0, ct) = sched.posterior_mean_coefs(ti);
        let lq = sched.posterior_log_variance_clipped(ti);
        for i in b * per..(b + 1) * per {
            let (x0, xt) = (z0.data()[i], z_t.data()[i]);
            let mu_p = (xt - eps_coef * eps_hat.data()[i]) * inv_sqrt_alpha;
            span[i] = max_log - min_log;
            lo[i] = min_log;
            if ti == 1 {
                k[i] = (x0 - mu_p).powi(2);
                c[i] = ln_2pi;
            } else {
                let mu_q = c0 * x0 + ct * xt;
                k[i] = lq.exp() + (mu_q - mu_p).powi(2);
                c[i] = -1.0 - lq;
            }
        }
    }
    if !k.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("non-finite predicted mean in loss_vlb".into()));
    }
    let konst = |tape: &mut Tape, d: Vec<f64>| tape.constant(Tensor::new(shape.clone(), d).unwrap());
    let (span, lo, k, c) = (
        konst(tape, span),
        konst(tape, lo),
        konst(tape, k),
        konst(tape, c),
    );
    let half = tape.scale(v, 0.5);
    let frac = tape.add_const(half, 0.5);
    let lp = tape.mul(frac, span)?;
    let lp = tape.add(lp, lo)?;
    if !tape.value(lp).all_finite() {
        return Err(Error::Numeric("non-finite predicted log-variance".into()));
    }
    let neg = tape.scale(lp, -1.0);
    let inv_var = tape.exp(neg);
    let fit = tape.mul(inv_var, k)?;
    let total = tape.add(lp, fit)?;
    let total = tape.add(total, c)?;
    let m = tape.mean(total);
    Ok(tape.scale(m, 0.5))
}

pub fn loss_vlb_value(
    z0: &Tensor,
    z_t: &Tensor,
    t: &[usize],
    eps_hat: &Tensor,
    v: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let l = loss_vlb(&mut tape, z0, z_t, t, eps_hat, vv, sched)?;
    Ok(tape.value(l).item())
}

fn add_batch_axis(z: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(z.shape());
    z.reshape(&shape)
}

/// Model outputs (ε̂, v) for one clip `z_t: F×H×W×C` under the given adapters.
pub fn denoise_step_params(
    z_t: &Tensor,
    t: usize,
    c: usize,
    model: &ModelGraph,
    adapters: &[(&UfoAdapterSet, f64)],
) -> Result<(Tensor, Tensor)> {
    let comp = compose(model, adapters)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let ads = comp.bind(&mut tape);
    let (e, v) = model.forward(&mut tape, &bound, &ads, &add_batch_axis(z_t)?, &[t], &[c])?;
    let s = z_t.shape();
    Ok((tape.value(e).reshape(s)?, tape.value(v).reshape(s)?))
}

/// `steps` evenly spaced timesteps from 1 to T, increasing.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Contract(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps)
        .map(|i| 1 + ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect())
}

/// One generated clip per (condition, seed) job.
pub fn sample_many(
    model: &ModelGraph,
    jobs: &[(usize, u64)],
    adapters: &[(&UfoAdapterSet, f64)],
    steps: usize,
) -> Result<Vec<VideoTensor>> {
    let comp = compose(model, adapters)?;
    let sched = model.schedule();
    let ts = sampling_timesteps(sched.len(), steps)?;
    let respaced = if ts.len() >= 2 { Some(sched.respaced(&ts)?) } else { None };
    let cfg = model.config();
    let per = cfg.clip_len();
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(SAMPLE_BATCH) {
        let bsz = chunk.len();
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&(_, s)| ChaCha8Rng::seed_from_u64(s)).collect();
        let conds: Vec<usize> = chunk.iter().map(|&(c, _)| c).collect();
        let mut shape = vec![bsz];
        shape.extend_from_slice(&cfg.clip_shape());
        let mut z = Vec::with_capacity(bsz * per);
        for rng in rngs.iter_mut() {
            z.extend(Tensor::randn(&[per], 1.0, rng).into_data());
        }
        let mut z = Tensor::new(shape.clone(), z)?;
        for i in (0..ts.len()).rev() {
            let t = ts[i];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let ads = comp.bind(&mut tape);
            let (e, v) = model.forward(&mut tape, &bound, &ads, &z, &vec![t; bsz], &conds)?;
            let (eps, var) = (tape.value(e), tape.value(v));
            let ab = sched.alpha_bar(t);
            let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x0: Vec<f64> = z
                .data()
                .iter()
                .zip(eps.data())
                .map(|(zi, ei)| ((zi - s1 * ei) / sa).clamp(0.0, 1.0))
                .collect();
            if i == 0 {
                z = Tensor::new(shape.clone(), x0)?;
                break;
            }
            let rs = respaced.as_ref().expect("two or more steps");
            let k = i + 1;
            let (c0, ct) = rs.posterior_mean_coefs(k);
            let (min_log, max_log) = variance_bounds(rs, k);
            let mut next = Vec::with_capacity(z.numel());
            for (b, rng) in rngs.iter_mut().enumerate() {
                let noise = Tensor::randn(&[per], 1.0, rng);
                for j in 0..per {
                    let idx = b * per + j;
                    let frac = (var.data()[idx] + 1.0) / 2.0;
                    let lp = min_log + frac * (max_log - min_log);
                    let mu = c0 * x0[idx] + ct * z.data()[idx];
                    next.push(mu + (0.5 * lp).exp() * noise.data()[j]);
                }
            }
            z = Tensor::new(shape.clone(), next)?;
            if !z.all_finite() {
                return Err(Error::Numeric(format!("sampler diverged at t = {t}")));
            }
        }
        for b in 0..bsz {
            let clip = Tensor::from_slice(&cfg.clip_shape(), &z.data()[b * per..(b + 1) * per])?;
            out.push(VideoTensor::from_tensor(&clip, DEFAULT_FPS)?);
        }
    }
    Ok(out)
}

/// Ancestral sampling of one clip from pure noise.
pub fn sample(
    model: &ModelGraph,
    c: usize,
    adapters: &[(&UfoAdapterSet, f64)],
    steps: usize,
    seed: u64,
) -> Result<VideoTensor> {
    Ok(sample_many(model, &[(c, seed)], adapters, steps)?.remove(0))
}
