//! Independent brute-force implementations of the clip metrics.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufo_core::metrics::BlockMask;
use ufo_core::VideoTensor;

pub fn random_clip(f: usize, h: usize, w: usize, c: usize, seed: u64) -> VideoTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..f * h * w * c).map(|_| r.random_range(0.0f32..=1.0)).collect();
    VideoTensor::new(f, h, w, c, 24.0, data).unwrap()
}

fn px(v: &VideoTensor, f: usize, y: usize, x: usize, ch: usize) -> f64 {
    v.data()[((f * v.height() + y) * v.width() + x) * v.channels() + ch] as f64
}

pub fn brute_flicker(v: &VideoTensor) -> f64 {
    let mut total = 0.0;
    for f in 1..v.frames() {
        let mut s = 0.0;
        for y in 0..v.height() {
            for x in 0..v.width() {
                for ch in 0..v.channels() {
                    s += (px(v, f, y, x, ch) - px(v, f - 1, y, x, ch)).abs();
                }
            }
        }
        total += s / (v.height() * v.width() * v.channels()) as f64;
    }
    1.0 - total / (v.frames() - 1) as f64
}

pub fn brute_consistency(v: &VideoTensor, mask: &BlockMask, subject: bool) -> f64 {
    let feature = |f: usize| {
        let mut out = Vec::new();
        for by in 0..mask.blocks_y {
            for bx in 0..mask.blocks_x {
                if mask.subject[by * mask.blocks_x + bx] != subject {
                    continue;
                }
                for ch in 0..v.channels() {
                    let mut s = 0.0;
                    for y in 0..4 {
                        for x in 0..4 {
                            s += px(v, f, by * 4 + y, bx * 4 + x, ch);
                        }
                    }
                    out.push(s / 16.0);
                }
            }
        }
        out
    };
    let mut total = 0.0;
    for f in 1..v.frames() {
        let (a, b) = (feature(f - 1), feature(f));
        let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
        let n = |u: &[f64]| u.iter().map(|p| p * p).sum::<f64>().sqrt();
        total += dot / (n(&a) * n(&b));
    }
    total / (v.frames() - 1) as f64
}

/// Every candidate ranked by (SAD, squared displacement, scan order).
pub fn brute_oft(v: &VideoTensor) -> f64 {
    let (h, w) = (v.height() as i32, v.width() as i32);
    let mut mags = Vec::new();
    for f in 0..v.frames() - 1 {
        for by in 0..h / 4 {
            for bx in 0..w / 4 {
                let mut cands = Vec::new();
                for dy in -3i32..=3 {
                    for dx in -3i32..=3 {
                        let (ty, tx) = (by * 4 + dy, bx * 4 + dx);
                        if ty < 0 || tx < 0 || ty + 4 > h || tx + 4 > w {
                            continue;
                        }
                        let mut sad = 0.0;
                        for y in 0..4 {
                            for x in 0..4 {
                                for ch in 0..v.channels() {
                                    let a = px(v, f, (by * 4 + y) as usize, (bx * 4 + x) as usize, ch);
                                    let b = px(v, f + 1, (ty + y) as usize, (tx + x) as usize, ch);
                                    sad += (a - b).abs();
                                }
                            }
                        }
                        cands.push((sad, dx * dx + dy * dy, cands.len()));
                    }
                }
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                mags.push((cands[0].1 as f64).sqrt());
            }
        }
    }
    mags.sort_by(|a, b| b.total_cmp(a));
    let k = (mags.len() as f64 * 0.05).ceil() as usize;
    mags[..k].iter().sum::<f64>() / k as f64
}

/// Whole-frame translation by `speed` pixels per frame of a random texture.
pub fn translated(frames: usize, size: usize, speed: usize, seed: u64) -> VideoTensor {
    let wide = size + speed * frames;
    let tex = random_clip(1, size, wide, 1, seed);
    let mut data = Vec::new();
    for f in 0..frames {
        for y in 0..size {
            for x in 0..size {
                data.push(tex.data()[y * wide + x + speed * f]);
            }
        }
    }
    VideoTensor::new(frames, size, size, 1, 24.0, data).unwrap()
}

/// Top quartile of 4×4 blocks by temporal variance of their pooled means.
pub fn brute_mask(v: &VideoTensor) -> BlockMask {
    let (by, bx) = (v.height() / 4, v.width() / 4);
    let mut var = Vec::new();
    for b in 0..by * bx {
        let mut total = 0.0;
        for ch in 0..v.channels() {
            let means: Vec<f64> = (0..v.frames())
                .map(|f| {
                    let mut s = 0.0;
                    for y in 0..4 {
                        for x in 0..4 {
                            s += px(v, f, (b / bx) * 4 + y, (b % bx) * 4 + x, ch);
                        }
                    }
                    s / 16.0
                })
                .collect();
            let mu = means.iter().sum::<f64>() / means.len() as f64;
            total += means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64;
        }
        var.push((total, b));
    }
    var.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut subject = vec![false; by * bx];
    for &(_, b) in &var[..(by * bx).div_ceil(4)] {
        subject[b] = true;
    }
    BlockMask { blocks_y: by, blocks_x: bx, subject }
}

/// Exclusion flags by the rule written out longhand.
pub fn brute_excluded(base: &[VideoTensor], treated: &[VideoTensor]) -> Vec<bool> {
    base.iter()
        .zip(treated)
        .map(|(b, t)| {
            let (ob, ot) = (brute_oft(b), brute_oft(t));
            if ot >= 1.0 {
                false
            } else if ot == 0.0 {
                ob > 0.0
            } else {
                ob / ot > 1.5
            }
        })
        .collect()
}
