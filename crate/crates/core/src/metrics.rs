//! Temporal-quality metrics: flicker, subject/background consistency proxies,
//! block-matching flow, the top-5% flow statistic (OFT) and the Excluded
//! Count rule.
//!
//! Consistency scores are proxies built from pooled pixel blocks; they stand
//! in for learned-feature similarity and are labelled as such in reports.
//! Motion smoothness has no faithful toy counterpart and is not reported.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::video::VideoTensor;

/// Pooling block edge for consistency features.
pub const POOL_BLOCK: usize = 4;
/// Block edge for flow estimation.
pub const FLOW_BLOCK: usize = 4;
pub const SEARCH_RADIUS: i32 = 3;
/// OFT averages this top fraction of flow magnitudes.
pub const OFT_TOP_FRACTION: f64 = 0.05;
/// Clips with OFT below this are near-static.
pub const OFT_STATIC_THRESHOLD: f64 = 1.0;
/// Exclusion requires OFT to fall by more than this factor.
pub const OFT_DROP_RATIO: f64 = 1.5;

fn need_two_frames(v: &VideoTensor, what: &str) -> Result<()> {
    if v.frames() < 2 {
        return Err(Error::Contract(format!(
            "{what} needs at least 2 frames, got {}",
            v.frames()
        )));
    }
    Ok(())
}

/// 1 − mean absolute difference between consecutive frames. Higher is better.
pub fn temporal_flicker_score(v: &VideoTensor) -> Result<f64> {
    need_two_frames(v, "temporal flicker")?;
    Ok(1.0 - v.mean_interframe_abs_diff())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Subject,
    Background,
}

/// Which pooled blocks belong to the subject.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub blocks_y: usize,
    pub blocks_x: usize,
    pub subject: Vec<bool>,
}

impl BlockMask {
    /// A block is subject if any pixel of it is covered in any frame of the
    /// per-pixel ground-truth mask (`F×H×W`).
    pub fn from_pixel_mask(v: &VideoTensor, mask: &[bool]) -> Result<Self> {
        let (f_n, h, w) = (v.frames(), v.height(), v.width());
        if mask.len() != f_n * h * w {
            return Err(Error::dim("pixel mask", &[f_n, h, w], &[mask.len()]));
        }
        let (by, bx) = pooled_dims(v)?;
        let mut subject = vec![false; by * bx];
        for f in 0..f_n {
            for y in 0..by * POOL_BLOCK {
                for x in 0..bx * POOL_BLOCK {
                    if mask[(f * h + y) * w + x] {
                        subject[(y / POOL_BLOCK) * bx + x / POOL_BLOCK] = true;
                    }
                }
            }
        }
        Ok(Self {
            blocks_y: by,
            blocks_x: bx,
            subject,
        })
    }

    /// Subject = the top quartile of blocks by temporal variance of their
    /// pooled means (ties broken by block index), background = the rest.
    pub fn from_temporal_variance(v: &VideoTensor) -> Result<Self> {
        let (by, bx) = pooled_dims(v)?;
        let feats = pooled_features(v, by, bx);
        let n = by * bx;
        let c = v.channels();
        let f_n = v.frames() as f64;
        let mut var = vec![0.0; n];
        for (b, slot) in var.iter_mut().enumerate() {
            for ch in 0..c {
                let vals: Vec<f64> = feats.iter().map(|fr| fr[b * c + ch]).collect();
                let mean = vals.iter().sum::<f64>() / f_n;
                *slot += vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / f_n;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
        let top = n.div_ceil(4);
        let mut subject = vec![false; n];
        for &b in &order[..top] {
            subject[b] = true;
        }
        Ok(Self {
            blocks_y: by,
            blocks_x: bx,
            subject,
        })
    }
}

fn pooled_dims(v: &VideoTensor) -> Result<(usize, usize)> {
    let (by, bx) = (v.height() / POOL_BLOCK, v.width() / POOL_BLOCK);
    if by == 0 || bx == 0 {
        return Err(Error::Metric(format!(
            "frame {}x{} is smaller than one {POOL_BLOCK}x{POOL_BLOCK} block",
            v.height(),
            v.width()
        )));
    }
    Ok((by, bx))
}

/// Per frame: block-major, channel-minor pooled means.
fn pooled_features(v: &VideoTensor, by: usize, bx: usize) -> Vec<Vec<f64>> {
    let c = v.channels();
    let area = (POOL_BLOCK * POOL_BLOCK) as f64;
    (0..v.frames())
        .map(|f| {
            let mut feat = vec![0.0; by * bx * c];
            for y in 0..by * POOL_BLOCK {
                for x in 0..bx * POOL_BLOCK {
                    let b = (y / POOL_BLOCK) * bx + x / POOL_BLOCK;
                    for ch in 0..c {
                        feat[b * c + ch] += v.at(f, y, x, ch) as f64;
                    }
                }
            }
            feat.iter_mut().for_each(|s| *s /= area);
            feat
        })
        .collect()
}

/// Cosine similarity; two zero vectors are identical (1), one zero vector is
/// orthogonal to anything (0).
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Mean cosine similarity of consecutive frames' pooled features over `region`.
pub fn consistency_score(v: &VideoTensor, region: Region, mask: &BlockMask) -> Result<f64> {
    need_two_frames(v, "consistency")?;
    let (by, bx) = pooled_dims(v)?;
    if (mask.blocks_y, mask.blocks_x) != (by, bx) {
        return Err(Error::dim(
            "block mask",
            &[by, bx],
            &[mask.blocks_y, mask.blocks_x],
        ));
    }
    let keep: Vec<usize> = (0..by * bx)
        .filter(|&b| mask.subject[b] == (region == Region::Subject))
        .collect();
    if keep.is_empty() {
        return Err(Error::Metric(format!("{region:?} region mask is empty")));
    }
    let c = v.channels();
    let feats: Vec<Vec<f64>> = pooled_features(v, by, bx)
        .into_iter()
        .map(|fr| {
            keep.iter()
                .flat_map(|&b| fr[b * c..(b + 1) * c].to_vec())
                .collect()
        })
        .collect();
    let total: f64 = feats.windows(2).map(|p| cosine(&p[0], &p[1])).sum();
    Ok(total / (feats.len() - 1) as f64)
}

/// One block's motion between a frame and the next.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockFlow {
    pub dx: i32,
    pub dy: i32,
    pub magnitude: f64,
    /// The best match lies on the edge of the search window, so the true
    /// motion may exceed the radius.
    pub saturated: bool,
}

/// Flow for one consecutive frame pair, blocks in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub blocks_y: usize,
    pub blocks_x: usize,
    pub blocks: Vec<BlockFlow>,
}

/// Exhaustive block matching. For each 4×4 block of frame k, the displacement
/// within radius 3 whose block in frame k+1 has the smallest sum of absolute
/// differences. Candidates leaving the frame are skipped; ties go to the
/// smaller displacement, then to scan order.
pub fn estimate_flow(v: &VideoTensor) -> Result<Vec<FlowField>> {
    need_two_frames(v, "flow estimation")?;
    let (h, w, c) = (v.height(), v.width(), v.channels());
    let (by, bx) = (h / FLOW_BLOCK, w / FLOW_BLOCK);
    if by == 0 || bx == 0 {
        return Err(Error::Contract(format!(
            "frame {h}x{w} is smaller than one {FLOW_BLOCK}x{FLOW_BLOCK} block"
        )));
    }
    let r = SEARCH_RADIUS;
    let mut fields = Vec::with_capacity(v.frames() - 1);
    for f in 0..v.frames() - 1 {
        let mut blocks = Vec::with_capacity(by * bx);
        for byi in 0..by {
            for bxi in 0..bx {
                let (y0, x0) = ((byi * FLOW_BLOCK) as i32, (bxi * FLOW_BLOCK) as i32);
                let mut best: Option<(f64, i32, i32)> = None;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ty, tx) = (y0 + dy, x0 + dx);
                        if ty < 0
                            || tx < 0
                            || ty + FLOW_BLOCK as i32 > h as i32
                            || tx + FLOW_BLOCK as i32 > w as i32
                        {
                            continue;
                        }
                        let mut sad = 0.0;
                        for yy in 0..FLOW_BLOCK {
                            for xx in 0..FLOW_BLOCK {
                                for ch in 0..c {
                                    let a = v.at(f, y0 as usize + yy, x0 as usize + xx, ch);
                                    let b = v.at(f + 1, ty as usize + yy, tx as usize + xx, ch);
                                    sad += (a as f64 - b as f64).abs();
                                }
                            }
                        }
                        let better = match best {
                            None => true,
                            Some((bs, bdx, bdy)) => {
                                sad < bs || (sad == bs && dx * dx + dy * dy < bdx * bdx + bdy * bdy)
                            }
                        };
                        if better {
                            best = Some((sad, dx, dy));
                        }
                    }
                }
                let (_, dx, dy) = best.expect("zero displacement is always in bounds");
                blocks.push(BlockFlow {
                    dx,
                    dy,
                    magnitude: ((dx * dx + dy * dy) as f64).sqrt(),
                    saturated: dx.abs() == r || dy.abs() == r,
                });
            }
        }
        fields.push(FlowField {
            blocks_y: by,
            blocks_x: bx,
            blocks,
        });
    }
    Ok(fields)
}

/// Mean of the top 5% (count rounded up) of magnitudes.
pub fn top_fraction_mean(magnitudes: &[f64], fraction: f64) -> f64 {
    if magnitudes.is_empty() {
        return 0.0;
    }
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Optical Flow Threshold statistic of a clip.
pub fn oft(v: &VideoTensor) -> Result<f64> {
    let mags: Vec<f64> = estimate_flow(v)?
        .iter()
        .flat_map(|f| f.blocks.iter().map(|b| b.magnitude))
        .collect();
    Ok(top_fraction_mean(&mags, OFT_TOP_FRACTION))
}

/// Whether a treated clip became near-static relative to its baseline.
pub fn is_excluded(base_oft: f64, treated_oft: f64) -> bool {
    if treated_oft >= OFT_STATIC_THRESHOLD {
        return false;
    }
    if treated_oft == 0.0 {
        return base_oft > 0.0;
    }
    base_oft / treated_oft > OFT_DROP_RATIO
}

/// Per-index exclusion flags and their count.
pub fn excluded_count(base: &[VideoTensor], treated: &[VideoTensor]) -> Result<(Vec<bool>, usize)> {
    if base.len() != treated.len() {
        return Err(Error::Contract(format!(
            "excluded_count needs aligned lists, got {} baselines and {} treated",
            base.len(),
            treated.len()
        )));
    }
    let flags = base
        .iter()
        .zip(treated)
        .map(|(b, t)| Ok(is_excluded(oft(b)?, oft(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = flags.iter().filter(|&&f| f).count();
    Ok((flags, n))
}

/// One clip to score.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub condition: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub video: VideoTensor,
    /// Ground-truth pixel mask `F×H×W`, when the clip came from the generator.
    pub mask: Option<Vec<bool>>,
}

impl EvalItem {
    pub fn new(id: impl Into<String>, video: VideoTensor) -> Self {
        Self {
            id: id.into(),
            condition: None,
            seed: None,
            alpha: None,
            video,
            mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoMetrics {
    pub id: String,
    pub condition: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub flicker: f64,
    pub subject_consistency: f64,
    pub background_consistency: f64,
    pub oft: f64,
    /// Populated only when a baseline was supplied.
    pub excluded: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub flicker: f64,
    pub subject_consistency: f64,
    pub background_consistency: f64,
    pub oft: f64,
    pub excluded_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub videos: Vec<VideoMetrics>,
    /// Absent for an empty set.
    pub aggregates: Option<Aggregates>,
}

pub fn score_video(item: &EvalItem) -> Result<VideoMetrics> {
    let v = &item.video;
    let mask = match &item.mask {
        Some(m) => BlockMask::from_pixel_mask(v, m)?,
        None => BlockMask::from_temporal_variance(v)?,
    };
    // A ground-truth mask can cover every block; the empty region then
    // carries no signal and scores as perfectly stable.
    let region_or_one = |r: Region| match consistency_score(v, r, &mask) {
        Err(Error::Metric(_)) => Ok(1.0),
        other => other,
    };
    Ok(VideoMetrics {
        id: item.id.clone(),
        condition: item.condition,
        seed: item.seed,
        alpha: item.alpha,
        flicker: temporal_flicker_score(v)?,
        subject_consistency: region_or_one(Region::Subject)?,
        background_consistency: region_or_one(Region::Background)?,
        oft: oft(v)?,
        excluded: None,
    })
}

/// Score every clip; with `baselines` (index-aligned) also apply the
/// exclusion rule.
pub fn evaluate_set(videos: &[EvalItem], baselines: Option<&[EvalItem]>) -> Result<MetricsReport> {
    if let Some(b) = baselines {
        if b.len() != videos.len() {
            return Err(Error::Contract(format!(
                "baseline count {} does not match video count {}",
                b.len(),
                videos.len()
            )));
        }
    }
    let mut rows = videos.iter().map(score_video).collect::<Result<Vec<_>>>()?;
    if let Some(b) = baselines {
        for (row, base) in rows.iter_mut().zip(b) {
            row.excluded = Some(is_excluded(oft(&base.video)?, row.oft));
        }
    }
    let aggregates = (!rows.is_empty()).then(|| {
        let n = rows.len() as f64;
        let mean = |f: fn(&VideoMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Aggregates {
            flicker: mean(|r| r.flicker),
            subject_consistency: mean(|r| r.subject_consistency),
            background_consistency: mean(|r| r.background_consistency),
            oft: mean(|r| r.oft),
            excluded_count: baselines
                .map(|_| rows.iter().filter(|r| r.excluded == Some(true)).count()),
        }
    });
    Ok(MetricsReport {
        videos: rows,
        aggregates,
    })
}

pub const CSV_HEADER: [&str; 9] = [
    "id",
    "condition",
    "seed",
    "alpha",
    "flicker",
    "sc",
    "bc",
    "oft",
    "excluded",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// One row per clip, then an `aggregate` footer row (omitted for an empty
    /// report). The excluded column of the footer holds the Excluded Count.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.videos {
            w.write_record([
                r.id.clone(),
                opt(r.condition),
                opt(r.seed),
                opt(r.alpha),
                format!("{:.12}", r.flicker),
                format!("{:.12}", r.subject_consistency),
                format!("{:.12}", r.background_consistency),
                format!("{:.12}", r.oft),
                opt(r.excluded.map(|e| e as u8)),
            ])?;
        }
        if let Some(a) = &self.aggregates {
            w.write_record([
                "aggregate".to_string(),
                String::new(),
                String::new(),
                String::new(),
                format!("{:.12}", a.flicker),
                format!("{:.12}", a.subject_consistency),
                format!("{:.12}", a.background_consistency),
                format!("{:.12}", a.oft),
                opt(a.excluded_count),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}
