//! Detect/correct adapters.
//!
//! Each wrapped layer gains `α·β·(v_detᵀx)·v_cor` on top of `Wx + b`, with
//! `v_det: n×d`, `v_cor: m×d`, one learned scalar β per layer and a global
//! intensity α chosen at inference time. At α = 0 the extra term is never
//! evaluated, so the base model is reproduced bit for bit.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;
use crate::video::write_atomic;

pub const DEFAULT_RANK: usize = 4;
pub const UFOA_MAGIC: &[u8; 4] = b"UFOA";
pub const UFOA_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Consistency,
    Stylization,
}

impl AdapterKind {
    /// Intensity to use at inference when the caller does not choose one.
    pub fn default_alpha(self) -> f64 {
        match self {
            AdapterKind::Consistency => 0.1,
            AdapterKind::Stylization => 1.0,
        }
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistency" => Ok(Self::Consistency),
            "style" | "stylization" => Ok(Self::Stylization),
            other => Err(Error::Contract(format!("unknown adapter kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    /// `n×d`
    pub v_det: Tensor,
    /// `m×d`
    pub v_cor: Tensor,
    pub beta: f64,
}

impl AdapterEntry {
    /// (m, n, d)
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.v_cor.shape()[0], self.v_det.shape()[0], self.v_det.shape()[1])
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.beta.to_bits() == other.beta.to_bits()
            && self.v_det.bit_eq(&other.v_det)
            && self.v_cor.bit_eq(&other.v_cor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UfoAdapterSet {
    pub fingerprint: String,
    pub d: usize,
    pub kind: AdapterKind,
    pub recommended_alpha: f64,
    pub entries: IndexMap<String, AdapterEntry>,
}

/// Fresh set over every adaptable layer: `v_det ~ N(0, 1/n)`, `v_cor = 0`,
/// `β = 1`, so the adapted model starts out equal to the base.
pub fn init_adapter_set(
    model: &ModelGraph,
    d: usize,
    seed: u64,
    kind: AdapterKind,
) -> Result<UfoAdapterSet> {
    if d < 1 {
        return Err(Error::Contract("adapter rank d must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = IndexMap::new();
    for (name, layer) in model.adaptable_layers() {
        let (m, n) = layer.shape();
        let mut v_det = Tensor::randn(&[n, d], 1.0 / (n as f64).sqrt(), &mut rng);
        v_det.round_to_f32();
        entries.insert(
            name.to_string(),
            AdapterEntry {
                v_det,
                v_cor: Tensor::zeros(&[m, d]),
                beta: 1.0,
            },
        );
    }
    if entries.is_empty() {
        return Err(Error::Contract("model has no adaptable layers".into()));
    }
    Ok(UfoAdapterSet {
        fingerprint: model.fingerprint(),
        d,
        kind,
        recommended_alpha: kind.default_alpha(),
        entries,
    })
}

impl UfoAdapterSet {
    /// Σ over entries of d·(m+n) + 1.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .map(|e| {
                let (m, n, d) = e.dims();
                d * (m + n) + 1
            })
            .sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
            && self.d == other.d
            && self.kind == other.kind
            && self.recommended_alpha.to_bits() == other.recommended_alpha.to_bits()
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Trainable slices in the order of [`BoundAdapter::vars`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.entries.len());
        for e in self.entries.values_mut() {
            let AdapterEntry { v_det, v_cor, beta } = e;
            out.push(std::slice::from_mut(beta));
            out.push(v_det.data_mut());
            out.push(v_cor.data_mut());
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        for e in self.entries.values_mut() {
            e.beta = e.beta as f32 as f64;
            e.v_det.round_to_f32();
            e.v_cor.round_to_f32();
        }
    }

    pub fn bind(&self, tape: &mut Tape, alpha: f64, trainable: bool) -> BoundAdapter {
        BoundAdapter {
            alpha,
            entries: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), bind_entry(tape, e, trainable)))
                .collect(),
        }
    }

    /// Succeeds iff the set fits `model` exactly; otherwise names the first
    /// differing layer.
    pub fn check_compatible(&self, model: &ModelGraph) -> Result<()> {
        let target: IndexMap<&str, (usize, usize)> = model
            .adaptable_layers()
            .map(|(n, l)| (n, l.shape()))
            .collect();
        for (name, e) in &self.entries {
            let (m, n, _) = e.dims();
            match target.get(name.as_str()) {
                None => {
                    return Err(Error::Transfer(format!(
                        "adapter layer `{name}` [{m}, {n}] has no counterpart in the target model"
                    )))
                }
                Some(&(tm, tn)) if (tm, tn) != (m, n) => {
                    return Err(Error::Transfer(format!(
                        "layer `{name}` is [{m}, {n}] in the adapter but [{tm}, {tn}] in the target model"
                    )))
                }
                _ => {}
            }
        }
        let fp = model.fingerprint();
        if self.fingerprint != fp {
            if let Some((name, (m, n))) = target
                .iter()
                .find(|(name, _)| !self.entries.contains_key(**name))
            {
                return Err(Error::Transfer(format!(
                    "target layer `{name}` [{m}, {n}] is not covered by the adapter"
                )));
            }
            return Err(Error::Transfer(format!(
                "fingerprint {} does not match target {fp}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serialize(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        deserialize(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEntry {
    pub v_det: Var,
    pub v_cor: Var,
    pub beta: Var,
}

/// An adapter set placed on a tape at intensity `alpha`.
#[derive(Debug, Clone)]
pub struct BoundAdapter {
    pub alpha: f64,
    pub entries: IndexMap<String, BoundEntry>,
}

impl BoundAdapter {
    /// β, v_det, v_cor per entry, in entry order.
    pub fn vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .flat_map(|e| [e.beta, e.v_det, e.v_cor])
            .collect()
    }
}

fn bind_entry(tape: &mut Tape, e: &AdapterEntry, trainable: bool) -> BoundEntry {
    BoundEntry {
        v_det: tape.leaf(e.v_det.clone(), trainable),
        v_cor: tape.leaf(e.v_cor.clone(), trainable),
        beta: tape.leaf(Tensor::scalar(e.beta), trainable),
    }
}

fn add_terms<'a>(
    tape: &mut Tape,
    x: Var,
    mut y: Var,
    terms: impl Iterator<Item = (f64, &'a BoundEntry)>,
) -> Result<Var> {
    for (alpha, e) in terms {
        if alpha == 0.0 {
            continue;
        }
        let n = tape.shape(e.v_det)[0];
        let xs = tape.shape(x).to_vec();
        if *xs.last().unwrap() != n {
            return Err(Error::dim("adapter detect", &xs, tape.shape(e.v_det)));
        }
        let ys = tape.shape(y).to_vec();
        let rows = tape.value(x).numel() / n;
        let flat = tape.reshape(x, &[rows, n])?;
        let det = tape.matmul(flat, e.v_det)?;
        let cor = tape.linear(det, e.v_cor, None)?;
        let cor = tape.reshape(cor, &ys)?;
        let cor = tape.mul_scalar(cor, e.beta)?;
        let cor = tape.scale(cor, alpha);
        y = tape.add(y, cor)?;
    }
    Ok(y)
}

/// Add every adapter's term for layer `name` to its base output `y`.
pub fn add_adapter_terms(
    tape: &mut Tape,
    name: &str,
    x: Var,
    y: Var,
    adapters: &[BoundAdapter],
) -> Result<Var> {
    add_terms(
        tape,
        x,
        y,
        adapters
            .iter()
            .filter_map(|a| a.entries.get(name).map(|e| (a.alpha, e))),
    )
}

fn check_entry(w: &Tensor, entry: &AdapterEntry) -> Result<()> {
    let (m, n, d) = entry.dims();
    if w.shape() != [m, n] || entry.v_cor.shape()[1] != d {
        return Err(Error::dim(
            "adapter entry",
            w.shape(),
            &[m, n, d, entry.v_cor.shape()[1]],
        ));
    }
    Ok(())
}

/// `y = Wx + b + Σᵢ αᵢβᵢ(v_det,iᵀx)·v_cor,i` for a batch `x: [.., n]`.
pub fn composed_linear(
    w: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    terms: &[(f64, &AdapterEntry)],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.linear(xv, wv, Some(bv))?;
    let bound: Vec<(f64, BoundEntry)> = terms
        .iter()
        .map(|&(a, e)| check_entry(w, e).map(|_| (a, bind_entry(&mut tape, e, false))))
        .collect::<Result<_>>()?;
    let y = add_terms(&mut tape, xv, y, bound.iter().map(|(a, e)| (*a, e)))?;
    Ok(tape.value(y).clone())
}

/// `y = Wx + b + α·β·(v_detᵀx)·v_cor` for a batch `x: [.., n]`.
pub fn adapted_linear(
    w: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    entry: &AdapterEntry,
    alpha: f64,
) -> Result<Tensor> {
    composed_linear(w, bias, x, &[(alpha, entry)])
}

/// Residual between the adapted output difference of two inputs and its
/// decomposition `WΔx + αβ((v_detᵀx_t)·v_cor − (v_detᵀx_tn)·v_cor)`.
pub fn delta_identity_check(
    x_t: &Tensor,
    x_tn: &Tensor,
    w: &Tensor,
    entry: &AdapterEntry,
    alpha: f64,
) -> Result<f64> {
    if x_t.shape() != x_tn.shape() {
        return Err(Error::dim("delta identity", x_t.shape(), x_tn.shape()));
    }
    let (m, n, d) = entry.dims();
    let zero = Tensor::zeros(&[m]);
    let dy = adapted_linear(w, &zero, x_t, entry, alpha)?.zip_map(
        &adapted_linear(w, &zero, x_tn, entry, alpha)?,
        "delta",
        |a, b| a - b,
    )?;
    let (wd, det, cor) = (w.data(), entry.v_det.data(), entry.v_cor.data());
    let mut worst = 0.0f64;
    for (r, (a, b)) in x_t.data().chunks(n).zip(x_tn.data().chunks(n)).enumerate() {
        let project = |x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|k| (0..n).map(|j| det[j * d + k] * x[j]).sum())
                .collect()
        };
        let (pa, pb) = (project(a), project(b));
        for i in 0..m {
            let base: f64 = (0..n).map(|j| wd[i * n + j] * (a[j] - b[j])).sum();
            let ca: f64 = (0..d).map(|k| pa[k] * cor[i * d + k]).sum();
            let cb: f64 = (0..d).map(|k| pb[k] * cor[i * d + k]).sum();
            let expect = base + alpha * entry.beta * (ca - cb);
            worst = worst.max((dy.data()[r * m + i] - expect).abs());
        }
    }
    Ok(worst)
}

/// Several adapter sets attached to one model at their own intensities.
#[derive(Debug, Clone)]
pub struct Composition<'a> {
    model: &'a ModelGraph,
    sets: Vec<(&'a UfoAdapterSet, f64)>,
}

pub fn compose<'a>(
    model: &'a ModelGraph,
    sets: &[(&'a UfoAdapterSet, f64)],
) -> Result<Composition<'a>> {
    for (i, (set, alpha)) in sets.iter().enumerate() {
        if !alpha.is_finite() || *alpha < 0.0 {
            return Err(Error::Contract(format!(
                "adapter {i} has invalid intensity {alpha}"
            )));
        }
        set.check_compatible(model).map_err(|e| match e {
            Error::Transfer(msg) => Error::Transfer(format!("adapter {i} ({:?}): {msg}", set.kind)),
            other => other,
        })?;
    }
    Ok(Composition {
        model,
        sets: sets.to_vec(),
    })
}

/// Attach `set`, trained elsewhere, to `target` at intensity `alpha`.
pub fn transfer<'a>(
    set: &'a UfoAdapterSet,
    target: &'a ModelGraph,
    alpha: f64,
) -> Result<Composition<'a>> {
    compose(target, &[(set, alpha)])
}

impl<'a> Composition<'a> {
    pub fn model(&self) -> &'a ModelGraph {
        self.model
    }

    pub fn sets(&self) -> &[(&'a UfoAdapterSet, f64)] {
        &self.sets
    }

    /// `Wx + b + Σᵢ αᵢβᵢ(v_det,iᵀx)·v_cor,i` for one layer.
    pub fn layer_forward(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let layer = self
            .model
            .layer(name)
            .ok_or_else(|| Error::Contract(format!("no layer named `{name}`")))?;
        let terms: Vec<(f64, &AdapterEntry)> = self
            .sets
            .iter()
            .filter_map(|(s, a)| s.entries.get(name).map(|e| (*a, e)))
            .collect();
        composed_linear(&layer.weight, &layer.bias, x, &terms)
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<BoundAdapter> {
        self.sets
            .iter()
            .map(|(s, a)| s.bind(tape, *a, false))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    name: String,
    m: usize,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetHeader {
    fingerprint: String,
    d: usize,
    kind: AdapterKind,
    recommended_alpha: f64,
    entries: Vec<EntryHeader>,
}

const PREAMBLE: usize = 4 + 1 + 4;

/// `UFOA`, version byte, u32 LE header length, JSON header, then per entry
/// β, v_det (n×d) and v_cor (m×d) as f32 LE.
pub fn serialize(set: &UfoAdapterSet) -> Vec<u8> {
    let header = SetHeader {
        fingerprint: set.fingerprint.clone(),
        d: set.d,
        kind: set.kind,
        recommended_alpha: set.recommended_alpha,
        entries: set
            .entries
            .iter()
            .map(|(name, e)| {
                let (m, n, _) = e.dims();
                EntryHeader {
                    name: name.clone(),
                    m,
                    n,
                }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * set.parameter_count());
    out.extend_from_slice(UFOA_MAGIC);
    out.push(UFOA_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for e in set.entries.values() {
        out.extend_from_slice(&(e.beta as f32).to_le_bytes());
        for v in e.v_det.data().iter().chain(e.v_cor.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Parse the preamble shared by the UFOA and UFOM formats; returns the
/// header bytes and the payload offset.
pub(crate) fn read_preamble<'b>(bytes: &'b [u8], magic: &[u8; 4], version: u8) -> Result<(&'b [u8], usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    match bytes.get(4) {
        None => return Err(Error::format(4, "truncated before version byte")),
        Some(&v) if v != version => {
            return Err(Error::format(4, format!("unsupported version {v}, expected {version}")))
        }
        _ => {}
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format(5, "truncated header length"));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if PREAMBLE + len > bytes.len() {
        return Err(Error::format(
            5,
            format!("header length {len} exceeds the {} bytes available", bytes.len() - PREAMBLE),
        ));
    }
    Ok((&bytes[PREAMBLE..PREAMBLE + len], PREAMBLE + len))
}

/// Read `count` f32 values starting at `*pos`.
pub(crate) fn read_f32s(bytes: &[u8], pos: &mut usize, count: usize) -> Result<Vec<f64>> {
    let end = *pos + 4 * count;
    if end > bytes.len() {
        return Err(Error::format(
            bytes.len(),
            format!("payload truncated, needed {} more bytes", end - bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for (i, c) in bytes[*pos..end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(*pos + 4 * i, "non-finite parameter"));
        }
        out.push(v as f64);
    }
    *pos = end;
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<UfoAdapterSet> {
    let (json, mut pos) = read_preamble(bytes, UFOA_MAGIC, UFOA_VERSION)?;
    let header: SetHeader = serde_json::from_slice(json)
        .map_err(|e| Error::format(PREAMBLE, format!("bad adapter header: {e}")))?;
    if header.d == 0 || header.entries.is_empty() {
        return Err(Error::format(PREAMBLE, "adapter header has zero rank or no entries"));
    }
    if !(0.0..=1.0).contains(&header.recommended_alpha) {
        return Err(Error::format(
            PREAMBLE,
            format!("recommended_alpha {} outside [0, 1]", header.recommended_alpha),
        ));
    }
    let d = header.d;
    let mut entries = IndexMap::new();
    for eh in header.entries {
        if eh.m == 0 || eh.n == 0 {
            return Err(Error::format(PREAMBLE, format!("layer `{}` has an empty shape", eh.name)));
        }
        let beta = read_f32s(bytes, &mut pos, 1)?[0];
        let v_det = Tensor::new(vec![eh.n, d], read_f32s(bytes, &mut pos, eh.n * d)?)?;
        let v_cor = Tensor::new(vec![eh.m, d], read_f32s(bytes, &mut pos, eh.m * d)?)?;
        if entries
            .insert(eh.name.clone(), AdapterEntry { v_det, v_cor, beta })
            .is_some()
        {
            return Err(Error::format(PREAMBLE, format!("duplicate layer `{}`", eh.name)));
        }
    }
    if pos != bytes.len() {
        return Err(Error::format(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(UfoAdapterSet {
        fingerprint: header.fingerprint,
        d,
        kind: header.kind,
        recommended_alpha: header.recommended_alpha,
        entries,
    })
}
