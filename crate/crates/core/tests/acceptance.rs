//! End-to-end acceptance run. Prints one verdict line per criterion and exits
//! non-zero if any fails. Trains the reference models from scratch, so it
//! takes several minutes on one core.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{brute_consistency, brute_excluded, brute_flicker, brute_mask, brute_oft, random_clip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufo_core::adapter::{composed_linear, delta_identity_check, deserialize, serialize};
use ufo_core::autodiff::{Tape, Var};
use ufo_core::checkpoint::{deserialize_model, serialize_model};
use ufo_core::diffusion::sample_many;
use ufo_core::metrics::{
    consistency_score, evaluate_set, excluded_count, oft, temporal_flicker_score, BlockMask, EvalItem, Region,
};
use ufo_core::synth::{SceneConfig, Style};
use ufo_core::trainer::{
    train_base, train_ufo_consistency, train_ufo_style, StreamMode, SyntheticStream, TrainConfig, TrainLog,
};
use ufo_core::{
    init_adapter_set, transfer, AdapterEntry, AdapterKind, Error, ModelConfig, ModelGraph, ScheduleKind, Tensor,
    UfoAdapterSet, VideoTensor,
};

const GRID: usize = 32;
const SAMPLE_STEPS: usize = 30;
const CONDITIONS: usize = 16;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 25);
    }
}

#[derive(Default)]
struct Report {
    verdicts: Vec<(String, bool, String)>,
    started: Option<Instant>,
}

impl Report {
    fn note(&self, msg: impl AsRef<str>) {
        let secs = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        println!("  [{secs:6.1}s] {}", msg.as_ref());
    }

    fn verdict(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.verdicts.push((id.to_string(), pass, detail));
    }
}

// ---- criterion 2: adapter algebra ------------------------------------------

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

fn random_entry(m: usize, n: usize, d: usize, r: &mut ChaCha8Rng) -> AdapterEntry {
    AdapterEntry {
        v_det: uniform(&[n, d], r),
        v_cor: uniform(&[m, d], r),
        beta: r.random_range(-2.0..2.0),
    }
}

fn adapter_algebra(report: &mut Report) {
    let (mut delta, mut affine, mut order) = (0.0f64, 0.0f64, 0.0f64);
    let mut r = rng(2);
    for _ in 0..1000 {
        let (m, n, d, rows) = (
            r.random_range(1..=12),
            r.random_range(1..=12),
            r.random_range(1..=6),
            r.random_range(1..=4),
        );
        let (w, b) = (uniform(&[m, n], &mut r), uniform(&[m], &mut r));
        let (x, x_tn) = (uniform(&[rows, n], &mut r), uniform(&[rows, n], &mut r));
        let (e1, e2, e3) = (
            random_entry(m, n, d, &mut r),
            random_entry(m, n, d, &mut r),
            random_entry(m, n, d, &mut r),
        );
        let alpha = r.random_range(0.0..2.0);
        delta = delta.max(delta_identity_check(&x, &x_tn, &w, &e1, alpha).unwrap());

        let y = |a: f64| composed_linear(&w, &b, &x, &[(a, &e1)]).unwrap();
        let (y0, y1, ya) = (y(0.0), y(1.0), y(alpha));
        for i in 0..ya.numel() {
            let line = y0.data()[i] + alpha * (y1.data()[i] - y0.data()[i]);
            affine = affine.max((ya.data()[i] - line).abs());
        }

        let terms = [(alpha, &e1), (r.random_range(0.0..2.0), &e2), (r.random_range(0.0..2.0), &e3)];
        let fwd = composed_linear(&w, &b, &x, &terms).unwrap();
        for perm in [[2, 1, 0], [1, 0, 2], [0, 2, 1]] {
            let permuted: Vec<_> = perm.iter().map(|&i| terms[i]).collect();
            order = order.max(fwd.max_abs_diff(&composed_linear(&w, &b, &x, &permuted).unwrap()));
        }
    }
    let pass = delta <= 1e-12 && affine <= 1e-12 && order <= 1e-12;
    report.verdict(
        "2 adapter algebra",
        pass,
        format!("1000 cases; delta residual {delta:.2e}, alpha-affinity {affine:.2e}, order {order:.2e} (tol 1e-12)"),
    );
}

// ---- criterion 3: gradients of every layer ----------------------------------

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        frames: 2,
        height: 4,
        width: 4,
        channels: 1,
        patch: 2,
        dim: 8,
        depth: 1,
        num_conditions: 3,
        timesteps: 10,
        schedule: ScheduleKind::Cosine,
    }
}

struct Probe {
    z: Tensor,
    t: Vec<usize>,
    c: Vec<usize>,
    r_eps: Tensor,
    r_v: Tensor,
    alpha: f64,
}

impl Probe {
    fn loss(&self, tape: &mut Tape, model: &ModelGraph, set: &UfoAdapterSet, trainable: bool) -> (Var, Vec<Var>, Vec<Var>) {
        let bm = model.bind(tape, trainable);
        let ba = set.bind(tape, self.alpha, trainable);
        let (eps, v) = model.forward(tape, &bm, std::slice::from_ref(&ba), &self.z, &self.t, &self.c).unwrap();
        let (re, rv) = (tape.constant(self.r_eps.clone()), tape.constant(self.r_v.clone()));
        let a = tape.mul(eps, re).unwrap();
        let b = tape.mul(v, rv).unwrap();
        let (a, b) = (tape.mean(a), tape.mean(b));
        (tape.add(a, b).unwrap(), bm.vars(), ba.vars())
    }

    fn value(&self, model: &ModelGraph, set: &UfoAdapterSet) -> f64 {
        let mut tape = Tape::new();
        let (l, _, _) = self.loss(&mut tape, model, set, false);
        tape.value(l).item()
    }
}

fn gradient_correctness(report: &mut Report) {
    const H: f64 = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / (n.abs() + H);
    let mut worst_layer = (0.0f64, String::new());
    let mut coords = 0usize;
    let mut layers_checked = 0usize;
    for inst in 0..50u64 {
        let mut r = rng(300 + inst);
        let cfg = tiny_cfg();
        let mut model = ModelGraph::new(cfg.clone(), inst).unwrap();
        for p in model.params_mut() {
            *p = Tensor::randn(p.shape(), 0.4, &mut r);
        }
        let mut set = init_adapter_set(&model, 2, inst, AdapterKind::Consistency).unwrap();
        for e in set.entries.values_mut() {
            let (m, n, d) = e.dims();
            *e = random_entry(m, n, d, &mut r);
        }
        let shape = [2, cfg.frames, cfg.height, cfg.width, cfg.channels];
        let probe = Probe {
            z: Tensor::randn(&shape, 1.0, &mut r),
            t: (0..2).map(|_| r.random_range(1..=cfg.timesteps)).collect(),
            c: (0..2).map(|_| r.random_range(0..cfg.num_conditions)).collect(),
            r_eps: uniform(&shape, &mut r),
            r_v: uniform(&shape, &mut r),
            alpha: r.random_range(0.2..1.5),
        };

        let mut tape = Tape::new();
        let (l, mvars, avars) = probe.loss(&mut tape, &model, &set, true);
        tape.backward(l).unwrap();
        let grad = |v: Var| tape.grad(v).unwrap().clone();

        let names: Vec<String> = model.layers().keys().cloned().collect();
        let mut probe_model = model.clone();
        for (i, name) in names.iter().enumerate() {
            let (gw, gb) = (grad(mvars[2 * i]), grad(mvars[2 * i + 1]));
            let mut worst = 0.0f64;
            for (which, g) in [(0, &gw), (1, &gb)] {
                for j in 0..g.numel() {
                    let at = |m: &mut ModelGraph, v: f64| {
                        let l = m.layer_mut(name).unwrap();
                        let p = if which == 0 { &mut l.weight } else { &mut l.bias };
                        p.data_mut()[j] = v;
                    };
                    let l = probe_model.layer(name).unwrap();
                    let orig = if which == 0 { l.weight.data()[j] } else { l.bias.data()[j] };
                    at(&mut probe_model, orig + H);
                    let up = probe.value(&probe_model, &set);
                    at(&mut probe_model, orig - H);
                    let down = probe.value(&probe_model, &set);
                    at(&mut probe_model, orig);
                    worst = worst.max(rel(g.data()[j], (up - down) / (2.0 * H)));
                    coords += 1;
                }
            }
            layers_checked += 1;
            if worst >= worst_layer.0 {
                worst_layer = (worst, name.clone());
            }
        }

        let entry_names: Vec<String> = set.entries.keys().cloned().collect();
        let mut probe_set = set.clone();
        for (k, v) in avars.iter().enumerate() {
            let g = grad(*v);
            let mut worst = 0.0f64;
            for j in 0..g.numel() {
                let orig = probe_set.params_mut()[k][j];
                probe_set.params_mut()[k][j] = orig + H;
                let up = probe.value(&model, &probe_set);
                probe_set.params_mut()[k][j] = orig - H;
                let down = probe.value(&model, &probe_set);
                probe_set.params_mut()[k][j] = orig;
                worst = worst.max(rel(g.data()[j], (up - down) / (2.0 * H)));
                coords += 1;
            }
            if worst >= worst_layer.0 {
                worst_layer = (worst, format!("adapter {}", entry_names[k / 3]));
            }
        }
        layers_checked += entry_names.len();
    }
    report.verdict(
        "3 gradient correctness",
        worst_layer.0 < 1e-5,
        format!(
            "50 instances, {layers_checked} layer checks, {coords} coordinates; worst relative error {:.2e} in {} (tol 1e-5)",
            worst_layer.0, worst_layer.1
        ),
    );
}

// ---- criterion 9: formats ---------------------------------------------------

fn rewrite_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..5].to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[9 + len..]);
    out
}

/// Every corruption of `bytes` must fail with a format error.
fn corruptions(bytes: &[u8], shape_edit: impl Fn(&mut serde_json::Value)) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut bad = bytes.to_vec();
    bad[0] ^= 0x20;
    out.push(("bad magic".to_string(), bad));
    let mut bad = bytes.to_vec();
    bad[4] = 99;
    out.push(("version".to_string(), bad));
    let mut bad = bytes.to_vec();
    bad[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
    out.push(("length field".to_string(), bad));
    for cut in (0..bytes.len()).step_by((bytes.len() / 40).max(1)).chain([bytes.len() - 1]) {
        out.push((format!("truncated at {cut}"), bytes[..cut].to_vec()));
    }
    let mut long = bytes.to_vec();
    long.extend_from_slice(&[0, 0, 0, 0]);
    out.push(("trailing payload".to_string(), long));
    out.push(("shape mismatch".to_string(), rewrite_header(bytes, shape_edit)));
    out
}

fn formats(report: &mut Report) {
    let mut r = rng(9);
    let mut failures = Vec::new();
    let mut fixtures = 0usize;
    for i in 0..100u64 {
        let cfg = ModelConfig {
            dim: [4, 8, 12][i as usize % 3],
            depth: 1 + i as usize % 2,
            num_conditions: 1 + i as usize % 5,
            schedule: if i % 2 == 0 { ScheduleKind::Cosine } else { ScheduleKind::Linear },
            ..tiny_cfg()
        };
        let mut model = ModelGraph::new(cfg, i).unwrap();
        for p in model.params_mut() {
            *p = Tensor::randn(p.shape(), 1.0, &mut r);
            p.round_to_f32();
        }
        let kind = if i % 3 == 0 { AdapterKind::Stylization } else { AdapterKind::Consistency };
        let mut set = init_adapter_set(&model, 1 + i as usize % 5, i, kind).unwrap();
        for e in set.entries.values_mut() {
            let (m, n, d) = e.dims();
            *e = random_entry(m, n, d, &mut r);
        }
        set.recommended_alpha = r.random_range(0.0..=1.0);
        set.round_to_f32();

        let ufoa = serialize(&set);
        if !deserialize(&ufoa).map(|b| b.bit_eq(&set)).unwrap_or(false) {
            failures.push(format!("UFOA round trip {i}"));
        }
        let ufom = serialize_model(&model);
        match deserialize_model(&ufom) {
            Ok(back) => {
                let same = back.config() == model.config()
                    && back.fingerprint() == model.fingerprint()
                    && back.params().iter().zip(model.params()).all(|(a, b)| a.bit_eq(b));
                if !same {
                    failures.push(format!("UFOM round trip {i}"));
                }
            }
            Err(e) => failures.push(format!("UFOM round trip {i}: {e}")),
        }

        if i % 10 == 0 {
            let ufoa_cases = corruptions(&ufoa, |h| {
                let m = h["entries"][0]["m"].as_u64().unwrap();
                h["entries"][0]["m"] = (m + 1).into();
            });
            for (what, bytes) in ufoa_cases {
                fixtures += 1;
                if !matches!(deserialize(&bytes), Err(Error::Format { .. })) {
                    failures.push(format!("UFOA {what} ({i})"));
                }
            }
            let ufom_cases = corruptions(&ufom, |h| {
                let first = h["params"][0]["shape"][0].as_u64().unwrap();
                h["params"][0]["shape"][0] = (first + 1).into();
            });
            for (what, bytes) in ufom_cases {
                fixtures += 1;
                if !matches!(deserialize_model(&bytes), Err(Error::Format { .. })) {
                    failures.push(format!("UFOM {what} ({i})"));
                }
            }
            // a well-formed set whose shapes do not fit the target model
            let other = ModelGraph::new(ModelConfig { dim: model.config().dim + 4, ..model.config().clone() }, 0).unwrap();
            fixtures += 1;
            if !matches!(transfer(&set, &other, 0.1), Err(Error::Transfer(_))) {
                failures.push(format!("UFOA shape mismatch against a model ({i})"));
            }
        }
    }
    report.verdict(
        "9 serialization",
        failures.is_empty(),
        format!(
            "100 UFOA + 100 UFOM round trips, {fixtures} corruption fixtures; {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    );
}

// ---- criterion 10: metric oracles ------------------------------------------

fn metric_oracles(report: &mut Report) {
    let mut r = rng(10);
    let clips: Vec<VideoTensor> = (0..50)
        .map(|i| {
            let c = if i % 2 == 0 { 1 } else { 3 };
            random_clip(r.random_range(2..=6), r.random_range(4..=13), r.random_range(4..=13), c, 1000 + i)
        })
        .collect();
    let (mut fl, mut cs, mut of) = (0.0f64, 0.0f64, 0.0f64);
    let mut masks_agree = true;
    for v in &clips {
        fl = fl.max((temporal_flicker_score(v).unwrap() - brute_flicker(v)).abs());
        of = of.max((oft(v).unwrap() - brute_oft(v)).abs());
        let mask = BlockMask::from_temporal_variance(v).unwrap();
        masks_agree &= mask == brute_mask(v);
        cs = cs.max((consistency_score(v, Region::Subject, &mask).unwrap() - brute_consistency(v, &mask, true)).abs());
        if mask.subject.iter().any(|s| !s) {
            let bc = consistency_score(v, Region::Background, &mask).unwrap();
            cs = cs.max((bc - brute_consistency(v, &mask, false)).abs());
        }
    }
    // pairs: half the treated clips frozen on their first frame
    let (base, rest) = clips.split_at(25);
    let treated: Vec<VideoTensor> = rest
        .iter()
        .zip(base)
        .enumerate()
        .map(|(i, (t, b))| {
            if i % 2 == 0 {
                let f0 = b.frame_data(0).to_vec();
                let data = f0.iter().copied().cycle().take(b.data().len()).collect();
                VideoTensor::new(b.frames(), b.height(), b.width(), b.channels(), 24.0, data).unwrap()
            } else {
                let (f, h, w, c) = (b.frames(), b.height(), b.width(), b.channels());
                random_clip(f, h, w, c, t.data().len() as u64)
            }
        })
        .collect();
    let (flags, ec) = excluded_count(base, &treated).unwrap();
    let expect = brute_excluded(base, &treated);
    let ec_ok = flags == expect && ec == expect.iter().filter(|&&f| f).count();
    let pass = fl < 1e-12 && cs < 1e-12 && of < 1e-12 && masks_agree && ec_ok;
    report.verdict(
        "10 metric oracles",
        pass,
        format!(
            "50 clips; flicker {fl:.1e}, consistency {cs:.1e}, OFT {of:.1e} (tol 1e-12), masks agree {masks_agree}, EC {ec} matches {ec_ok}"
        ),
    );
}

// ---- reference setup ---------------------------------------------------------

fn reference_cfg() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        channels: 3,
        dim: 32,
        num_conditions: CONDITIONS,
        ..ModelConfig::default()
    }
}

fn reference_scene() -> SceneConfig {
    SceneConfig {
        height: 8,
        width: 8,
        channels: 3,
        ..SceneConfig::default()
    }
}

fn train_reference_base(init_seed: u64, data_seed: u64, train_seed: u64) -> (ModelGraph, TrainLog) {
    let mut model = ModelGraph::new(reference_cfg(), init_seed).unwrap();
    let mut data =
        SyntheticStream::new(reference_scene(), (0..CONDITIONS).collect(), StreamMode::Moving, data_seed).unwrap();
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 8,
        lr_peak: 1e-3,
        warmup_steps: 200,
        seed: train_seed,
        ..TrainConfig::default()
    };
    let log = train_base(&mut model, &mut data, &cfg).unwrap();
    (model, log)
}

fn ufo_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        lr_peak: 3e-3,
        warmup_steps: steps / 6,
        seed,
        ..TrainConfig::default()
    }
}

fn train_consistency(model: &ModelGraph, d: usize) -> (UfoAdapterSet, TrainLog) {
    let mut set = init_adapter_set(model, d, 5, AdapterKind::Consistency).unwrap();
    let mut data =
        SyntheticStream::new(reference_scene(), (0..CONDITIONS).collect(), StreamMode::Static, 12).unwrap();
    let log = train_ufo_consistency(model, &mut set, &mut data, &ufo_cfg(3000, 4)).unwrap();
    (set, log)
}

fn grid() -> Vec<(usize, u64)> {
    (0..GRID).map(|i| (i % CONDITIONS, 5000 + i as u64)).collect()
}

fn generate(model: &ModelGraph, adapters: &[(&UfoAdapterSet, f64)]) -> Vec<VideoTensor> {
    sample_many(model, &grid(), adapters, SAMPLE_STEPS).unwrap()
}

#[derive(Debug, Clone, Copy)]
struct Scores {
    flicker: f64,
    sc: f64,
    bc: f64,
    ec: usize,
    diff: f64,
}

fn items(videos: &[VideoTensor]) -> Vec<EvalItem> {
    videos.iter().enumerate().map(|(i, v)| EvalItem::new(i.to_string(), v.clone())).collect()
}

fn score(videos: &[VideoTensor], baseline: &[VideoTensor]) -> Scores {
    let report = evaluate_set(&items(videos), Some(&items(baseline))).unwrap();
    let a = report.aggregates.unwrap();
    Scores {
        flicker: a.flicker,
        sc: a.subject_consistency,
        bc: a.background_consistency,
        ec: a.excluded_count.unwrap(),
        diff: videos.iter().map(|v| v.mean_interframe_abs_diff()).sum::<f64>() / videos.len() as f64,
    }
}

fn fmt(alpha: f64, s: &Scores) -> String {
    format!(
        "alpha {alpha:<4} flicker {:.5} sc {:.5} bc {:.5} ec {:>2} diff {:.5}",
        s.flicker, s.sc, s.bc, s.ec, s.diff
    )
}

fn total_loss(log: &TrainLog, from: usize, to: usize, lambda: f64) -> f64 {
    let rows = &log.rows[from..to];
    rows.iter().map(|r| r.loss_simple + lambda * r.loss_vlb).sum::<f64>() / rows.len() as f64
}

fn pearson(a: &VideoTensor, b: &VideoTensor) -> f64 {
    let n = a.data().len() as f64;
    let (ma, mb) = (
        a.data().iter().map(|&v| v as f64).sum::<f64>() / n,
        b.data().iter().map(|&v| v as f64).sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt().max(f64::MIN_POSITIVE)
}

fn main() -> ExitCode {
    tune_allocator();
    let mut report = Report {
        started: Some(Instant::now()),
        ..Report::default()
    };

    adapter_algebra(&mut report);
    gradient_correctness(&mut report);
    formats(&mut report);
    metric_oracles(&mut report);

    // parameter economy needs only the architecture
    let probe = ModelGraph::new(reference_cfg(), 0).unwrap();
    let probe_set = init_adapter_set(&probe, 4, 0, AdapterKind::Consistency).unwrap();
    let formula: usize = probe
        .adaptable_layers()
        .map(|(_, l)| {
            let (m, n) = l.shape();
            4 * (m + n) + 1
        })
        .sum();
    let (base_n, ufo_n) = (probe.parameter_count(), probe_set.parameter_count());
    report.verdict(
        "7 parameter economy",
        ufo_n == formula && (ufo_n as f64) < 0.02 * base_n as f64,
        format!(
            "d=4 adapter {ufo_n} params (formula {formula}) vs base {base_n} = {:.2}% (limit 2%)",
            100.0 * ufo_n as f64 / base_n as f64
        ),
    );

    report.note("training base model A (2000 steps)");
    let (model_a, log_a) = train_reference_base(1, 11, 3);
    let first = log_a.rows[0].loss_simple;
    let last = log_a.mean_simple(log_a.rows.len() - 20, log_a.rows.len());
    let aux_base = last < 0.1 * first;
    report.note(format!("base A loss_simple {first:.4} -> {last:.4} (mean of last 20 steps)"));

    report.note("training consistency adapter on A (d=4, 3000 steps)");
    let (set_a, ufo_log) = train_consistency(&model_a, 4);
    let n = ufo_log.rows.len();
    let lambda = TrainConfig::default().loss_lambda;
    let (early, late) = (total_loss(&ufo_log, 0, n / 10, lambda), total_loss(&ufo_log, n - n / 10, n, lambda));
    report.note(format!("adapter loss first 10% {early:.5}, last 10% {late:.5}"));

    report.note("training style adapter on A (invert, 3000 steps)");
    let mut style = init_adapter_set(&model_a, 4, 6, AdapterKind::Stylization).unwrap();
    let mut styled =
        SyntheticStream::new(reference_scene(), (0..CONDITIONS).collect(), StreamMode::Styled(Style::Invert), 13)
            .unwrap();
    train_ufo_style(&model_a, &mut style, &mut styled, &ufo_cfg(3000, 7)).unwrap();

    // criterion 1
    let mut r = rng(1);
    let jobs: Vec<(usize, u64)> = (0..100).map(|_| (r.random_range(0..CONDITIONS), r.random())).collect();
    let plain = sample_many(&model_a, &jobs, &[], SAMPLE_STEPS).unwrap();
    let mut exact = true;
    for adapters in [
        vec![(&set_a, 0.0)],
        vec![(&style, 0.0)],
        vec![(&set_a, 0.0), (&style, 0.0)],
    ] {
        let with = sample_many(&model_a, &jobs, &adapters, SAMPLE_STEPS).unwrap();
        exact &= plain.iter().zip(&with).all(|(a, b)| a.bit_eq(b));
    }
    report.verdict(
        "1 alpha=0 exactness",
        exact,
        "100 random seed/condition pairs; consistency, style and both at alpha 0 vs no adapter".into(),
    );

    // criteria 4 and 5
    let base_a = generate(&model_a, &[]);
    let s: Vec<(f64, Scores)> = [0.0, 0.1, 0.2, 1.0]
        .iter()
        .map(|&alpha| {
            let v = if alpha == 0.0 { base_a.clone() } else { generate(&model_a, &[(&set_a, alpha)]) };
            (alpha, score(&v, &base_a))
        })
        .collect();
    for (alpha, sc) in &s {
        report.note(fmt(*alpha, sc));
    }
    let (s0, s1, s2, sfull) = (s[0].1, s[1].1, s[2].1, s[3].1);
    let monotone = |f: fn(&Scores) -> f64| f(&s2) > f(&s1) && f(&s1) > f(&s0);
    let trend = monotone(|x| x.flicker) && monotone(|x| x.sc) && monotone(|x| x.bc);
    let ratio = sfull.diff / s0.diff;
    report.verdict(
        "4 consistency training",
        trend && ratio < 0.1,
        format!(
            "flicker/SC/BC strictly rising over alpha 0, 0.1, 0.2: {trend}; alpha=1 inter-frame diff {:.5} = {ratio:.3}x alpha=0 {:.5} (limit 0.1x)",
            sfull.diff, s0.diff
        ),
    );
    report.verdict(
        "5 excluded count trend",
        s2.ec >= s1.ec,
        format!("EC(0.1) = {}, EC(0.2) = {} over {GRID} clips", s1.ec, s2.ec),
    );

    // criterion 8
    let mut ablation = vec![(4usize, s1.flicker - s0.flicker, s2.flicker - s0.flicker)];
    for d in [1usize, 64] {
        report.note(format!("training consistency adapter on A (d={d}, 3000 steps)"));
        let (set, _) = train_consistency(&model_a, d);
        let f1 = score(&generate(&model_a, &[(&set, 0.1)]), &base_a).flicker;
        let f2 = score(&generate(&model_a, &[(&set, 0.2)]), &base_a).flicker;
        ablation.push((d, f1 - s0.flicker, f2 - s0.flicker));
    }
    ablation.sort_by_key(|a| a.0);
    for (d, g1, g2) in &ablation {
        report.note(format!("d={d:<2} flicker gain alpha 0.1 {g1:+.5}, alpha 0.2 {g2:+.5}"));
    }
    let (g_d1, g_d4, g_d64) = (ablation[0].1, ablation[1].1, ablation[2].1);
    report.verdict(
        "8 rank ablation",
        g_d4 >= g_d1,
        format!("flicker gain at alpha 0.1: d=1 {g_d1:+.5}, d=4 {g_d4:+.5}; d=64 {g_d64:+.5} (reported only)"),
    );

    // criterion 6
    report.note("training base model B (2000 steps)");
    let (model_b, _) = train_reference_base(2, 22, 23);
    let transferred = transfer(&set_a, &model_b, 0.1).is_ok();
    report.note("training consistency adapter on B (d=4, 3000 steps)");
    let (set_b, _) = train_consistency(&model_b, 4);
    let base_b = generate(&model_b, &[]);
    let f_b0 = score(&base_b, &base_b).flicker;
    let gain_t = score(&generate(&model_b, &[(&set_a, 0.1)]), &base_b).flicker - f_b0;
    let gain_r = score(&generate(&model_b, &[(&set_b, 0.1)]), &base_b).flicker - f_b0;
    report.verdict(
        "6 transferability",
        transferred && gain_t >= 0.5 * gain_r,
        format!("flicker gain on B at alpha 0.1: transferred from A {gain_t:+.5}, retrained on B {gain_r:+.5} (need >= half)"),
    );

    // supplementary checks on the same fixtures
    report.verdict(
        "aux base training",
        aux_base,
        format!("final loss_simple {last:.4} vs step-1 {first:.4} (limit 0.1x)"),
    );
    report.verdict(
        "aux adapter loss",
        late < early,
        format!("mean loss last 10% {late:.5} vs first 10% {early:.5}"),
    );
    let inverted = generate(&model_a, &[(&style, 1.0)]);
    let corr = base_a.iter().zip(&inverted).map(|(a, b)| pearson(a, b)).sum::<f64>() / GRID as f64;
    let brightness = |clips: &[VideoTensor]| {
        clips.iter().map(|v| v.data().iter().map(|&x| x as f64).sum::<f64>() / v.data().len() as f64).sum::<f64>()
            / clips.len() as f64
    };
    report.verdict(
        "aux style inversion",
        corr < 0.0,
        format!(
            "mean pixel correlation of alpha 1 vs alpha 0 clips {corr:+.3}; mean brightness {:.3} -> {:.3}",
            brightness(&base_a),
            brightness(&inverted)
        ),
    );
    let mixed = sample_many(&model_a, &grid()[..4], &[(&style, 1.0), (&set_a, 0.1)], SAMPLE_STEPS);
    let composed = matches!(&mixed, Ok(v) if v.len() == 4 && v[0].frames() == reference_cfg().frames);
    report.verdict(
        "aux composition",
        composed,
        "style at alpha 1 with consistency at alpha 0.1 emits clips".into(),
    );

    println!();
    println!("acceptance summary ({:.0}s)", report.started.unwrap().elapsed().as_secs_f64());
    let mut sorted = report.verdicts.clone();
    sorted.sort_by_key(|(id, _, _)| id.split(' ').next().and_then(|n| n.parse::<u32>().ok()).unwrap_or(99));
    for (id, pass, detail) in &sorted {
        println!("{} {id}: {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    let failed = sorted.iter().filter(|v| !v.1).count();
    println!("{} of {} checks passed", sorted.len() - failed, sorted.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
