use std::fs;
use std::path::{Path, PathBuf};

use ufo_core::adapter::{deserialize, UFOA_MAGIC};
use ufo_core::checkpoint::{deserialize_model, load_model, save_model, UFOM_MAGIC};
use ufo_core::diffusion::{sample, sample_many, DEFAULT_SAMPLE_STEPS};
use ufo_core::metrics::{evaluate_set, EvalItem, MetricsReport};
use ufo_core::trainer::{self, StreamMode, SyntheticStream};
use ufo_core::video::{read_vclip, write_atomic, write_vclip, ClipRecord};
use ufo_core::{compose as core_compose, init_adapter_set, AdapterKind, ModelGraph, UfoAdapterSet, VideoTensor};

use crate::config::{output_path, ExperimentConfig};
use crate::CliError;

fn kind_slug(kind: AdapterKind) -> &'static str {
    match kind {
        AdapterKind::Consistency => "consistency",
        AdapterKind::Stylization => "style",
    }
}

pub fn train_base(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let mut model = ModelGraph::new(cfg.model.clone(), cfg.train.seed)?;
    let mut data = SyntheticStream::new(cfg.scene()?, cfg.conditions(), StreamMode::Moving, cfg.data.seed)?;
    let log = trainer::train_base(&mut model, &mut data, &cfg.train)?;

    let ckpt = output_path(&out.unwrap_or_else(|| cfg.paths.checkpoints.join("base.ufom")));
    save_model(&model, &ckpt)?;
    let loss = output_path(&cfg.paths.reports.join("base_loss.csv"));
    write_atomic(&loss, log.to_csv_string()?.as_bytes())?;
    if let (Some(first), Some(last)) = (log.rows.first(), log.rows.last()) {
        println!(
            "trained {} steps: loss_simple {:.5} -> {:.5}",
            log.rows.len(),
            first.loss_simple,
            last.loss_simple
        );
    }
    println!("checkpoint {}", ckpt.display());
    println!("loss log {}", loss.display());
    Ok(())
}

pub fn train_ufo(config: &Path, kind: AdapterKind, base: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    let model = load_model(base)?;
    // the checkpoint decides the geometry
    cfg.model = model.config().clone();
    let mode = match kind {
        AdapterKind::Consistency => StreamMode::Static,
        AdapterKind::Stylization => StreamMode::Styled(cfg.ufo.style),
    };
    let mut data = SyntheticStream::new(cfg.scene()?, cfg.conditions(), mode, cfg.data.seed)?;
    let mut set = init_adapter_set(&model, cfg.ufo.rank, cfg.ufo.seed, kind)?;
    let log = match kind {
        AdapterKind::Consistency => trainer::train_ufo_consistency(&model, &mut set, &mut data, &cfg.train)?,
        AdapterKind::Stylization => trainer::train_ufo_style(&model, &mut set, &mut data, &cfg.train)?,
    };

    let slug = kind_slug(kind);
    let path = output_path(&out.unwrap_or_else(|| cfg.paths.checkpoints.join(format!("ufo_{slug}.ufoa"))));
    set.save(&path)?;
    let loss = output_path(&cfg.paths.reports.join(format!("ufo_{slug}_loss.csv")));
    write_atomic(&loss, log.to_csv_string()?.as_bytes())?;
    println!(
        "adapter {} ({} parameters, base has {}), recommended alpha {}",
        path.display(),
        set.parameter_count(),
        model.parameter_count(),
        set.recommended_alpha
    );
    println!("loss log {}", loss.display());
    Ok(())
}

fn load_sets(paths: &[PathBuf]) -> Result<Vec<UfoAdapterSet>, CliError> {
    paths.iter().map(|p| Ok(UfoAdapterSet::load(p)?)).collect()
}

fn pair_alphas(sets: &[UfoAdapterSet], alphas: &[f64]) -> Result<Vec<f64>, CliError> {
    if alphas.is_empty() {
        return Ok(sets.iter().map(|s| s.recommended_alpha).collect());
    }
    if alphas.len() != sets.len() {
        return Err(CliError::Usage(format!(
            "got {} --ufo files but {} --alpha values",
            sets.len(),
            alphas.len()
        )));
    }
    Ok(alphas.to_vec())
}

pub fn generate(
    base: &Path,
    ufo: &[PathBuf],
    alpha: &[f64],
    condition: usize,
    seed: u64,
    steps: usize,
    out: &Path,
) -> Result<(), CliError> {
    if ufo.is_empty() && !alpha.is_empty() {
        return Err(CliError::Usage("--alpha given without any --ufo".into()));
    }
    let model = load_model(base)?;
    let sets = load_sets(ufo)?;
    let alphas = pair_alphas(&sets, alpha)?;
    let pairs: Vec<(&UfoAdapterSet, f64)> = sets.iter().zip(alphas.iter().copied()).collect();
    let video = sample(&model, condition, &pairs, steps, seed)?;
    let out = output_path(out);
    write_vclip(
        &out,
        &ClipRecord {
            video,
            condition: Some(condition),
            seed: Some(seed),
            alpha: (alphas.len() == 1).then(|| alphas[0]),
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

/// `.vclip` files of a directory, sorted by name.
fn list_clips(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(ufo_core::Error::from)?.path();
        if p.extension().is_some_and(|x| x == "vclip") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn load_items(paths: &[PathBuf]) -> Result<Vec<EvalItem>, CliError> {
    paths
        .iter()
        .map(|p| {
            let rec = read_vclip(p)?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut item = EvalItem::new(id, rec.video);
            item.condition = rec.condition;
            item.seed = rec.seed;
            item.alpha = rec.alpha;
            Ok(item)
        })
        .collect()
}

fn summary_line(r: &MetricsReport) -> String {
    match &r.aggregates {
        None => "0 videos".to_string(),
        Some(a) => {
            let ec = a.excluded_count.map(|n| format!(" ec {n}")).unwrap_or_default();
            format!(
                "{} videos: flicker {:.5} sc {:.5} bc {:.5} oft {:.4}{ec}",
                r.videos.len(),
                a.flicker,
                a.subject_consistency,
                a.background_consistency,
                a.oft
            )
        }
    }
}

pub fn evaluate(videos: &Path, baseline: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let paths = list_clips(videos)?;
    let items = load_items(&paths)?;
    let base_items = match baseline {
        None => None,
        Some(dir) => {
            let bpaths = list_clips(dir)?;
            let names = |ps: &[PathBuf]| ps.iter().map(|p| p.file_name().map(|n| n.to_owned())).collect::<Vec<_>>();
            if names(&bpaths) != names(&paths) {
                return Err(CliError::Usage(format!(
                    "{} and {} do not hold the same clip names",
                    videos.display(),
                    dir.display()
                )));
            }
            Some(load_items(&bpaths)?)
        }
    };
    let report = evaluate_set(&items, base_items.as_deref()).map_err(|e| match e {
        ufo_core::Error::Metric(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    let out = output_path(out);
    write_atomic(&out, report.to_csv_string()?.as_bytes())?;
    println!("{}", summary_line(&report));
    Ok(())
}

pub struct SweepArgs {
    pub base: PathBuf,
    pub ufo: PathBuf,
    pub config: Option<PathBuf>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub conditions: Vec<usize>,
    pub steps: Option<usize>,
    pub videos: Option<usize>,
    pub out: PathBuf,
}

fn alpha_slug(a: f64) -> String {
    format!("alpha_{a}")
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let model = load_model(&args.base)?;
    let set = UfoAdapterSet::load(&args.ufo)?;
    core_compose(&model, &[(&set, 0.0)])?;
    let or = |flag: &[u64], conf: &[u64]| if flag.is_empty() { conf.to_vec() } else { flag.to_vec() };
    let seeds = or(&args.seeds, &cfg.eval.seeds);
    if seeds.is_empty() {
        return Err(CliError::Usage("no seeds to sweep".into()));
    }
    let conditions: Vec<usize> = if !args.conditions.is_empty() {
        args.conditions.clone()
    } else if !cfg.data.conditions.is_empty() {
        cfg.data.conditions.clone()
    } else {
        (0..model.config().num_conditions).collect()
    };
    let steps = args
        .steps
        .or(cfg.eval.steps)
        .unwrap_or(DEFAULT_SAMPLE_STEPS.min(model.config().timesteps));
    let requested = if args.alphas.is_empty() { &cfg.eval.alphas } else { &args.alphas };
    // the untreated model is always the baseline, at the same seeds
    let mut alphas = vec![0.0];
    alphas.extend(requested.iter().copied().filter(|&a| a != 0.0));

    let mut jobs: Vec<(usize, u64)> = seeds
        .iter()
        .flat_map(|&s| conditions.iter().map(move |&c| (c, s)))
        .collect();
    if let Some(n) = args.videos.or(cfg.eval.videos) {
        jobs.truncate(n);
    }
    let out = output_path(&args.out);

    let mut baseline: Option<Vec<EvalItem>> = None;
    let mut summary = String::from("alpha,videos,flicker,sc,bc,oft,excluded_count,interframe_diff\n");
    for &a in &alphas {
        let clips = sample_many(&model, &jobs, &[(&set, a)], steps)?;
        let dir = out.join(alpha_slug(a));
        let mut items = Vec::with_capacity(clips.len());
        for (&(c, s), video) in jobs.iter().zip(clips) {
            let id = format!("c{c:02}_s{s}");
            write_vclip(
                &dir.join(format!("{id}.vclip")),
                &ClipRecord {
                    video: video.clone(),
                    condition: Some(c),
                    seed: Some(s),
                    alpha: Some(a),
                },
            )?;
            let mut item = EvalItem::new(id, video);
            item.condition = Some(c);
            item.seed = Some(s);
            item.alpha = Some(a);
            items.push(item);
        }
        let report = evaluate_set(&items, Some(baseline.as_deref().unwrap_or(&items)))?;
        write_atomic(
            &out.join(format!("{}.csv", alpha_slug(a))),
            report.to_csv_string()?.as_bytes(),
        )?;
        let diff = mean_diff(items.iter().map(|i| &i.video));
        if let Some(g) = &report.aggregates {
            summary.push_str(&format!(
                "{a},{},{:.12},{:.12},{:.12},{:.12},{},{diff:.12}\n",
                items.len(),
                g.flicker,
                g.subject_consistency,
                g.background_consistency,
                g.oft,
                g.excluded_count.unwrap_or(0),
            ));
        }
        println!("alpha {a}: {}", summary_line(&report));
        if baseline.is_none() {
            baseline = Some(items);
        }
    }
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    println!("summary {}", out.join("summary.csv").display());
    Ok(())
}

fn mean_diff<'a>(videos: impl Iterator<Item = &'a VideoTensor>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in videos {
        sum += v.mean_interframe_abs_diff();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(UFOA_MAGIC) {
        let set = deserialize(&bytes)?;
        println!("adapter set ({})", kind_slug(set.kind));
        println!("  rank {}", set.d);
        println!("  recommended alpha {}", set.recommended_alpha);
        println!("  fingerprint {}", set.fingerprint);
        println!("  parameters {}", set.parameter_count());
        for (name, e) in &set.entries {
            let (m, n, _) = e.dims();
            println!("  {name:<24} {m}x{n} beta {:.6}", e.beta);
        }
    } else if bytes.starts_with(UFOM_MAGIC) {
        let model = deserialize_model(&bytes)?;
        let c = model.config();
        println!("model checkpoint");
        println!(
            "  clips {}x{}x{}x{}, patch {}, width {}, depth {}",
            c.frames, c.height, c.width, c.channels, c.patch, c.dim, c.depth
        );
        println!("  conditions {}, T {} ({:?})", c.num_conditions, c.timesteps, c.schedule);
        println!("  fingerprint {}", model.fingerprint());
        println!("  parameters {}", model.parameter_count());
    } else if path.extension().is_some_and(|x| x == "vclip") {
        let rec = read_vclip(path)?;
        let v = &rec.video;
        println!("clip {}x{}x{}x{} at {} fps", v.frames(), v.height(), v.width(), v.channels(), v.fps());
        println!("  condition {:?} seed {:?} alpha {:?}", rec.condition, rec.seed, rec.alpha);
        println!("  mean inter-frame difference {:.6}", v.mean_interframe_abs_diff());
    } else {
        return Err(CliError::Usage(format!("{} is not a .ufoa, .ufom or .vclip file", path.display())));
    }
    Ok(())
}

pub fn compose(base: &Path, ufo: &[PathBuf], alpha: &[f64]) -> Result<(), CliError> {
    let model = load_model(base)?;
    let sets = load_sets(ufo)?;
    let alphas = pair_alphas(&sets, alpha)?;
    let pairs: Vec<(&UfoAdapterSet, f64)> = sets.iter().zip(alphas.iter().copied()).collect();
    core_compose(&model, &pairs)?;
    for (p, (s, a)) in ufo.iter().zip(&pairs) {
        println!(
            "{} ({}, rank {}, {} parameters) at alpha {a}",
            p.display(),
            kind_slug(s.kind),
            s.d,
            s.parameter_count()
        );
    }
    let extra: usize = sets.iter().map(|s| s.parameter_count()).sum();
    println!("base {} parameters, adapters {extra}", model.parameter_count());
    Ok(())
}

pub fn transfer(ufo: &Path, target: &Path, out: &Path) -> Result<(), CliError> {
    let set = UfoAdapterSet::load(ufo)?;
    let model = load_model(target)?;
    ufo_core::transfer(&set, &model, set.recommended_alpha)?;
    let out = output_path(out);
    set.save(&out)?;
    println!("{} attaches to {}; wrote {}", ufo.display(), target.display(), out.display());
    Ok(())
}
