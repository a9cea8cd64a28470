//! Command implementations behind the `ecam` binary.

pub mod config;
pub mod report;
pub mod viz;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ecam_core::checkpoint::Checkpoint;
use ecam_core::data::{load_scenes, Manifest, Scene, WindowConfig};
use ecam_synth::{generate_scene, write_scene, Layout, SceneSpec};
use ecam_train::gradcheck;
use ecam_train::metrics::{MetricSums, MetricsReport, RunsReport};
use ecam_train::pretrain::{pretrain_patch, PretrainConfig};
use ecam_train::trainer::{evaluate, mix, train_epoch, Ablation, Dataset, EpochLog, TrainConfig, TrainScene, TrainState};
use ecam_train::TrainError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use config::parse_set;

#[derive(Debug, Parser)]
#[command(name = "ecam", version, about = "Collision-aware pedestrian trajectory prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes (map, homography, trajectories, manifest).
    Synth(SynthArgs),
    /// Train a predictor; writes a JSON-lines log and per-epoch checkpoints.
    Train(TrainArgs),
    /// Best-of-K ADE/FDE and ECFL of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Render predictions over a map as SVG.
    Viz(VizArgs),
    /// Summarize training logs and evaluation reports as an ablation table.
    Report(ReportArgs),
    /// Pretrain the map-patch encoder by patch reconstruction.
    PretrainPatch(PretrainArgs),
    /// Finite-difference check of every parameter gradient on a fixture.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON scene spec; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layout: Option<Layout>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub pedestrians: Option<usize>,
    #[arg(long)]
    pub width_m: Option<f64>,
    #[arg(long)]
    pub height_m: Option<f64>,
    /// File stem of the generated scene.
    #[arg(long, default_value = "scene")]
    pub name: String,
    /// Number of scenes; scene `i` uses seed `seed + i` and is named `<name>_<i>`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON training config (flat keys); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k_samples: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Any config key, as `key=value` (value parsed as JSON when possible).
    #[arg(long = "set", value_parser = parse_set)]
    pub sets: Vec<(String, Value)>,
    /// Continue from a checkpoint written by `train`; `--epochs` may extend the run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Copy `patch.*` tensors from a `pretrain-patch` checkpoint.
    #[arg(long)]
    pub init_patch: Option<PathBuf>,
    /// Leave scenes with this label out (leave-one-out splits).
    #[arg(long)]
    pub exclude_scene: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Predict the ground truth itself as a single sample.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeat sampling with seeds `seed, seed+1, ...` and report mean ± std.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long)]
    pub per_scene: bool,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Evaluate only scenes with these labels.
    #[arg(long)]
    pub scene: Vec<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Without a checkpoint only observations and ground truth are drawn.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scene label; defaults to the first scene.
    #[arg(long)]
    pub scene: Option<String>,
    /// Number of windows, spread evenly over the scene.
    #[arg(long, default_value_t = 4)]
    pub windows: usize,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Training logs (`train_log.jsonl`) and/or evaluation reports.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Training config supplying the model shape.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_parser = parse_set)]
    pub sets: Vec<(String, Value)>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One configuration; all five when omitted.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the JSON reports here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for an error: 2 for non-finite training losses, else 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<TrainError>() {
        Some(TrainError::NonFinite { .. }) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Viz(a) => viz(&a),
        Command::Report(a) => report(&a),
        Command::PretrainPatch(a) => pretrain(&a),
        Command::Gradcheck(a) => run_gradcheck(&a),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn push<T: Serialize>(sets: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        sets.push((key.into(), serde_json::to_value(v).expect("flag serializes")));
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut sets = Vec::new();
    push(&mut sets, "layout", a.layout);
    push(&mut sets, "seed", a.seed);
    push(&mut sets, "density", a.density);
    push(&mut sets, "pedestrians", a.pedestrians);
    push(&mut sets, "width_m", a.width_m);
    push(&mut sets, "height_m", a.height_m);
    let base: SceneSpec = config::merge(a.config.as_deref(), &sets)?;
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let mut manifest = Manifest::default();
    for i in 0..a.count {
        let spec = SceneSpec {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let name = if a.count == 1 { a.name.clone() } else { format!("{}_{i}", a.name) };
        let scene = generate_scene(&spec).with_context(|| format!("generating scene {name}"))?;
        write_scene(&scene, &a.out, &name)?;
        manifest.scenes.extend(Manifest::load(&a.out.join("manifest.json"))?.scenes.into_iter().map(|mut e| {
            for p in [&mut e.trajectories, &mut e.map, &mut e.homography] {
                *p = PathBuf::from(p.file_name().expect("file name"));
            }
            e
        }));
        eprintln!("{name}: {} trajectories", scene.series.len());
    }
    manifest.save(&a.out.join("manifest.json"))?;
    Ok(())
}

fn load_train_scenes(manifest: &Path, wc: &WindowConfig, exclude: &[String]) -> Result<Vec<Scene>> {
    let m = Manifest::load(manifest)?;
    let scenes: Vec<Scene> = load_scenes(&m, wc)?
        .into_iter()
        .filter(|s| !exclude.contains(&s.label))
        .collect();
    if scenes.iter().all(|s| s.windows.is_empty()) {
        bail!("{} yields no training windows", manifest.display());
    }
    Ok(scenes)
}

#[derive(Serialize)]
struct LogLine {
    ablation: Ablation,
    seed: u64,
    #[serde(flatten)]
    log: EpochLog,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut sets = Vec::new();
    push(&mut sets, "seed", Some(a.seed));
    push(&mut sets, "ablation", a.ablation);
    push(&mut sets, "epochs", a.epochs);
    push(&mut sets, "lr", a.lr);
    push(&mut sets, "batch_size", a.batch_size);
    push(&mut sets, "k_samples", a.k_samples);
    push(&mut sets, "stride", a.stride);
    sets.extend(a.sets.iter().cloned());

    let (mut state, cfg) = match &a.resume {
        Some(path) => {
            let (state, mut cfg) = TrainState::from_checkpoint(&Checkpoint::load(path)?)?;
            if cfg.seed != a.seed {
                bail!("--seed {} does not match the checkpoint's seed {}", a.seed, cfg.seed);
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            (state, cfg)
        }
        None => {
            let cfg: TrainConfig = config::merge(a.config.as_deref(), &sets)?;
            (TrainState::init(&cfg)?, cfg)
        }
    };
    if let Some(path) = &a.init_patch {
        let src = Checkpoint::load(path)?.predictor()?;
        if state.model.patch_encoder().is_none() {
            bail!("--init-patch needs a configuration with a map encoder (not {})", cfg.ablation);
        }
        let patch = ecam_core::nn::ParamSet {
            specs: src.params.specs.iter().filter(|s| s.name.starts_with("patch.")).cloned().collect(),
            values: src.params.values.clone(),
        };
        if state.model.params.copy_matching(&patch) == 0 {
            bail!("{} has no patch tensors matching this model", path.display());
        }
    }

    let scenes = load_train_scenes(&a.manifest, &cfg.window_config(), &a.exclude_scene)?;
    let data = Dataset::new(scenes.into_iter().map(TrainScene::from).collect(), &state.model)?;
    fs::create_dir_all(a.out.join("checkpoints")).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    eprintln!("{} windows, ablation {}, {} epochs", data.len(), cfg.ablation, cfg.epochs);
    while state.epoch < cfg.epochs {
        match train_epoch(&mut state, &data, &cfg) {
            Ok(epoch_log) => {
                let line = serde_json::to_string(&LogLine {
                    ablation: cfg.ablation,
                    seed: cfg.seed,
                    log: epoch_log,
                })?;
                writeln!(log, "{line}")?;
                eprintln!(
                    "epoch {}: total {:.5} colliding {:.3}",
                    epoch_log.epoch, epoch_log.mean.total, epoch_log.mean.colliding_fraction
                );
                let ck = state.checkpoint(&cfg);
                ck.save(&a.out.join("checkpoints").join(format!("epoch_{:03}.json", state.epoch)))?;
                ck.save(&a.out.join("checkpoint.json"))?;
            }
            Err(e) => {
                if let TrainError::NonFinite { diagnostic, .. } = &e {
                    let p = a.out.join("diagnostic.json");
                    fs::write(&p, serde_json::to_string_pretty(diagnostic)? + "\n")?;
                    eprintln!("diagnostic written to {}", p.display());
                }
                return Err(e.into());
            }
        }
    }
    state.checkpoint(&cfg).save(&a.out.join("checkpoint.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<T: Serialize> {
    ablation: String,
    seed: u64,
    #[serde(flatten)]
    report: T,
}

fn oracle_report(scenes: &[Scene], per_scene: bool) -> Result<MetricsReport> {
    let sums: Vec<(String, MetricSums)> = scenes
        .iter()
        .map(|s| {
            let mut m = MetricSums::default();
            for w in &s.windows {
                m.add_pedestrian(std::slice::from_ref(&w.future), &w.future, &s.map);
            }
            (s.label.clone(), m)
        })
        .collect();
    Ok(MetricsReport::from_scenes(1, &sums, per_scene)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let ck = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let model_cfg = ck.as_ref().map(|c| c.model).unwrap_or_default();
    let wc = WindowConfig {
        t_obs: model_cfg.t_obs,
        t_pred: model_cfg.t_pred,
        stride: a.stride,
    };
    let mut scenes = load_scenes(&Manifest::load(&a.manifest)?, &wc)?;
    if !a.scene.is_empty() {
        scenes.retain(|s| a.scene.contains(&s.label));
    }
    let ablation = match &ck {
        None => "oracle".to_string(),
        Some(c) => c.config.get("ablation").and_then(Value::as_str).unwrap_or("unknown").to_string(),
    };
    let predictor = ck.as_ref().map(Checkpoint::predictor).transpose()?;
    let run = |seed: u64| -> Result<MetricsReport> {
        match &predictor {
            None => oracle_report(&scenes, a.per_scene),
            Some(p) => {
                let views: Vec<_> = scenes.iter().map(|s| (s.label.clone(), &s.map, &s.windows[..])).collect();
                Ok(evaluate(p, &views, a.k, seed, a.per_scene)?)
            }
        }
    };
    let text = if a.runs == 1 {
        serde_json::to_string_pretty(&EvalOutput {
            ablation,
            seed: a.seed,
            report: run(a.seed)?,
        })?
    } else {
        let per_run = (0..a.runs as u64).map(|r| run(a.seed + r)).collect::<Result<Vec<_>>>()?;
        serde_json::to_string_pretty(&EvalOutput {
            ablation,
            seed: a.seed,
            report: RunsReport::new(per_run)?,
        })?
    };
    write_or_print(a.out.as_deref(), &(text + "\n"))
}

pub fn viz(a: &VizArgs) -> Result<()> {
    let predictor = a.checkpoint.as_deref().map(|p| Checkpoint::load(p)?.predictor()).transpose()?;
    let model_cfg = predictor.as_ref().map(|p| p.cfg).unwrap_or_default();
    let wc = WindowConfig {
        t_obs: model_cfg.t_obs,
        t_pred: model_cfg.t_pred,
        stride: a.stride,
    };
    let manifest = Manifest::load(&a.manifest)?;
    let entry = match &a.scene {
        None => manifest.scenes.first().context("manifest lists no scenes")?,
        Some(l) => manifest
            .scenes
            .iter()
            .find(|e| &e.scene_label() == l)
            .with_context(|| format!("no scene labelled {l:?}"))?,
    };
    let si = manifest.scenes.iter().position(|e| std::ptr::eq(e, entry)).unwrap_or(0);
    let scene = Scene::load(entry, &wc)?;
    let n = scene.windows.len();
    let picks: Vec<usize> = if a.windows >= n {
        (0..n).collect()
    } else {
        (0..a.windows).map(|i| i * n / a.windows).collect()
    };
    let overlays = picks
        .into_iter()
        .map(|wi| {
            let window = scene.windows[wi].clone();
            let samples = match &predictor {
                Some(p) if a.k > 0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(a.seed, si as u64), wi as u64));
                    p.predict(&window, Some(&scene.map), a.k, &mut rng)?
                }
                _ => Vec::new(),
            };
            Ok(viz::Overlay { window, samples })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::write(&a.out, viz::render(&scene.map, &overlays)).with_context(|| format!("writing {}", a.out.display()))
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut table = report::Table::default();
    for f in &a.files {
        table.add_file(f)?;
    }
    write_or_print(a.out.as_deref(), &table.render())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut sets = vec![("seed".to_string(), Value::from(a.seed))];
    sets.extend(a.sets.iter().cloned());
    let cfg: TrainConfig = config::merge(a.config.as_deref(), &sets)?;
    if !cfg.ablation.use_map() {
        bail!("ablation {} has no map encoder to pretrain", cfg.ablation);
    }
    let defaults = PretrainConfig::default();
    let pcfg = PretrainConfig {
        steps: a.steps.unwrap_or(defaults.steps),
        lr: a.lr.unwrap_or(defaults.lr),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        seed: mix(a.seed, 0x3000),
        ..defaults
    };
    let scenes = load_scenes(&Manifest::load(&a.manifest)?, &cfg.window_config())?;
    let maps: Vec<_> = scenes.iter().map(|s| &s.map).collect();
    let mut model = TrainState::init(&cfg)?.model;
    let rep = pretrain_patch(&mut model, &maps, &pcfg)?;
    let mut ck = Checkpoint::new(&model);
    ck.config = serde_json::to_value(cfg)?;
    ck.state = serde_json::to_value(rep)?;
    ck.save(&a.out)?;
    println!("{}", serde_json::to_string(&rep)?);
    Ok(())
}

pub fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let ablations: Vec<Ablation> = a.ablation.map_or_else(|| Ablation::ALL.to_vec(), |x| vec![x]);
    let mut reports = Vec::new();
    for ab in ablations {
        let r = gradcheck::run_fixture(ab, a.seed)?;
        println!(
            "{} {:<13} params {:>6}  max rel error {:.3e} ({})  non-argmin zero {}  colliding {} nonzero {}",
            if r.passed { "PASS" } else { "FAIL" },
            ab.row_label(),
            r.n_params,
            r.max_rel_error,
            r.worst_param,
            r.non_argmin_zero,
            r.colliding_samples,
            r.colliding_grad_nonzero
        );
        reports.push(r);
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    if reports.iter().any(|r| !r.passed) {
        bail!("gradient check failed");
    }
    Ok(())
}
