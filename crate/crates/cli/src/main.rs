use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use semhum_core::checkpoint::CheckpointError;
use semhum_core::gradsuite::{run_suite, SuiteModule};
use semhum_core::metrics::{evaluate, noisy_label_miou, EvalOptions, MetricError};
use semhum_core::model::Model;
use semhum_core::pnm::{self, quantize, Image};
use semhum_core::renderer::{render_image, RenderSettings};
use semhum_core::scenedata::{generate_dataset, labeled_subset, load_dataset, SceneConfig, SceneError, Split, MANIFEST_FILE};
use semhum_core::trainer::{fit, TrainConfig, TrainError};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "semhum", version, about = "Semantic human field: scene generation, training, rendering and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Motionfield,
    Canonicalfield,
    Renderer,
    Losses,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic capsule-body scene to disk.
    GenScene {
        #[arg(long, default_value = "humanoid4")]
        preset: String,
        /// Number of frames carrying (noisy) label maps.
        #[arg(long)]
        labeled: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the preset's frame count.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model on a generated scene.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// Training configuration; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line to stderr every N steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        progress_every: usize,
    },
    /// Render one view of a trained model.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        pose_frame: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        samples: usize,
    },
    /// Score a trained model against a scene split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        frame_stride: usize,
        /// Surface points per bone for the cross-view check (0 skips it).
        #[arg(long, default_value_t = 400)]
        consistency_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of the analytic gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        /// Coordinates checked per tensor and loss term; all when omitted.
        #[arg(long)]
        per_tensor: Option<usize>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn validation(e: impl std::fmt::Display) -> Self {
        Self { code: 2, msg: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self { code: 1, msg: e.to_string() }
    }
}

impl From<SceneError> for Failure {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Io { ref path, .. } if !path.exists() => Self::validation(e),
            SceneError::Io { .. } => Self::runtime(e),
            _ => Self::validation(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self { code: 3, msg: e.to_string() },
            TrainError::Config(_) => Self::validation(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Self::validation(e)
    }
}

fn write_json(path: &Path, v: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).expect("json value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn gen_scene(preset: &str, labeled: usize, out: &Path, seed: Option<u64>, frames: Option<usize>) -> Result<Value, Failure> {
    let mut cfg = SceneConfig::preset(preset).ok_or_else(|| Failure::validation(format!("unknown preset `{preset}`")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = frames {
        cfg.frames = f;
    }
    if labeled > cfg.frames {
        return Err(Failure::validation(format!("--labeled {labeled} exceeds the {} frames", cfg.frames)));
    }
    let subset = labeled_subset(cfg.frames, labeled);
    let manifest = generate_dataset(&cfg, &subset, out)?;
    let data = load_dataset(&out.join(MANIFEST_FILE))?;
    let noisy = match noisy_label_miou(&data) {
        Ok(v) => Some(v),
        Err(MetricError::Empty) => None,
        Err(e) => return Err(Failure::runtime(e)),
    };
    Ok(json!({
        "manifest": out.join(MANIFEST_FILE),
        "frames": manifest.frames.len(),
        "cameras": manifest.cameras.len(),
        "labeled_frames": subset,
        "seed": manifest.seed,
        "noisy_label_miou": noisy,
    }))
}

fn train(scene: &Path, config: Option<&Path>, out: &Path, every: usize) -> Result<Value, Failure> {
    let cfg: TrainConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    let cfg = cfg.with_env_seed().map_err(Failure::validation)?;
    cfg.validate().map_err(Failure::validation)?;
    let data = load_dataset(scene)?;
    create_dir(out)?;
    write_json(&out.join("train_config.json"), &serde_json::to_value(&cfg).expect("config serializes"))?;
    let mut progress = |r: &semhum_core::losses::LossReport| {
        if every > 0 && (r.iter + 1).is_multiple_of(every) {
            eprintln!("iter {:>6}  total {:.6}  mse {:.6}  sil {:.6}  surf {:.6}  parse {:.6}", r.iter + 1, r.total, r.mse, r.silhouette, r.surface, r.parsing);
        }
    };
    let outcome = fit(&data, &cfg, out, &mut progress)?;
    let last = outcome.reports.last();
    Ok(json!({
        "checkpoint": outcome.checkpoint,
        "log": outcome.log,
        "intermediate": outcome.intermediate,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "final": last,
    }))
}

fn render(checkpoint: &Path, scene: &Path, camera: usize, frame: usize, out: &Path, samples: usize) -> Result<Value, Failure> {
    let data = load_dataset(scene)?;
    let (model, iteration) = Model::load(checkpoint)?;
    let cam = data
        .manifest
        .camera(camera)
        .ok_or_else(|| Failure::validation(format!("{}: camera {camera} not in manifest", scene.display())))?
        .camera
        .clone();
    let spec = data
        .manifest
        .frames
        .get(frame)
        .ok_or_else(|| Failure::validation(format!("{}: frame {frame} not in manifest", scene.display())))?;
    let row = (frame < model.num_frames).then_some(frame);
    let img = render_image(&model, &cam, &spec.pose, row, &RenderSettings::eval(samples), 1024).map_err(Failure::runtime)?;
    create_dir(out)?;
    let (w, h) = (img.width, img.height);
    let stem = format!("f{frame:03}_c{camera}");
    let files = [
        (format!("{stem}_rgb.ppm"), 3, img.rgb.iter().map(|&v| quantize(v)).collect::<Vec<_>>()),
        (format!("{stem}_alpha.pgm"), 1, img.alpha.iter().map(|&v| quantize(v)).collect()),
        (format!("{stem}_label.pgm"), 1, img.labels.iter().map(|&l| l as u8).collect()),
    ];
    let mut written = Vec::new();
    for (name, channels, bytes) in files {
        let path = out.join(name);
        let image = Image::new(w, h, channels, bytes).map_err(Failure::runtime)?;
        pnm::write(&path, &image).map_err(Failure::runtime)?;
        written.push(path);
    }
    Ok(json!({
        "checkpoint": checkpoint,
        "iteration": iteration,
        "camera": camera,
        "pose_frame": frame,
        "files": written,
    }))
}

#[allow(clippy::too_many_arguments)]
fn eval(checkpoint: &Path, scene: &Path, split: SplitArg, samples: usize, stride: usize, points: usize, out: Option<&Path>) -> Result<Value, Failure> {
    let data = load_dataset(scene)?;
    let (model, _) = Model::load(checkpoint)?;
    if model.config.canonical.num_classes != data.manifest.num_classes {
        return Err(Failure::validation(format!(
            "{}: model predicts {} classes, scene has {}",
            checkpoint.display(),
            model.config.canonical.num_classes,
            data.manifest.num_classes
        )));
    }
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    };
    let opts = EvalOptions {
        render: RenderSettings::eval(samples),
        frame_stride: stride,
        consistency_points: points,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &data, split, &opts).map_err(Failure::runtime)?;
    let v = serde_json::to_value(&report).expect("report serializes");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("eval.json"), &v)?;
    }
    Ok(v)
}

fn gradcheck(module: ModuleArg, per_tensor: Option<usize>) -> Result<(Value, bool), Failure> {
    let module = match module {
        ModuleArg::All => SuiteModule::All,
        ModuleArg::Motionfield => SuiteModule::Motionfield,
        ModuleArg::Canonicalfield => SuiteModule::Canonicalfield,
        ModuleArg::Renderer => SuiteModule::Renderer,
        ModuleArg::Losses => SuiteModule::Losses,
    };
    let start = std::time::Instant::now();
    let report = run_suite(module, per_tensor.unwrap_or(usize::MAX)).map_err(Failure::runtime)?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["seconds"] = json!(start.elapsed().as_secs_f64());
    Ok((v, report.passed))
}

fn run(cli: Cli) -> Result<(Value, bool), Failure> {
    let ok = |v| (v, true);
    match cli.command {
        Command::GenScene { preset, labeled, out, seed, frames } => gen_scene(&preset, labeled, &out, seed, frames).map(ok),
        Command::Train {
            scene,
            config,
            out,
            progress_every,
        } => train(&scene, config.as_deref(), &out, progress_every).map(ok),
        Command::Render {
            checkpoint,
            scene,
            camera,
            pose_frame,
            out,
            samples,
        } => render(&checkpoint, &scene, camera, pose_frame, &out, samples).map(ok),
        Command::Eval {
            checkpoint,
            scene,
            split,
            samples,
            frame_stride,
            consistency_points,
            out,
        } => eval(&checkpoint, &scene, split, samples, frame_stride, consistency_points, out.as_deref()).map(ok),
        Command::Gradcheck { module, per_tensor } => gradcheck(module, per_tensor),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((v, passed)) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.msg);
            println!("{}", serde_json::to_string_pretty(&json!({ "error": f.msg, "exit_code": f.code })).expect("json value serializes"));
            ExitCode::from(f.code)
        }
    }
}
