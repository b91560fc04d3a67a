use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use exvideo::checkpoint::{self, diff, load, load_model, surgery_on_checkpoint, DiffReport};
use exvideo::dataeval::{
    eval_report, gen_video, motion_energy, to_model_range, to_pixel_range, write_frames, FramesFormat, MovingShapes,
    SceneFormat, SceneSpec,
};
use exvideo::diffusion::{sample, NoiseSchedule};
use exvideo::surgery::{verify_identity, ExtensionPlan, IdentitySample};
use exvideo::tensor::Tensor;
use exvideo::trainer::{resume_from, train_loop, TrainConfig, TrainScope, TrainState, DEFAULT_PRETRAIN_LR};
use exvideo::{ModelConfig, VideoModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Model file written by `build`, `pretrain` and `posttune` inside `--out`.
pub const MODEL_FILE: &str = "model.exvc";

#[derive(Debug, Parser)]
#[command(name = "exvideo", version, about = "Extend the frame capacity of a video diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize a base model and write it to <OUT>/model.exvc
    Build(BuildArgs),
    /// Train a model on moving-shape clips at its own frame capacity
    Pretrain(TrainArgs),
    /// Extend a checkpoint's temporal blocks to --t-ext frames
    Surgery(SurgeryArgs),
    /// Tune only the temporal blocks of an extended model
    Posttune(TrainArgs),
    /// Generate one video conditioned on a held-out first frame
    Sample(SampleArgs),
    /// Sample held-out scenes and write an evaluation report
    Eval(EvalArgs),
    /// Print the configuration and tensors of a checkpoint
    Inspect(InspectArgs),
    /// Check that an extended model matches its base at base length
    VerifyIdentity(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Initialization seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Frame capacity of the base model
    #[arg(long, default_value_t = 8)]
    pub t_base: usize,
    /// Channels per UNet level, comma separated
    #[arg(long, value_delimiter = ',', default_value = "32,64")]
    pub channels: Vec<usize>,
    /// Frame height in pixels
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    /// Frame width in pixels
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// GroupNorm group count
    #[arg(long, default_value_t = 8)]
    pub norm_groups: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Seed for data order, timesteps and noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint to train
    #[arg(long, required_unless_present = "resume")]
    pub model: Option<PathBuf>,
    /// Raw training checkpoint to resume from instead of --model
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Learning rate [default: 1e-5; 1e-3 for pretrain]
    #[arg(long)]
    pub lr: Option<f32>,
    /// Clips per step
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Total optimization steps [default: 500; 1000 for pretrain]
    #[arg(long)]
    pub steps: Option<u64>,
    /// EMA decay of the shadow weights
    #[arg(long, default_value_t = 0.999)]
    pub ema_decay: f64,
    /// Recompute activations per UNet level during backward
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub grad_checkpoint: bool,
    /// Store frozen parameters as f16
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub mixed_precision: bool,
    /// Steps between checkpoints
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: u64,
}

#[derive(Debug, Args)]
pub struct SurgeryArgs {
    /// Base checkpoint
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Extended checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Frame capacity the base checkpoint must have
    #[arg(long, default_value_t = 8)]
    pub t_base: usize,
    /// Frame capacity after extension
    #[arg(long, default_value_t = 40)]
    pub t_ext: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Seed for the conditioning scene and the initial noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    /// Sampler steps
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    /// Frame image format
    #[arg(long, default_value = "pgm", value_name = "pgm|ppm")]
    pub frames_format: FramesFormat,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Seed for held-out scenes and sampler noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    /// Sampler steps
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    /// Number of held-out clips
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    /// Also write the frames of every clip
    #[arg(long, value_name = "pgm|ppm")]
    pub frames_format: Option<FramesFormat>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to inspect
    pub path: PathBuf,
    /// Second checkpoint to diff against
    #[arg(long)]
    pub against: Option<PathBuf>,
    /// Also write the listing as JSON into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Seed of the probe inputs
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Base checkpoint
    #[arg(long)]
    pub base: PathBuf,
    /// Extended checkpoint
    #[arg(long)]
    pub extended: PathBuf,
    /// Probe batch size
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Also compare full sampling trajectories with this many steps (0 skips)
    #[arg(long, default_value_t = 0)]
    pub sampler_steps: usize,
    /// Also write the result as JSON into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Build(a) => build(a),
        Command::Pretrain(a) => train(a, Stage::Pretrain),
        Command::Surgery(a) => surgery(a),
        Command::Posttune(a) => train(a, Stage::Posttune),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::VerifyIdentity(a) => verify(a),
    }
    .map(|()| ExitCode::SUCCESS)
}

/// Prints `value` as pretty JSON; a closed stdout is not an error.
fn emit(value: &impl serde::Serialize) -> Result<()> {
    emit_text(&serde_json::to_string_pretty(value)?)
}

fn emit_text(text: &str) -> Result<()> {
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_model(path: &Path) -> Result<VideoModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn build(a: BuildArgs) -> Result<()> {
    let defaults = ModelConfig::default();
    let config = ModelConfig {
        base_frames: a.t_base,
        levels: a.channels.len(),
        channels: a.channels,
        height: a.height,
        width: a.width,
        norm_groups: a.norm_groups,
        ..defaults
    };
    let model = VideoModel::build(config, a.seed)?;
    create_dir(&a.out)?;
    let path = a.out.join(MODEL_FILE);
    checkpoint::save_model(&model, &path)?;
    emit(&json!({
        "model": path,
        "params": model.num_params(),
        "frame_capacity": model.frame_capacity(),
        "config": model.config(),
    }))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Pretrain,
    Posttune,
}

fn train(a: TrainArgs, stage: Stage) -> Result<()> {
    let base = match stage {
        Stage::Pretrain => TrainConfig::pretrain(),
        Stage::Posttune => TrainConfig::default(),
    };
    let config = TrainConfig {
        lr: a.lr.unwrap_or(if stage == Stage::Pretrain { DEFAULT_PRETRAIN_LR } else { base.lr }),
        batch: a.batch,
        steps: a.steps.unwrap_or(if stage == Stage::Pretrain { 1000 } else { base.steps }),
        ema_decay: a.ema_decay,
        grad_checkpoint: a.grad_checkpoint,
        mixed_precision: a.mixed_precision,
        checkpoint_every: a.checkpoint_every,
        seed: a.seed,
        scope: base.scope,
    };
    config.validate()?;

    let (mut model, mut state) = match &a.resume {
        Some(path) => resume_from(path, &config).with_context(|| format!("resuming from {}", path.display()))?,
        None => {
            let path = a.model.as_deref().expect("clap requires --model without --resume");
            let mut model = read_model(path)?;
            match stage {
                Stage::Posttune if !model.is_extended() => {
                    bail!("{} is not an extended model; run `exvideo surgery` first", path.display())
                }
                Stage::Pretrain if model.is_extended() => {
                    bail!("{} is already extended; pretrain a base model instead", path.display())
                }
                _ => {}
            }
            let state = TrainState::new(&mut model, &config)?;
            (model, state)
        }
    };
    if config.scope == TrainScope::Temporal && !model.is_extended() {
        bail!("post-tuning needs an extended model");
    }
    let cfg = model.config();
    let frames = model.frame_capacity();
    let data = MovingShapes {
        format: SceneFormat { height: cfg.height, width: cfg.width, channels: cfg.video_channels, frames },
        seed: a.seed,
    };
    create_dir(&a.out)?;
    let mut window = Vec::new();
    train_loop(&mut model, &mut state, &data, &config, Some(&a.out), |step, loss| {
        window.push(loss);
        if window.len() == 50 || step + 1 == config.steps {
            let mean = window.iter().map(|&l| l as f64).sum::<f64>() / window.len() as f64;
            eprintln!("step {:>5}  mean loss {mean:.5}", step + 1);
            window.clear();
        }
    })?;

    // the base model is released raw: its EMA still carries the random init
    let released = match stage {
        Stage::Pretrain => model.state_dict(),
        Stage::Posttune => {
            let mut t = state.ema.apply_to(model.params())?;
            t.extend(model.buffers().iter().map(|(k, v)| (k.clone(), v.clone())));
            t
        }
    };
    let path = a.out.join(MODEL_FILE);
    checkpoint::save(&released, &path)?;
    let losses: Vec<f32> = state.loss_history.iter().map(|&(_, l)| l).collect();
    let window_mean = |w: &[f32]| w.iter().map(|&l| l as f64).sum::<f64>() / w.len().max(1) as f64;
    let k = losses.len().min(50);
    emit(&json!({
        "model": path,
        "steps": state.step,
        "first_window_loss": window_mean(&losses[..k]),
        "last_window_loss": window_mean(&losses[losses.len() - k..]),
    }))?;
    Ok(())
}

fn surgery(a: SurgeryArgs) -> Result<()> {
    let plan = ExtensionPlan::new(a.t_base, a.t_ext)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let report = surgery_on_checkpoint(&a.input, &plan, &a.out)
        .with_context(|| format!("extending {}", a.input.display()))?;
    emit(&report)?;
    Ok(())
}

fn scene_format(model: &VideoModel) -> SceneFormat {
    let c = model.config();
    SceneFormat { height: c.height, width: c.width, channels: c.video_channels, frames: model.frame_capacity() }
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let format = scene_format(&model);
    let spec = SceneSpec::held_out(format, a.seed);
    let truth = gen_video(&spec)?;
    let (c, h, w) = (format.channels, format.height, format.width);
    let first = to_model_range(&truth.narrow(0, 0, 1)?.reshape(&[1, c, h, w])?);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let raw = sample(&model, &NoiseSchedule::default(), &first, format.frames, a.steps, &mut rng)?;
    let video = to_pixel_range(&raw).reshape(&[format.frames, c, h, w])?;

    create_dir(&a.out)?;
    let mut tensors = BTreeMap::new();
    tensors.insert("video".to_string(), video.clone());
    checkpoint::save(&tensors, a.out.join("video.exvc"))?;
    let frames = write_frames(&video, a.out.join("frames"), a.frames_format)?;
    let summary = json!({
        "frames": format.frames,
        "sampler_steps": a.steps,
        "scene": spec,
        "motion_energy": motion_energy(&video)?.mean,
        "ground_truth_energy": motion_energy(&truth)?.mean,
        "nan_count": raw.data().iter().filter(|v| !v.is_finite()).count(),
        "frame_files": frames.len(),
    });
    write_json(&a.out.join("sample.json"), &summary)?;
    emit(&summary)?;
    Ok(())
}

/// Seeds of the held-out scenes and sampler noise for `clips` clips.
pub fn eval_seeds(seed: u64, clips: usize) -> (Vec<u64>, Vec<u64>) {
    let scenes = (0..clips as u64).map(|i| seed.wrapping_mul(1_000_003).wrapping_add(i)).collect();
    let noise = (0..clips as u64).map(|i| seed.wrapping_mul(7_919).wrapping_add(1_000 + i)).collect();
    (scenes, noise)
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.clips == 0 {
        bail!("--clips must be >= 1");
    }
    let model = read_model(&a.model)?;
    let format = scene_format(&model);
    let (scene_seeds, noise_seeds) = eval_seeds(a.seed, a.clips);
    let specs: Vec<SceneSpec> = scene_seeds.iter().map(|&s| SceneSpec::held_out(format, s)).collect();
    let schedule = NoiseSchedule::default();
    let report = eval_report(&model, &schedule, &specs, &noise_seeds, a.steps)?;
    create_dir(&a.out)?;
    let text = report.to_json()? + "\n";
    fs::write(a.out.join("report.json"), &text).with_context(|| "writing report.json")?;
    if let Some(format_kind) = a.frames_format {
        for (i, (spec, &seed)) in specs.iter().zip(&noise_seeds).enumerate() {
            let truth = gen_video(spec)?;
            let (c, h, w) = (format.channels, format.height, format.width);
            let first = to_model_range(&truth.narrow(0, 0, 1)?.reshape(&[1, c, h, w])?);
            let raw = sample(&model, &schedule, &first, format.frames, a.steps, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let video = to_pixel_range(&raw).reshape(&[format.frames, c, h, w])?;
            write_frames(&video, a.out.join(format!("clip_{i:02}")), format_kind)?;
        }
    }
    emit_text(text.trim_end())?;
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let tensors = load(&a.path).with_context(|| format!("loading {}", a.path.display()))?;
    let model = tensors
        .keys()
        .any(|k| k == exvideo::model::META_CONFIG)
        .then(|| {
            let mut t = tensors.clone();
            t.retain(|k, _| !k.starts_with(exvideo::trainer::TRAIN_PREFIX));
            VideoModel::from_state_dict(t)
        })
        .transpose()?;
    let trainable = model.as_ref().map(|m| m.trainable_names()).unwrap_or_default();
    let listing: Vec<_> = tensors
        .iter()
        .map(|(name, t)| {
            let class = exvideo::model::classify_name(name).ok().map(|t| if t { "temporal" } else { "spatial" });
            json!({
                "name": name,
                "dtype": format!("{:?}", t.dtype()).to_lowercase(),
                "shape": t.shape(),
                "class": class,
                "trainable": trainable.contains(name),
            })
        })
        .collect();
    let mut out = json!({
        "path": a.path,
        "tensors": tensors.len(),
        "elements": tensors.values().map(Tensor::numel).sum::<usize>(),
        "listing": listing,
    });
    if let Some(m) = &model {
        out["config"] = serde_json::to_value(m.config())?;
        out["frame_capacity"] = json!(m.frame_capacity());
        out["extended"] = json!(m.is_extended());
        out["params"] = json!(m.num_params());
    }
    if let Some(other) = &a.against {
        let theirs = load(other).with_context(|| format!("loading {}", other.display()))?;
        let report: DiffReport = diff(&tensors, &theirs);
        out["diff"] = serde_json::to_value(report)?;
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&dir.join("inspect.json"), &out)?;
    }
    emit(&out)?;
    Ok(())
}

#[derive(Debug)]
struct IdentityMismatch {
    forward: f32,
    sampling: Option<f32>,
}

impl std::fmt::Display for IdentityMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "extended model differs from base: forward max abs diff {}", self.forward)?;
        if let Some(s) = self.sampling {
            write!(f, ", sampling max abs diff {s}")?;
        }
        Ok(())
    }
}

impl std::error::Error for IdentityMismatch {}

fn verify(a: VerifyArgs) -> Result<()> {
    let base = read_model(&a.base)?;
    let extended = read_model(&a.extended)?;
    if !extended.is_extended() {
        bail!("{} carries no extension", a.extended.display());
    }
    let cfg = base.config();
    let (t, c, h, w) = (base.frame_capacity(), cfg.video_channels, cfg.height, cfg.width);
    if a.batch == 0 {
        bail!("--batch must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let probe = IdentitySample {
        video: Tensor::randn(&[a.batch, t, c, h, w], &mut rng),
        first_frame: Tensor::randn(&[a.batch, c, h, w], &mut rng),
        timestep: Tensor::new((0..a.batch).map(|i| ((a.seed as usize + 137 * i) % 1000) as f32).collect(), &[a.batch])?,
    };
    let forward = verify_identity(&base, &extended, &probe)?;
    let sampling = if a.sampler_steps > 0 {
        let schedule = NoiseSchedule::default();
        let first = probe.first_frame.narrow(0, 0, 1)?;
        let x = sample(&base, &schedule, &first, t, a.sampler_steps, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
        let prefix = extended.prefix(t)?;
        let y = sample(&prefix, &schedule, &first, t, a.sampler_steps, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
        Some(x.max_abs_diff(&y)?)
    } else {
        None
    };
    let result = json!({ "frames": t, "forward_max_abs_diff": forward, "sampling_max_abs_diff": sampling });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&dir.join("identity.json"), &result)?;
    }
    emit_text(&format!("{forward:?}"))?;
    if let Some(s) = sampling {
        emit_text(&format!("sampling {s:?}"))?;
    }
    if forward != 0.0 || sampling.is_some_and(|s| s != 0.0) {
        return Err(IdentityMismatch { forward, sampling }.into());
    }
    Ok(())
}
