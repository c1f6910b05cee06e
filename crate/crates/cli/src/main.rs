use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dofnerf::dataset::{
    apply_forward_dof, generate, load_dataset, render_layers, save_dataset, AnalyticScene, RecoveryPattern,
    SceneDataset, SyntheticSource,
};
use dofnerf::imageio::{read_binary, read_png, write_binary, write_png};
use dofnerf::metrics::{psnr, ssim};
use dofnerf::optics::ApertureShape;
use dofnerf::raster::Image;
use dofnerf::render::render_view;
use dofnerf::scatter::ScatterSettings;
use dofnerf::trainer::{load_checkpoint, run, RunOptions, TrainConfig, TrainState};

const CHECKPOINT: &str = "checkpoint.bin";
const LOG: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "dofnerf", version, about = "Radiance fields with learnable depth of field")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DOF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec.
    GenSynth(GenSynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Render views with virtual optics.
    Render(RenderArgs),
    /// Score all-in-focus renders of the test views.
    Eval(EvalArgs),
    /// Print the learned per-view aperture and focus.
    InspectParams(InspectArgs),
}

#[derive(clap::Args)]
struct GenSynthArgs {
    /// Scene spec (TOML); the built-in recovery scene when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// alternating_focus or alternating_aperture.
    #[arg(long)]
    pattern: Option<RecoveryPattern>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the smaller single-core preset instead of the defaults.
    #[arg(long)]
    compact: bool,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    pretrain: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    anchor: Option<usize>,
    #[arg(long)]
    guard: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rmax: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Stop after this many total steps; resume later with --resume.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(clap::Args)]
struct RenderArgs {
    /// Trained model to render.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    checkpoint: Option<PathBuf>,
    /// Render the analytic scene of a scene spec instead of a model.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Dataset whose cameras are rendered.
    #[arg(long)]
    dataset: PathBuf,
    /// Only these views (default: all).
    #[arg(long = "view")]
    views: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    aperture: f64,
    /// Focus distance; required when the aperture is nonzero.
    #[arg(long)]
    focus: Option<f64>,
    /// Polygonal aperture with this many blades (default: circular).
    #[arg(long)]
    blades: Option<u32>,
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
    #[arg(long, default_value_t = 12.0)]
    rmax: f64,
    /// Samples per ray (default: the checkpoint's training value).
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory; receives <view>.png and <view>.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, conflicts_with = "renders", required_unless_present = "renders")]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed renders named <view>.bin or <view>.png.
    #[arg(long)]
    renders: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(clap::Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write a bar chart of the parameters to this PNG.
    #[arg(long)]
    plot: Option<PathBuf>,
}

/// Bad command-line usage detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<dofnerf::Error>() {
        Some(dofnerf::Error::Divergence { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start the worker pool")?;
    }
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::InspectParams(a) => inspect(a),
    }
}

fn read_source(path: &Path) -> Result<SyntheticSource> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(SyntheticSource::from_toml(&text, path)?)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut source = match &a.spec {
        Some(path) => read_source(path)?,
        None => SyntheticSource::default(),
    };
    if let Some(seed) = a.seed {
        source.seed = seed;
    }
    if let Some(pattern) = a.pattern {
        source.recovery.pattern = pattern;
    }
    let dataset = generate(&source)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    save_dataset(&dataset, &a.out)?;
    let r = &source.recovery;
    println!(
        "wrote {} views ({} train, {} test) to {}",
        dataset.views.len(),
        dataset.train_indices().len(),
        dataset.test_indices().len(),
        a.out.display()
    );
    println!(
        "pattern {:?}: K* = {}, F near = {}, F far = {}",
        r.pattern, r.aperture, r.focus_near, r.focus_far
    );
    for v in &dataset.views {
        if let Some(o) = v.optics {
            println!("  {}\tK = {}\tF = {}", v.name, o.aperture, o.focus);
        }
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            toml::from_str(&text).map_err(|e| dofnerf::Error::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None if a.compact => TrainConfig::compact(),
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {$(
            if let Some(v) = a.$flag {
                c.$($field).+ = v;
            }
        )*};
    }
    set!(iters => iters, pretrain => pretrain, patch => patch.patch, anchor => patch.anchor,
        guard => patch.guard, gamma => gamma, rmax => max_radius, seed => seed, lr => lr,
        samples => samples, batch => batch_size, log_every => log_every);
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let ckpt = a.out.join(CHECKPOINT);
    let log_path = a.out.join(LOG);
    let mut state = if a.resume {
        let state = load_checkpoint(&ckpt)?;
        if state.optics.views.len() != dataset.views.len() {
            return Err(dofnerf::Error::Validation(format!(
                "checkpoint has {} views, dataset has {}",
                state.optics.views.len(),
                dataset.views.len()
            ))
            .into());
        }
        state
    } else {
        TrainState::new(&dataset, &train_config(&a)?)?
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&log_path)
        .with_context(|| format!("cannot open {}", log_path.display()))?;
    let start = state.step;
    let report = run(
        &dataset,
        &mut state,
        RunOptions {
            log: Some(&mut log),
            checkpoint: Some(ckpt.clone()),
            stop_at: a.stop_at,
        },
    )?;
    if state.step == start {
        dofnerf::trainer::save_checkpoint(&state, &ckpt)?;
    }
    let [s1, s2] = report.stage_seconds;
    println!(
        "trained steps {}..{} ({:.1} s pinhole, {:.1} s defocus); checkpoint {}",
        start,
        state.step,
        s1,
        s2,
        ckpt.display()
    );
    Ok(())
}

fn selected_views(dataset: &SceneDataset, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..dataset.views.len()).collect());
    }
    names
        .iter()
        .map(|n| {
            dataset
                .views
                .iter()
                .position(|v| &v.name == n)
                .ok_or_else(|| usage(format!("no view named '{n}'")))
        })
        .collect()
}

fn write_pair(image: &Image, dir: &Path, name: &str) -> Result<()> {
    write_binary(image, &dir.join(format!("{name}.bin")))?;
    write_png(image, &dir.join(format!("{name}.png")))?;
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let views = selected_views(&dataset, &a.views)?;
    let shape = match a.blades {
        Some(n) => ApertureShape::polygonal(n, a.rotation)?,
        None => ApertureShape::Circular,
    };
    let focus = match a.focus {
        Some(f) => f,
        None if a.aperture == 0.0 => 1.0,
        None => return Err(usage("--focus is required with a nonzero --aperture")),
    };
    let settings = ScatterSettings {
        aperture: a.aperture,
        focus,
        shape,
        gamma: a.gamma,
        max_radius: a.rmax,
    };
    settings.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    match (&a.checkpoint, &a.scene) {
        (Some(path), _) => {
            let state = load_checkpoint(path)?;
            let samples = a.samples.unwrap_or(state.config.samples);
            for i in views {
                let v = &dataset.views[i];
                let image = render_view(&state.params, &v.camera, samples, Some(&settings))?;
                write_pair(&image, &a.out, &v.name)?;
            }
        }
        (None, Some(path)) => {
            let scene: AnalyticScene = read_source(path)?.scene;
            let guard = settings.reach();
            for i in views {
                let v = &dataset.views[i];
                let canvas = render_layers(&scene, &v.camera, guard)?;
                let image = if settings.aperture > 0.0 {
                    apply_forward_dof(&canvas.image, &canvas.depth, guard, &settings)?
                } else {
                    canvas.image.crop(guard, guard, v.camera.width, v.camera.height)
                };
                write_pair(&image, &a.out, &v.name)?;
            }
        }
        (None, None) => unreachable!("clap requires one of --checkpoint and --scene"),
    }
    println!("rendered to {}", a.out.display());
    Ok(())
}

fn read_render(dir: &Path, name: &str) -> Result<Image> {
    let bin = dir.join(format!("{name}.bin"));
    if bin.exists() {
        Ok(read_binary(&bin)?)
    } else {
        Ok(read_png(&dir.join(format!("{name}.png")))?)
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let tests = dataset.test_indices();
    if tests.is_empty() {
        return Err(dofnerf::Error::Validation("dataset has no test views".into()).into());
    }
    let state = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    println!("view\tpsnr\tssim");
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for &i in &tests {
        let v = &dataset.views[i];
        let truth = v.all_in_focus.as_ref().unwrap_or(&v.image);
        let image = match (&state, &a.renders) {
            (Some(s), _) => render_view(&s.params, &v.camera, a.samples.unwrap_or(s.config.samples), None)?,
            (None, Some(dir)) => read_render(dir, &v.name)?,
            (None, None) => unreachable!("clap requires one of --checkpoint and --renders"),
        };
        let (p, s) = (psnr(&image, truth, 1.0)?, ssim(&image, truth)?);
        sum_p += p;
        sum_s += s;
        println!("{}\t{}\t{:.6}", v.name, fmt_db(p), s);
    }
    let n = tests.len() as f64;
    println!("mean\t{}\t{:.6}", fmt_db(sum_p / n), sum_s / n);
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let optics = &state.optics;
    println!("view\tstatus\taperture\tfocus_param\tfocus");
    for (i, v) in optics.views.iter().enumerate() {
        let status = if v.trainable { "train" } else { "frozen" };
        println!(
            "{i}\t{status}\t{:.6}\t{:.6}\t{:.6}",
            v.aperture,
            v.focus,
            optics.focus_distance(i)
        );
    }
    if let Some(path) = &a.plot {
        write_png(&plot(optics), path)?;
    }
    Ok(())
}

/// Two bars per view: aperture (red, scaled to the largest) and focus
/// (blue, as a fraction of the depth range). Frozen views are dimmed.
fn plot(optics: &dofnerf::trainer::PerViewOptics) -> Image {
    const BAR: usize = 6;
    const HEIGHT: usize = 96;
    let n = optics.views.len();
    let k_max = optics.views.iter().map(|v| v.aperture).fold(1e-12, f64::max);
    let mut image = Image::filled(n * 3 * BAR + BAR, HEIGHT, [1.0; 3]);
    for (i, v) in optics.views.iter().enumerate() {
        let shade = if v.trainable { 1.0 } else { 0.45 };
        let bars = [(v.aperture / k_max, [shade, 0.0, 0.0]), (v.focus, [0.0, 0.0, shade])];
        for (j, (value, color)) in bars.into_iter().enumerate() {
            let x0 = BAR + i * 3 * BAR + j * BAR;
            let top = HEIGHT - (value.clamp(0.0, 1.0) * (HEIGHT - 1) as f64).round() as usize;
            for y in top..HEIGHT {
                for x in x0..x0 + BAR {
                    image.set(x, y, color);
                }
            }
        }
    }
    image
}
