//! Two-stage joint optimization: pinhole pretraining of the field, then
//! concentrate-and-scatter training of the field together with every
//! training view's aperture and focus.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::dataset::{SceneDataset, Split};
use crate::error::{Error, Result};
use crate::field::{init_params, FieldArch, RadianceFieldParams};
use crate::optics::ApertureShape;
use crate::raster::{Image, Rgb};
use crate::render::{backward_chunk, eval_chunk, mix_seed, Jitter, CHUNK_RAYS};
use crate::sampling::{patch_batch, random_ray_batch, PatchBatch, PatchSpec};
use crate::scatter::{scatter_backward, scatter_forward, ConcentratedPatch, ScatterSettings};
use crate::volume::{composite_pinhole, concentrate, Ray};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: FieldArch,
    /// Total steps, pretraining included.
    pub iters: usize,
    /// Pinhole steps before defocus training starts.
    pub pretrain: usize,
    /// Rays per pinhole step.
    pub batch_size: usize,
    /// Samples per ray.
    pub samples: usize,
    pub lr: f64,
    /// Learning rate of the per-view apertures; `lr` when unset.
    pub optics_lr: Option<f64>,
    /// Learning rate of the per-view normalized focus; `optics_lr` when unset.
    pub focus_lr: Option<f64>,
    /// The learning rate decays by 10x over this many steps; `iters` when unset.
    pub decay_steps: Option<usize>,
    pub adam: AdamConfig,
    pub patch: PatchSpec,
    pub gamma: f64,
    pub max_radius: f64,
    pub shape: ApertureShape,
    pub seed: u64,
    pub init_aperture: f64,
    /// Initial focus as a fraction of `[near, far]`.
    pub init_focus: f64,
    /// Jitter sample depths within their strata during training.
    pub jitter: bool,
    pub log_every: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: FieldArch::default(),
            iters: 5000,
            pretrain: 2000,
            batch_size: 1024,
            samples: 64,
            lr: 5e-4,
            optics_lr: None,
            focus_lr: None,
            decay_steps: None,
            adam: AdamConfig::default(),
            patch: PatchSpec {
                patch: 32,
                anchor: 8,
                guard: 12,
            },
            gamma: 2.2,
            max_radius: 12.0,
            shape: ApertureShape::Circular,
            seed: 0,
            init_aperture: 0.5,
            init_focus: 0.5,
            jitter: true,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// A smaller field, fewer samples and smaller patches for single-core
    /// runs on the 64x64 recovery scene. Optics use a larger step so they
    /// can travel their full range within the stage-2 budget.
    pub fn compact() -> Self {
        TrainConfig {
            arch: FieldArch {
                hidden_layers: 3,
                hidden_width: 32,
                pos_freqs: 6,
                dir_freqs: 2,
            },
            batch_size: 256,
            samples: 24,
            lr: 1e-2,
            optics_lr: Some(0.3),
            focus_lr: Some(0.05),
            patch: PatchSpec {
                patch: 12,
                anchor: 4,
                guard: 5,
            },
            max_radius: 5.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.patch.validate()?;
        self.adam.validate()?;
        if self.pretrain > self.iters {
            return Err(Error::Config(format!(
                "pretrain ({}) must not exceed iters ({})",
                self.pretrain, self.iters
            )));
        }
        if self.batch_size == 0 || self.samples < 2 || self.log_every == 0 {
            return Err(Error::Config(
                "batch size, log interval must be >= 1 and samples >= 2".into(),
            ));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let optional = |v: Option<f64>| v.is_none_or(|v| v >= 0.0 && v.is_finite());
        if !positive(self.lr) || !optional(self.optics_lr) || !optional(self.focus_lr) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if self.decay_steps == Some(0) {
            return Err(Error::Config("decay_steps must be >= 1".into()));
        }
        if !positive(self.gamma) || !positive(self.max_radius) {
            return Err(Error::Config("gamma and max_radius must be positive".into()));
        }
        if (self.patch.guard as f64) < self.max_radius.ceil() {
            return Err(Error::Config(format!(
                "guard ({}) must be at least ceil(max_radius) = {}",
                self.patch.guard,
                self.max_radius.ceil()
            )));
        }
        if !(self.init_aperture >= 0.0) || !(0.0..=1.0).contains(&self.init_focus) {
            return Err(Error::Config(
                "initial aperture must be >= 0 and initial focus in [0, 1]".into(),
            ));
        }
        self.shape.validate()
    }

    /// Base learning rate decayed to a tenth every `decay_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay(step)
    }

    pub fn optics_lr_at(&self, step: usize) -> f64 {
        self.optics_lr.unwrap_or(self.lr) * self.decay(step)
    }

    pub fn focus_lr_at(&self, step: usize) -> f64 {
        self.focus_lr.or(self.optics_lr).unwrap_or(self.lr) * self.decay(step)
    }

    fn decay(&self, step: usize) -> f64 {
        let horizon = self.decay_steps.unwrap_or(self.iters).max(1) as f64;
        0.1f64.powf(step as f64 / horizon)
    }
}

/// Mean squared error over all channels and its cotangent `2 (a - b) / N`.
pub fn mse_loss(rendered: &[Rgb], target: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    if rendered.len() != target.len() {
        return Err(Error::shape(target.len(), rendered.len()));
    }
    let n = (rendered.len() * 3) as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(a, b)| {
            std::array::from_fn(|k| {
                let d = a[k] - b[k];
                loss += d * d;
                2.0 * d / n
            })
        })
        .collect();
    Ok((loss / n, grad))
}

/// Aperture and focus of one view. The focus is stored as a fraction of the
/// scene's `[near, far]` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewOptics {
    pub aperture: f64,
    pub focus: f64,
    pub trainable: bool,
    pub aperture_adam: Adam,
    pub focus_adam: Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerViewOptics {
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewOptics>,
}

impl PerViewOptics {
    /// Training views are trainable, test views frozen.
    pub fn new(dataset: &SceneDataset, config: &TrainConfig) -> Self {
        let (near, far) = dataset.depth_range();
        PerViewOptics {
            near,
            far,
            views: dataset
                .views
                .iter()
                .map(|v| ViewOptics {
                    aperture: config.init_aperture,
                    focus: config.init_focus,
                    trainable: v.split == Split::Train,
                    aperture_adam: Adam::new(config.adam, 1),
                    focus_adam: Adam::new(config.adam, 1),
                })
                .collect(),
        }
    }

    /// Focus distance of view `i` in scene units.
    pub fn focus_distance(&self, i: usize) -> f64 {
        self.near + self.views[i].focus * (self.far - self.near)
    }

    pub fn scatter_settings(&self, i: usize, config: &TrainConfig) -> ScatterSettings {
        ScatterSettings {
            aperture: self.views[i].aperture,
            focus: self.focus_distance(i),
            shape: config.shape,
            gamma: config.gamma,
            max_radius: config.max_radius,
        }
    }

    /// Keeps every aperture non-negative and every focus within `[near, far]`.
    pub fn clamp(&mut self) {
        for v in &mut self.views {
            v.aperture = v.aperture.max(0.0);
            v.focus = v.focus.clamp(0.0, 1.0);
        }
    }
}

/// Everything a run needs to continue: the checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: RadianceFieldParams,
    pub adam: Adam,
    pub optics: PerViewOptics,
    /// Steps completed.
    pub step: usize,
}

impl TrainState {
    pub fn new(dataset: &SceneDataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if dataset.train_indices().is_empty() {
            return Err(Error::Validation("dataset has no training views".into()));
        }
        let params = init_params(&config.arch, mix_seed(config.seed, 0x1417))?;
        Ok(TrainState {
            adam: Adam::new(config.adam, params.len()),
            optics: PerViewOptics::new(dataset, config),
            params,
            config: config.clone(),
            step: 0,
        })
    }

    pub fn stage(&self) -> Stage {
        if self.step < self.config.pretrain {
            Stage::Pinhole
        } else {
            Stage::Defocus
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pinhole,
    Defocus,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pinhole => "pinhole",
            Stage::Defocus => "defocus",
        }
    }
}

fn batch_seed(config: &TrainConfig, step: usize) -> u64 {
    mix_seed(config.seed, step as u64)
}

/// Stage 2 shares one draw across the patch: independent per-ray noise
/// would let the scatter lower the loss by averaging neighbours.
fn jitter(config: &TrainConfig, step: usize) -> Option<Jitter> {
    config.jitter.then(|| Jitter {
        seed: mix_seed(batch_seed(config, step), 0x6a),
        shared: step >= config.pretrain,
    })
}

/// Sums per-chunk gradient buffers in chunk order.
fn reduce(parts: Vec<(f64, Vec<f64>)>, len: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grads = vec![0.0; len];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grads)
}

/// Pinhole loss over `rays` and its gradient with respect to the field.
pub fn pinhole_objective(
    params: &RadianceFieldParams,
    rays: &[Ray],
    targets: &[Rgb],
    n_samples: usize,
    jitter: Option<Jitter>,
) -> Result<(f64, Vec<f64>)> {
    if rays.len() != targets.len() {
        return Err(Error::shape(rays.len(), targets.len()));
    }
    let n = (rays.len() * 3) as f64;
    let parts = rays
        .par_chunks(CHUNK_RAYS)
        .zip(targets.par_chunks(CHUNK_RAYS))
        .enumerate()
        .map(|(c, (chunk, target))| {
            let eval = eval_chunk(params, chunk, c * CHUNK_RAYS, n_samples, jitter)?;
            let mut sq = 0.0;
            let cot: Vec<(Rgb, f64)> = eval
                .samples
                .iter()
                .zip(target)
                .map(|(s, t)| {
                    let c = composite_pinhole(s);
                    let d: Rgb = std::array::from_fn(|k| c[k] - t[k]);
                    sq += d.iter().map(|v| v * v).sum::<f64>();
                    (d.map(|v| 2.0 * v / n), 0.0)
                })
                .collect();
            let mut grads = vec![0.0; params.len()];
            backward_chunk(params, &eval, &cot, false, &mut grads)?;
            Ok((sq, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sq, grads) = reduce(parts, params.len());
    Ok((sq / n, grads))
}

/// Result of [`defocus_objective`].
#[derive(Debug, Clone)]
pub struct DefocusGrad {
    pub loss: f64,
    pub image: Image,
    pub params: Vec<f64>,
    pub aperture: f64,
    /// With respect to the focus distance in scene units.
    pub focus: f64,
}

/// Concentrate-and-scatter loss on one patch and its gradient with respect
/// to the field, the aperture and the focus distance.
pub fn defocus_objective(
    params: &RadianceFieldParams,
    batch: &PatchBatch,
    settings: &ScatterSettings,
    n_samples: usize,
    jitter: Option<Jitter>,
) -> Result<DefocusGrad> {
    let side = batch.grid_side;
    let evals = batch
        .rays
        .par_chunks(CHUNK_RAYS)
        .enumerate()
        .map(|(c, chunk)| eval_chunk(params, chunk, c * CHUNK_RAYS, n_samples, jitter))
        .collect::<Result<Vec<_>>>()?;
    let pixels = evals.iter().flat_map(|e| e.samples.iter().map(concentrate)).collect();
    let patch = ConcentratedPatch::with_guard(side, side, pixels, batch.guard)?;
    let out = scatter_forward(&patch, settings)?;
    let (loss, d_pixels) = mse_loss(&out.image.data, &batch.targets)?;
    let d_image = Image::from_data(out.image.width, out.image.height, d_pixels)?;
    let g = scatter_backward(&patch, settings, &out.cache, &d_image)?;
    let parts = evals
        .par_iter()
        .enumerate()
        .map(|(c, eval)| {
            let first = c * CHUNK_RAYS;
            let cot: Vec<(Rgb, f64)> = (first..first + eval.samples.len())
                .map(|i| (g.radiance[i], g.depth[i]))
                .collect();
            let mut grads = vec![0.0; params.len()];
            backward_chunk(params, eval, &cot, true, &mut grads)?;
            Ok((0.0, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, grads) = reduce(parts, params.len());
    Ok(DefocusGrad {
        loss,
        image: out.image,
        params: grads,
        aperture: g.aperture,
        focus: g.focus,
    })
}

fn check_finite(loss: f64, grads: &[f64], step: usize, stage: Stage) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step,
            stage: stage.name(),
            loss,
        });
    }
    Ok(())
}

/// One pinhole step: random rays, field update only.
pub fn stage1_step(state: &mut TrainState, dataset: &SceneDataset) -> Result<f64> {
    let step = state.step;
    let config = &state.config;
    if step >= config.pretrain {
        return Err(Error::Config(format!(
            "step {step} is past pretraining ({})",
            config.pretrain
        )));
    }
    let batch = random_ray_batch(dataset, config.batch_size, batch_seed(config, step))?;
    let (loss, grads) = pinhole_objective(
        &state.params,
        &batch.rays,
        &batch.targets,
        config.samples,
        jitter(config, step),
    )?;
    check_finite(loss, &grads, step, Stage::Pinhole)?;
    let lr = config.lr_at(step);
    state.adam.step(&mut state.params.values, &grads, lr)?;
    state.step += 1;
    Ok(loss)
}

/// One defocus step: a guarded patch of one training view, joint update of
/// the field and that view's optics.
pub fn stage2_step(state: &mut TrainState, dataset: &SceneDataset) -> Result<f64> {
    let step = state.step;
    let config = &state.config;
    if step < config.pretrain {
        return Err(Error::Config(format!(
            "step {step} is still in pretraining ({})",
            config.pretrain
        )));
    }
    let batch = patch_batch(dataset, &config.patch, batch_seed(config, step))?;
    let view = batch.view;
    let settings = state.optics.scatter_settings(view, config);
    let g = defocus_objective(&state.params, &batch, &settings, config.samples, jitter(config, step))?;
    check_finite(g.loss, &g.params, step, Stage::Defocus)?;
    if !(g.aperture.is_finite() && g.focus.is_finite()) {
        return Err(Error::Divergence {
            step,
            stage: Stage::Defocus.name(),
            loss: g.loss,
        });
    }
    state
        .adam
        .step(&mut state.params.values, &g.params, config.lr_at(step))?;
    let span = state.optics.far - state.optics.near;
    let optics = &mut state.optics.views[view];
    if optics.trainable {
        let mut k = [optics.aperture];
        optics
            .aperture_adam
            .step(&mut k, &[g.aperture], config.optics_lr_at(step))?;
        let mut u = [optics.focus];
        optics
            .focus_adam
            .step(&mut u, &[g.focus * span], config.focus_lr_at(step))?;
        optics.aperture = k[0];
        optics.focus = u[0];
    }
    state.optics.clamp();
    state.step += 1;
    Ok(g.loss)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Steps completed.
    pub step: usize,
    pub stage: String,
    /// Mean loss since the previous row.
    pub loss: f64,
    pub lr: f64,
    pub aperture0: f64,
    pub focus0: f64,
}

pub const LOG_HEADER: &str = "step,stage,loss,lr,K0,F0";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.9e},{:.6e},{:.6},{:.6}",
            self.step, self.stage, self.loss, self.lr, self.aperture0, self.focus0
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub optics: PerViewOptics,
    /// Wall-clock seconds spent in each stage during this run.
    pub stage_seconds: [f64; 2],
    pub stage_steps: [usize; 2],
    pub checkpoint: Option<PathBuf>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// CSV log sink; the header is written when the run starts at step 0.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
    /// Stop once this many steps are complete (for interrupted runs).
    pub stop_at: Option<usize>,
}

/// Continues `state` until the configured number of steps.
pub fn run(dataset: &SceneDataset, state: &mut TrainState, mut options: RunOptions) -> Result<TrainReport> {
    state.config.validate()?;
    let io_err = |e| Error::io("training log", e);
    if state.step == 0 {
        if let Some(log) = options.log.as_mut() {
            writeln!(log, "{LOG_HEADER}").map_err(io_err)?;
        }
    }
    let end = options.stop_at.unwrap_or(state.config.iters).min(state.config.iters);
    let mut report = TrainReport {
        log: Vec::new(),
        optics: state.optics.clone(),
        stage_seconds: [0.0; 2],
        stage_steps: [0; 2],
        checkpoint: None,
    };
    let (mut interval_loss, mut interval_steps) = (0.0, 0usize);
    while state.step < end {
        let stage = state.stage();
        let step = state.step;
        let started = Instant::now();
        let loss = match stage {
            Stage::Pinhole => stage1_step(state, dataset)?,
            Stage::Defocus => stage2_step(state, dataset)?,
        };
        let slot = (stage == Stage::Defocus) as usize;
        report.stage_seconds[slot] += started.elapsed().as_secs_f64();
        report.stage_steps[slot] += 1;
        interval_loss += loss;
        interval_steps += 1;
        let done = state.step;
        if done.is_multiple_of(state.config.log_every) || done == state.config.pretrain || done == end {
            let row = LogRow {
                step: done,
                stage: stage.name().to_string(),
                loss: interval_loss / interval_steps as f64,
                lr: state.config.lr_at(step),
                aperture0: state.optics.views[0].aperture,
                focus0: state.optics.focus_distance(0),
            };
            if let Some(log) = options.log.as_mut() {
                writeln!(log, "{}", row.to_csv())
                    .and_then(|_| log.flush())
                    .map_err(io_err)?;
            }
            report.log.push(row);
            interval_loss = 0.0;
            interval_steps = 0;
        }
        if let Some(path) = &options.checkpoint {
            let every = state.config.checkpoint_every;
            if (every > 0 && done.is_multiple_of(every)) || done == end {
                save_checkpoint(state, path)?;
                report.checkpoint = Some(path.clone());
            }
        }
    }
    report.optics = state.optics.clone();
    Ok(report)
}

/// Trains from scratch with no side outputs.
pub fn train(dataset: &SceneDataset, config: &TrainConfig) -> Result<(TrainState, TrainReport)> {
    let mut state = TrainState::new(dataset, config)?;
    let report = run(dataset, &mut state, RunOptions::default())?;
    Ok((state, report))
}
