//! Optimization loop: ray batches drawn across frames and cameras, Adam
//! updates, and the schedule that holds back the parsing loss and the
//! non-rigid stage.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::bodymodel::{canonical_surface, generate_surface};
use crate::checkpoint::CheckpointError;
use crate::geometry::Vec3;
use crate::losses::{mse_loss, parsing_loss, silhouette_loss, surface_loss, total_loss, LossError, LossReport, LossTerms, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::motionfield::prepare_motion;
use crate::nn::{ModelError, ParamSet};
use crate::renderer::{generate_rays, posed_bounds, render_batch, Aabb, Ray, RenderError, RenderSettings};
use crate::scenedata::{Dataset, FrameRecord, Split};

pub const LOG_FILE: &str = "train.log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SEED_ENV: &str = "SEMHUM_SEED";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite `{term}` loss at iteration {iter}")]
    NonFinite { iter: usize, term: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub parsing_delay_iters: usize,
    pub nonrigid_enable_iter: usize,
    /// Completed steps between intermediate checkpoints; 0 keeps only the
    /// final one.
    pub eval_every: usize,
    pub samples: usize,
    /// Padding in pixels around each mask's bounding box when drawing rays.
    pub bbox_dilation: usize,
    pub surface_points_per_bone: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            rays_per_batch: 1024,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            parsing_delay_iters: 1500,
            nonrigid_enable_iter: 1000,
            eval_every: 1000,
            samples: 64,
            bbox_dilation: 16,
            surface_points_per_bone: 16,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.iterations > 0 && self.parsing_delay_iters >= self.iterations {
            return fail("parsing_delay_iters must be below iterations");
        }
        if self.rays_per_batch == 0 {
            return fail("rays_per_batch must be positive");
        }
        if self.samples < 2 {
            return fail("samples must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and nonnegative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail("eps must be positive");
        }
        if self.surface_points_per_bone == 0 {
            return fail("surface_points_per_bone must be positive");
        }
        self.weights.validate()?;
        self.model.canonical.validate()?;
        Ok(())
    }

    /// Applies `SEMHUM_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| TrainError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn adam(&self) -> Adam {
        Adam {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// One moment array per tensor, in parameter-name order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Adam {
    /// One update from the gradients accumulated on `params`; tensors
    /// without a gradient count as zero gradient.
    pub fn step(&self, state: &mut OptimizerState, params: &mut ParamSet) -> Result<()> {
        if state.m.len() != params.len() {
            return Err(TrainError::Config("optimizer state does not match the parameters".into()));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let g: Vec<f64> = tensor.grad().map_or_else(|| vec![0.0; tensor.numel()], <[f64]>::to_vec);
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            if m.len() != g.len() {
                return Err(TrainError::Config("optimizer moments do not match a tensor".into()));
            }
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub u0: usize,
    pub v0: usize,
    pub u1: usize,
    pub v1: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.u1 - self.u0 + 1) * (self.v1 - self.v0 + 1)
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        (self.u0..=self.u1).contains(&u) && (self.v0..=self.v1).contains(&v)
    }
}

/// Bounding box of `mask > 0.5`, padded by `dilation` and clipped to the
/// image; the whole image when the mask is empty.
pub fn dilated_mask_box(mask: &[f64], width: usize, height: usize, dilation: usize) -> PixelBox {
    let mut b: Option<PixelBox> = None;
    for (p, &m) in mask.iter().enumerate() {
        if m > 0.5 {
            let (u, v) = (p % width, p / width);
            b = Some(match b {
                None => PixelBox { u0: u, v0: v, u1: u, v1: v },
                Some(b) => PixelBox {
                    u0: b.u0.min(u),
                    v0: b.v0.min(v),
                    u1: b.u1.max(u),
                    v1: b.v1.max(v),
                },
            });
        }
    }
    match b {
        None => PixelBox {
            u0: 0,
            v0: 0,
            u1: width - 1,
            v1: height - 1,
        },
        Some(b) => PixelBox {
            u0: b.u0.saturating_sub(dilation),
            v0: b.v0.saturating_sub(dilation),
            u1: (b.u1 + dilation).min(width - 1),
            v1: (b.v1 + dilation).min(height - 1),
        },
    }
}

/// Rays with their supervision. Ray `r` belongs to dataset frame `frames[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    /// Index into the sampler's views.
    pub views: Vec<usize>,
    pub pixels: Vec<(usize, usize)>,
    pub frames: Vec<usize>,
    pub rays: Vec<Option<Ray>>,
    /// `[n, 3]`
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
    pub labels: Vec<usize>,
    /// Whether the ray carries a usable pseudo-label.
    pub has_label: Vec<bool>,
}

/// Training views with their sampling boxes and per-frame ray bounds.
#[derive(Clone, Debug)]
pub struct RaySampler<'a> {
    pub data: &'a Dataset,
    pub views: Vec<&'a FrameRecord>,
    pub boxes: Vec<PixelBox>,
    cumulative: Vec<usize>,
    bounds: Vec<Aabb>,
}

impl<'a> RaySampler<'a> {
    pub fn new(data: &'a Dataset, dilation: usize) -> Result<Self> {
        let views: Vec<&FrameRecord> = data.split(Split::Train).collect();
        if views.is_empty() {
            return Err(TrainError::Config("dataset has no training views".into()));
        }
        let (w, h) = (data.manifest.width, data.manifest.height);
        let boxes: Vec<PixelBox> = views.iter().map(|r| dilated_mask_box(&r.mask, w, h, dilation)).collect();
        let mut cumulative = Vec::with_capacity(boxes.len());
        let mut acc = 0;
        for b in &boxes {
            acc += b.area();
            cumulative.push(acc);
        }
        let margin = 2.0 * data.skeleton().max_radius();
        let bounds = data
            .manifest
            .frames
            .iter()
            .map(|f| posed_bounds(data.skeleton(), &f.pose, margin))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            data,
            views,
            boxes,
            cumulative,
            bounds,
        })
    }

    /// Number of (view, pixel) pairs the sampler draws from.
    pub fn population(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    /// The `k`-th (view, pixel) pair of the population.
    pub fn locate(&self, k: usize) -> (usize, usize, usize) {
        let view = self.cumulative.partition_point(|&c| c <= k);
        let start = if view == 0 { 0 } else { self.cumulative[view - 1] };
        let b = self.boxes[view];
        let off = k - start;
        let bw = b.u1 - b.u0 + 1;
        (view, b.u0 + off % bw, b.v0 + off / bw)
    }
}

/// Generator for one purpose (`stream`) of one iteration.
fn step_rng(seed: u64, iter: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (iter as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// `n` (view, pixel) pairs drawn uniformly from the union of the dilated
/// mask boxes. Deterministic in `(seed, iter)`.
pub fn sample_ray_batch(sampler: &RaySampler, n: usize, seed: u64, iter: usize) -> Result<RayBatch> {
    let mut rng = step_rng(seed, iter, 1);
    let total = sampler.population();
    let w = sampler.data.manifest.width;
    let mut batch = RayBatch {
        views: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n),
        frames: Vec::with_capacity(n),
        rays: Vec::with_capacity(n),
        rgb: Vec::with_capacity(3 * n),
        mask: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        has_label: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let (view, u, v) = sampler.locate(rng.random_range(0..total));
        let rec = sampler.views[view];
        let p = v * w + u;
        let cam = sampler.data.camera(rec.camera);
        let ray = generate_rays(cam, &[(u, v)], &sampler.bounds[rec.frame])?[0];
        batch.views.push(view);
        batch.pixels.push((u, v));
        batch.frames.push(rec.frame);
        batch.rays.push(ray);
        batch.rgb.extend_from_slice(&rec.rgb[3 * p..3 * p + 3]);
        batch.mask.push(rec.mask[p]);
        match &rec.labels {
            Some(l) => {
                batch.labels.push(l[p] as usize);
                batch.has_label.push(rec.mask[p] > 0.5);
            }
            None => {
                batch.labels.push(0);
                batch.has_label.push(false);
            }
        }
    }
    Ok(batch)
}

/// Effective loss weights at `iter`: the parsing term is held at zero
/// during the delay.
pub fn scheduled_weights(cfg: &TrainConfig, iter: usize) -> LossWeights {
    let mut w = cfg.weights;
    if iter < cfg.parsing_delay_iters {
        w.parsing = 0.0;
    }
    w
}

/// Everything a step needs besides the model and optimizer.
pub struct TrainingContext<'a> {
    pub sampler: RaySampler<'a>,
    /// Posed surface vertices of every dataset frame.
    pub surfaces: Vec<Vec<Vec3>>,
    pub canonical: Vec<Vec3>,
}

impl<'a> TrainingContext<'a> {
    pub fn new(data: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        let skel = data.skeleton();
        let n = cfg.surface_points_per_bone;
        let canonical = canonical_surface(skel, n).map_err(ModelError::from)?.positions;
        let surfaces = data
            .manifest
            .frames
            .iter()
            .map(|f| generate_surface(skel, &f.pose, n).map(|s| s.positions))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        Ok(Self {
            sampler: RaySampler::new(data, cfg.bbox_dilation)?,
            surfaces,
            canonical,
        })
    }
}

/// Renders one batch, back-propagates the scheduled objective and applies
/// one Adam update. Gradients are cleared afterwards.
pub fn train_step(model: &mut Model, state: &mut OptimizerState, ctx: &TrainingContext, cfg: &TrainConfig, iter: usize) -> Result<LossReport> {
    let batch = sample_ray_batch(&ctx.sampler, cfg.rays_per_batch, cfg.seed, iter)?;
    let data = ctx.sampler.data;
    let mut used: Vec<usize> = batch.frames.clone();
    used.sort_unstable();
    used.dedup();
    let local: Vec<usize> = batch.frames.iter().map(|f| used.binary_search(f).expect("present")).collect();
    let poses: Vec<_> = used.iter().map(|&f| data.manifest.frames[f].pose.clone()).collect();

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let motion = prepare_motion(&mut tape, &bound, model, &poses, Some(&used))?;
    let settings = RenderSettings {
        samples: cfg.samples,
        stratified: true,
        nonrigid: iter >= cfg.nonrigid_enable_iter,
    };
    let mut rng = step_rng(cfg.seed, iter, 2);
    let out = render_batch(&mut tape, &bound, model, &motion, &poses, &batch.rays, &local, &settings, &mut rng)?;

    let mut observed = Vec::new();
    let mut vertex_frames = Vec::new();
    let mut canonical = Vec::new();
    for (j, &f) in used.iter().enumerate() {
        observed.extend_from_slice(&ctx.surfaces[f]);
        vertex_frames.extend(std::iter::repeat_n(j, ctx.surfaces[f].len()));
        canonical.extend_from_slice(&ctx.canonical);
    }
    let terms = LossTerms {
        perceptual: None,
        mse: Some(mse_loss(&mut tape, out.color, &batch.rgb)?),
        silhouette: Some(silhouette_loss(&mut tape, out.alpha, &batch.mask)?),
        surface: Some(surface_loss(&mut tape, &motion, &observed, &vertex_frames, &canonical)?),
        parsing: Some(parsing_loss(&mut tape, out.logits, &batch.labels, &batch.has_label)?),
    };
    let (root, report) = total_loss(&mut tape, &terms, &scheduled_weights(cfg, iter), iter)?;
    if let Some(term) = report.first_non_finite() {
        return Err(TrainError::NonFinite { iter, term });
    }
    tape.backward(root)?;
    model.params.accumulate_grads(&tape, &bound)?;
    cfg.adam().step(state, &mut model.params)?;
    model.params.zero_grads();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub intermediate: Vec<PathBuf>,
    pub reports: Vec<LossReport>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Path of the checkpoint written after `steps` completed iterations.
pub fn checkpoint_path(out: &Path, steps: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{steps:06}.ckpt"))
}

/// Builds the model the way [`fit`] does, without training it.
pub fn initial_model(data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    let mut mc = cfg.model.clone();
    mc.canonical.num_classes = data.manifest.num_classes;
    Ok(Model::new(data.skeleton().clone(), mc, data.num_frames(), cfg.seed)?)
}

/// Trains from scratch. Writes `train.log.jsonl` (one loss report per
/// step), `checkpoints/step_NNNNNN.ckpt` every `eval_every` steps, and the
/// final `model.ckpt` under `out`. The model's class count follows the
/// dataset.
pub fn fit(data: &Dataset, cfg: &TrainConfig, out: &Path, progress: &mut dyn FnMut(&LossReport)) -> Result<FitOutcome> {
    cfg.validate()?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let mut model = initial_model(data, cfg)?;
    let ctx = TrainingContext::new(data, cfg)?;
    let mut state = OptimizerState::new(&model.params);
    let log_path = out.join(LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = std::io::BufWriter::new(file);
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut intermediate = Vec::new();
    for iter in 0..cfg.iterations {
        let step = train_step(&mut model, &mut state, &ctx, cfg, iter);
        let report = match step {
            Ok(r) => r,
            Err(e) => {
                log.flush().map_err(io_err(&log_path))?;
                return Err(e);
            }
        };
        serde_json::to_writer(&mut log, &report).expect("report serializes");
        log.write_all(b"\n").map_err(io_err(&log_path))?;
        progress(&report);
        reports.push(report);
        let done = iter + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let p = checkpoint_path(out, done);
            model.save(&p, done)?;
            intermediate.push(p);
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    model.save(&checkpoint, cfg.iterations)?;
    Ok(FitOutcome {
        checkpoint,
        log: log_path,
        intermediate,
        reports,
    })
}

/// Trailing mean of `window` values ending at index `at`.
pub fn moving_average(values: &[f64], at: usize, window: usize) -> f64 {
    let start = (at + 1).saturating_sub(window);
    let s = &values[start..=at];
    s.iter().sum::<f64>() / s.len() as f64
}
