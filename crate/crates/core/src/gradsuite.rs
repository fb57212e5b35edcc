//! Finite-difference audit of every loss term against every trainable tensor
//! on a micro-batch of four rays with two samples each, split over two
//! frames.

use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::bodymodel::{canonical_surface, generate_surface, Pose, Skeleton};
use crate::canonicalfield::{CanonicalFieldConfig, PositionalEncoding};
use crate::geometry::{normalize, norm, sub, Vec3};
use crate::gradcheck::{check_gradient, GradCheckReport, GradCheckTolerance};
use crate::losses::{mse_loss, parsing_loss, silhouette_loss, surface_loss, LossError};
use crate::model::{Model, ModelConfig};
use crate::motionfield::{prepare_motion, MotionConfig, NonRigidConfig};
use crate::nn::{ModelError, ParamSet};
use crate::renderer::{composite, render_batch, Camera, Ray, RenderError, RenderSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteModule {
    All,
    Motionfield,
    Canonicalfield,
    Renderer,
    Losses,
}

impl FromStr for SuiteModule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all" => Self::All,
            "motionfield" => Self::Motionfield,
            "canonicalfield" => Self::Canonicalfield,
            "renderer" => Self::Renderer,
            "losses" => Self::Losses,
            _ => return Err(format!("unknown module `{s}` (all, motionfield, canonicalfield, renderer, losses)")),
        })
    }
}

impl SuiteModule {
    fn owns(self, tensor: &str) -> bool {
        match self {
            Self::Motionfield => ["weightvol.", "nonrigid.", "posecorr."].iter().any(|p| tensor.starts_with(p)),
            Self::Canonicalfield => tensor.starts_with("canon."),
            _ => true,
        }
    }

    fn terms(self) -> &'static [Term] {
        match self {
            Self::Renderer => &[Term::Mse, Term::Silhouette, Term::Parsing],
            _ => &[Term::Mse, Term::Silhouette, Term::Surface, Term::Parsing],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Mse,
    Silhouette,
    Surface,
    Parsing,
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TermResult {
    pub term: String,
    pub passed: bool,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest relative error among coordinates whose absolute error
    /// exceeds the absolute tolerance, i.e. where the relative bound decides.
    pub max_rel_error_above_abs_tol: f64,
    pub tensors: Vec<TensorResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub module: SuiteModule,
    pub tolerance: GradCheckTolerance,
    pub passed: bool,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_rel_error_above_abs_tol: f64,
    pub terms: Vec<TermResult>,
}

fn micro_config() -> ModelConfig {
    let pe = PositionalEncoding {
        num_frequencies: 2,
        include_input: true,
    };
    ModelConfig {
        canonical: CanonicalFieldConfig {
            encoding: pe,
            depth: 3,
            width: 8,
            skip_layer: Some(2),
            num_classes: 5,
        },
        motion: MotionConfig {
            grid_resolution: 8,
            nonrigid: NonRigidConfig {
                encoding: pe,
                depth: 1,
                width: 6,
            },
        },
    }
}

/// Two-frame model whose every tensor, zero-initialized heads included, is
/// randomized so that no gradient vanishes by construction.
pub fn micro_model(seed: u64) -> Result<Model, ModelError> {
    let mut m = Model::new(Skeleton::humanoid4(), micro_config(), 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in m.params.iter_mut() {
        let amp = match name.as_str() {
            "weightvol.logits" => 1.5,
            "posecorr.delta_omega" => 0.05,
            _ => 0.4,
        };
        for v in t.data_mut() {
            *v = if name.ends_with(".w") || !name.contains('.') || name.starts_with("weightvol") || name.starts_with("posecorr") {
                rng.random_range(-amp..amp)
            } else {
                rng.random_range(-0.1..0.1)
            };
        }
    }
    m.params.get_mut("canon.density.b")?.data_mut()[0] = 1.5;
    Ok(m)
}

struct MicroBatch {
    poses: Vec<Pose>,
    rays: Vec<Option<Ray>>,
    frames: Vec<usize>,
    rgb: Vec<f64>,
    mask: Vec<f64>,
    labels: Vec<usize>,
    valid: Vec<bool>,
    observed: Vec<Vec3>,
    vertex_frames: Vec<usize>,
    canonical: Vec<Vec3>,
}

/// Rays aimed at posed surface points with a short interval straddling the
/// surface, so both samples land where the weight volume is active.
fn micro_batch(skel: &Skeleton) -> Result<MicroBatch, ModelError> {
    let mut p1 = skel.rest_pose();
    p1.rotations[0] = [0.05, 0.3, -0.02];
    p1.rotations[2] = [0.1, 0.2, -0.6];
    let mut p2 = skel.rest_pose();
    p2.rotations[1] = [0.2, -0.1, 0.0];
    p2.rotations[3] = [0.4, 0.0, 0.1];
    let poses = vec![p1, p2];
    let cam = Camera::look_at([0.3, 0.3, 2.8], [0.2, 0.1, 0.0], [0.0, 1.0, 0.0], 60.0, 32, 32);
    let o = cam.center();
    let mut rays = Vec::new();
    let mut frames = Vec::new();
    for (f, bone) in [(0, 0), (0, 2), (1, 1), (1, 3)] {
        let s = generate_surface(skel, &poses[f], 8)?;
        let idx = (0..s.len()).filter(|&i| s.bones[i] == bone).min_by(|&a, &b| norm(sub(s.positions[a], o)).total_cmp(&norm(sub(s.positions[b], o)))).expect("bone has vertices");
        let p = s.positions[idx];
        let dist = norm(sub(p, o));
        rays.push(Some(Ray {
            origin: o,
            direction: normalize(sub(p, o)),
            near: dist - 0.06,
            far: dist + 0.1,
        }));
        frames.push(f);
    }
    let mut observed = Vec::new();
    let mut vertex_frames = Vec::new();
    let mut canonical = Vec::new();
    let rest = canonical_surface(skel, 3)?.positions;
    for (f, pose) in poses.iter().enumerate() {
        let s = generate_surface(skel, pose, 3)?.positions;
        vertex_frames.extend(std::iter::repeat_n(f, s.len()));
        observed.extend(s);
        canonical.extend_from_slice(&rest);
    }
    Ok(MicroBatch {
        poses,
        rays,
        frames,
        rgb: vec![0.9, 0.2, 0.1, 0.3, 0.4, 0.8, 0.7, 0.7, 0.5, 0.2, 0.8, 0.3],
        mask: vec![1.0, 1.0, 0.0, 1.0],
        labels: vec![1, 3, 0, 4],
        valid: vec![true, true, false, true],
        observed,
        vertex_frames,
        canonical,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

fn term_value(model: &Model, batch: &MicroBatch, term: Term, grad_names: &[String]) -> Result<(f64, Vec<Vec<f64>>), SuiteError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let ctx = prepare_motion(&mut tape, &bound, model, &batch.poses, Some(&[0, 1]))?;
    let settings = RenderSettings {
        samples: 2,
        stratified: false,
        nonrigid: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = match term {
        Term::Surface => surface_loss(&mut tape, &ctx, &batch.observed, &batch.vertex_frames, &batch.canonical)?,
        _ => {
            let out = render_batch(&mut tape, &bound, model, &ctx, &batch.poses, &batch.rays, &batch.frames, &settings, &mut rng)?;
            match term {
                Term::Mse => mse_loss(&mut tape, out.color, &batch.rgb)?,
                Term::Silhouette => silhouette_loss(&mut tape, out.alpha, &batch.mask)?,
                _ => parsing_loss(&mut tape, out.logits, &batch.labels, &batch.valid)?,
            }
        }
    };
    tape.backward(loss).map_err(ModelError::from)?;
    let grads = grad_names
        .iter()
        .map(|n| Ok(tape.grad(bound.get(n)?).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok((tape.scalar(loss), grads))
}

fn summarize(term: String, names: &[String], report: &GradCheckReport) -> TermResult {
    let tensors: Vec<TensorResult> = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let checks: Vec<_> = report.checks.iter().filter(|c| c.tensor == i).collect();
            TensorResult {
                name: name.clone(),
                checked: checks.len(),
                max_rel_error: checks.iter().map(|c| c.rel_error).fold(0.0, f64::max),
                passed: !checks.is_empty() && checks.iter().all(|c| c.ok),
            }
        })
        .collect();
    let abs = |c: &crate::gradcheck::CoordinateCheck| (c.analytic - c.numeric).abs();
    TermResult {
        term,
        passed: report.passed() && tensors.iter().all(|t| t.passed),
        checked: report.checks.len(),
        max_rel_error: report.max_rel_error(),
        max_abs_error: report.checks.iter().map(abs).fold(0.0, f64::max),
        max_rel_error_above_abs_tol: report.checks.iter().filter(|c| abs(c) > report.tolerance.abs).map(|c| c.rel_error).fold(0.0, f64::max),
        tensors,
    }
}

/// Compositing kernel alone, on random opacities and channels.
fn composite_check(tol: GradCheckTolerance) -> TermResult {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (rays, d, c) = (4, 2, 4);
    let data: Vec<f64> = (0..rays * d)
        .flat_map(|_| {
            let mut row = vec![rng.random_range(0.05..0.95)];
            row.extend((0..c).map(|_| rng.random_range(-1.0..1.0)));
            row
        })
        .collect();
    let weights: Vec<f64> = (0..rays * (c + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![rays * d, c + 1], data).expect("sized").with_grad();
    let eval = |ts: &[Tensor], _: bool| {
        let mut tape = Tape::new();
        let v = tape.leaf(&ts[0]);
        let out = composite(&mut tape, v, d).expect("valid input");
        let w = tape.constant(vec![rays, c + 1], weights.clone()).expect("sized");
        let p = tape.mul(out, w).expect("same shape");
        let s = tape.sum(p);
        tape.backward(s).expect("scalar");
        (tape.scalar(s), vec![tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()])
    };
    let report = check_gradient(&[x], eval, 1e-6, tol, usize::MAX, 0);
    summarize("composite".into(), &["composite.input".to_string()], &report)
}

/// Runs the audit for `module`, checking at most `max_per_tensor`
/// coordinates of each tensor per term.
pub fn run_suite(module: SuiteModule, max_per_tensor: usize) -> Result<SuiteReport, SuiteError> {
    let tol = GradCheckTolerance::default();
    let model = micro_model(5)?;
    let batch = micro_batch(&model.skeleton)?;
    let names: Vec<String> = model.params.names().into_iter().filter(|n| module.owns(n)).collect();
    let tensors: Vec<Tensor> = names.iter().map(|n| model.params.get(n).cloned()).collect::<Result<_, _>>()?;
    let mut terms = Vec::new();
    for &term in module.terms() {
        let eval = |ts: &[Tensor], _: bool| {
            let mut params: ParamSet = model.params.clone();
            for (n, t) in names.iter().zip(ts) {
                *params.get_mut(n).expect("known name") = t.clone();
            }
            let m = Model { params, ..model.clone() };
            term_value(&m, &batch, term, &names).expect("micro batch evaluates")
        };
        let (value, _) = term_value(&model, &batch, term, &names)?;
        debug_assert!(value.is_finite());
        let report = check_gradient(&tensors, eval, 1e-6, tol, max_per_tensor, 3);
        let name = serde_json::to_value(term).expect("term serializes").as_str().unwrap_or_default().to_string();
        terms.push(summarize(name, &names, &report));
    }
    if matches!(module, SuiteModule::Renderer | SuiteModule::All) {
        terms.push(composite_check(tol));
    }
    Ok(SuiteReport {
        module,
        tolerance: tol,
        passed: terms.iter().all(|t| t.passed),
        checked: terms.iter().map(|t| t.checked).sum(),
        max_rel_error: terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max),
        max_abs_error: terms.iter().map(|t| t.max_abs_error).fold(0.0, f64::max),
        max_rel_error_above_abs_tol: terms.iter().map(|t| t.max_rel_error_above_abs_tol).fold(0.0, f64::max),
        terms,
    })
}
