//! Pinhole rays, sampling along rays, and front-to-back volume compositing of
//! color, semantic logits and opacity through the motion and canonical fields.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Function, Tape, Var};
use crate::bodymodel::{bone_transforms, Pose, Skeleton};
use crate::canonicalfield::{field_forward, semantic_distribution};
use crate::geometry::{add, dot, mat_vec, normalize, scale, sub, transpose, Mat3, Vec3};
use crate::model::Model;
use crate::motionfield::{prepare_motion, warp_points, MotionContext};
use crate::nn::{BoundParams, ModelError};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: usize, v: usize, width: usize, height: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid render settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::autodiff::AutodiffError> for RenderError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}

/// Pinhole camera, OpenCV convention: `x_cam = R·x_world + t`, +z forward,
/// +y down. Pixel `(u, v)` covers `[u, u+1) × [v, v+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(crate::geometry::cross(z, up));
        let y = crate::geometry::cross(z, x);
        let rotation = [x, y, z];
        let translation = scale(mat_vec(rotation, eye), -1.0);
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(RenderError::InvalidCamera(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("image size must be nonzero".into()));
        }
        let rt = crate::geometry::mat_mul(transpose(self.rotation), self.rotation);
        let off = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| (rt[i][j] - if i == j { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max);
        if off > 1e-6 || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(RenderError::InvalidCamera("extrinsic rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        scale(mat_vec(transpose(self.rotation), self.translation), -1.0)
    }

    pub fn world_to_camera(&self, x: Vec3) -> Vec3 {
        add(mat_vec(self.rotation, x), self.translation)
    }

    /// Continuous image coordinates and camera depth; `None` behind the camera.
    pub fn project(&self, x: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(x);
        (c[2] > 0.0).then(|| (self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Unit world-space direction through continuous image point `(px, py)`.
    pub fn direction_at(&self, px: f64, py: f64) -> Vec3 {
        let d_cam = [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0];
        normalize(mat_vec(transpose(self.rotation), d_cam))
    }

    pub fn pixel_direction(&self, u: usize, v: usize) -> Vec3 {
        self.direction_at(u as f64 + 0.5, v as f64 + 0.5)
    }

    /// Forward (+z) axis in world space.
    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Slab test; returns the parametric entry and exit of `o + t·d`.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0.max(0.0)).then_some((t0.max(0.0), t1))
    }
}

/// Bounds of the posed capsule body, padded by `margin`.
pub fn posed_bounds(skel: &Skeleton, pose: &Pose, margin: f64) -> Result<Aabb, RenderError> {
    let bones = bone_transforms(skel, pose).map_err(ModelError::from)?;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for b in 0..skel.num_bones() {
        let r = skel.bone_radii()[b] + margin;
        for p in [skel.rest_joints()[b], skel.rest_tails()[b]] {
            let q = bones.to_observation(b, p);
            for a in 0..3 {
                min[a] = min[a].min(q[a] - r);
                max[a] = max[a].max(q[a] + r);
            }
        }
    }
    Ok(Aabb { min, max })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

/// Rays through the centers of `pixels` (`(column, row)`), clipped to
/// `bounds`. Rays that miss the box come back as `None`.
pub fn generate_rays(cam: &Camera, pixels: &[(usize, usize)], bounds: &Aabb) -> Result<Vec<Option<Ray>>, RenderError> {
    cam.validate()?;
    let origin = cam.center();
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= cam.width || v >= cam.height {
                return Err(RenderError::PixelOutOfBounds {
                    u,
                    v,
                    width: cam.width,
                    height: cam.height,
                });
            }
            let direction = cam.pixel_direction(u, v);
            Ok(bounds.intersect(origin, direction).map(|(near, far)| Ray {
                origin,
                direction,
                near,
                far,
            }))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
    pub positions: Vec<Vec3>,
}

/// `d` equal bins over `[near, far]`: midpoints, or one uniform draw per bin
/// when `stratified`. Every sample's interval is the bin width.
pub fn sample_ray<R: Rng + ?Sized>(ray: &Ray, d: usize, stratified: bool, rng: &mut R) -> Result<RaySamples, RenderError> {
    if d < 2 {
        return Err(RenderError::Settings(format!("need at least 2 samples per ray, got {d}")));
    }
    let width = (ray.far - ray.near) / d as f64;
    let t: Vec<f64> = (0..d)
        .map(|i| {
            let u = if stratified { rng.random::<f64>() } else { 0.5 };
            ray.near + (i as f64 + u) * width
        })
        .collect();
    Ok(RaySamples {
        positions: t.iter().map(|&ti| ray.at(ti)).collect(),
        dt: vec![width; d],
        t,
    })
}

/// Front-to-back compositing over `[rays·D, 1 + C]` rows of `(α, v)`.
/// Output `[rays, C + 1]`: `Σ T_i α_i v_i` per channel, then `A = Σ T_i α_i`.
struct CompositeFn {
    samples: usize,
    channels: usize,
}

fn composite_forward(x: &[f64], d: usize, c: usize) -> Vec<f64> {
    let w = c + 1;
    let rays = x.len() / (d * w);
    let mut out = vec![0.0; rays * w];
    for r in 0..rays {
        let o = &mut out[r * w..(r + 1) * w];
        let mut trans = 1.0;
        for i in 0..d {
            let row = &x[(r * d + i) * w..(r * d + i + 1) * w];
            let wt = trans * row[0];
            for ch in 0..c {
                o[ch] += wt * row[1 + ch];
            }
            o[c] += wt;
            trans *= 1.0 - row[0];
        }
    }
    out
}

impl Function for CompositeFn {
    fn name(&self) -> &'static str {
        "composite"
    }

    // With S_k the composite of samples after k restarted at unit
    // transmittance, d/dα_k = T_k (v_k − S_k) and S_{k−1} = α_k v_k + (1 − α_k) S_k.
    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let (d, c) = (self.samples, self.channels);
        let w = c + 1;
        let rays = x.len() / (d * w);
        let mut gx = vec![0.0; x.len()];
        let mut trans = vec![0.0; d];
        let mut proj = vec![0.0; d];
        for r in 0..rays {
            let go = &g[r * w..(r + 1) * w];
            let mut t = 1.0;
            for i in 0..d {
                let row = &x[(r * d + i) * w..(r * d + i + 1) * w];
                trans[i] = t;
                proj[i] = go[c] + (0..c).map(|ch| go[ch] * row[1 + ch]).sum::<f64>();
                t *= 1.0 - row[0];
            }
            let mut suffix = 0.0;
            for k in (0..d).rev() {
                let base = (r * d + k) * w;
                let a = x[base];
                gx[base] = trans[k] * (proj[k] - suffix);
                for ch in 0..c {
                    gx[base + 1 + ch] = trans[k] * a * go[ch];
                }
                suffix = a * proj[k] + (1.0 - a) * suffix;
            }
        }
        vec![Some(gx)]
    }
}

/// Composites `x: [rays·samples, 1 + C]` (opacity first) into `[rays, C + 1]`.
pub fn composite(tape: &mut Tape, x: Var, samples: usize) -> Result<Var, RenderError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] < 1 || samples == 0 || !shape[0].is_multiple_of(samples) {
        return Err(RenderError::Settings(format!("composite input {shape:?} with {samples} samples per ray")));
    }
    let c = shape[1] - 1;
    let value = composite_forward(tape.value(x), samples, c);
    let rays = shape[0] / samples;
    Ok(tape.custom(&[x], vec![rays, c + 1], value, Box::new(CompositeFn { samples, channels: c }))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPixel {
    pub color: Vec3,
    pub alpha: f64,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Composites explicit per-sample `(α, c, s)` along one ray.
pub fn composite_samples(alpha: &[f64], color: &[Vec3], logits: &[Vec<f64>]) -> Result<RenderedPixel, RenderError> {
    let d = alpha.len();
    if color.len() != d || logits.len() != d || d == 0 {
        return Err(RenderError::Settings("per-sample arrays differ in length".into()));
    }
    let l = logits[0].len();
    let mut rows = Vec::with_capacity(d * (4 + l));
    for i in 0..d {
        if logits[i].len() != l {
            return Err(RenderError::Settings("logit vectors differ in length".into()));
        }
        rows.push(alpha[i]);
        rows.extend_from_slice(&color[i]);
        rows.extend_from_slice(&logits[i]);
    }
    let mut tape = Tape::new();
    let x = tape.constant(vec![d, 4 + l], rows)?;
    let out = composite(&mut tape, x, d)?;
    Ok(pixel_from_row(tape.value(out), l))
}

fn pixel_from_row(row: &[f64], l: usize) -> RenderedPixel {
    let logits = row[3..3 + l].to_vec();
    RenderedPixel {
        color: [row[0], row[1], row[2]],
        alpha: row[3 + l],
        probs: semantic_distribution(&logits),
        logits,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub samples: usize,
    pub stratified: bool,
    pub nonrigid: bool,
}

impl RenderSettings {
    pub fn eval(samples: usize) -> Self {
        Self {
            samples,
            stratified: false,
            nonrigid: true,
        }
    }
}

/// Per-ray outputs of a batch render, recorded on the tape.
#[derive(Clone, Debug)]
pub struct BatchRender {
    /// `[rays, 3]`
    pub color: Var,
    /// `[rays, L]`
    pub logits: Var,
    /// `[rays, 1]`
    pub alpha: Var,
    pub samples: Vec<Option<RaySamples>>,
    /// Indices into the `rays·D` sample slots that reached the field.
    pub active: Vec<usize>,
    pub(crate) per_sample: Option<PerSample>,
}

#[derive(Clone, Debug)]
pub(crate) struct PerSample {
    pub fg: Var,
    pub density: Var,
    pub alpha: Var,
    pub color: Var,
    pub logits: Var,
}

/// Renders `rays` (each `None` ray contributes nothing), ray `r` belonging
/// to transform row `frames[r]` of `ctx`.
#[allow(clippy::too_many_arguments)]
pub fn render_batch<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &Model,
    ctx: &MotionContext,
    poses: &[Pose],
    rays: &[Option<Ray>],
    frames: &[usize],
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<BatchRender, RenderError> {
    if rays.len() != frames.len() {
        return Err(RenderError::Settings("one frame index per ray required".into()));
    }
    let d = settings.samples;
    let l = model.config.canonical.num_classes;
    let mut samples = Vec::with_capacity(rays.len());
    let mut points = Vec::new();
    let mut point_frames = Vec::new();
    let mut slots = Vec::new();
    let mut dts = Vec::new();
    for (r, ray) in rays.iter().enumerate() {
        match ray {
            Some(ray) => {
                let s = sample_ray(ray, d, settings.stratified, rng)?;
                for i in 0..d {
                    points.push(s.positions[i]);
                    point_frames.push(frames[r]);
                    slots.push(r * d + i);
                    dts.push(s.dt[i]);
                }
                samples.push(Some(s));
            }
            None => samples.push(None),
        }
    }
    let width = 4 + l;
    let total = rays.len() * d;
    let warped = warp_points(tape, bound, model, ctx, poses, &points, &point_frames, settings.nonrigid)?;
    let active: Vec<usize> = warped.active.iter().map(|&i| slots[i]).collect();
    let (rows, per_sample) = match (warped.canonical, warped.fg) {
        (Some(xc), Some(fg)) => {
            let field = field_forward(tape, bound, &model.config.canonical, xc)?;
            let dt = tape.constant(vec![active.len(), 1], warped.active.iter().map(|&i| dts[i]).collect())?;
            let optical = tape.mul(field.density, dt)?;
            let neg = tape.scale(optical, -1.0);
            let transmit = tape.exp(neg);
            let absorbed = tape.affine(transmit, -1.0, 1.0);
            let alpha = tape.mul(fg, absorbed)?;
            let packed = tape.concat(&[alpha, field.color, field.logits])?;
            let rows = tape.scatter_rows(packed, &active, total)?;
            let ps = PerSample {
                fg,
                density: field.density,
                alpha,
                color: field.color,
                logits: field.logits,
            };
            (rows, Some(ps))
        }
        _ => (tape.constant(vec![total, width], vec![0.0; total * width])?, None),
    };
    let out = if d == 0 || rays.is_empty() {
        tape.constant(vec![rays.len(), width], vec![0.0; rays.len() * width])?
    } else {
        composite(tape, rows, d)?
    };
    Ok(BatchRender {
        color: tape.slice_cols(out, 0, 3)?,
        logits: tape.slice_cols(out, 3, 3 + l)?,
        alpha: tape.slice_cols(out, 3 + l, 4 + l)?,
        samples,
        active,
        per_sample,
    })
}

/// Per-sample quantities of one rendered ray. Samples that never reached the
/// field (zero foreground likelihood) report zero density, color and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleBatch {
    pub positions: Vec<Vec3>,
    pub dt: Vec<f64>,
    pub density: Vec<f64>,
    pub alpha: Vec<f64>,
    pub color: Vec<Vec3>,
    pub logits: Vec<Vec<f64>>,
    pub fg: Vec<f64>,
}

/// Renders a single ray. `frame` selects a trained pose-correction row.
pub fn render_ray(
    model: &Model,
    ray: &Ray,
    pose: &Pose,
    frame: Option<usize>,
    settings: &RenderSettings,
    seed: u64,
) -> Result<(RenderedPixel, RaySampleBatch), RenderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let poses = std::slice::from_ref(pose);
    let rows = frame.map(|f| vec![f]);
    let ctx = prepare_motion(&mut tape, &bound, model, poses, rows.as_deref())?;
    let out = render_batch(&mut tape, &bound, model, &ctx, poses, &[Some(*ray)], &[0], settings, &mut rng)?;
    let l = model.config.canonical.num_classes;
    let mut row = tape.value(out.color).to_vec();
    row.extend_from_slice(tape.value(out.logits));
    row.extend_from_slice(tape.value(out.alpha));
    let pixel = pixel_from_row(&row, l);
    let s = out.samples[0].as_ref().expect("ray present");
    let d = settings.samples;
    let mut batch = RaySampleBatch {
        positions: s.positions.clone(),
        dt: s.dt.clone(),
        density: vec![0.0; d],
        alpha: vec![0.0; d],
        color: vec![[0.0; 3]; d],
        logits: vec![vec![0.0; l]; d],
        fg: vec![0.0; d],
    };
    if let Some(ps) = &out.per_sample {
        for (j, &slot) in out.active.iter().enumerate() {
            batch.fg[slot] = tape.value(ps.fg)[j];
            batch.density[slot] = tape.value(ps.density)[j];
            batch.alpha[slot] = tape.value(ps.alpha)[j];
            let c = tape.value(ps.color);
            batch.color[slot] = [c[3 * j], c[3 * j + 1], c[3 * j + 2]];
            batch.logits[slot] = tape.value(ps.logits)[j * l..(j + 1) * l].to_vec();
        }
    }
    Ok((pixel, batch))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `[H, W, 3]`.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row-major `[H, W, L]`.
    pub probs: Vec<f64>,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |m, i| if v[i] > v[m] { i } else { m })
}

/// Renders every pixel of `cam`, `chunk` rays per tape.
pub fn render_image(
    model: &Model,
    cam: &Camera,
    pose: &Pose,
    frame: Option<usize>,
    settings: &RenderSettings,
    chunk: usize,
) -> Result<RenderedImage, RenderError> {
    if chunk == 0 {
        return Err(RenderError::Settings("chunk size must be positive".into()));
    }
    let margin = 2.0 * model.skeleton.max_radius();
    let bounds = posed_bounds(&model.skeleton, pose, margin)?;
    let (w, h) = (cam.width, cam.height);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).collect();
    let rays = generate_rays(cam, &pixels, &bounds)?;
    let l = model.config.canonical.num_classes;
    let mut img = RenderedImage {
        width: w,
        height: h,
        rgb: Vec::with_capacity(3 * w * h),
        alpha: Vec::with_capacity(w * h),
        labels: Vec::with_capacity(w * h),
        probs: Vec::with_capacity(l * w * h),
    };
    let poses = std::slice::from_ref(pose);
    let rows = frame.map(|f| vec![f]);
    // Midpoint sampling draws nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for part in rays.chunks(chunk) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let ctx = prepare_motion(&mut tape, &bound, model, poses, rows.as_deref())?;
        let frames = vec![0; part.len()];
        let eval = RenderSettings {
            stratified: false,
            ..settings.clone()
        };
        let out = render_batch(&mut tape, &bound, model, &ctx, poses, part, &frames, &eval, &mut rng)?;
        img.rgb.extend_from_slice(tape.value(out.color));
        img.alpha.extend_from_slice(tape.value(out.alpha));
        for s in tape.value(out.logits).chunks_exact(l) {
            let p = semantic_distribution(s);
            img.labels.push(argmax(&p));
            img.probs.extend(p);
        }
    }
    Ok(img)
}

/// Distance along `ray` to the first sample with `fg > 0`; diagnostics only.
pub fn first_active_depth(batch: &RaySampleBatch, ray: &Ray) -> Option<f64> {
    batch.fg.iter().position(|&f| f > 0.0).map(|i| dot(sub(batch.positions[i], ray.origin), ray.direction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::canonicalfield::{CanonicalFieldConfig, PositionalEncoding};
    use crate::geometry::{cross, norm};
    use crate::gradcheck::{check_gradient, GradCheckTolerance};
    use crate::model::ModelConfig;
    use crate::motionfield::{MotionConfig, NonRigidConfig};
    use crate::nn::ParamSet;
    use proptest::prelude::*;

    fn tiny_config() -> ModelConfig {
        let pe = PositionalEncoding {
            num_frequencies: 2,
            include_input: true,
        };
        ModelConfig {
            canonical: CanonicalFieldConfig {
                encoding: pe,
                depth: 2,
                width: 8,
                skip_layer: None,
                num_classes: 5,
            },
            motion: MotionConfig {
                grid_resolution: 10,
                nonrigid: NonRigidConfig {
                    encoding: pe,
                    depth: 1,
                    width: 6,
                },
            },
        }
    }

    fn tiny_model() -> Model {
        let mut m = Model::new(Skeleton::humanoid4(), tiny_config(), 1, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for head in ["canon.density.w", "canon.color.w", "canon.semantic.w", "nonrigid.layer1.w"] {
            m.params.get_mut(head).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        m.params.get_mut("canon.density.b").unwrap().data_mut()[0] = 2.0;
        m
    }

    fn front_camera(w: usize, h: usize) -> Camera {
        Camera::look_at([0.0, 0.15, 2.5], [0.0, 0.15, 0.0], [0.0, -1.0, 0.0], 1.3 * w as f64, w, h)
    }

    #[test]
    fn principal_point_looks_forward() {
        let cam = front_camera(64, 48);
        let d = cam.direction_at(cam.cx, cam.cy);
        let f = cam.forward();
        for a in 0..3 {
            assert!((d[a] - f[a]).abs() < 1e-15);
        }
        assert!((norm(d) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rays_are_deterministic_and_bounded() {
        let cam = front_camera(16, 16);
        let bounds = Aabb {
            min: [-1.0; 3],
            max: [1.0; 3],
        };
        let px = [(0, 0), (7, 9), (15, 15)];
        let a = generate_rays(&cam, &px, &bounds).unwrap();
        assert_eq!(a, generate_rays(&cam, &px, &bounds).unwrap());
        for r in a.iter().flatten() {
            assert!(r.near < r.far);
            assert!((norm(r.direction) - 1.0).abs() < 1e-12);
        }
        let err = generate_rays(&cam, &[(16, 0)], &bounds).unwrap_err();
        assert!(err.to_string().contains("(16, 0)"));
    }

    #[test]
    fn ray_missing_the_box_is_none() {
        let cam = front_camera(16, 16);
        let tiny = Aabb {
            min: [5.0; 3],
            max: [6.0; 3],
        };
        assert_eq!(generate_rays(&cam, &[(8, 8)], &tiny).unwrap(), vec![None]);
    }

    #[test]
    fn projection_round_trip_lies_on_ray() {
        let cam = Camera::look_at([1.2, 0.7, 2.1], [0.1, 0.0, -0.2], [0.0, -1.0, 0.0], 70.0, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x: Vec3 = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
            let (px, py, depth) = cam.project(x).unwrap();
            assert!(depth > 0.0);
            let d = cam.direction_at(px, py);
            let off = sub(x, cam.center());
            assert!(norm(cross(off, d)) < 1e-9);
            assert!(dot(off, d) > 0.0);
        }
    }

    fn unit_ray() -> Ray {
        Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            near: 0.0,
            far: 1.0,
        }
    }

    #[test]
    fn midpoint_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_ray(&unit_ray(), 2, false, &mut rng).unwrap();
        assert_eq!(s.t, vec![0.25, 0.75]);
        assert_eq!(s.dt, vec![0.5, 0.5]);
        assert!(sample_ray(&unit_ray(), 1, false, &mut rng).is_err());
        let r = Ray {
            near: 0.7,
            far: 3.1,
            ..unit_ray()
        };
        let s = sample_ray(&r, 64, true, &mut rng).unwrap();
        assert!((s.dt.iter().sum::<f64>() - 2.4).abs() < 1e-12);
    }

    #[test]
    fn stratified_samples_stay_in_their_bins() {
        let r = Ray {
            near: 1.5,
            far: 2.5,
            ..unit_ray()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let s = sample_ray(&r, 8, true, &mut rng).unwrap();
            for (i, &t) in s.t.iter().enumerate() {
                let lo = 1.5 + i as f64 * 0.125;
                assert!(t >= lo && t <= lo + 0.125);
            }
        }
    }

    fn hand_oracle(alpha: &[f64], color: &[Vec3], logits: &[Vec<f64>]) -> (Vec3, f64, Vec<f64>) {
        let mut c = [0.0; 3];
        let mut a = 0.0;
        let mut s = vec![0.0; logits[0].len()];
        for i in 0..alpha.len() {
            let t: f64 = alpha[..i].iter().map(|x| 1.0 - x).product();
            let w = t * alpha[i];
            a += w;
            for k in 0..3 {
                c[k] += w * color[i][k];
            }
            for (k, sv) in s.iter_mut().enumerate() {
                *sv += w * logits[i][k];
            }
        }
        (c, a, s)
    }

    #[test]
    fn three_sample_composite_matches_hand_sums() {
        let alpha = [0.3, 0.5, 0.9];
        let color = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.4], [0.5, 0.5, 0.5]];
        let logits = vec![vec![1.0, -2.0, 0.5], vec![0.0, 3.0, -1.0], vec![2.0, 2.0, 2.0]];
        let px = composite_samples(&alpha, &color, &logits).unwrap();
        // 0.3, 0.7·0.5 = 0.35, 0.7·0.5·0.9 = 0.315
        assert!((px.alpha - 0.965).abs() < 1e-12);
        assert!((px.color[0] - (0.3 * 0.1 + 0.35 * 0.9 + 0.315 * 0.5)).abs() < 1e-12);
        assert!((px.logits[1] - (0.3 * -2.0 + 0.35 * 3.0 + 0.315 * 2.0)).abs() < 1e-12);
        let (c, a, s) = hand_oracle(&alpha, &color, &logits);
        assert!((px.alpha - a).abs() < 1e-12);
        for k in 0..3 {
            assert!((px.color[k] - c[k]).abs() < 1e-12);
            assert!((px.logits[k] - s[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_opaque_rays() {
        let color = [[0.2, 0.4, 0.6], [0.9, 0.9, 0.9]];
        let logits = vec![vec![1.0, 2.0], vec![5.0, -5.0]];
        let empty = composite_samples(&[0.0, 0.0], &color, &logits).unwrap();
        assert_eq!((empty.color, empty.alpha, empty.logits.clone()), ([0.0; 3], 0.0, vec![0.0, 0.0]));
        let opaque = composite_samples(&[1.0, 0.7], &color, &logits).unwrap();
        assert_eq!((opaque.color, opaque.alpha, opaque.logits), (color[0], 1.0, logits[0].clone()));
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (rays, d, c) = (3, 4, 5);
        let x: Vec<f64> = (0..rays * d * (c + 1))
            .map(|i| if i % (c + 1) == 0 { rng.random_range(0.05..0.95) } else { rng.random_range(-1.0..1.0) })
            .collect();
        let coef: Vec<f64> = (0..rays * (c + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = check_gradient(
            &[Tensor::new(vec![rays * d, c + 1], x).unwrap().with_grad()],
            |ts, _| {
                let mut tape = Tape::new();
                let v = tape.leaf(&ts[0]);
                let out = composite(&mut tape, v, d).unwrap();
                let k = tape.constant(vec![rays, c + 1], coef.clone()).unwrap();
                let prod = tape.mul(out, k).unwrap();
                let loss = tape.sum(prod);
                tape.backward(loss).unwrap();
                (tape.scalar(loss), vec![tape.grad(v).unwrap().to_vec()])
            },
            1e-6,
            GradCheckTolerance::default(),
            200,
            1,
        );
        assert!(report.passed(), "max rel {}", report.max_rel_error());
    }

    #[test]
    fn render_ray_matches_oracle_over_its_samples() {
        let model = tiny_model();
        let mut pose = model.skeleton.rest_pose();
        pose.rotations[2] = [0.0, 0.0, -0.6];
        pose.rotations[0] = [0.1, 0.2, 0.0];
        let cam = front_camera(16, 16);
        let bounds = posed_bounds(&model.skeleton, &pose, 0.2).unwrap();
        let rays = generate_rays(&cam, &[(8, 7), (8, 4), (10, 7)], &bounds).unwrap();
        let settings = RenderSettings::eval(24);
        let mut nonzero = 0;
        for ray in rays.iter().flatten() {
            let (px, batch) = render_ray(&model, ray, &pose, Some(0), &settings, 0).unwrap();
            for i in 0..24 {
                let expect = batch.fg[i] * (1.0 - (-batch.density[i] * batch.dt[i]).exp());
                assert!((batch.alpha[i] - expect).abs() < 1e-12);
            }
            let (c, a, s) = hand_oracle(&batch.alpha, &batch.color, &batch.logits);
            assert!((px.alpha - a).abs() < 1e-12);
            for (got, want) in px.color.iter().zip(&c) {
                assert!((got - want).abs() < 1e-12);
            }
            for (got, want) in px.logits.iter().zip(&s) {
                assert!((got - want).abs() < 1e-12);
            }
            if a > 0.1 {
                nonzero += 1;
            }
        }
        assert!(nonzero >= 1);
    }

    #[test]
    fn chunking_is_bit_identical_and_matches_render_ray() {
        let model = tiny_model();
        let mut pose = model.skeleton.rest_pose();
        pose.rotations[3] = [0.4, 0.0, 0.0];
        let cam = front_camera(10, 10);
        let settings = RenderSettings::eval(16);
        let one = render_image(&model, &cam, &pose, None, &settings, 1).unwrap();
        let big = render_image(&model, &cam, &pose, None, &settings, 4096).unwrap();
        let mid = render_image(&model, &cam, &pose, None, &settings, 7).unwrap();
        assert_eq!(one, big);
        assert_eq!(one, mid);
        assert!(one.alpha.iter().any(|&a| a > 0.1));
        let bounds = posed_bounds(&model.skeleton, &pose, 2.0 * model.skeleton.max_radius()).unwrap();
        let (u, v) = (5, 4);
        let ray = generate_rays(&cam, &[(u, v)], &bounds).unwrap()[0].unwrap();
        let (px, _) = render_ray(&model, &ray, &pose, None, &settings, 0).unwrap();
        let p = v * 10 + u;
        assert_eq!(px.alpha, one.alpha[p]);
        assert_eq!(px.color.to_vec(), one.rgb[3 * p..3 * p + 3].to_vec());
        assert_eq!(px.probs, one.probs[5 * p..5 * p + 5].to_vec());
    }

    #[test]
    fn zero_density_renders_empty() {
        let mut model = tiny_model();
        model.params.get_mut("canon.density.w").unwrap().data_mut().fill(0.0);
        model.params.get_mut("canon.density.b").unwrap().data_mut()[0] = -1e3;
        let cam = front_camera(8, 8);
        let img = render_image(&model, &cam, &model.skeleton.rest_pose(), None, &RenderSettings::eval(8), 16).unwrap();
        assert!(img.rgb.iter().all(|&v| v == 0.0));
        assert!(img.alpha.iter().all(|&v| v == 0.0));
        assert!(img.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let model = tiny_model();
        let mut pose = model.skeleton.rest_pose();
        pose.rotations[2] = [0.0, 0.1, -0.5];
        let cam = front_camera(16, 16);
        let bounds = posed_bounds(&model.skeleton, &pose, 0.05).unwrap();
        let rays = generate_rays(&cam, &[(8, 7), (8, 10)], &bounds).unwrap();
        let settings = RenderSettings {
            samples: 2,
            stratified: false,
            nonrigid: true,
        };
        let names = model.params.names();
        let tensors: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let eval = |ts: &[Tensor], _: bool| {
            let mut ps = ParamSet::new();
            for (n, t) in names.iter().zip(ts) {
                ps.insert(n.clone(), t.clone());
            }
            let m = Model {
                params: ps,
                ..model.clone()
            };
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape);
            let ctx = prepare_motion(&mut tape, &bound, &m, std::slice::from_ref(&pose), Some(&[0])).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = render_batch(&mut tape, &bound, &m, &ctx, std::slice::from_ref(&pose), &rays, &[0, 0], &settings, &mut rng).unwrap();
            let all = tape.concat(&[out.color, out.logits, out.alpha]).unwrap();
            let coef = tape.constant(vec![2, 9], (0..18).map(|i| 0.2 + 0.1 * i as f64).collect()).unwrap();
            let prod = tape.mul(all, coef).unwrap();
            let loss = tape.sum(prod);
            tape.backward(loss).unwrap();
            let grads = names.iter().map(|n| tape.grad(bound.get(n).unwrap()).map(<[f64]>::to_vec).unwrap_or_default()).collect();
            (tape.scalar(loss), grads)
        };
        let (value, _) = eval(&tensors, false);
        assert!(value.abs() > 0.0);
        let report = check_gradient(&tensors, eval, 1e-6, GradCheckTolerance::default(), 12, 5);
        assert!(report.passed(), "failures: {:?}", report.failures().take(5).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn one_hot_samples_render_their_class(
            alpha in proptest::collection::vec(0.01f64..1.0, 2..10),
            class in 0usize..5,
        ) {
            let d = alpha.len();
            let mut onehot = vec![0.0; 5];
            onehot[class] = 1.0;
            let px = composite_samples(&alpha, &vec![[0.5; 3]; d], &vec![onehot; d]).unwrap();
            prop_assert!(px.alpha > 0.0 && px.alpha <= 1.0 + 1e-12);
            prop_assert_eq!(argmax(&px.probs), class);
            prop_assert!((px.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn transmittance_is_monotone(alpha in proptest::collection::vec(0.0f64..=1.0, 2..20)) {
            let mut t = 1.0;
            for a in alpha {
                let next = t * (1.0 - a);
                prop_assert!(next <= t && next >= 0.0);
                t = next;
            }
        }
    }
}
