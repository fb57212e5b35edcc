//! Observation → canonical motion field: skeletal warp driven by a canonical
//! blend-weight volume, plus a pose-conditioned non-rigid offset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_kernel, Function, Tape, Tensor, Var};
use crate::bodymodel::{
    bone_transforms, corrected_local_rotations, point_segment_distance, transforms_from_local, BoneTransformSet, Pose,
    Skeleton,
};
use crate::canonicalfield::PositionalEncoding;
use crate::geometry::{add, mat_vec, sub, Dual, Vec3};
use crate::model::Model;
use crate::nn::{dense, init_dense, BoundParams, ModelError, ParamSet};

/// Below this total bone weight a point is treated as background.
pub const WEIGHT_EPS: f64 = 1e-6;

const BONE_LOGIT_FLOOR: f64 = -16.0;
const BONE_LOGIT_GAIN: f64 = 24.0;
const BACKGROUND_LOGIT: f64 = 2.0;

pub const WEIGHTS_PARAM: &str = "weightvol.logits";
pub const POSE_CORRECTION_PARAM: &str = "posecorr.delta_omega";

/// Node-aligned regular grid over an axis-aligned box; node `i` on an axis
/// sits at `min + i·(max − min)/(n − 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub res: [usize; 3],
    pub min: Vec3,
    pub max: Vec3,
}

/// Trilinear stencil of a point: 8 node offsets, weights and weight gradients
/// with respect to the point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [Vec3; 8],
}

impl GridGeometry {
    pub fn num_nodes(&self) -> usize {
        self.res.iter().product()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res[1] + j) * self.res[2] + k
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let ijk = [i, j, k];
        std::array::from_fn(|a| self.min[a] + ijk[a] as f64 * (self.max[a] - self.min[a]) / (self.res[a] - 1) as f64)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub(crate) fn locate(&self, p: Vec3) -> Option<Cell> {
        if !self.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut inv = [0.0; 3];
        for a in 0..3 {
            let n = self.res[a];
            inv[a] = (n - 1) as f64 / (self.max[a] - self.min[a]);
            let u = (p[a] - self.min[a]) * inv[a];
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let mut cell = Cell {
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 3]; 8],
        };
        for c in 0..8 {
            let bit = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let f: [f64; 3] = std::array::from_fn(|a| if bit[a] == 1 { frac[a] } else { 1.0 - frac[a] });
            let s: [f64; 3] = std::array::from_fn(|a| if bit[a] == 1 { inv[a] } else { -inv[a] });
            cell.idx[c] = self.node_index(base[0] + bit[0], base[1] + bit[1], base[2] + bit[2]);
            cell.w[c] = f[0] * f[1] * f[2];
            cell.dw[c] = [s[0] * f[1] * f[2], f[0] * s[1] * f[2], f[0] * f[1] * s[2]];
        }
        Some(cell)
    }
}

/// Canonical blend-weight volume: `K + 1` logit channels per node, the last
/// channel being background.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVolume {
    pub geometry: GridGeometry,
    /// `[K + 1, nx, ny, nz]`.
    pub logits: Tensor,
}

/// Rest-capsule bounds dilated by twice the largest radius.
pub fn weight_volume_geometry(skel: &Skeleton, resolution: usize) -> GridGeometry {
    let (lo, hi) = skel.canonical_bounds();
    let pad = 2.0 * skel.max_radius();
    GridGeometry {
        res: [resolution; 3],
        min: lo.map(|v| v - pad),
        max: hi.map(|v| v + pad),
    }
}

impl WeightVolume {
    /// Background logit 2; each bone channel is a Gaussian bump (σ = bone
    /// radius) in the distance outside its rest capsule, so the softmaxed
    /// bone weight is ~1 inside the body and vanishes a couple of radii out.
    pub fn initialize(skel: &Skeleton, resolution: usize) -> Result<Self, ModelError> {
        if resolution < 2 {
            return Err(ModelError::Config("weight volume resolution must be >= 2".into()));
        }
        let geometry = weight_volume_geometry(skel, resolution);
        let k = skel.num_bones();
        let nodes = geometry.num_nodes();
        let mut logits = vec![0.0; (k + 1) * nodes];
        for i in 0..resolution {
            for j in 0..resolution {
                for l in 0..resolution {
                    let n = geometry.node_index(i, j, l);
                    let p = geometry.node_position(i, j, l);
                    for b in 0..k {
                        let r = skel.bone_radii()[b];
                        let d = point_segment_distance(p, skel.rest_joints()[b], skel.rest_tails()[b]);
                        let outside = (d - r).max(0.0);
                        let bump = (-(outside * outside) / (2.0 * r * r)).exp();
                        logits[b * nodes + n] = BONE_LOGIT_FLOOR + BONE_LOGIT_GAIN * bump;
                    }
                    logits[k * nodes + n] = BACKGROUND_LOGIT;
                }
            }
        }
        let logits = Tensor::new(vec![k + 1, resolution, resolution, resolution], logits)?;
        Ok(Self { geometry, logits })
    }

    pub fn num_channels(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn num_bones(&self) -> usize {
        self.num_channels() - 1
    }

    pub fn softmaxed(&self) -> SoftWeights {
        let c = self.num_channels();
        SoftWeights {
            geometry: self.geometry,
            channels: c,
            values: softmax_kernel(self.logits.data(), 1, c, self.geometry.num_nodes()),
        }
    }
}

/// Channel-softmaxed weight volume.
#[derive(Clone, Debug)]
pub struct SoftWeights {
    pub geometry: GridGeometry,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl SoftWeights {
    /// Trilinear sample of every channel; outside the box, pure background.
    pub fn sample(&self, x: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        match self.geometry.locate(x) {
            None => out[self.channels - 1] = 1.0,
            Some(cell) => {
                let nodes = self.geometry.num_nodes();
                for (ch, o) in out.iter_mut().enumerate() {
                    *o = (0..8).map(|c| cell.w[c] * self.values[ch * nodes + cell.idx[c]]).sum();
                }
            }
        }
        out
    }

    pub fn skeletal_warp(&self, x: Vec3, bones: &BoneTransformSet) -> (Vec3, f64) {
        let ev = warp_eval(&self.geometry, &self.values, &bones.flatten(), x);
        (ev.x_skel, ev.fg)
    }
}

pub fn sample_canonical_weights(vol: &WeightVolume, x: Vec3) -> Vec<f64> {
    vol.softmaxed().sample(x)
}

/// Skeletal warp of a single point. Returns `(x_skel, fg)`.
pub fn skeletal_warp(x: Vec3, bones: &BoneTransformSet, vol: &WeightVolume) -> (Vec3, f64) {
    vol.softmaxed().skeletal_warp(x, bones)
}

struct WarpEval {
    ys: Vec<Vec3>,
    ws: Vec<f64>,
    cells: Vec<Option<Cell>>,
    d: f64,
    x_skel: Vec3,
    fg: f64,
}

/// Weighted sum of bone candidates `y_i = R_i x + t_i` with weights
/// `w_c^i(y_i) / Σ_k w_c^k(y_k)`.
///
/// The sum is written relative to the highest-weight candidate so that equal
/// candidates (identity transforms) reproduce the input exactly.
fn warp_eval(geom: &GridGeometry, soft: &[f64], tf: &[f64], x: Vec3) -> WarpEval {
    let k = tf.len() / 12;
    let nodes = geom.num_nodes();
    let mut ys = Vec::with_capacity(k);
    let mut ws = Vec::with_capacity(k);
    let mut cells = Vec::with_capacity(k);
    for (i, t) in tf.chunks_exact(12).enumerate() {
        let r = [[t[0], t[1], t[2]], [t[3], t[4], t[5]], [t[6], t[7], t[8]]];
        let y = add(mat_vec(r, x), [t[9], t[10], t[11]]);
        let cell = geom.locate(y);
        let w = cell.map_or(0.0, |c| (0..8).map(|j| c.w[j] * soft[i * nodes + c.idx[j]]).sum());
        ys.push(y);
        ws.push(w);
        cells.push(cell);
    }
    let d: f64 = ws.iter().sum();
    let (x_skel, fg) = if d > WEIGHT_EPS {
        let m = (0..k).fold(0, |m, i| if ws[i] > ws[m] { i } else { m });
        let mut xs = ys[m];
        for i in (0..k).filter(|&i| i != m) {
            let diff = sub(ys[i], ys[m]);
            for a in 0..3 {
                xs[a] += ws[i] / d * diff[a];
            }
        }
        (xs, d.min(1.0))
    } else {
        (x, 0.0)
    };
    WarpEval {
        ys,
        ws,
        cells,
        d,
        x_skel,
        fg,
    }
}

/// Tape kernel for the skeletal warp of a batch of points.
/// Inputs: softmaxed weights `[K+1, nx, ny, nz]`, transforms `[F, K, 12]`.
/// Output `[n, 4]`: `x_skel` then `fg`.
struct SkeletalWarpFn {
    geometry: GridGeometry,
    bones: usize,
    points: Vec<Vec3>,
    frames: Vec<usize>,
}

impl Function for SkeletalWarpFn {
    fn name(&self) -> &'static str {
        "skeletal_warp"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (soft, tfs) = (inputs[0], inputs[1]);
        let k = self.bones;
        let nodes = self.geometry.num_nodes();
        let mut g_soft = needs[0].then(|| vec![0.0; soft.len()]);
        let mut g_tf = needs[1].then(|| vec![0.0; tfs.len()]);
        for (n, (&x, &f)) in self.points.iter().zip(&self.frames).enumerate() {
            let go = &g[4 * n..4 * n + 4];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            let tf = &tfs[f * 12 * k..(f + 1) * 12 * k];
            let ev = warp_eval(&self.geometry, soft, tf, x);
            if ev.d <= WEIGHT_EPS {
                continue;
            }
            let gx = [go[0], go[1], go[2]];
            let gfg = if ev.d < 1.0 { go[3] } else { 0.0 };
            for i in 0..k {
                let gw = (0..3).map(|a| gx[a] * (ev.ys[i][a] - ev.x_skel[a])).sum::<f64>() / ev.d + gfg;
                let mut gy: Vec3 = gx.map(|v| v * ev.ws[i] / ev.d);
                if let Some(cell) = ev.cells[i] {
                    for c in 0..8 {
                        let node = i * nodes + cell.idx[c];
                        if let Some(gs) = g_soft.as_mut() {
                            gs[node] += gw * cell.w[c];
                        }
                        for (g, dw) in gy.iter_mut().zip(cell.dw[c]) {
                            *g += gw * soft[node] * dw;
                        }
                    }
                }
                if let Some(gt) = g_tf.as_mut() {
                    let base = (f * k + i) * 12;
                    for r in 0..3 {
                        for c in 0..3 {
                            gt[base + 3 * r + c] += gy[r] * x[c];
                        }
                        gt[base + 9 + r] += gy[r];
                    }
                }
            }
        }
        vec![g_soft, g_tf]
    }
}

/// Skeletal warp of `points`, where `frames[n]` selects the transform row of
/// point `n`. Returns `[n, 4]` (`x_skel`, `fg`).
pub fn skeletal_warp_var(
    tape: &mut Tape,
    geometry: GridGeometry,
    soft_weights: Var,
    transforms: Var,
    points: &[Vec3],
    frames: &[usize],
) -> Result<Var, ModelError> {
    let tshape = tape.shape(transforms).to_vec();
    if tshape.len() != 3 || tshape[2] != 12 {
        return Err(ModelError::Config(format!("transforms must be [F, K, 12], got {tshape:?}")));
    }
    let (nf, k) = (tshape[0], tshape[1]);
    if tape.value(soft_weights).len() != (k + 1) * geometry.num_nodes() {
        return Err(ModelError::Config("weight volume does not match bone count".into()));
    }
    if points.len() != frames.len() || frames.iter().any(|&f| f >= nf) {
        return Err(ModelError::Config("point frame indices out of range".into()));
    }
    let (soft, tfs) = (tape.value(soft_weights), tape.value(transforms));
    let mut value = Vec::with_capacity(4 * points.len());
    for (&x, &f) in points.iter().zip(frames) {
        let ev = warp_eval(&geometry, soft, &tfs[f * 12 * k..(f + 1) * 12 * k], x);
        value.extend_from_slice(&ev.x_skel);
        value.push(ev.fg);
    }
    let func = SkeletalWarpFn {
        geometry,
        bones: k,
        points: points.to_vec(),
        frames: frames.to_vec(),
    };
    Ok(tape.custom(&[soft_weights, transforms], vec![points.len(), 4], value, Box::new(func))?)
}

/// Per-frame observation→canonical transforms under pose correction.
/// Input `[F, K, 3]` residuals, output `[F, K, 12]`. Jacobians come from
/// forward-mode dual numbers.
struct BoneTransformsFn {
    /// Per frame, row-major `[12K, 3K]`.
    jacobians: Vec<Vec<f64>>,
}

impl Function for BoneTransformsFn {
    fn name(&self) -> &'static str {
        "bone_transforms"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut gd = vec![0.0; inputs[0].len()];
        for (f, jac) in self.jacobians.iter().enumerate() {
            let n_in = gd.len() / self.jacobians.len();
            let n_out = jac.len() / n_in;
            let go = &g[f * n_out..(f + 1) * n_out];
            let gi = &mut gd[f * n_in..(f + 1) * n_in];
            for (r, &gv) in go.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                for (c, slot) in gi.iter_mut().enumerate() {
                    *slot += gv * jac[r * n_in + c];
                }
            }
        }
        vec![Some(gd)]
    }
}

fn flatten_transforms<S: Copy>(tf: &[([[S; 3]; 3], [S; 3])]) -> Vec<S> {
    let mut out = Vec::with_capacity(12 * tf.len());
    for (r, t) in tf {
        out.extend(r.iter().flatten().copied());
        out.extend(t.iter().copied());
    }
    out
}

/// Transforms for every pose in `poses`, differentiable in `delta: [F, K, 3]`.
pub fn bone_transforms_var(tape: &mut Tape, skel: &Skeleton, poses: &[Pose], delta: Var) -> Result<Var, ModelError> {
    let k = skel.num_bones();
    let dshape = tape.shape(delta).to_vec();
    if dshape != [poses.len(), k, 3] {
        return Err(ModelError::ParamShape {
            name: POSE_CORRECTION_PARAM.into(),
            expected: vec![poses.len(), k, 3],
            actual: dshape,
        });
    }
    let want_jac = tape.requires_grad(delta);
    let dv = tape.value(delta).to_vec();
    let mut value = Vec::with_capacity(poses.len() * 12 * k);
    let mut jacobians = Vec::new();
    for (f, pose) in poses.iter().enumerate() {
        pose.validate(skel)?;
        let d = &dv[f * 3 * k..(f + 1) * 3 * k];
        let dd: Vec<Vec3> = d.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let local = corrected_local_rotations(pose, &dd);
        value.extend(flatten_transforms(&transforms_from_local(skel, &pose.joints, &local)));
        if want_jac {
            let n_in = 3 * k;
            let mut jac = vec![0.0; 12 * k * n_in];
            for c in 0..n_in {
                let duals: Vec<[Dual; 3]> = (0..k)
                    .map(|b| std::array::from_fn(|a| if 3 * b + a == c { Dual::variable(dd[b][a]) } else { Dual::constant(dd[b][a]) }))
                    .collect();
                let local = corrected_local_rotations(pose, &duals);
                let out = flatten_transforms(&transforms_from_local(skel, &pose.joints, &local));
                for (r, v) in out.iter().enumerate() {
                    jac[r * n_in + c] = v.d;
                }
            }
            jacobians.push(jac);
        }
    }
    Ok(tape.custom(&[delta], vec![poses.len(), k, 12], value, Box::new(BoneTransformsFn { jacobians }))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonRigidConfig {
    pub encoding: PositionalEncoding,
    /// Hidden ReLU layers; a zero-initialized output layer follows.
    pub depth: usize,
    pub width: usize,
}

impl Default for NonRigidConfig {
    fn default() -> Self {
        Self {
            encoding: PositionalEncoding {
                num_frequencies: 6,
                include_input: true,
            },
            depth: 4,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub grid_resolution: usize,
    pub nonrigid: NonRigidConfig,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 32,
            nonrigid: NonRigidConfig::default(),
        }
    }
}

pub fn init_motion<R: Rng>(
    params: &mut ParamSet,
    skel: &Skeleton,
    cfg: &MotionConfig,
    num_frames: usize,
    rng: &mut R,
) -> Result<(), ModelError> {
    let vol = WeightVolume::initialize(skel, cfg.grid_resolution)?;
    params.insert(WEIGHTS_PARAM, vol.logits);
    let k = skel.num_bones();
    let nr = &cfg.nonrigid;
    let mut fan_in = nr.encoding.output_dim() + 3 * k;
    for i in 0..nr.depth {
        init_dense(params, &format!("nonrigid.layer{i}"), fan_in, nr.width, false, rng);
        fan_in = nr.width;
    }
    init_dense(params, &format!("nonrigid.layer{}", nr.depth), fan_in, 3, true, rng);
    params.insert(POSE_CORRECTION_PARAM, Tensor::zeros(vec![num_frames, k, 3]));
    Ok(())
}

/// Non-rigid offsets for `x_skel: [n, 3]` conditioned on `pose_cond`
/// (`[n, 3K]` flattened rotations).
pub fn nonrigid_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &NonRigidConfig,
    x_skel: Var,
    pose_cond: Vec<f64>,
) -> Result<Var, ModelError> {
    let n = tape.shape(x_skel)[0];
    let cond_dim = pose_cond.len().checked_div(n).unwrap_or(0);
    let enc = cfg.encoding.apply(tape, x_skel)?;
    let cond = tape.constant(vec![n, cond_dim], pose_cond)?;
    let mut h = tape.concat(&[enc, cond])?;
    for i in 0..cfg.depth {
        let z = dense(tape, bound, &format!("nonrigid.layer{i}"), h)?;
        h = tape.relu(z);
    }
    dense(tape, bound, &format!("nonrigid.layer{}", cfg.depth), h)
}

/// Single-point non-rigid offset.
pub fn nonrigid_offset(params: &ParamSet, cfg: &NonRigidConfig, x_skel: Vec3, pose: &Pose) -> Result<Vec3, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(vec![1, 3], x_skel.to_vec())?;
    let out = nonrigid_forward(&mut tape, &bound, cfg, x, pose.flat_rotations())?;
    let v = tape.value(out);
    Ok([v[0], v[1], v[2]])
}

/// Per-tape motion state shared by every point warped on that tape.
#[derive(Clone, Copy, Debug)]
pub struct MotionContext {
    pub soft_weights: Var,
    pub transforms: Var,
    pub geometry: GridGeometry,
}

/// Binds the weight volume and the transforms of `poses`. With
/// `correction_rows`, pose `f` uses row `correction_rows[f]` of the trained
/// residuals; otherwise no correction is applied.
pub fn prepare_motion(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &Model,
    poses: &[Pose],
    correction_rows: Option<&[usize]>,
) -> Result<MotionContext, ModelError> {
    let logits = bound.get(WEIGHTS_PARAM)?;
    let soft_weights = tape.softmax(logits, 0)?;
    let k = model.skeleton.num_bones();
    let delta = match correction_rows {
        Some(rows) => {
            let all = bound.get(POSE_CORRECTION_PARAM)?;
            let total = tape.shape(all)[0];
            if rows.len() != poses.len() || rows.iter().any(|&r| r >= total) {
                return Err(ModelError::Config("pose-correction rows out of range".into()));
            }
            let flat = tape.reshape(all, vec![total, 3 * k])?;
            let picked = tape.gather_rows(flat, rows)?;
            tape.reshape(picked, vec![poses.len(), k, 3])?
        }
        None => tape.constant(vec![poses.len(), k, 3], vec![0.0; poses.len() * k * 3])?,
    };
    let transforms = bone_transforms_var(tape, &model.skeleton, poses, delta)?;
    Ok(MotionContext {
        soft_weights,
        transforms,
        geometry: model.geometry(),
    })
}

/// Warped samples. Only points with `fg > 0` ("active") continue to the
/// canonical field; the rest have zero opacity.
#[derive(Clone, Debug)]
pub struct WarpedPoints {
    /// `[n, 4]` skeletal warp of every point.
    pub skeletal: Var,
    pub active: Vec<usize>,
    /// `[n_active, 3]` canonical positions.
    pub canonical: Option<Var>,
    /// `[n_active, 1]` foreground likelihood.
    pub fg: Option<Var>,
}

/// Full motion field `T = T_skel + T_NR` on a batch of observation points.
#[allow(clippy::too_many_arguments)]
pub fn warp_points(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &Model,
    ctx: &MotionContext,
    poses: &[Pose],
    points: &[Vec3],
    frames: &[usize],
    nonrigid: bool,
) -> Result<WarpedPoints, ModelError> {
    let skeletal = skeletal_warp_var(tape, ctx.geometry, ctx.soft_weights, ctx.transforms, points, frames)?;
    let active: Vec<usize> = tape.value(skeletal).chunks_exact(4).enumerate().filter(|(_, r)| r[3] > 0.0).map(|(i, _)| i).collect();
    if active.is_empty() {
        return Ok(WarpedPoints {
            skeletal,
            active,
            canonical: None,
            fg: None,
        });
    }
    let rows = tape.gather_rows(skeletal, &active)?;
    let x_skel = tape.slice_cols(rows, 0, 3)?;
    let fg = tape.slice_cols(rows, 3, 4)?;
    let canonical = if nonrigid {
        let cond: Vec<f64> = active.iter().flat_map(|&i| poses[frames[i]].flat_rotations()).collect();
        let dx = nonrigid_forward(tape, bound, &model.config.motion.nonrigid, x_skel, cond)?;
        tape.add(x_skel, dx)?
    } else {
        x_skel
    };
    Ok(WarpedPoints {
        skeletal,
        active,
        canonical: Some(canonical),
        fg: Some(fg),
    })
}

/// Single-point motion field. `frame` selects a trained pose-correction row.
pub fn warp_to_canonical(model: &Model, x: Vec3, pose: &Pose, frame: Option<usize>, nonrigid: bool) -> Result<(Vec3, f64), ModelError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let poses = std::slice::from_ref(pose);
    let rows = frame.map(|f| vec![f]);
    let ctx = prepare_motion(&mut tape, &bound, model, poses, rows.as_deref())?;
    let w = warp_points(&mut tape, &bound, model, &ctx, poses, &[x], &[0], nonrigid)?;
    match w.canonical {
        None => Ok((x, 0.0)),
        Some(c) => {
            let v = tape.value(c);
            Ok(([v[0], v[1], v[2]], tape.value(w.fg.expect("active"))[0]))
        }
    }
}

/// Transforms for a pose without correction, as plain numbers.
pub fn uncorrected_transforms(skel: &Skeleton, pose: &Pose) -> Result<BoneTransformSet, ModelError> {
    Ok(bone_transforms(skel, pose)?)
}

/// Canonical candidate of `x` under bone `i`, exposed for diagnostics.
pub fn bone_candidate(bones: &BoneTransformSet, i: usize, x: Vec3) -> Vec3 {
    add(mat_vec(bones.rotations[i], x), bones.translations[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::canonical_surface;
    use crate::canonicalfield::CanonicalFieldConfig;
    use crate::geometry::axis_angle_to_matrix;
    use crate::gradcheck::{check_gradient, GradCheckTolerance};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            canonical: CanonicalFieldConfig {
                encoding: PositionalEncoding {
                    num_frequencies: 2,
                    include_input: true,
                },
                depth: 2,
                width: 8,
                skip_layer: None,
                num_classes: 5,
            },
            motion: MotionConfig {
                grid_resolution: 12,
                nonrigid: NonRigidConfig {
                    encoding: PositionalEncoding {
                        num_frequencies: 2,
                        include_input: true,
                    },
                    depth: 2,
                    width: 8,
                },
            },
        }
    }

    fn small_model(frames: usize) -> Model {
        Model::new(Skeleton::humanoid4(), small_config(), frames, 3).unwrap()
    }

    fn random_pose(skel: &Skeleton, rng: &mut ChaCha8Rng, scale: f64) -> Pose {
        let mut pose = skel.rest_pose();
        for w in pose.rotations.iter_mut() {
            *w = std::array::from_fn(|_| rng.random_range(-scale..scale));
        }
        pose
    }

    fn constant_weights(geometry: GridGeometry, per_channel: &[f64]) -> SoftWeights {
        let nodes = geometry.num_nodes();
        SoftWeights {
            geometry,
            channels: per_channel.len(),
            values: per_channel.iter().flat_map(|&v| std::iter::repeat_n(v, nodes)).collect(),
        }
    }

    fn unit_box(res: usize) -> GridGeometry {
        GridGeometry {
            res: [res; 3],
            min: [-5.0; 3],
            max: [5.0; 3],
        }
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> (crate::geometry::Mat3, Vec3) {
        let w: Vec3 = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        let t: Vec3 = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        (axis_angle_to_matrix(w), t)
    }

    #[test]
    fn outside_bbox_is_pure_background() {
        let vol = WeightVolume::initialize(&Skeleton::humanoid4(), 8).unwrap();
        let w = sample_canonical_weights(&vol, [10.0, 0.0, 0.0]);
        assert_eq!(w, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let mut vol = WeightVolume::initialize(&Skeleton::humanoid4(), 8).unwrap();
        vol.logits.data_mut().fill(0.7);
        for x in [[0.0, 0.2, 0.0], [0.3, -0.1, 0.05], [0.1, 0.6, -0.1]] {
            for w in sample_canonical_weights(&vol, x) {
                assert!((w - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn node_sample_equals_direct_index() {
        let mut vol = WeightVolume::initialize(&Skeleton::humanoid4(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        vol.logits.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        let g = vol.geometry;
        let nodes = g.num_nodes();
        let c = vol.num_channels();
        for (i, j, k) in [(3, 4, 5), (0, 0, 0), (7, 7, 7), (2, 6, 1)] {
            let n = g.node_index(i, j, k);
            let logits: Vec<f64> = (0..c).map(|ch| vol.logits.data()[ch * nodes + n]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let got = sample_canonical_weights(&vol, g.node_position(i, j, k));
            for ch in 0..c {
                assert!((got[ch] - (logits[ch] - m).exp() / z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmaxed_channels_sum_to_one() {
        let vol = WeightVolume::initialize(&Skeleton::humanoid4(), 10).unwrap();
        let soft = vol.softmaxed();
        let nodes = vol.geometry.num_nodes();
        for n in 0..nodes {
            let s: f64 = (0..soft.channels).map(|c| soft.values[c * nodes + n]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn initial_volume_covers_the_body_only() {
        let skel = Skeleton::humanoid4();
        let vol = WeightVolume::initialize(&skel, 32).unwrap();
        let soft = vol.softmaxed();
        let rest = bone_transforms(&skel, &skel.rest_pose()).unwrap();
        let surf = canonical_surface(&skel, 16).unwrap();
        for (p, &b) in surf.positions.iter().zip(&surf.bones) {
            let inner = add(p.map(|v| v * 0.0), crate::geometry::scale(sub(*p, skel.rest_joints()[b]), 0.5));
            let probe = add(skel.rest_joints()[b], inner);
            let (_, fg) = soft.skeletal_warp(probe, &rest);
            assert!(fg > 0.9, "fg {fg} inside bone {b}");
        }
        let (_, fg) = soft.skeletal_warp([0.45, -0.45, 0.0], &rest);
        assert_eq!(fg, 0.0);
    }

    #[test]
    fn tpose_warp_is_exact_identity() {
        let skel = Skeleton::humanoid4();
        let vol = WeightVolume::initialize(&skel, 16).unwrap();
        let rest = bone_transforms(&skel, &skel.rest_pose()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (lo, hi) = (vol.geometry.min, vol.geometry.max);
        let mut active = 0;
        for _ in 0..2000 {
            let x: Vec3 = std::array::from_fn(|a| rng.random_range(lo[a]..hi[a]));
            let (xs, fg) = skeletal_warp(x, &rest, &vol);
            assert_eq!(xs, x);
            if fg > 0.0 {
                active += 1;
            }
        }
        assert!(active > 50);
    }

    #[test]
    fn single_bone_warp_is_its_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let soft = constant_weights(unit_box(4), &[1.0, 0.0]);
        for _ in 0..20 {
            let (r, t) = random_transform(&mut rng);
            let bones = BoneTransformSet {
                rotations: vec![r],
                translations: vec![t],
            };
            let x: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let (xs, fg) = soft.skeletal_warp(x, &bones);
            assert_eq!(xs, add(mat_vec(r, x), t));
            assert!((fg - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_bone_weighted_sum_matches_hand_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let soft = constant_weights(unit_box(4), &[0.3, 0.7, 0.0]);
        for _ in 0..20 {
            let (r0, t0) = random_transform(&mut rng);
            let (r1, t1) = random_transform(&mut rng);
            let bones = BoneTransformSet {
                rotations: vec![r0, r1],
                translations: vec![t0, t1],
            };
            let x: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let y0 = add(mat_vec(r0, x), t0);
            let y1 = add(mat_vec(r1, x), t1);
            let (xs, fg) = soft.skeletal_warp(x, &bones);
            for a in 0..3 {
                assert!((xs[a] - (0.3 * y0[a] + 0.7 * y1[a])).abs() < 1e-12);
            }
            assert!((fg - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_weight_points_pass_through() {
        let soft = constant_weights(unit_box(4), &[1e-7, 1e-7, 1.0]);
        let bones = BoneTransformSet {
            rotations: vec![axis_angle_to_matrix([0.0, 0.0, 1.0]); 2],
            translations: vec![[0.1, 0.2, 0.3]; 2],
        };
        let x = [0.4, -0.2, 0.1];
        assert_eq!(soft.skeletal_warp(x, &bones), (x, 0.0));
    }

    #[test]
    fn nonrigid_zero_final_layer_gives_zero_offset() {
        let model = small_model(1);
        let cfg = &model.config.motion.nonrigid;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&model.skeleton, &mut rng, 1.0);
        for x in [[0.0; 3], [0.3, -0.7, 0.2], [5.0, 5.0, -5.0]] {
            assert_eq!(nonrigid_offset(&model.params, cfg, x, &pose).unwrap(), [0.0; 3]);
        }
    }

    fn perturbed_nonrigid(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = format!("nonrigid.layer{}", model.config.motion.nonrigid.depth);
        for suffix in ["w", "b"] {
            let t = model.params.get_mut(&format!("{last}.{suffix}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }

    #[test]
    fn nonrigid_replay_is_deterministic() {
        let mut model = small_model(1);
        perturbed_nonrigid(&mut model, 2);
        let pose = random_pose(&model.skeleton, &mut ChaCha8Rng::seed_from_u64(3), 1.0);
        let cfg = &model.config.motion.nonrigid;
        let a = nonrigid_offset(&model.params, cfg, [0.1, 0.2, 0.3], &pose).unwrap();
        let b = nonrigid_offset(&model.params, cfg, [0.1, 0.2, 0.3], &pose).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, [0.0; 3]);
    }

    #[test]
    fn nonrigid_gradient_matches_finite_differences() {
        let mut model = small_model(1);
        perturbed_nonrigid(&mut model, 7);
        let cfg = model.config.motion.nonrigid.clone();
        let names: Vec<String> = model.params.names().into_iter().filter(|n| n.starts_with("nonrigid")).collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let pose = random_pose(&model.skeleton, &mut ChaCha8Rng::seed_from_u64(8), 1.0);
        let pts = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let report = check_gradient(
            &tensors,
            |ts, _| {
                let mut ps = ParamSet::new();
                for (n, t) in names.iter().zip(ts) {
                    ps.insert(n.clone(), t.clone());
                }
                let mut tape = Tape::new();
                let bound = ps.bind(&mut tape);
                let x = tape.constant(vec![2, 3], pts.to_vec()).unwrap();
                let mut cond = pose.flat_rotations();
                cond.extend(pose.flat_rotations());
                let out = nonrigid_forward(&mut tape, &bound, &cfg, x, cond).unwrap();
                let sq = tape.mul(out, out).unwrap();
                let loss = tape.sum(sq);
                tape.backward(loss).unwrap();
                let grads = names.iter().map(|n| tape.grad(bound.get(n).unwrap()).map(<[f64]>::to_vec).unwrap_or_default()).collect();
                (tape.scalar(loss), grads)
            },
            1e-5,
            GradCheckTolerance::default(),
            40,
            11,
        );
        assert!(report.passed(), "max rel {}", report.max_rel_error());
    }

    /// Scalar objective over the skeletal warp of a few posed points; used to
    /// check gradients with respect to logits and pose residuals.
    fn warp_objective(model: &Model, poses: &[Pose], logits: &Tensor, delta: &Tensor, points: &[Vec3], frames: &[usize]) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let d = tape.leaf(delta);
        let soft = tape.softmax(l, 0).unwrap();
        let tf = bone_transforms_var(&mut tape, &model.skeleton, poses, d).unwrap();
        let out = skeletal_warp_var(&mut tape, model.geometry(), soft, tf, points, frames).unwrap();
        let n = points.len();
        let coef = tape.constant(vec![n, 4], (0..4 * n).map(|i| 0.3 + 0.17 * (i % 7) as f64).collect()).unwrap();
        let weighted = tape.mul(out, coef).unwrap();
        let sq = tape.mul(weighted, weighted).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let grads = [l, d].iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
        (tape.scalar(loss), grads)
    }

    #[test]
    fn skeletal_warp_gradients_match_finite_differences() {
        let model = small_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let poses = vec![random_pose(&model.skeleton, &mut rng, 0.4), random_pose(&model.skeleton, &mut rng, 0.4)];
        let mut logits = model.params.get(WEIGHTS_PARAM).unwrap().clone();
        // Soften the prior so many channels carry gradient.
        logits.data_mut().iter_mut().for_each(|v| *v = *v * 0.15 + rng.random_range(-0.2..0.2));
        let mut delta = Tensor::zeros(vec![2, 4, 3]).with_grad();
        delta.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        // Observation points near the posed body.
        let mut points = Vec::new();
        let mut frames = Vec::new();
        for (f, pose) in poses.iter().enumerate() {
            let surf = crate::bodymodel::generate_surface(&model.skeleton, pose, 2).unwrap();
            for p in surf.positions.iter().step_by(2) {
                points.push(p.map(|v| v * 0.97));
                frames.push(f);
            }
        }
        let report = check_gradient(
            &[logits, delta],
            |ts, _| warp_objective(&model, &poses, &ts[0], &ts[1], &points, &frames),
            1e-6,
            GradCheckTolerance::default(),
            60,
            13,
        );
        assert!(report.passed(), "failures: {:?}", report.failures().take(5).collect::<Vec<_>>());
        assert!(report.count_for(1) == 24);
    }

    #[test]
    fn bone_transforms_op_matches_plain_forward_kinematics() {
        let model = small_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pose = random_pose(&model.skeleton, &mut rng, 1.0);
        let delta: Vec<f64> = (0..12).map(|_| rng.random_range(-0.3..0.3)).collect();
        let mut tape = Tape::new();
        let d = tape.constant(vec![1, 4, 3], delta.clone()).unwrap();
        let tf = bone_transforms_var(&mut tape, &model.skeleton, std::slice::from_ref(&pose), d).unwrap();
        let dd: Vec<Vec3> = delta.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let corrected = crate::bodymodel::apply_pose_correction(&pose, &dd).unwrap();
        let oracle = bone_transforms(&model.skeleton, &corrected).unwrap().flatten();
        for (a, b) in tape.value(tf).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_to_canonical_fixpoints() {
        let model = small_model(1);
        let rest = model.skeleton.rest_pose();
        let soft = model.weight_volume().unwrap().softmaxed();
        let rest_bones = bone_transforms(&model.skeleton, &rest).unwrap();
        for x in [[0.0, 0.2, 0.0], [0.3, 0.42, 0.01], [0.08, -0.3, 0.0]] {
            let (xc, fg) = warp_to_canonical(&model, x, &rest, None, false).unwrap();
            assert_eq!(xc, x);
            assert_eq!(fg, soft.skeletal_warp(x, &rest_bones).1);
            // A zeroed non-rigid net adds exactly nothing.
            assert_eq!(warp_to_canonical(&model, x, &rest, Some(0), true).unwrap().0, x);
        }
        let far = [0.5, -0.5, 0.3];
        assert_eq!(warp_to_canonical(&model, far, &rest, None, true).unwrap(), (far, 0.0));
    }

    #[test]
    fn warp_to_canonical_matches_stepwise_composition() {
        let mut model = small_model(2);
        perturbed_nonrigid(&mut model, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let delta = model.params.get_mut(POSE_CORRECTION_PARAM).unwrap();
        delta.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        let pose = random_pose(&model.skeleton, &mut rng, 0.5);
        let row: Vec<Vec3> = model.params.get(POSE_CORRECTION_PARAM).unwrap().data()[12..24].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let corrected = crate::bodymodel::apply_pose_correction(&pose, &row).unwrap();
        let bones = bone_transforms(&model.skeleton, &corrected).unwrap();
        let vol = model.weight_volume().unwrap();
        let surf = crate::bodymodel::generate_surface(&model.skeleton, &pose, 3).unwrap();
        let mut checked = 0;
        for p in surf.positions.iter().map(|p| p.map(|v| v * 0.95)) {
            let (xs, fg) = skeletal_warp(p, &bones, &vol);
            let (xc, fgc) = warp_to_canonical(&model, p, &pose, Some(1), true).unwrap();
            assert!((fg - fgc).abs() < 1e-12);
            if fg == 0.0 {
                assert_eq!(xc, p);
                continue;
            }
            let off = nonrigid_offset(&model.params, &model.config.motion.nonrigid, xs, &pose).unwrap();
            for a in 0..3 {
                assert!((xc[a] - (xs[a] + off[a])).abs() < 1e-12);
            }
            checked += 1;
        }
        assert!(checked > 4);
    }

    proptest! {
        #[test]
        fn fg_in_unit_interval_and_weights_normalized(
            w in proptest::collection::vec(-2.0f64..2.0, 12),
            x in proptest::array::uniform3(-0.8f64..0.9),
        ) {
            let skel = Skeleton::humanoid4();
            let mut pose = skel.rest_pose();
            for (b, r) in pose.rotations.iter_mut().enumerate() {
                *r = [w[3 * b], w[3 * b + 1], w[3 * b + 2]];
            }
            let vol = WeightVolume::initialize(&skel, 10).unwrap();
            let bones = bone_transforms(&skel, &pose).unwrap();
            let soft = vol.softmaxed();
            let ev = warp_eval(&soft.geometry, &soft.values, &bones.flatten(), x);
            prop_assert!((0.0..=1.0).contains(&ev.fg));
            if ev.d > WEIGHT_EPS {
                let s: f64 = ev.ws.iter().map(|wi| wi / ev.d).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
