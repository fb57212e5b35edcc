//! Synthetic capsule-body scenes: analytic ground-truth rendering, simulated
//! parser noise, and the on-disk dataset (PPM/PGM files plus `manifest.json`).

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodymodel::{bone_transforms, BodyError, Pose, Skeleton};
use crate::geometry::{add, dot, mat_vec, normalize, scale, sub, Vec3};
use crate::pnm::{self, dequantize, quantize, Image, PnmError};
use crate::renderer::{Camera, RenderError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {field}: {msg}")]
    Invalid { file: String, field: String, msg: String },
    #[error("{field}: {source}")]
    Image {
        field: String,
        #[source]
        source: PnmError,
    },
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

fn invalid(file: impl Into<String>, field: impl Into<String>, msg: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        file: file.into(),
        field: field.into(),
        msg: msg.into(),
    }
}

/// Appearance and semantic class of one bone's capsule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub name: String,
    pub color: Vec3,
    pub class: usize,
}

/// Directional light fixed in canonical space, so shading travels with the
/// body and stays a function of canonical position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    pub direction: Vec3,
    pub ambient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Width in pixels of the part-boundary band that bleeds into a neighbor.
    pub boundary_width: usize,
    pub flip_prob: f64,
    pub blob_count: usize,
    /// Area of each elliptical blob as a fraction of the image.
    pub blob_area: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            boundary_width: 1,
            flip_prob: 0.03,
            blob_count: 1,
            blob_area: 0.004,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            boundary_width: 0,
            flip_prob: 0.0,
            blob_count: 0,
            blob_area: 0.0,
        }
    }
}

/// Per-bone sinusoidal joint angles: `ω = base + amplitude·sin(2π·phase + φ)`
/// with seeded phase offsets `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub base: Vec<Vec3>,
    pub amplitude: Vec<Vec3>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    pub skeleton: Skeleton,
    pub parts: Vec<PartSpec>,
    pub class_names: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub train_cameras: usize,
    pub heldout_cameras: usize,
    pub camera_distance: f64,
    pub camera_elevation: f64,
    pub focal: f64,
    pub light: LightSpec,
    pub noise: NoiseConfig,
    pub motion: MotionSpec,
    pub heldout_poses: usize,
    pub seed: u64,
}

impl SceneConfig {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "humanoid4" => Some(Self::humanoid4()),
            _ => None,
        }
    }

    pub fn humanoid4() -> Self {
        let part = |name: &str, color: Vec3, class| PartSpec {
            name: name.into(),
            color,
            class,
        };
        Self {
            name: "humanoid4".into(),
            skeleton: Skeleton::humanoid4(),
            parts: vec![
                part("torso", [0.85, 0.3, 0.25], 1),
                part("head", [0.95, 0.8, 0.6], 2),
                part("arm", [0.25, 0.45, 0.9], 3),
                part("leg", [0.3, 0.75, 0.35], 4),
            ],
            class_names: ["background", "torso", "head", "arm", "leg"].map(String::from).to_vec(),
            width: 64,
            height: 64,
            frames: 30,
            train_cameras: 3,
            heldout_cameras: 1,
            camera_distance: 3.0,
            camera_elevation: 0.25,
            focal: 120.0,
            light: LightSpec {
                direction: normalize([0.35, 0.6, 0.7]),
                ambient: 0.45,
            },
            noise: NoiseConfig::default(),
            motion: MotionSpec {
                base: vec![[0.0; 3], [0.0; 3], [0.0, 0.0, -0.55], [0.0, 0.0, 0.05]],
                amplitude: vec![[0.08, 0.45, 0.06], [0.25, 0.35, 0.1], [0.3, 0.3, 0.45], [0.5, 0.1, 0.12]],
            },
            heldout_poses: 4,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let k = self.skeleton.num_bones();
        let l = self.class_names.len();
        let fail = |m: String| Err(SceneError::Config(m));
        if self.parts.len() != k || self.motion.base.len() != k || self.motion.amplitude.len() != k {
            return fail(format!("parts and motion must list {k} bones"));
        }
        if !(2..=256).contains(&l) {
            return fail("need between 2 and 256 classes".into());
        }
        if let Some(p) = self.parts.iter().find(|p| p.class == 0 || p.class >= l) {
            return fail(format!("part `{}` has class {} outside 1..{l}", p.name, p.class));
        }
        if self.width == 0 || self.height == 0 || self.frames == 0 || self.train_cameras == 0 {
            return fail("image size, frame count and training cameras must be nonzero".into());
        }
        if !(self.focal > 0.0 && self.camera_distance > 0.0) {
            return fail("focal length and camera distance must be positive".into());
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.flip_prob) || !(0.0..1.0).contains(&n.blob_area) {
            return fail("noise probabilities must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Center of the rest body; cameras look here.
    pub fn target(&self) -> Vec3 {
        let (lo, hi) = self.skeleton.canonical_bounds();
        std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]))
    }

    /// Training cameras evenly spaced in azimuth; held-out cameras halfway
    /// between consecutive training cameras.
    pub fn cameras(&self) -> Vec<(Split, Camera)> {
        let target = self.target();
        let place = |az: f64| {
            let eye = [
                target[0] + self.camera_distance * az.sin(),
                target[1] + self.camera_elevation * self.camera_distance,
                target[2] + self.camera_distance * az.cos(),
            ];
            Camera::look_at(eye, target, [0.0, 1.0, 0.0], self.focal, self.width, self.height)
        };
        let step = std::f64::consts::TAU / self.train_cameras as f64;
        let mut out: Vec<(Split, Camera)> = (0..self.train_cameras).map(|i| (Split::Train, place(i as f64 * step))).collect();
        out.extend((0..self.heldout_cameras).map(|i| (Split::Heldout, place((i as f64 + 0.5) * step))));
        out
    }

    fn phase_offsets(&self) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        (0..self.skeleton.num_bones())
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)))
            .collect()
    }

    /// Pose at `phase` ∈ [0, 1) along the looping trajectory.
    pub fn pose_at(&self, phase: f64) -> Pose {
        let offsets = self.phase_offsets();
        let mut pose = self.skeleton.rest_pose();
        for (b, w) in pose.rotations.iter_mut().enumerate() {
            *w = std::array::from_fn(|a| {
                self.motion.base[b][a] + self.motion.amplitude[b][a] * (std::f64::consts::TAU * phase + offsets[b][a]).sin()
            });
        }
        pose
    }

    pub fn frame_pose(&self, frame: usize) -> Pose {
        self.pose_at(frame as f64 / self.frames as f64)
    }

    /// Poses halfway between training frames, never seen in training.
    pub fn heldout_pose_list(&self) -> Vec<Pose> {
        (0..self.heldout_poses)
            .map(|i| {
                let f = (i * self.frames) / self.heldout_poses.max(1);
                self.pose_at((f as f64 + 0.5) / self.frames as f64)
            })
            .collect()
    }
}

/// `count` frames spread evenly over `0..frames`; nested for growing counts
/// that divide each other.
pub fn labeled_subset(frames: usize, count: usize) -> Vec<usize> {
    let count = count.min(frames);
    (0..count).map(|i| i * frames / count).collect()
}

/// Posed capsule in observation space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

fn sphere_hit(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Option<f64> {
    let oc = sub(o, c);
    let b = dot(d, oc);
    let h = b * b - (dot(oc, oc) - r * r);
    if h < 0.0 {
        return None;
    }
    let s = h.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > 0.0)
}

/// First positive hit of the unit-direction ray `o + t·d` with a capsule.
pub fn ray_capsule(o: Vec3, d: Vec3, cap: &Capsule) -> Option<f64> {
    let ba = sub(cap.b, cap.a);
    let oa = sub(o, cap.a);
    let baba = dot(ba, ba);
    let bard = dot(ba, d);
    let baoa = dot(ba, oa);
    let qa = baba - bard * bard;
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    if qa > 1e-12 * baba.max(1e-300) {
        let qb = baba * dot(d, oa) - baoa * bard;
        let qc = baba * dot(oa, oa) - baoa * baoa - cap.radius * cap.radius * baba;
        let h = qb * qb - qa * qc;
        if h >= 0.0 {
            let s = h.sqrt();
            for t in [(-qb - s) / qa, (-qb + s) / qa] {
                let y = baoa + t * bard;
                if (0.0..=baba).contains(&y) {
                    keep(t);
                }
            }
        }
    }
    for c in [cap.a, cap.b] {
        if let Some(t) = sphere_hit(o, d, c, cap.radius) {
            keep(t);
        }
    }
    best
}

/// Outward capsule normal at a surface point.
pub fn capsule_normal(cap: &Capsule, p: Vec3) -> Vec3 {
    let ba = sub(cap.b, cap.a);
    let denom = dot(ba, ba);
    let t = if denom > 0.0 { (dot(sub(p, cap.a), ba) / denom).clamp(0.0, 1.0) } else { 0.0 };
    normalize(sub(p, add(cap.a, scale(ba, t))))
}

pub fn posed_capsules(skel: &Skeleton, pose: &Pose) -> Result<Vec<Capsule>, BodyError> {
    let bones = bone_transforms(skel, pose)?;
    Ok((0..skel.num_bones())
        .map(|b| Capsule {
            a: bones.to_observation(b, skel.rest_joints()[b]),
            b: bones.to_observation(b, skel.rest_tails()[b]),
            radius: skel.bone_radii()[b],
        })
        .collect())
}

/// First hit over a set of capsules: `(distance, capsule index)`.
pub fn first_hit(o: Vec3, d: Vec3, caps: &[Capsule]) -> Option<(f64, usize)> {
    caps.iter()
        .enumerate()
        .filter_map(|(i, c)| ray_capsule(o, d, c).map(|t| (t, i)))
        .fold(None, |best: Option<(f64, usize)>, h| match best {
            Some(b) if b.0 <= h.0 => Some(b),
            _ => Some(h),
        })
}

/// Ground-truth view; `depth` is the distance along the pixel ray, infinite
/// where the body is missed.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticView {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<bool>,
    pub labels: Vec<u8>,
    pub depth: Vec<f64>,
    pub bone: Vec<Option<usize>>,
}

/// One ray per pixel center against the posed capsules. Color is the part
/// color under a Lambert term evaluated with the canonical-space normal.
pub fn analytic_render(skel: &Skeleton, pose: &Pose, cam: &Camera, parts: &[PartSpec], light: &LightSpec) -> Result<AnalyticView, SceneError> {
    cam.validate()?;
    if parts.len() != skel.num_bones() {
        return Err(SceneError::Config(format!("{} parts for {} bones", parts.len(), skel.num_bones())));
    }
    let caps = posed_capsules(skel, pose)?;
    let bones = bone_transforms(skel, pose)?;
    let (w, h) = (cam.width, cam.height);
    let o = cam.center();
    let l = normalize(light.direction);
    let mut view = AnalyticView {
        width: w,
        height: h,
        rgb: vec![0.0; 3 * w * h],
        mask: vec![false; w * h],
        labels: vec![0; w * h],
        depth: vec![f64::INFINITY; w * h],
        bone: vec![None; w * h],
    };
    for v in 0..h {
        for u in 0..w {
            let d = cam.pixel_direction(u, v);
            let Some((t, b)) = first_hit(o, d, &caps) else { continue };
            let p = v * w + u;
            let n_obs = capsule_normal(&caps[b], add(o, scale(d, t)));
            let n_can = mat_vec(bones.rotations[b], n_obs);
            let shade = light.ambient + (1.0 - light.ambient) * dot(n_can, l).max(0.0);
            for c in 0..3 {
                view.rgb[3 * p + c] = parts[b].color[c] * shade;
            }
            view.mask[p] = true;
            view.labels[p] = parts[b].class as u8;
            view.depth[p] = t;
            view.bone[p] = Some(b);
        }
    }
    Ok(view)
}

fn foreground_classes(num_classes: usize) -> Vec<u8> {
    (1..num_classes as u8).collect()
}

/// Simulated parser errors on foreground pixels, applied in order: a band of
/// `boundary_width` px along part boundaries bleeds into the neighbor with
/// higher per-image priority, i.i.d. flips to another foreground class, then
/// elliptical blobs of a random foreground class. Pixels outside the mask are
/// never touched.
pub fn inject_label_noise(clean: &[u8], mask: &[bool], width: usize, height: usize, num_classes: usize, cfg: &NoiseConfig, seed: u64) -> Vec<u8> {
    let mut out = clean.to_vec();
    let fg = foreground_classes(num_classes);
    if fg.is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cfg.boundary_width > 0 {
        let mut priority: Vec<u8> = fg.clone();
        for i in (1..priority.len()).rev() {
            priority.swap(i, rng.random_range(0..=i));
        }
        let rank = |c: u8| priority.iter().position(|&p| p == c).unwrap_or(0);
        let r = cfg.boundary_width as isize;
        let src = out.clone();
        for y in 0..height as isize {
            for x in 0..width as isize {
                let p = (y as usize) * width + x as usize;
                if !mask[p] {
                    continue;
                }
                let mut best = src[p];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                            continue;
                        }
                        let q = ny as usize * width + nx as usize;
                        if mask[q] && src[q] != 0 && rank(src[q]) > rank(best) {
                            best = src[q];
                        }
                    }
                }
                out[p] = best;
            }
        }
    }
    if cfg.flip_prob > 0.0 && fg.len() > 1 {
        for p in 0..out.len() {
            if mask[p] && rng.random::<f64>() < cfg.flip_prob {
                let others: Vec<u8> = fg.iter().copied().filter(|&c| c != out[p]).collect();
                out[p] = others[rng.random_range(0..others.len())];
            }
        }
    }
    let fg_pixels: Vec<usize> = (0..mask.len()).filter(|&p| mask[p]).collect();
    if !fg_pixels.is_empty() {
        for _ in 0..cfg.blob_count {
            let area = cfg.blob_area * (width * height) as f64;
            let aspect: f64 = rng.random_range(0.5..2.0);
            let a = (area * aspect / std::f64::consts::PI).sqrt();
            let b = (area / (aspect * std::f64::consts::PI)).sqrt();
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let center = fg_pixels[rng.random_range(0..fg_pixels.len())];
            let class = fg[rng.random_range(0..fg.len())];
            let (cx, cy) = ((center % width) as f64, (center / width) as f64);
            let (s, c) = theta.sin_cos();
            for &p in &fg_pixels {
                let (dx, dy) = ((p % width) as f64 - cx, (p / width) as f64 - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    out[p] = class;
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub id: usize,
    pub split: Split,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub camera: usize,
    pub rgb: String,
    pub mask: String,
    /// Noisy pseudo-labels, present on labeled frames for training cameras.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Clean labels, for evaluation only.
    pub clean_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub index: usize,
    pub pose: Pose,
    pub has_labels: bool,
    pub views: Vec<ViewSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub format_version: u32,
    pub name: String,
    pub seed: u64,
    pub skeleton: Skeleton,
    pub parts: Vec<PartSpec>,
    pub class_names: Vec<String>,
    pub num_classes: usize,
    /// Largest value stored in label maps.
    pub label_maxval: usize,
    pub width: usize,
    pub height: usize,
    pub light: LightSpec,
    pub noise: NoiseConfig,
    pub cameras: Vec<CameraSpec>,
    pub frames: Vec<FrameSpec>,
    pub heldout_poses: Vec<Pose>,
}

impl SceneManifest {
    pub fn camera(&self, id: usize) -> Option<&CameraSpec> {
        self.cameras.iter().find(|c| c.id == id)
    }
}

/// One observation: a frame seen from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub camera: usize,
    pub split: Split,
    pub pose: Pose,
    /// `[H, W, 3]` in [0, 1].
    pub rgb: Vec<f64>,
    /// 0 or 1 per pixel.
    pub mask: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    pub clean_labels: Vec<u8>,
    pub has_labels: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub records: Vec<FrameRecord>,
}

impl Dataset {
    pub fn skeleton(&self) -> &Skeleton {
        &self.manifest.skeleton
    }

    pub fn camera(&self, id: usize) -> &Camera {
        &self.manifest.camera(id).expect("validated at load").camera
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn num_frames(&self) -> usize {
        self.manifest.frames.len()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SceneError> {
    std::fs::write(path, bytes).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gray(width: usize, height: usize, data: Vec<u8>) -> Image {
    Image::new(width, height, 1, data).expect("sized")
}

/// Seed of the label noise of one view.
fn view_noise_seed(seed: u64, frame: usize, camera: usize) -> u64 {
    seed ^ ((frame as u64 + 1) << 32) ^ ((camera as u64 + 1) << 16) ^ 0x5eed
}

/// Renders the scene, writes images and `manifest.json` under `out`.
pub fn generate_dataset(cfg: &SceneConfig, labeled: &[usize], out: &Path) -> Result<SceneManifest, SceneError> {
    cfg.validate()?;
    if let Some(&f) = labeled.iter().find(|&&f| f >= cfg.frames) {
        return Err(SceneError::Config(format!("labeled frame {f} outside 0..{}", cfg.frames)));
    }
    let dir = out.join("frames");
    std::fs::create_dir_all(&dir).map_err(|source| SceneError::Io { path: dir.clone(), source })?;
    let cameras: Vec<CameraSpec> = cfg
        .cameras()
        .into_iter()
        .enumerate()
        .map(|(id, (split, camera))| CameraSpec { id, split, camera })
        .collect();
    let l = cfg.class_names.len();
    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let pose = cfg.frame_pose(f);
        let has_labels = labeled.contains(&f);
        let mut views = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let view = analytic_render(&cfg.skeleton, &pose, &cam.camera, &cfg.parts, &cfg.light)?;
            let stem = format!("f{f:03}_c{}", cam.id);
            let rgb = format!("frames/{stem}.ppm");
            let mask = format!("frames/{stem}_mask.pgm");
            let clean = format!("frames/{stem}_clean.pgm");
            let rgb_img = Image::new(w, h, 3, view.rgb.iter().map(|&v| quantize(v)).collect()).expect("sized");
            write_file(&out.join(&rgb), &pnm::encode(&rgb_img))?;
            write_file(&out.join(&mask), &pnm::encode(&gray(w, h, view.mask.iter().map(|&m| if m { 255 } else { 0 }).collect())))?;
            write_file(&out.join(&clean), &pnm::encode(&gray(w, h, view.labels.clone())))?;
            let label = if has_labels && cam.split == Split::Train {
                let noisy = inject_label_noise(&view.labels, &view.mask, w, h, l, &cfg.noise, view_noise_seed(cfg.seed, f, cam.id));
                let path = format!("frames/{stem}_label.pgm");
                write_file(&out.join(&path), &pnm::encode(&gray(w, h, noisy)))?;
                Some(path)
            } else {
                None
            };
            views.push(ViewSpec {
                camera: cam.id,
                rgb,
                mask,
                label,
                clean_label: clean,
            });
        }
        frames.push(FrameSpec {
            index: f,
            pose,
            has_labels,
            views,
        });
    }
    let manifest = SceneManifest {
        format_version: FORMAT_VERSION,
        name: cfg.name.clone(),
        seed: cfg.seed,
        skeleton: cfg.skeleton.clone(),
        parts: cfg.parts.clone(),
        class_names: cfg.class_names.clone(),
        num_classes: l,
        label_maxval: l - 1,
        width: w,
        height: h,
        light: cfg.light.clone(),
        noise: cfg.noise.clone(),
        cameras,
        frames,
        heldout_poses: cfg.heldout_pose_list(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn read_image(root: &Path, rel: &str, field: &str, w: usize, h: usize, channels: usize) -> Result<Image, SceneError> {
    let path = root.join(rel);
    let img = pnm::read(&path).map_err(|source| SceneError::Image {
        field: field.to_string(),
        source,
    })?;
    if (img.width, img.height, img.channels) != (w, h, channels) {
        return Err(invalid(
            path.display().to_string(),
            field,
            format!("image is {}x{} with {} channel(s), manifest declares {w}x{h} with {channels}", img.width, img.height, img.channels),
        ));
    }
    Ok(img)
}

fn check_labels(path: &Path, field: &str, labels: &[u8], mask: &[f64], classes: usize, width: usize) -> Result<(), SceneError> {
    for (p, &v) in labels.iter().enumerate() {
        let at = format!("pixel ({}, {})", p % width, p / width);
        if v as usize >= classes {
            return Err(invalid(path.display().to_string(), field, format!("label {v} at {at} is not below num_classes {classes}")));
        }
        if mask[p] == 0.0 && v != 0 {
            return Err(invalid(path.display().to_string(), field, format!("label {v} at {at} lies outside the mask")));
        }
    }
    Ok(())
}

fn validate_manifest(m: &SceneManifest, file: &str) -> Result<(), SceneError> {
    if m.format_version != FORMAT_VERSION {
        return Err(invalid(file, "format_version", format!("unsupported version {}", m.format_version)));
    }
    let k = m.skeleton.num_bones();
    if m.num_classes < 2 || m.num_classes > 256 || m.class_names.len() != m.num_classes {
        return Err(invalid(file, "num_classes", format!("{} classes with {} names", m.num_classes, m.class_names.len())));
    }
    if m.label_maxval != m.num_classes - 1 {
        return Err(invalid(file, "label_maxval", format!("expected {}, got {}", m.num_classes - 1, m.label_maxval)));
    }
    if m.parts.len() != k {
        return Err(invalid(file, "parts", format!("{} parts for {k} bones", m.parts.len())));
    }
    for (i, p) in m.parts.iter().enumerate() {
        if p.class == 0 || p.class >= m.num_classes {
            return Err(invalid(file, format!("parts[{i}].class"), format!("class {} outside 1..{}", p.class, m.num_classes)));
        }
    }
    if m.width == 0 || m.height == 0 {
        return Err(invalid(file, "width", "image size must be nonzero"));
    }
    for (i, c) in m.cameras.iter().enumerate() {
        c.camera.validate().map_err(|e| invalid(file, format!("cameras[{i}].camera"), e.to_string()))?;
        if (c.camera.width, c.camera.height) != (m.width, m.height) {
            return Err(invalid(file, format!("cameras[{i}].camera"), "camera resolution differs from the image size"));
        }
        if m.cameras[..i].iter().any(|o| o.id == c.id) {
            return Err(invalid(file, format!("cameras[{i}].id"), format!("duplicate camera id {}", c.id)));
        }
    }
    if m.frames.is_empty() {
        return Err(invalid(file, "frames", "no frames"));
    }
    for (i, f) in m.frames.iter().enumerate() {
        if f.index != i {
            return Err(invalid(file, format!("frames[{i}].index"), format!("expected {i}, got {}", f.index)));
        }
        f.pose.validate(&m.skeleton).map_err(|e| invalid(file, format!("frames[{i}].pose"), e.to_string()))?;
        for (j, v) in f.views.iter().enumerate() {
            let field = format!("frames[{i}].views[{j}]");
            let cam = m.camera(v.camera).ok_or_else(|| invalid(file, format!("{field}.camera"), format!("unknown camera {}", v.camera)))?;
            if v.label.is_some() && (!f.has_labels || cam.split != Split::Train) {
                return Err(invalid(file, format!("{field}.label"), "labels only belong to labeled frames of training cameras"));
            }
            if v.label.is_none() && f.has_labels && cam.split == Split::Train {
                return Err(invalid(file, format!("{field}.label"), "labeled frame is missing its label map"));
            }
        }
    }
    for (i, p) in m.heldout_poses.iter().enumerate() {
        p.validate(&m.skeleton).map_err(|e| invalid(file, format!("heldout_poses[{i}]"), e.to_string()))?;
    }
    Ok(())
}

/// Reads and validates `manifest.json` and every image it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, SceneError> {
    let file = manifest_path.display().to_string();
    let bytes = std::fs::read(manifest_path).map_err(|source| SceneError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: SceneManifest = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_slice(&bytes)).map_err(|e| {
        let field = match e.path().to_string() {
            p if p == "." => "schema".to_string(),
            p => p,
        };
        invalid(&file, field, e.inner().to_string())
    })?;
    validate_manifest(&manifest, &file)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let (w, h) = (manifest.width, manifest.height);
    let mut records = Vec::new();
    for (i, f) in manifest.frames.iter().enumerate() {
        for (j, v) in f.views.iter().enumerate() {
            let field = |name: &str| format!("frames[{i}].views[{j}].{name}");
            let rgb = read_image(&root, &v.rgb, &field("rgb"), w, h, 3)?;
            let mask_img = read_image(&root, &v.mask, &field("mask"), w, h, 1)?;
            let mask_path = root.join(&v.mask);
            let mut mask = Vec::with_capacity(w * h);
            for (p, &m) in mask_img.data.iter().enumerate() {
                match m {
                    0 => mask.push(0.0),
                    255 => mask.push(1.0),
                    _ => {
                        return Err(invalid(
                            mask_path.display().to_string(),
                            field("mask"),
                            format!("mask value {m} at pixel ({}, {}) is neither 0 nor 255", p % w, p / w),
                        ))
                    }
                }
            }
            let clean = read_image(&root, &v.clean_label, &field("clean_label"), w, h, 1)?;
            check_labels(&root.join(&v.clean_label), &field("clean_label"), &clean.data, &mask, manifest.num_classes, w)?;
            let labels = match &v.label {
                Some(rel) => {
                    let img = read_image(&root, rel, &field("label"), w, h, 1)?;
                    check_labels(&root.join(rel), &field("label"), &img.data, &mask, manifest.num_classes, w)?;
                    Some(img.data)
                }
                None => None,
            };
            let split = manifest.camera(v.camera).expect("validated").split;
            records.push(FrameRecord {
                frame: i,
                camera: v.camera,
                split,
                pose: f.pose.clone(),
                rgb: rgb.data.iter().map(|&b| dequantize(b)).collect(),
                mask,
                has_labels: labels.is_some(),
                labels,
                clean_labels: clean.data,
            });
        }
    }
    Ok(Dataset { root, manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm;
    use proptest::prelude::*;

    fn tiny_scene() -> SceneConfig {
        SceneConfig {
            width: 24,
            height: 24,
            frames: 3,
            focal: 40.0,
            heldout_poses: 2,
            ..SceneConfig::humanoid4()
        }
    }

    /// Closest approach between the ray `o + t·d, t ≥ 0` and the segment
    /// `a..b`, by dense sampling plus local refinement.
    fn ray_segment_distance(o: Vec3, d: Vec3, a: Vec3, b: Vec3) -> f64 {
        let seg = sub(b, a);
        let mut best = f64::INFINITY;
        for i in 0..=2000 {
            let s = i as f64 / 2000.0;
            let p = add(a, scale(seg, s));
            let t = dot(sub(p, o), d).max(0.0);
            best = best.min(norm(sub(p, add(o, scale(d, t)))));
        }
        best
    }

    #[test]
    fn capsule_hits_match_closed_form_distance() {
        let cap = Capsule {
            a: [-0.3, 0.0, 0.0],
            b: [0.3, 0.1, 0.0],
            radius: 0.15,
        };
        let cam = Camera::look_at([0.0, 0.05, 2.0], [0.0, 0.05, 0.0], [0.0, 1.0, 0.0], 40.0, 32, 32);
        let o = cam.center();
        let mut hits = 0;
        for v in 0..32 {
            for u in 0..32 {
                let d = cam.pixel_direction(u, v);
                let dist = ray_segment_distance(o, d, cap.a, cap.b);
                match ray_capsule(o, d, &cap) {
                    Some(t) => {
                        hits += 1;
                        let p = add(o, scale(d, t));
                        let surf = crate::bodymodel::point_segment_distance(p, cap.a, cap.b);
                        assert!((surf - cap.radius).abs() < 1e-9);
                        assert!(dist <= cap.radius + 1e-6);
                    }
                    None => assert!(dist >= cap.radius - 1e-6, "pixel ({u},{v}) missed at distance {dist}"),
                }
            }
        }
        assert!(hits > 40 && hits < 32 * 32 / 2);
    }

    #[test]
    fn spot_pixel_matches_hand_solution() {
        // Camera on +z looking at a capsule along x: the central ray meets the
        // cylinder at z = r, distance 2 − r.
        let cap = Capsule {
            a: [-0.5, 0.0, 0.0],
            b: [0.5, 0.0, 0.0],
            radius: 0.2,
        };
        let t = ray_capsule([0.0, 0.0, 2.0], [0.0, 0.0, -1.0], &cap).unwrap();
        assert!((t - 1.8).abs() < 1e-12);
        // Along the axis the first hit is the end cap sphere.
        let t = ray_capsule([2.0, 0.0, 0.0], [-1.0, 0.0, 0.0], &cap).unwrap();
        assert!((t - 1.3).abs() < 1e-12);
        assert_eq!(ray_capsule([0.0, 1.0, 2.0], [0.0, 0.0, -1.0], &cap), None);
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let cfg = tiny_scene();
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0, 0.0, 6.0], [0.0, 1.0, 0.0], 40.0, 24, 24);
        let view = analytic_render(&cfg.skeleton, &cfg.frame_pose(0), &cam, &cfg.parts, &cfg.light).unwrap();
        assert!(view.mask.iter().all(|&m| !m));
        assert!(view.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn analytic_render_is_deterministic_and_consistent() {
        let cfg = tiny_scene();
        let (_, cam) = cfg.cameras()[0].clone();
        let a = analytic_render(&cfg.skeleton, &cfg.frame_pose(1), &cam, &cfg.parts, &cfg.light).unwrap();
        let b = analytic_render(&cfg.skeleton, &cfg.frame_pose(1), &cam, &cfg.parts, &cfg.light).unwrap();
        assert_eq!(a, b);
        for p in 0..a.mask.len() {
            assert_eq!(a.mask[p], a.depth[p] < f64::INFINITY);
            assert_eq!(a.mask[p], a.labels[p] != 0);
        }
        assert!(a.mask.iter().filter(|&&m| m).count() > 30);
    }

    #[test]
    fn body_stays_in_frame_over_the_trajectory() {
        let cfg = SceneConfig::humanoid4();
        for (_, cam) in cfg.cameras() {
            for f in 0..cfg.frames {
                let v = analytic_render(&cfg.skeleton, &cfg.frame_pose(f), &cam, &cfg.parts, &cfg.light).unwrap();
                let (w, h) = (v.width, v.height);
                for p in 0..w * h {
                    let (x, y) = (p % w, p / w);
                    if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                        assert!(!v.mask[p], "body touches the image border in frame {f}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let cfg = tiny_scene();
        let (_, cam) = cfg.cameras()[0].clone();
        let v = analytic_render(&cfg.skeleton, &cfg.frame_pose(0), &cam, &cfg.parts, &cfg.light).unwrap();
        assert_eq!(inject_label_noise(&v.labels, &v.mask, 24, 24, 5, &NoiseConfig::none(), 3), v.labels);
    }

    #[test]
    fn forced_flips_change_every_foreground_pixel() {
        let labels: Vec<u8> = (0..400).map(|i| if i % 5 == 0 { 0 } else { 1 + (i % 2) as u8 }).collect();
        let mask: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
        let cfg = NoiseConfig {
            flip_prob: 1.0,
            ..NoiseConfig::none()
        };
        let noisy = inject_label_noise(&labels, &mask, 20, 20, 3, &cfg, 1);
        for p in 0..400 {
            assert_eq!(noisy[p] != labels[p], mask[p]);
        }
    }

    #[test]
    fn flip_rate_is_binomial() {
        let n = 100_000;
        let labels = vec![2u8; n];
        let mask = vec![true; n];
        let cfg = NoiseConfig {
            flip_prob: 0.1,
            ..NoiseConfig::none()
        };
        let noisy = inject_label_noise(&labels, &mask, 1000, 100, 5, &cfg, 9);
        let flips = noisy.iter().filter(|&&l| l != 2).count() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((flips - 0.1 * n as f64).abs() < 3.0 * sigma, "{flips}");
    }

    proptest! {
        #[test]
        fn noise_never_touches_background(seed in any::<u64>(), wb in 0usize..4, pf in 0.0f64..1.0, blobs in 0usize..4) {
            let cfg = tiny_scene();
            let cams = cfg.cameras();
            let cam = &cams[(seed % 4) as usize].1;
            let v = analytic_render(&cfg.skeleton, &cfg.frame_pose((seed % 3) as usize), cam, &cfg.parts, &cfg.light).unwrap();
            let noise = NoiseConfig { boundary_width: wb, flip_prob: pf, blob_count: blobs, blob_area: 0.05 };
            let noisy = inject_label_noise(&v.labels, &v.mask, 24, 24, 5, &noise, seed);
            for ((&n, &m), &l) in noisy.iter().zip(&v.mask).zip(&v.labels) {
                if !m {
                    prop_assert_eq!(n, l);
                } else {
                    prop_assert!((1..5).contains(&n));
                }
            }
        }
    }

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_round_trips_and_is_reproducible() {
        let cfg = tiny_scene();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(&cfg, &[1], a.path()).unwrap();
        generate_dataset(&cfg, &[1], b.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        let ds = load_dataset(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.records.len(), 3 * 4);
        for r in &ds.records {
            assert_eq!(r.has_labels, r.frame == 1 && r.split == Split::Train);
            let view = analytic_render(&cfg.skeleton, &r.pose, ds.camera(r.camera), &cfg.parts, &cfg.light).unwrap();
            assert_eq!(r.clean_labels, view.labels);
            for (x, y) in r.rgb.iter().zip(&view.rgb) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_labeled_subset() {
        let cfg = SceneConfig {
            frames: 1,
            train_cameras: 1,
            heldout_cameras: 0,
            ..tiny_scene()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&cfg, &[], dir.path()).unwrap();
        assert_eq!(m.frames.len(), 1);
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(ds.records.iter().all(|r| !r.has_labels));
        assert!(generate_dataset(&cfg, &[3], dir.path()).is_err());
    }

    #[test]
    fn subsets_are_nested() {
        assert_eq!(labeled_subset(30, 5), vec![0, 6, 12, 18, 24]);
        let s15 = labeled_subset(30, 15);
        assert!(labeled_subset(30, 5).iter().all(|f| s15.contains(f)));
        assert_eq!(labeled_subset(30, 30), (0..30).collect::<Vec<_>>());
        assert_eq!(labeled_subset(30, 0), Vec::<usize>::new());
    }

    #[test]
    fn out_of_range_label_is_rejected_with_file_name() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny_scene(), &[0], dir.path()).unwrap();
        let rel = m.frames[0].views[0].label.clone().unwrap();
        let path = dir.path().join(&rel);
        let mut img = pnm::read(&path).unwrap();
        let p = img.data.iter().position(|&v| v != 0).unwrap();
        img.data[p] = 5;
        pnm::write(&path, &img).unwrap();
        let msg = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap_err().to_string();
        assert!(msg.contains(&rel) && msg.contains("frames[0].views[0].label") && msg.contains("label 5"), "{msg}");
    }

    #[test]
    fn truncated_image_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny_scene(), &[], dir.path()).unwrap();
        let rel = &m.frames[2].views[1].rgb;
        let path = dir.path().join(rel);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let msg = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap_err().to_string();
        assert!(msg.contains(rel.as_str()) && msg.contains("byte offset") && msg.contains("frames[2].views[1].rgb"), "{msg}");
    }

    #[test]
    fn malformed_manifest_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_scene(), &[], dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        json.as_object_mut().unwrap().remove("width");
        std::fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("manifest.json") && msg.contains("width"), "{msg}");
        json["width"] = serde_json::json!(24);
        json["num_classes"] = serde_json::json!(7);
        std::fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("num_classes"), "{msg}");
    }
}
