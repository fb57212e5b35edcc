//! Image and parsing metrics, cross-view label consistency, and the
//! evaluation driver behind `semhum eval`.

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::bodymodel::{generate_surface, Pose, Skeleton};
use crate::geometry::{norm, normalize, sub};
use crate::model::Model;
use crate::renderer::{render_image, Camera, RenderError, RenderSettings};
use crate::scenedata::{first_hit, posed_capsules, Dataset, Split};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{what}: sizes differ ({a} vs {b})")]
    SizeMismatch { what: &'static str, a: usize, b: usize },
    #[error("{width}x{height} image is smaller than the {window}x{window} window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("label {label} is not below {classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no pixels to evaluate")]
    Empty,
    #[error(transparent)]
    Render(#[from] RenderError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn same_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MetricError::SizeMismatch { what, a, b });
    }
    Ok(())
}

/// `10·log10(1/MSE)` over pixels with `mask > 0.5` (all pixels without a
/// mask). Images are `[n, channels]` in [0, 1]; identical images give `+∞`.
pub fn psnr(a: &[f64], b: &[f64], channels: usize, mask: Option<&[f64]>) -> Result<f64> {
    same_len("psnr images", a.len(), b.len())?;
    if channels == 0 || !a.len().is_multiple_of(channels) {
        return Err(MetricError::SizeMismatch {
            what: "psnr channels",
            a: a.len(),
            b: channels,
        });
    }
    if let Some(m) = mask {
        same_len("psnr mask", a.len() / channels, m.len())?;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, (pa, pb)) in a.chunks_exact(channels).zip(b.chunks_exact(channels)).enumerate() {
        if mask.is_some_and(|m| m[p] <= 0.5) {
            continue;
        }
        for (x, y) in pa.iter().zip(pb) {
            sum += (x - y) * (x - y);
        }
        count += channels;
    }
    if count == 0 {
        return Err(MetricError::Empty);
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

pub fn to_gray(rgb: &[f64]) -> Vec<f64> {
    rgb.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

/// Separable valid-mode filtering of a `w×h` image.
fn filter_valid(img: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two grayscale images, averaged over every window
/// position that fits inside the image. Dynamic range 1; not clamped.
pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    same_len("ssim images", a.len(), b.len())?;
    same_len("ssim image size", width * height, a.len())?;
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            width,
            height,
            window: SSIM_WINDOW,
        });
    }
    let g = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, width, height, &g);
    let mu_b = filter_valid(b, width, height, &g);
    let aa = filter_valid(&prod(a, a), width, height, &g);
    let bb = filter_valid(&prod(b, b), width, height, &g);
    let ab = filter_valid(&prod(a, b), width, height, &g);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two `[H, W, 3]` images after luma conversion.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    same_len("ssim images", a.len(), b.len())?;
    same_len("ssim image size", 3 * width * height, a.len())?;
    ssim_gray(&to_gray(a), &to_gray(b), width, height)
}

/// `confusion[truth][pred]` pixel counts over `mask > 0.5`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], mask: &[f64], classes: usize) -> Result<Vec<Vec<u64>>> {
    same_len("segmentation labels", pred.len(), truth.len())?;
    same_len("segmentation mask", pred.len(), mask.len())?;
    let mut m = vec![vec![0u64; classes]; classes];
    for ((&p, &t), &k) in pred.iter().zip(truth).zip(mask) {
        if k <= 0.5 {
            continue;
        }
        for label in [p, t] {
            if label >= classes {
                return Err(MetricError::LabelOutOfRange { label, classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegMetrics {
    pub pixel_acc: f64,
    /// `None` for classes absent from both prediction and truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
}

pub fn metrics_from_confusion(m: &[Vec<u64>]) -> Result<SegMetrics> {
    let l = m.len();
    let pixels: u64 = m.iter().flatten().sum();
    if pixels == 0 {
        return Err(MetricError::Empty);
    }
    let correct: u64 = (0..l).map(|c| m[c][c]).sum();
    let iou: Vec<Option<f64>> = (0..l)
        .map(|c| {
            let truth: u64 = m[c].iter().sum();
            let pred: u64 = m.iter().map(|row| row[c]).sum();
            let union = truth + pred - m[c][c];
            (union > 0).then(|| m[c][c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    Ok(SegMetrics {
        pixel_acc: correct as f64 / pixels as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        iou,
        pixels,
    })
}

/// Pixel accuracy, per-class IoU and mIoU over `mask > 0.5`.
pub fn segmentation_metrics(pred: &[usize], truth: &[usize], mask: &[f64], classes: usize) -> Result<SegMetrics> {
    metrics_from_confusion(&confusion_matrix(pred, truth, mask, classes)?)
}

/// Label maps that agree and the surface points that could be compared.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Consistency {
    pub agreeing: usize,
    pub compared: usize,
}

impl Consistency {
    /// Fraction of agreeing points; 1 when nothing could be compared.
    pub fn score(&self) -> f64 {
        if self.compared == 0 {
            1.0
        } else {
            self.agreeing as f64 / self.compared as f64
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            agreeing: self.agreeing + other.agreeing,
            compared: self.compared + other.compared,
        }
    }
}

/// Relative tolerance on the analytic first-hit distance for a surface
/// point to count as unoccluded.
const VISIBILITY_TOL: f64 = 1e-6;

/// Cross-view agreement of label maps rendered for one pose. Surface points
/// of the ground-truth body are projected into every view where the
/// analytic first hit along the camera ray is the point itself and the
/// pixel it lands in shows the same capsule at a comparable depth; a point
/// seen in at least two views agrees when all its labels match.
pub fn label_consistency(labels: &[Vec<usize>], cameras: &[Camera], skel: &Skeleton, pose: &Pose, points_per_bone: usize) -> Result<Consistency> {
    same_len("label maps per camera", labels.len(), cameras.len())?;
    for (l, c) in labels.iter().zip(cameras) {
        same_len("label map size", c.width * c.height, l.len())?;
    }
    let surface = generate_surface(skel, pose, points_per_bone).map_err(|e| RenderError::Model(e.into()))?;
    let caps = posed_capsules(skel, pose).map_err(|e| RenderError::Model(e.into()))?;
    let mut out = Consistency { agreeing: 0, compared: 0 };
    for (&p, &bone) in surface.positions.iter().zip(&surface.bones) {
        let mut seen: Vec<usize> = Vec::new();
        for (cam, map) in cameras.iter().zip(labels) {
            let Some((px, py, _)) = cam.project(p) else { continue };
            if px < 0.0 || py < 0.0 || px >= cam.width as f64 || py >= cam.height as f64 {
                continue;
            }
            let o = cam.center();
            let dist = norm(sub(p, o));
            let unoccluded = first_hit(o, normalize(sub(p, o)), &caps).is_some_and(|(t, _)| (t - dist).abs() <= VISIBILITY_TOL * dist.max(1.0));
            let (u, v) = (px as usize, py as usize);
            let owns_pixel = first_hit(o, cam.pixel_direction(u, v), &caps)
                .is_some_and(|(t, b)| b == bone && (t - dist).abs() <= skel.bone_radii()[bone]);
            if unoccluded && owns_pixel {
                seen.push(map[v * cam.width + u]);
            }
        }
        if seen.len() >= 2 {
            out.compared += 1;
            if seen.iter().all(|&l| l == seen[0]) {
                out.agreeing += 1;
            }
        }
    }
    Ok(out)
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn serialize_psnr_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => serialize_psnr(x, s),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub frame: usize,
    pub camera: usize,
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub pixel_acc: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub views: Vec<ViewMetrics>,
    /// Mean of per-view values.
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    /// Pooled over every evaluated view.
    pub pixel_acc: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub evaluated_pixels: u64,
    /// Rendered labels on the views that carry pseudo-labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labeled_miou: Option<f64>,
    /// The pseudo-labels themselves against the clean labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_input_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "serialize_psnr_opt")]
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub render: RenderSettings,
    pub chunk: usize,
    /// Evaluate every `frame_stride`-th frame.
    pub frame_stride: usize,
    /// Surface points per bone for the held-out pose consistency check;
    /// zero skips it.
    pub consistency_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            render: RenderSettings::eval(128),
            chunk: 1024,
            frame_stride: 1,
            consistency_points: 400,
        }
    }
}

fn as_usize(v: &[u8]) -> Vec<usize> {
    v.iter().map(|&x| x as usize).collect()
}

/// Renders every view of `split` and scores it against the dataset.
/// Segmentation is scored against the clean labels inside the mask.
pub fn evaluate(model: &Model, data: &Dataset, split: Split, opts: &EvalOptions) -> Result<EvalReport> {
    let l = data.manifest.num_classes;
    let (w, h) = (data.manifest.width, data.manifest.height);
    let mut views = Vec::new();
    let mut pooled = vec![vec![0u64; l]; l];
    let mut labeled = vec![vec![0u64; l]; l];
    let mut noisy = vec![vec![0u64; l]; l];
    let stride = opts.frame_stride.max(1);
    for rec in data.split(split).filter(|r| r.frame % stride == 0) {
        let img = render_image(model, data.camera(rec.camera), &rec.pose, Some(rec.frame), &opts.render, opts.chunk)?;
        let clean = as_usize(&rec.clean_labels);
        let conf = confusion_matrix(&img.labels, &clean, &rec.mask, l)?;
        let seg = metrics_from_confusion(&conf)?;
        let add = |acc: &mut Vec<Vec<u64>>, m: &[Vec<u64>]| {
            for (ra, rm) in acc.iter_mut().zip(m) {
                for (a, b) in ra.iter_mut().zip(rm) {
                    *a += b;
                }
            }
        };
        add(&mut pooled, &conf);
        if let Some(pseudo) = &rec.labels {
            add(&mut labeled, &conf);
            add(&mut noisy, &confusion_matrix(&as_usize(pseudo), &clean, &rec.mask, l)?);
        }
        views.push(ViewMetrics {
            frame: rec.frame,
            camera: rec.camera,
            psnr: psnr(&img.rgb, &rec.rgb, 3, None)?,
            ssim: ssim(&img.rgb, &rec.rgb, w, h)?,
            pixel_acc: seg.pixel_acc,
            iou: seg.iou,
            miou: seg.miou,
            pixels: seg.pixels,
        });
    }
    if views.is_empty() {
        return Err(MetricError::Empty);
    }
    let agg = metrics_from_confusion(&pooled)?;
    let n = views.len() as f64;
    let consistency = if opts.consistency_points > 0 && !data.manifest.heldout_poses.is_empty() {
        let cams: Vec<Camera> = data.manifest.cameras.iter().map(|c| c.camera.clone()).collect();
        let mut total = Consistency { agreeing: 0, compared: 0 };
        for pose in &data.manifest.heldout_poses {
            let maps = cams
                .iter()
                .map(|c| render_image(model, c, pose, None, &opts.render, opts.chunk).map(|i| i.labels))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            total = total.merge(label_consistency(&maps, &cams, data.skeleton(), pose, opts.consistency_points)?);
        }
        Some(total)
    } else {
        None
    };
    Ok(EvalReport {
        split,
        psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        pixel_acc: agg.pixel_acc,
        iou: agg.iou,
        miou: agg.miou,
        evaluated_pixels: agg.pixels,
        labeled_miou: metrics_from_confusion(&labeled).ok().map(|m| m.miou),
        noisy_input_miou: metrics_from_confusion(&noisy).ok().map(|m| m.miou),
        consistency: consistency.map(|c| c.score()),
        consistency_points: consistency.map(|c| c.compared),
        lpips: None,
    })
}

/// mIoU of the pseudo-labels against the clean labels over every labeled view.
pub fn noisy_label_miou(data: &Dataset) -> Result<f64> {
    let l = data.manifest.num_classes;
    let mut m = vec![vec![0u64; l]; l];
    for rec in &data.records {
        if let Some(pseudo) = &rec.labels {
            let c = confusion_matrix(&as_usize(pseudo), &as_usize(&rec.clean_labels), &rec.mask, l)?;
            for (ra, rm) in m.iter_mut().zip(&c) {
                for (a, b) in ra.iter_mut().zip(rm) {
                    *a += b;
                }
            }
        }
    }
    Ok(metrics_from_confusion(&m)?.miou)
}
