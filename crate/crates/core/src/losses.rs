//! Training objectives. Every reduction is a mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Function, Tape, Var};
use crate::geometry::Vec3;
use crate::motionfield::{skeletal_warp_var, MotionContext};
use crate::nn::ModelError;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: expected {expected} entries, got {actual}")]
    LengthMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("label {label} at ray {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("loss weight `{0}` must be finite and nonnegative")]
    InvalidWeight(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::autodiff::AutodiffError> for LossError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub mse: f64,
    pub silhouette: f64,
    pub surface: f64,
    pub parsing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.0,
            mse: 1.0,
            silhouette: 0.1,
            surface: 0.1,
            parsing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeight(name));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("perceptual", self.perceptual),
            ("mse", self.mse),
            ("silhouette", self.silhouette),
            ("surface", self.surface),
            ("parsing", self.parsing),
        ]
    }
}

/// Per-term values of one step; one JSON object per line in the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
    pub mse: f64,
    pub silhouette: f64,
    pub surface: f64,
    pub parsing: f64,
    pub total: f64,
}

impl LossReport {
    /// Name of the first non-finite term, in reporting order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("perceptual", self.perceptual.unwrap_or(0.0)),
            ("mse", self.mse),
            ("silhouette", self.silhouette),
            ("surface", self.surface),
            ("parsing", self.parsing),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Patch-level perceptual loss plugin. `rendered` is `[n, 3]`, `target` has
/// `3n` entries.
pub trait PerceptualLoss {
    fn loss(&self, tape: &mut Tape, rendered: Var, target: &[f64]) -> Result<Var>;
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LossError::LengthMismatch { what, expected, actual });
    }
    Ok(())
}

/// Mean squared color error over rays and channels.
pub fn mse_loss(tape: &mut Tape, rendered: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(rendered).to_vec();
    check_len("rgb target", shape.iter().product(), target.len())?;
    let t = tape.constant(shape, target.to_vec())?;
    let diff = tape.sub(rendered, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Mean squared error between `min(A, 1)` and the binary mask.
pub fn silhouette_loss(tape: &mut Tape, alpha: Var, mask: &[f64]) -> Result<Var> {
    let shape = tape.shape(alpha).to_vec();
    check_len("mask target", shape.iter().product(), mask.len())?;
    let clamped = tape.clamp_max(alpha, 1.0);
    let m = tape.constant(shape, mask.to_vec())?;
    let diff = tape.sub(clamped, m)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Fused log-softmax cross-entropy, averaged over valid rows.
struct CrossEntropyFn {
    labels: Vec<usize>,
    valid: Vec<bool>,
    classes: usize,
    count: usize,
}

fn log_softmax_row(row: &[f64]) -> (f64, Vec<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    let lse = m + z.ln();
    (lse, row.iter().map(|v| (v - m).exp() / z).collect())
}

impl Function for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let mut gx = vec![0.0; x.len()];
        if self.count > 0 {
            let s = g[0] / self.count as f64;
            for (r, row) in x.chunks_exact(self.classes).enumerate() {
                if !self.valid[r] {
                    continue;
                }
                let (_, p) = log_softmax_row(row);
                for (c, pc) in p.iter().enumerate() {
                    gx[r * self.classes + c] = s * (pc - if c == self.labels[r] { 1.0 } else { 0.0 });
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Mean over valid rays of `−log softmax(S)[label]`; zero when no ray is valid.
/// Labels of invalid rays are ignored.
pub fn parsing_loss(tape: &mut Tape, logits: Var, labels: &[usize], valid: &[bool]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (rows, classes) = (shape[0], shape[1]);
    check_len("labels", rows, labels.len())?;
    check_len("valid flags", rows, valid.len())?;
    for (i, (&l, &v)) in labels.iter().zip(valid).enumerate() {
        if v && l >= classes {
            return Err(LossError::LabelOutOfRange { index: i, label: l, classes });
        }
    }
    let count = valid.iter().filter(|&&v| v).count();
    let x = tape.value(logits);
    let mut total = 0.0;
    for (r, row) in x.chunks_exact(classes).enumerate() {
        if valid[r] {
            let (lse, _) = log_softmax_row(row);
            total += lse - row[labels[r]];
        }
    }
    let value = if count > 0 { total / count as f64 } else { 0.0 };
    let func = CrossEntropyFn {
        labels: labels.to_vec(),
        valid: valid.to_vec(),
        classes,
        count,
    };
    Ok(tape.custom(&[logits], vec![], vec![value], Box::new(func))?)
}

/// Mean squared distance between skeletally warped observation vertices
/// (vertex `n` posed by transform row `frames[n]`) and their canonical
/// counterparts. The non-rigid stage does not enter.
pub fn surface_loss(tape: &mut Tape, ctx: &MotionContext, observed: &[Vec3], frames: &[usize], canonical: &[Vec3]) -> Result<Var> {
    check_len("canonical vertices", observed.len(), canonical.len())?;
    check_len("vertex frames", observed.len(), frames.len())?;
    let n = observed.len();
    if n == 0 {
        return Ok(tape.constant(vec![], vec![0.0])?);
    }
    let warped = skeletal_warp_var(tape, ctx.geometry, ctx.soft_weights, ctx.transforms, observed, frames)?;
    let xs = tape.slice_cols(warped, 0, 3)?;
    let target = tape.constant(vec![n, 3], canonical.iter().flatten().copied().collect())?;
    let diff = tape.sub(xs, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Term variables of one step. `None` terms are not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub perceptual: Option<Var>,
    pub mse: Option<Var>,
    pub silhouette: Option<Var>,
    pub surface: Option<Var>,
    pub parsing: Option<Var>,
}

/// `Σ λ_k · term_k` on the tape plus the matching report. Terms whose weight
/// is zero are left out of the returned root entirely, so they send no
/// gradient anywhere.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights, iter: usize) -> Result<(Var, LossReport)> {
    w.validate()?;
    let pairs = [
        (terms.perceptual, w.perceptual),
        (terms.mse, w.mse),
        (terms.silhouette, w.silhouette),
        (terms.surface, w.surface),
        (terms.parsing, w.parsing),
    ];
    let mut root: Option<Var> = None;
    for (term, lambda) in pairs {
        if let Some(t) = term.filter(|_| lambda != 0.0) {
            let weighted = tape.scale(t, lambda);
            root = Some(match root {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
    }
    let root = match root {
        Some(r) => r,
        None => tape.constant(vec![], vec![0.0])?,
    };
    let val = |t: Option<Var>, tape: &Tape| t.map_or(0.0, |v| tape.scalar(v));
    let report = LossReport {
        iter,
        perceptual: terms.perceptual.map(|v| tape.scalar(v)),
        mse: val(terms.mse, tape),
        silhouette: val(terms.silhouette, tape),
        surface: val(terms.surface, tape),
        parsing: val(terms.parsing, tape),
        total: tape.scalar(root),
    };
    Ok((root, report))
}

/// Weighted sum of plain term values, in the same order as [`total_loss`].
pub fn weighted_total(report: &LossReport, w: &LossWeights) -> f64 {
    let terms = [report.perceptual.unwrap_or(0.0), report.mse, report.silhouette, report.surface, report.parsing];
    let lambdas = [w.perceptual, w.mse, w.silhouette, w.surface, w.parsing];
    let mut acc: Option<f64> = None;
    for (t, l) in terms.iter().zip(lambdas) {
        if l != 0.0 {
            acc = Some(acc.map_or(t * l, |a| a + t * l));
        }
    }
    acc.unwrap_or(0.0)
}

/// Plain-number conveniences over single tapes.
pub mod scalar {
    use super::*;

    pub fn mse(rendered: &[Vec3], target: &[Vec3]) -> Result<f64> {
        check_len("rgb target", rendered.len(), target.len())?;
        let mut tape = Tape::new();
        let r = tape.constant(vec![rendered.len(), 3], rendered.iter().flatten().copied().collect())?;
        let v = mse_loss(&mut tape, r, &target.iter().flatten().copied().collect::<Vec<_>>())?;
        Ok(tape.scalar(v))
    }

    pub fn silhouette(alpha: &[f64], mask: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(vec![alpha.len(), 1], alpha.to_vec())?;
        let v = silhouette_loss(&mut tape, a, mask)?;
        Ok(tape.scalar(v))
    }

    pub fn parsing(logits: &[Vec<f64>], labels: &[usize], valid: &[bool]) -> Result<f64> {
        let l = logits.first().map_or(0, Vec::len);
        let mut tape = Tape::new();
        let x = tape.constant(vec![logits.len(), l], logits.iter().flatten().copied().collect())?;
        let v = parsing_loss(&mut tape, x, labels, valid)?;
        Ok(tape.scalar(v))
    }
}
