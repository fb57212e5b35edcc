//! Canonical-space neural field: encoded position → (color, density,
//! semantic logits). There is no view-direction input.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_kernel, Function, Tape, Var};
use crate::geometry::Vec3;
use crate::nn::{dense, init_dense, BoundParams, ModelError, ParamSet};

/// Sinusoidal encoding `[x?, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L-1}πx), cos(2^{L-1}πx)]`,
/// each term applied to all three coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn output_dim(&self) -> usize {
        3 * (usize::from(self.include_input) + 2 * self.num_frequencies)
    }

    pub fn encode(&self, x: Vec3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim());
        self.encode_into(x, &mut out);
        out
    }

    fn encode_into(&self, x: Vec3, out: &mut Vec<f64>) {
        if self.include_input {
            out.extend_from_slice(&x);
        }
        for k in 0..self.num_frequencies {
            let a = (1u64 << k) as f64 * PI;
            out.extend(x.iter().map(|&v| (a * v).sin()));
            out.extend(x.iter().map(|&v| (a * v).cos()));
        }
    }

    /// Encodes an `[n, 3]` tensor row by row.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(ModelError::Config(format!("positional encoding expects [n, 3], got {shape:?}")));
        }
        let mut value = Vec::with_capacity(shape[0] * self.output_dim());
        for p in tape.value(x).chunks_exact(3) {
            self.encode_into([p[0], p[1], p[2]], &mut value);
        }
        Ok(tape.custom(&[x], vec![shape[0], self.output_dim()], value, Box::new(EncodingFn(*self)))?)
    }
}

struct EncodingFn(PositionalEncoding);

impl Function for EncodingFn {
    fn name(&self) -> &'static str {
        "positional_encoding"
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let dim = self.0.output_dim();
        let mut gx = vec![0.0; inputs[0].len()];
        for (n, gp) in gx.chunks_exact_mut(3).enumerate() {
            let (out, go) = (&output[n * dim..(n + 1) * dim], &g[n * dim..(n + 1) * dim]);
            let mut off = 0;
            if self.0.include_input {
                gp.iter_mut().zip(&go[..3]).for_each(|(a, b)| *a += b);
                off = 3;
            }
            for k in 0..self.0.num_frequencies {
                let a = (1u64 << k) as f64 * PI;
                for c in 0..3 {
                    let (s, co) = (out[off + c], out[off + 3 + c]);
                    gp[c] += a * (go[off + c] * co - go[off + 3 + c] * s);
                }
                off += 6;
            }
        }
        vec![Some(gx)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanonicalFieldConfig {
    pub encoding: PositionalEncoding,
    pub depth: usize,
    pub width: usize,
    /// Trunk layer whose input is re-concatenated with the encoding.
    pub skip_layer: Option<usize>,
    pub num_classes: usize,
}

impl Default for CanonicalFieldConfig {
    fn default() -> Self {
        Self {
            encoding: PositionalEncoding {
                num_frequencies: 6,
                include_input: true,
            },
            depth: 6,
            width: 128,
            skip_layer: Some(4),
            num_classes: 5,
        }
    }
}

impl CanonicalFieldConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth == 0 || self.width == 0 {
            return Err(ModelError::Config("canonical trunk needs depth and width >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("need at least two semantic classes".into()));
        }
        if self.skip_layer.is_some_and(|s| s == 0 || s >= self.depth) {
            return Err(ModelError::Config("skip layer must be inside the trunk".into()));
        }
        Ok(())
    }

    fn layer_input(&self, i: usize) -> usize {
        let enc = self.encoding.output_dim();
        match i {
            0 => enc,
            _ if self.skip_layer == Some(i) => self.width + enc,
            _ => self.width,
        }
    }
}

pub fn init_canonical<R: Rng>(params: &mut ParamSet, cfg: &CanonicalFieldConfig, rng: &mut R) -> Result<(), ModelError> {
    cfg.validate()?;
    for i in 0..cfg.depth {
        init_dense(params, &format!("canon.trunk{i}"), cfg.layer_input(i), cfg.width, false, rng);
    }
    init_dense(params, "canon.color", cfg.width, 3, false, rng);
    init_dense(params, "canon.density", cfg.width, 1, false, rng);
    init_dense(params, "canon.semantic", cfg.width, cfg.num_classes, false, rng);
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `[n, 3]`, in `[0, 1]`.
    pub color: Var,
    /// `[n, 1]`, non-negative.
    pub density: Var,
    /// `[n, L]`, unconstrained.
    pub logits: Var,
}

/// Evaluates the field on canonical points `x: [n, 3]`.
pub fn field_forward(tape: &mut Tape, bound: &BoundParams, cfg: &CanonicalFieldConfig, x: Var) -> Result<FieldOutput, ModelError> {
    let enc = cfg.encoding.apply(tape, x)?;
    let mut h = enc;
    for i in 0..cfg.depth {
        if cfg.skip_layer == Some(i) {
            h = tape.concat(&[h, enc])?;
        }
        let z = dense(tape, bound, &format!("canon.trunk{i}"), h)?;
        h = tape.relu(z);
    }
    let c = dense(tape, bound, "canon.color", h)?;
    let d = dense(tape, bound, "canon.density", h)?;
    let logits = dense(tape, bound, "canon.semantic", h)?;
    Ok(FieldOutput {
        color: tape.sigmoid(c),
        density: tape.softplus(d),
        logits,
    })
}

/// Single-point query without gradients.
pub fn query_field(params: &ParamSet, cfg: &CanonicalFieldConfig, x: Vec3) -> Result<(Vec3, f64, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.constant(vec![1, 3], x.to_vec())?;
    let out = field_forward(&mut tape, &bound, cfg, xv)?;
    let c = tape.value(out.color);
    Ok(([c[0], c[1], c[2]], tape.value(out.density)[0], tape.value(out.logits).to_vec()))
}

/// Softmax of a logit vector.
pub fn semantic_distribution(logits: &[f64]) -> Vec<f64> {
    softmax_kernel(logits, 1, logits.len(), 1)
}
