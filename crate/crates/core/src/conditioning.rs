//! Timestep and class conditioning, and adaLN modulation.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Layer-norm epsilon used by every modulated norm in the model.
pub const NORM_EPS: f64 = 1e-6;

/// Sinusoidal features of a scalar timestep: `dim / 2` sines followed by
/// `dim / 2` cosines at geometrically spaced frequencies.
pub fn timestep_sinusoid(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!("timestep embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let phase = t * freq;
        out[i] = phase.sin();
        out[half + i] = phase.cos();
    }
    Tensor::new(vec![1, dim], out)
}

/// Handles of the two-layer timestep MLP.
#[derive(Clone, Copy, Debug)]
pub struct TimestepMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `Linear -> SiLU -> Linear` applied to the sinusoid of `t`; returns `[1, d]`.
pub fn timestep_embedding(tape: &mut Tape<'_>, t: usize, freq_dim: usize, mlp: TimestepMlp) -> Result<Var> {
    let s = tape.constant(timestep_sinusoid(t as f64, freq_dim)?);
    let h = tape.matmul(s, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.silu(h);
    let h = tape.matmul(h, mlp.w2)?;
    tape.add_row(h, mlp.b2)
}

/// A class label, or the null label used for classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Null,
}

/// Embedding rows for `classes` labels plus a trailing null row.
#[derive(Clone, Debug)]
pub struct LabelTable {
    pub table: Tensor,
}

impl LabelTable {
    pub fn new(table: Tensor) -> Result<Self> {
        let (rows, _) = table.dims2()?;
        if rows < 2 {
            return Err(Error::config("label table needs at least one class and the null row"));
        }
        Ok(Self { table })
    }

    pub fn classes(&self) -> usize {
        self.table.shape()[0] - 1
    }

    pub fn null_index(&self) -> usize {
        self.classes()
    }
}

/// Resolves the table row for a label. During training (`rng` given) a class
/// is swapped for the null row with probability `dropout_p`.
pub fn label_row(
    label: Label,
    classes: usize,
    dropout_p: f64,
    rng: Option<&mut RngStream>,
) -> Result<usize> {
    let row = match label {
        Label::Null => return Ok(classes),
        Label::Class(c) if c >= classes => {
            return Err(Error::input(format!("class id {c} out of range for {classes} classes")))
        }
        Label::Class(c) => c,
    };
    let dropped = match rng {
        Some(rng) if dropout_p > 0.0 => rng.bernoulli(dropout_p),
        _ => false,
    };
    Ok(if dropped { classes } else { row })
}

/// Looks up a label's embedding row. See [`label_row`] for dropout.
pub fn label_embedding(
    label: Label,
    table: &LabelTable,
    dropout_p: f64,
    rng: Option<&mut RngStream>,
) -> Result<Tensor> {
    let row = label_row(label, table.classes(), dropout_p, rng)?;
    Tensor::new(vec![1, table.table.shape()[1]], table.table.row(row).to_vec())
}

/// Per-block shift/scale/gate rows, each `[1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift_attn: Var,
    pub scale_attn: Var,
    pub gate_attn: Var,
    pub shift_mlp: Var,
    pub scale_mlp: Var,
    pub gate_mlp: Var,
}

/// Value snapshot of a [`Modulation`].
#[derive(Clone, Debug)]
pub struct ModulationParams {
    pub shift_attn: Tensor,
    pub scale_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_mlp: Tensor,
    pub scale_mlp: Tensor,
    pub gate_mlp: Tensor,
}

impl Modulation {
    pub fn snapshot(&self, tape: &Tape<'_>) -> ModulationParams {
        let v = |x: Var| tape.value(x).clone();
        ModulationParams {
            shift_attn: v(self.shift_attn),
            scale_attn: v(self.scale_attn),
            gate_attn: v(self.gate_attn),
            shift_mlp: v(self.shift_mlp),
            scale_mlp: v(self.scale_mlp),
            gate_mlp: v(self.gate_mlp),
        }
    }
}

/// Splits `SiLU(cond) W + b` (`W: [d, parts * d]`) into `parts` rows of width `d`.
pub fn modulation_rows(tape: &mut Tape<'_>, cond: Var, w: Var, b: Var, parts: usize) -> Result<Vec<Var>> {
    let (_, width) = tape.value(w).dims2()?;
    if parts == 0 || width % parts != 0 {
        return Err(Error::dim(format!("modulation width {width} not divisible into {parts}")));
    }
    let d = width / parts;
    let act = tape.silu(cond);
    let all = tape.matmul(act, w)?;
    let all = tape.add_row(all, b)?;
    (0..parts).map(|i| tape.slice_cols(all, i * d, d)).collect()
}

/// The six adaLN rows of one block.
pub fn modulation(tape: &mut Tape<'_>, cond: Var, w: Var, b: Var) -> Result<Modulation> {
    let r = modulation_rows(tape, cond, w, b, 6)?;
    Ok(Modulation {
        shift_attn: r[0],
        scale_attn: r[1],
        gate_attn: r[2],
        shift_mlp: r[3],
        scale_mlp: r[4],
        gate_mlp: r[5],
    })
}

/// `layer_norm(x) * (1 + scale) + shift`, with the rows broadcast over tokens.
pub fn modulate(tape: &mut Tape<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let normed = tape.layer_norm(x, NORM_EPS);
    let width = tape.value(scale).len();
    let ones = tape.constant(Tensor::ones(&[1, width]));
    let factor = tape.add(scale, ones)?;
    let scaled = tape.mul_row(normed, factor)?;
    tape.add_row(scaled, shift)
}

/// `x + gate * y`, with the gate row broadcast over tokens.
pub fn gated_residual(tape: &mut Tape<'_>, x: Var, gate: Var, y: Var) -> Result<Var> {
    let g = tape.mul_row(y, gate)?;
    tape.add(x, g)
}
