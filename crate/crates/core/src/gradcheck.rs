//! Central finite-difference check of tape gradients.

use crate::attention::AttentionVars;
use crate::autograd::{Tape, Var};
use crate::conditioning;
use crate::error::{Error, Result};
use crate::mask::{self, ScanVariant};
use crate::model::{self, BlockVars};
use crate::ops::ConvSpec;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Compares the tape gradient of `f` against central differences with step
/// `h` and returns the worst `|analytic - numeric| / max(1, |analytic|)`
/// over every coordinate of every input.
///
/// `f` receives one learnable [`Var`] per input. A non-scalar result is
/// sum-reduced first.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).sum();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: f evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out = if tape.value(out).len() == 1 {
        out
    } else {
        tape.sum(out)
    };
    tape.value(out).check_finite("grad_check output")?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0_f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        analytic.check_finite("analytic gradient")?;
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Finite-difference step used by [`standard_suite`].
pub const SUITE_STEP: f64 = 1e-5;

/// `sum(out * weights)` with fixed random weights, so the reduction does not
/// hide gradient errors (a plain sum of a softmax is constant).
fn weighted(tape: &mut Tape<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut RngStream::new(seed, 99)));
    tape.mul(out, w)
}

/// Gradient checks of every differentiable building block on random inputs
/// drawn from `seed`. Returns `(name, max relative error)` pairs.
pub fn standard_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = RngStream::new(seed, 0);
    let mut randn = |shape: &[usize], std: f64| Tensor::randn(shape, std, &mut rng);
    let h = SUITE_STEP;
    let mut out = Vec::new();

    out.push((
        "matmul",
        grad_check(|t, v| t.matmul(v[0], v[1]), &[randn(&[3, 4], 1.0), randn(&[4, 2], 1.0)], h)?,
    ));
    out.push((
        "softmax",
        grad_check(
            |t, v| {
                let y = t.softmax(v[0], None)?;
                weighted(t, y, seed)
            },
            &[randn(&[3, 5], 1.0)],
            h,
        )?,
    ));
    let causal = mask::to_additive(&mask::build_mask(ScanVariant::LowerRightCorner, 2, 3)?);
    out.push((
        "softmax_masked",
        grad_check(
            |t, v| {
                let y = t.softmax(v[0], Some(&causal))?;
                weighted(t, y, seed)
            },
            &[randn(&[6, 6], 1.0)],
            h,
        )?,
    ));
    for (name, spec) in [("conv2d_d1", ConvSpec::BASE), ("conv2d_d2", ConvSpec::dilated(2))] {
        out.push((
            name,
            grad_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], spec)?;
                    weighted(t, y, seed)
                },
                &[randn(&[2, 5, 5], 1.0), randn(&[3, 2, 3, 3], 0.5), randn(&[3], 0.5)],
                h,
            )?,
        ));
    }
    out.push((
        "layer_norm",
        grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], conditioning::NORM_EPS);
                weighted(t, y, seed)
            },
            &[randn(&[4, 6], 1.0)],
            h,
        )?,
    ));
    out.push((
        "modulation",
        grad_check(
            |t, v| {
                let m = conditioning::modulation(t, v[1], v[2], v[3])?;
                let y = conditioning::modulate(t, v[0], m.shift_attn, m.scale_attn)?;
                let y = conditioning::gated_residual(t, v[0], m.gate_attn, y)?;
                weighted(t, y, seed)
            },
            &[randn(&[4, 6], 1.0), randn(&[1, 6], 1.0), randn(&[6, 36], 0.3), randn(&[36], 0.3)],
            h,
        )?,
    ));
    let (d, mlp) = (8, 16);
    let block_inputs = [
        randn(&[6, d], 1.0),
        randn(&[1, d], 1.0),
        randn(&[d, 6 * d], 0.2),
        randn(&[6 * d], 0.2),
        randn(&[d, d], 0.4),
        randn(&[d, d], 0.4),
        randn(&[d, d], 0.4),
        randn(&[d, d], 0.4),
        randn(&[d, mlp], 0.3),
        randn(&[mlp], 0.3),
        randn(&[mlp, d], 0.3),
        randn(&[d], 0.3),
    ];
    out.push((
        "block",
        grad_check(
            |t, v| {
                let vars = BlockVars {
                    ada_w: v[2],
                    ada_b: v[3],
                    attn: AttentionVars {
                        w_q: v[4],
                        w_k: v[5],
                        w_v: v[6],
                        w_o: v[7],
                    },
                    fc1_w: v[8],
                    fc1_b: v[9],
                    fc2_w: v[10],
                    fc2_b: v[11],
                };
                let y = model::transformer_block(t, v[0], v[1], &vars, 2, Some(&causal), 1.25)?;
                weighted(t, y.output, seed)
            },
            &block_inputs,
            h,
        )?,
    ));
    Ok(out)
}
