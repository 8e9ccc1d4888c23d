//! Multi-head attention without any positional term, optionally masked.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{self, AttentionMask};
use crate::tensor::Tensor;

/// Projection weights of one attention layer. Tokens are rows, so
/// `Q = X W_q` and the output is `concat(heads) W_o`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    heads: usize,
}

impl AttentionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let (d, d2) = w_q.dims2()?;
        if d != d2 {
            return Err(Error::dim("attention projections must be square"));
        }
        for w in [&w_k, &w_v, &w_o] {
            if w.shape() != [d, d] {
                return Err(Error::dim(format!(
                    "projection shape {:?} differs from {d}x{d}",
                    w.shape()
                )));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    Off,
    #[default]
    LogRatio,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::Off => "off",
            ScaleMode::LogRatio => "log_ratio",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "none" => Ok(ScaleMode::Off),
            "log_ratio" | "log" => Ok(ScaleMode::LogRatio),
            other => Err(Error::config(format!("unknown logit scale mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogitScalePolicy {
    pub train_len: usize,
    pub mode: ScaleMode,
}

/// Multiplier for pre-softmax logits when running at `infer_len` tokens:
/// `max(1, ln(infer_len) / ln(train_len))`, or 1 when scaling is off.
pub fn attention_logit_scale(policy: LogitScalePolicy, infer_len: usize) -> Result<f64> {
    if policy.train_len < 2 {
        return Err(Error::config(format!(
            "logit scaling needs a training length >= 2, got {}",
            policy.train_len
        )));
    }
    if infer_len == 0 {
        return Err(Error::input("inference length must be positive"));
    }
    Ok(match policy.mode {
        ScaleMode::Off => 1.0,
        ScaleMode::LogRatio => {
            let r = (infer_len as f64).ln() / (policy.train_len as f64).ln();
            r.max(1.0)
        }
    })
}

/// Tape handles of one layer's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Records multi-head attention of `x: [n, d]` on the tape.
///
/// Per head: `softmax(scale * Q K^T / sqrt(head_dim) + M) V`. The scale is
/// applied before the additive mask, so hidden entries stay hidden. When
/// `maps` is given, each head's attention matrix is pushed into it.
pub fn attention_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    w: AttentionVars,
    heads: usize,
    additive_mask: Option<&Tensor>,
    scale: f64,
    mut maps: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (n, d) = tape.value(x).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("hidden dim {d} not divisible by {heads} heads")));
    }
    if let Some(m) = additive_mask {
        if m.shape() != [n, n] {
            return Err(Error::dim(format!(
                "mask {:?} does not cover {n} tokens",
                m.shape()
            )));
        }
    }
    let hd = d / heads;
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let logit_scale = scale / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, hd)?,
                tape.slice_cols(k, h * hd, hd)?,
                tape.slice_cols(v, h * hd, hd)?,
            )
        };
        let scores = tape.matmul_t(qh, false, kh, true)?;
        let scores = tape.scale(scores, logit_scale);
        let attn = tape.softmax(scores, additive_mask)?;
        if let Some(maps) = maps.as_deref_mut() {
            maps.push(attn);
        }
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(merged, w.w_o)
}

/// Attention output together with each head's attention matrix.
pub struct AttentionOutput {
    pub output: Tensor,
    pub maps: Vec<Tensor>,
}

pub fn masked_attention_with_maps(
    x: &Tensor,
    w: &AttentionWeights,
    mask: Option<&AttentionMask>,
    scale: f64,
) -> Result<AttentionOutput> {
    let (n, d) = x.dims2()?;
    if d != w.dim() {
        return Err(Error::dim(format!("tokens have width {d}, weights expect {}", w.dim())));
    }
    let additive = match mask {
        Some(m) if m.tokens() != n => {
            return Err(Error::dim(format!(
                "mask covers {} tokens, input has {n}",
                m.tokens()
            )))
        }
        Some(m) => Some(mask::to_additive(m)),
        None => None,
    };
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let vars = AttentionVars {
        w_q: tape.constant_ref(&w.w_q),
        w_k: tape.constant_ref(&w.w_k),
        w_v: tape.constant_ref(&w.w_v),
        w_o: tape.constant_ref(&w.w_o),
    };
    let mut maps = Vec::new();
    let out = attention_on_tape(
        &mut tape,
        xv,
        vars,
        w.heads(),
        additive.as_ref(),
        scale,
        Some(&mut maps),
    )?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        maps: maps.into_iter().map(|m| tape.value(m).clone()).collect(),
    })
}

pub fn masked_attention(
    x: &Tensor,
    w: &AttentionWeights,
    mask: Option<&AttentionMask>,
    scale: f64,
) -> Result<Tensor> {
    Ok(masked_attention_with_maps(x, w, mask, scale)?.output)
}

/// Number of attention scores computed for `len` tokens: `len^2` for full
/// attention, `len (len + 1) / 2` for raster-causal attention.
pub fn score_op_count(len: usize, causal: bool) -> usize {
    if causal {
        len * (len + 1) / 2
    } else {
        len * len
    }
}

/// Scores actually computed under an arbitrary mask: its visible pairs.
pub fn mask_score_op_count(mask: &AttentionMask) -> usize {
    mask.visible_pairs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_mask, ScanVariant};
    use crate::ops;
    use crate::rng::RngStream;

    fn random_weights(d: usize, heads: usize, rng: &mut RngStream) -> AttentionWeights {
        let s = 1.0 / (d as f64).sqrt();
        AttentionWeights::new(
            Tensor::randn(&[d, d], s, rng),
            Tensor::randn(&[d, d], s, rng),
            Tensor::randn(&[d, d], s, rng),
            Tensor::randn(&[d, d], s, rng),
            heads,
        )
        .unwrap()
    }

    /// Scalar loops over heads, queries and keys.
    fn reference_attention(x: &Tensor, w: &AttentionWeights, scale: f64) -> Tensor {
        let (n, d) = x.dims2().unwrap();
        let hd = w.head_dim();
        let proj = |m: &Tensor| ops::matmul(x, m).unwrap();
        let (q, k, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
        let mut merged = Tensor::zeros(&[n, d]);
        for h in 0..w.heads() {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let s: f64 = (h * hd..(h + 1) * hd).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum();
                        scale * s / (hd as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in h * hd..(h + 1) * hd {
                    let acc: f64 = e.iter().enumerate().map(|(j, ej)| ej / z * v.at(&[j, c])).sum();
                    merged.set(&[i, c], acc);
                }
            }
        }
        ops::matmul(&merged, &w.w_o).unwrap()
    }

    #[test]
    fn logit_scale_rules() {
        let p = LogitScalePolicy {
            train_len: 256,
            mode: ScaleMode::LogRatio,
        };
        assert_eq!(attention_logit_scale(p, 256).unwrap(), 1.0);
        assert!((attention_logit_scale(p, 1024).unwrap() - 1.25).abs() < 1e-15);
        assert_eq!(attention_logit_scale(p, 16).unwrap(), 1.0);
        let off = LogitScalePolicy {
            mode: ScaleMode::Off,
            ..p
        };
        assert_eq!(attention_logit_scale(off, 1024).unwrap(), 1.0);
        let bad = LogitScalePolicy { train_len: 1, ..p };
        assert!(matches!(attention_logit_scale(bad, 4), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_is_value_then_output_projection() {
        let mut rng = RngStream::new(1, 0);
        let w = random_weights(4, 2, &mut rng);
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let got = masked_attention(&x, &w, None, 1.0).unwrap();
        let want = ops::matmul(&ops::matmul(&x, &w.w_v).unwrap(), &w.w_o).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn matches_reference_loops() {
        let mut rng = RngStream::new(2, 0);
        let w = random_weights(6, 3, &mut rng);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        for scale in [1.0, 1.25] {
            let got = masked_attention(&x, &w, None, scale).unwrap();
            let want = reference_attention(&x, &w, scale);
            assert!(got.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn first_token_sees_only_itself() {
        let mut rng = RngStream::new(3, 0);
        let w = random_weights(4, 2, &mut rng);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let m = build_mask(ScanVariant::OneD, 1, 4).unwrap();
        let out = masked_attention_with_maps(&x, &w, Some(&m), 1.0).unwrap();
        for map in &out.maps {
            assert_eq!(map.row(0), &[1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn mask_size_mismatch() {
        let mut rng = RngStream::new(4, 0);
        let w = random_weights(4, 1, &mut rng);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let m = build_mask(ScanVariant::OneD, 2, 2).unwrap();
        assert!(matches!(
            masked_attention(&x, &w, Some(&m), 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let z = || Tensor::zeros(&[6, 6]);
        assert!(AttentionWeights::new(z(), z(), z(), z(), 4).is_err());
    }

    #[test]
    fn op_counts() {
        assert_eq!(score_op_count(4, false), 16);
        assert_eq!(score_op_count(4, true), 10);
        assert_eq!(score_op_count(1, true), 1);
        assert_eq!(score_op_count(1, false), 1);
        let a = build_mask(ScanVariant::OneD, 1, 16).unwrap();
        assert_eq!(mask_score_op_count(&a), score_op_count(16, true));
    }
}
