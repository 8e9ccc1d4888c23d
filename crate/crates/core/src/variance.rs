//! Monte-Carlo lab for the variance of causal attention outputs.
//!
//! For a query that sees `i` tokens, the attention weights are
//! `W_ij = Z_j / sum_k Z_k` and the output is `Y_i = sum_j W_ij V_j` with
//! i.i.d. values `V_j ~ N(mu, sigma^2)`. When the `Z_j` are unit exponentials
//! the weights are exactly Dirichlet(1, ..., 1).

use std::fmt;
use std::str::FromStr;
use std::thread;

use crate::conditioning::Label;
use crate::diffusion::{self, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, ForwardOptions, Ledit};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `2 sigma^2 / (i + 1) + (i - 1) mu^2 / (i (i + 1))` for `i` visible tokens.
pub fn theoretical_variance(i: usize, mu: f64, sigma: f64) -> Result<f64> {
    if i == 0 {
        return Err(Error::input("position must be at least 1"));
    }
    let i = i as f64;
    Ok(2.0 * sigma * sigma / (i + 1.0) + (i - 1.0) * mu * mu / (i * (i + 1.0)))
}

/// `C / (i + 1)` with `C = 2 sigma^2 + mu^2`, the large-`i` form. Its
/// relative gap to [`theoretical_variance`] is at most `1 / i` whenever
/// `mu^2 <= 2 i sigma^2`.
pub fn asymptotic_variance(i: usize, mu: f64, sigma: f64) -> Result<f64> {
    if i == 0 {
        return Err(Error::input("position must be at least 1"));
    }
    Ok((2.0 * sigma * sigma + mu * mu) / (i as f64 + 1.0))
}

/// `E[W_ij] = 1 / i` under Dirichlet(1, ..., 1).
pub fn dirichlet_first_moment(i: usize) -> Result<f64> {
    if i == 0 {
        return Err(Error::input("position must be at least 1"));
    }
    Ok(1.0 / i as f64)
}

/// `E[W_ij^2] = 2 / (i (i + 1))` under Dirichlet(1, ..., 1).
pub fn dirichlet_second_moment(i: usize) -> Result<f64> {
    if i == 0 {
        return Err(Error::input("position must be at least 1"));
    }
    let i = i as f64;
    Ok(2.0 / (i * (i + 1.0)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogitLaw {
    /// `Z ~ Exp(1)`, making the weights exactly Dirichlet.
    #[default]
    ExponentialExact,
    /// `Z = exp(S)` with `S ~ N(0, 1)`, a softmax over Gaussian logits.
    Gaussian,
}

impl LogitLaw {
    pub fn as_str(self) -> &'static str {
        match self {
            LogitLaw::ExponentialExact => "exp",
            LogitLaw::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for LogitLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogitLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exp" | "exponential" | "exponential_exact" => Ok(LogitLaw::ExponentialExact),
            "gaussian" | "normal" => Ok(LogitLaw::Gaussian),
            other => Err(Error::config(format!("unknown logit law `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub trials: usize,
    pub law: LogitLaw,
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub threads: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 64,
            trials: 1_000_000,
            law: LogitLaw::ExponentialExact,
            mu: 0.0,
            sigma: 1.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.trials == 0 {
            return Err(Error::config("n and trials must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite() && self.mu.is_finite()) {
            return Err(Error::config(format!("invalid value law mu={} sigma={}", self.mu, self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionStat {
    /// Number of visible tokens, starting at 1.
    pub position: usize,
    pub empirical_var: f64,
    pub theoretical_var: f64,
    pub rel_error: f64,
    /// Empirical mean of the first token's weight.
    pub weight_mean: f64,
    /// Empirical mean of the squared first-token weight.
    pub weight_sq_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub config: SimConfig,
    pub positions: Vec<PositionStat>,
}

impl VarianceReport {
    pub fn max_rel_error(&self) -> f64 {
        self.positions.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn stat(&self, position: usize) -> Option<&PositionStat> {
        position.checked_sub(1).and_then(|i| self.positions.get(i))
    }
}

/// Running sums for one chunk of trials.
#[derive(Clone)]
struct Sums {
    y: Vec<f64>,
    y2: Vec<f64>,
    w: Vec<f64>,
    w2: Vec<f64>,
}

impl Sums {
    fn new(n: usize) -> Self {
        Self {
            y: vec![0.0; n],
            y2: vec![0.0; n],
            w: vec![0.0; n],
            w2: vec![0.0; n],
        }
    }

    fn merge(&mut self, other: &Sums) {
        for (dst, src) in [
            (&mut self.y, &other.y),
            (&mut self.y2, &other.y2),
            (&mut self.w, &other.w),
            (&mut self.w2, &other.w2),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

const CHUNK_TRIALS: usize = 1 << 16;

fn run_chunk(cfg: &SimConfig, chunk: usize, trials: usize) -> Sums {
    let n = cfg.n;
    let mut rng = RngStream::new(cfg.seed, chunk as u64);
    let mut sums = Sums::new(n);
    for _ in 0..trials {
        let mut z_sum = 0.0;
        let mut zv_sum = 0.0;
        let mut z_first = 0.0;
        for i in 0..n {
            let z = match cfg.law {
                LogitLaw::ExponentialExact => rng.exponential(),
                LogitLaw::Gaussian => rng.normal().exp(),
            };
            let v = cfg.mu + cfg.sigma * rng.normal();
            if i == 0 {
                z_first = z;
            }
            z_sum += z;
            zv_sum += z * v;
            let y = zv_sum / z_sum;
            let w = z_first / z_sum;
            sums.y[i] += y;
            sums.y2[i] += y * y;
            sums.w[i] += w;
            sums.w2[i] += w * w;
        }
    }
    sums
}

/// Runs the simulation in fixed-size chunks, each with its own RNG stream,
/// and merges them in chunk order.
pub fn simulate_causal_variance(cfg: &SimConfig) -> Result<VarianceReport> {
    cfg.validate()?;
    let chunks: Vec<(usize, usize)> = (0..cfg.trials.div_ceil(CHUNK_TRIALS))
        .map(|c| (c, CHUNK_TRIALS.min(cfg.trials - c * CHUNK_TRIALS)))
        .collect();
    let threads = cfg.threads.max(1).min(chunks.len());
    let mut results: Vec<Option<Sums>> = vec![None; chunks.len()];
    thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|tid| {
                let chunks = &chunks;
                s.spawn(move || {
                    chunks
                        .iter()
                        .skip(tid)
                        .step_by(threads)
                        .map(|&(c, k)| (c, run_chunk(cfg, c, k)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (c, sums) in h.join().expect("simulation worker panicked") {
                results[c] = Some(sums);
            }
        }
    });
    let mut total = Sums::new(cfg.n);
    for r in results.iter().flatten() {
        total.merge(r);
    }

    let m = cfg.trials as f64;
    let positions = (0..cfg.n)
        .map(|i| {
            let mean = total.y[i] / m;
            let empirical_var = (total.y2[i] / m - mean * mean).max(0.0);
            let theoretical_var = theoretical_variance(i + 1, cfg.mu, cfg.sigma)?;
            let rel_error = if theoretical_var > 0.0 {
                (empirical_var - theoretical_var).abs() / theoretical_var
            } else {
                empirical_var.abs()
            };
            Ok(PositionStat {
                position: i + 1,
                empirical_var,
                theoretical_var,
                rel_error,
                weight_mean: total.w[i] / m,
                weight_sq_mean: total.w2[i] / m,
            })
        })
        .collect::<Result<_>>()?;
    Ok(VarianceReport {
        config: cfg.clone(),
        positions,
    })
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::input(format!(
            "spearman needs equal non-empty lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Which activation of the probed block is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProbeSite {
    /// Attention output before the gate and residual.
    #[default]
    Attention,
    /// Block output after both residual branches.
    Block,
}

impl FromStr for ProbeSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" | "attn" => Ok(ProbeSite::Attention),
            "block" => Ok(ProbeSite::Block),
            other => Err(Error::config(format!("unknown probe site `{other}`"))),
        }
    }
}

/// Variance over the feature dimension of each row of `[tokens, d]`.
pub fn token_feature_variance(x: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    Ok((0..n)
        .map(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64
        })
        .collect())
}

/// Per-token variance profile of a causal block.
///
/// Each clean image is noised to timestep `t`, run through the model, and
/// the probed activation's feature variance per token is averaged over the
/// batch.
pub fn model_layer_variance(
    model: &Ledit,
    images: &[(Tensor, Label)],
    schedule: &DiffusionSchedule,
    t: usize,
    layer: usize,
    site: ProbeSite,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let modes = model.config().block_modes()?;
    match modes.get(layer) {
        None => {
            return Err(Error::input(format!(
                "layer {layer} out of range for depth {}",
                modes.len()
            )))
        }
        Some(AttentionMode::SelfAttention) => {
            return Err(Error::input(format!("layer {layer} is a self-attention block")))
        }
        Some(AttentionMode::Causal) => {}
    }
    if images.is_empty() {
        return Err(Error::input("need at least one image"));
    }
    let opts = ForwardOptions {
        capture_block: Some(layer),
        ..ForwardOptions::default()
    };
    let mut acc: Vec<f64> = Vec::new();
    for (x0, label) in images {
        let noise = Tensor::randn(x0.shape(), 1.0, rng);
        let x_t = diffusion::q_sample(x0, t, &noise, schedule)?;
        let (_, captured) = model.forward_capture(&x_t, t, *label, &opts)?;
        let captured = captured.expect("capture requested");
        let act = match site {
            ProbeSite::Attention => captured.attention,
            ProbeSite::Block => captured.block,
        };
        let v = token_feature_variance(&act)?;
        if acc.is_empty() {
            acc = v;
        } else if acc.len() != v.len() {
            return Err(Error::dim("images in one batch must share a resolution"));
        } else {
            for (a, b) in acc.iter_mut().zip(&v) {
                *a += b;
            }
        }
    }
    let n = images.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn closed_form_values() {
        assert_eq!(theoretical_variance(1, 3.0, 2.0).unwrap(), 4.0);
        assert!((theoretical_variance(9, 0.0, 1.0).unwrap() - 0.2).abs() < 1e-15);
        assert!((theoretical_variance(3, 1.0, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(theoretical_variance(0, 0.0, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn dirichlet_moment_values() {
        assert_eq!(dirichlet_second_moment(1).unwrap(), 1.0);
        assert!((dirichlet_second_moment(3).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!((dirichlet_second_moment(4).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(dirichlet_first_moment(4).unwrap(), 0.25);
        assert!(dirichlet_second_moment(0).is_err());
    }

    #[test]
    fn asymptotic_form_within_one_over_i() {
        for i in 10..=1000 {
            for (mu, sigma) in [(0.0, 1.0), (1.0, 1.0), (2.0, 0.5), (3.0, 1.0)] {
                let exact = theoretical_variance(i, mu, sigma).unwrap();
                let approx = asymptotic_variance(i, mu, sigma).unwrap();
                assert!((approx - exact).abs() / exact <= 1.0 / i as f64, "i={i}");
            }
        }
    }

    #[test]
    fn single_position_matches_sigma() {
        let cfg = SimConfig { n: 1, trials: 100_000, sigma: 1.5, ..SimConfig::default() };
        let r = simulate_causal_variance(&cfg).unwrap();
        assert!((r.positions[0].empirical_var - 2.25).abs() / 2.25 < 0.02);
        assert_eq!(r.positions[0].weight_mean, 1.0);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let base = SimConfig { n: 8, trials: 200_000, ..SimConfig::default() };
        let a = simulate_causal_variance(&base).unwrap();
        let b = simulate_causal_variance(&SimConfig { threads: 3, ..base.clone() }).unwrap();
        assert_eq!(a.positions, b.positions);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(spearman(&[1.0], &[1.0, 2.0]), Err(Error::Input(_))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn self_attention_layer_rejected() {
        let cfg = ModelConfig {
            depth: 2,
            hidden: 8,
            heads: 2,
            channels: 1,
            freq_dim: 8,
            train_size: (4, 4),
            ..ModelConfig::default()
        };
        let model = Ledit::new(cfg, &mut RngStream::new(0, 0)).unwrap();
        let images = vec![(Tensor::zeros(&[1, 4, 4]), Label::Null)];
        let s = DiffusionSchedule::default();
        let mut rng = RngStream::new(1, 0);
        assert!(matches!(
            model_layer_variance(&model, &images, &s, 900, 0, ProbeSite::Attention, &mut rng),
            Err(Error::Input(_))
        ));
        let profile = model_layer_variance(&model, &images, &s, 900, 1, ProbeSite::Attention, &mut rng).unwrap();
        assert_eq!(profile.len(), 4);
    }
}
