//! DDPM noise schedule, epsilon-prediction training and ancestral sampling
//! with classifier-free guidance.

use crate::autograd::Tape;
use crate::conditioning::{self, Label};
use crate::error::{Error, Result};
use crate::locality::{self, ConvSpec};
use crate::model::{ForwardOptions, Ledit};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::input(format!("timestep {t} out of range for {} steps", self.steps()))
        })
    }

    /// `count` timesteps evenly spaced over `[0, T-1]`, descending.
    pub fn respaced(&self, count: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if count == 0 || count > total {
            return Err(Error::config(format!("sampling steps {count} must be in 1..={total}")));
        }
        if count == 1 {
            return Ok(vec![total - 1]);
        }
        let mut ts: Vec<usize> = (0..count)
            .map(|k| ((k * (total - 1)) as f64 / (count - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

impl Default for DiffusionSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "betas must satisfy 0 < {beta_start} < {beta_end} < 1"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::dim(format!(
            "noise shape {:?} differs from image shape {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(noise, |x, n| a * x + b * n)
}

/// `eps_null + w * (eps_c - eps_null)`.
pub fn cfg_combine(eps_c: &Tensor, eps_null: &Tensor, w: f64) -> Result<Tensor> {
    eps_null.zip_map(eps_c, |n, c| n + w * (c - n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub label_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            label_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("steps and batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::config(format!(
                "label dropout {} must lie in [0, 1]",
                self.label_dropout
            )));
        }
        Ok(())
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient shape {:?} differs from parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub conv_spec: ConvSpec,
}

/// Loss and parameter gradients for one noised sample.
pub fn sample_loss(
    model: &Ledit,
    x_t: &Tensor,
    t: usize,
    label_row: usize,
    noise: &Tensor,
    opts: &ForwardOptions,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let trace = model.forward_on_tape(&mut tape, &vars, x_t, t, label_row, opts)?;
    let target = locality::patch_rows(noise, model.config().patch)?;
    let loss = tape.mse(trace.patches, target)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// One optimizer update on a batch of clean images `[C, H, W]`.
///
/// A single conv spec is drawn for the whole step from the model's
/// multi-dilation policy. Per-sample gradients are
/// summed in batch order and averaged.
pub fn training_step(
    model: &mut Ledit,
    optimizer: &mut Adam,
    images: &[Tensor],
    labels: &[usize],
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<StepReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::input(format!(
            "batch has {} images and {} labels",
            images.len(),
            labels.len()
        )));
    }
    let conv_spec = locality::sample_conv_spec(&model.config().dilation, rng);
    let opts = ForwardOptions {
        conv_spec,
        ..ForwardOptions::default()
    };
    let classes = model.config().classes;
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (x0, &label) in images.iter().zip(labels) {
        let t = rng.below(schedule.steps());
        let noise = Tensor::randn(x0.shape(), 1.0, rng);
        let row = conditioning::label_row(Label::Class(label), classes, config.label_dropout, Some(rng))?;
        let x_t = q_sample(x0, t, &noise, schedule)?;
        let (loss, grads) = sample_loss(model, &x_t, t, row, &noise, &opts)?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g);
                }
            }
        }
    }
    let n = images.len() as f64;
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss is {loss}")));
    }
    let mut grads = acc.expect("non-empty batch");
    for g in &mut grads {
        g.scale_assign(1.0 / n);
    }
    optimizer.update(model.params_mut(), &grads)?;
    Ok(StepReport { loss, conv_spec })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub label: Label,
    pub switch_threshold: Option<usize>,
    /// `None` derives the logit scale from the token count.
    pub logit_scale: Option<f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 1.5,
            label: Label::Class(0),
            switch_threshold: None,
            logit_scale: None,
        }
    }
}

/// Ancestral sampling over a respaced timestep grid, starting from Gaussian
/// noise of shape `[C, height, width]`.
pub fn ddpm_sample(
    model: &Ledit,
    height: usize,
    width: usize,
    schedule: &DiffusionSchedule,
    config: &SampleConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let patch = model.config().patch;
    if height == 0 || width == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::dim(format!(
            "{height}x{width} not divisible by patch {patch}"
        )));
    }
    let ts = schedule.respaced(config.steps)?;
    let shape = [model.config().channels, height, width];
    let mut x = Tensor::randn(&shape, 1.0, rng);
    let opts = ForwardOptions {
        conv_spec: ConvSpec::BASE,
        logit_scale: config.logit_scale,
        switch_threshold: config.switch_threshold,
        capture_block: None,
    };
    for (k, &t) in ts.iter().enumerate() {
        let eps_c = model.forward(&x, t, config.label, &opts)?;
        let eps = if config.cfg_scale == 1.0 || config.label == Label::Null {
            eps_c
        } else {
            let eps_null = model.forward(&x, t, Label::Null, &opts)?;
            cfg_combine(&eps_c, &eps_null, config.cfg_scale)?
        };
        let ab_t = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(k + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let beta = 1.0 - ab_t / ab_prev;
        let x0 = x.zip_map(&eps, |xv, e| {
            ((xv - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt()).clamp(-1.0, 1.0)
        })?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mut next = x0.zip_map(&x, |a, b| c0 * a + ct * b)?;
        if k + 1 < ts.len() {
            let std = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
            let z = Tensor::randn(&shape, 1.0, rng);
            next.add_assign(&z.map(|v| std * v));
        }
        if !next.is_finite() {
            return Err(Error::Numeric(format!("non-finite sample at step {k} (t={t})")));
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 2,
            hidden: 8,
            heads: 2,
            channels: 1,
            mlp_ratio: 2,
            freq_dim: 8,
            train_size: (4, 4),
            classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn two_step_schedule() {
        let s = linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_monotone() {
        let s = DiffusionSchedule::default();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
        assert!((s.alpha_bars()[0].sqrt() - 0.99995).abs() < 1e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(matches!(linear_schedule(10, 0.2, 0.1), Err(Error::Config(_))));
        assert!(matches!(linear_schedule(10, 0.0, 0.1), Err(Error::Config(_))));
        assert!(matches!(linear_schedule(10, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn q_sample_without_noise() {
        let s = DiffusionSchedule::default();
        let x0 = Tensor::from_vec(vec![1.0, -2.0]);
        let z = Tensor::zeros(&[2]);
        let xt = q_sample(&x0, 500, &z, &s).unwrap();
        let a = s.alpha_bars()[500].sqrt();
        assert_eq!(xt.data(), &[a, -2.0 * a]);
        assert!(matches!(q_sample(&x0, 1000, &z, &s), Err(Error::Input(_))));
    }

    #[test]
    fn q_sample_variance() {
        let s = DiffusionSchedule::default();
        let mut rng = RngStream::new(9, 0);
        let draws = 10_000;
        for t in [0, 250, 500, 750, 999] {
            let x0 = Tensor::randn(&[draws], 1.0, &mut rng);
            let noise = Tensor::randn(&[draws], 1.0, &mut rng);
            let xt = q_sample(&x0, t, &noise, &s).unwrap();
            let var = |v: &Tensor| {
                let m = v.mean();
                v.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / draws as f64
            };
            let ab = s.alpha_bars()[t];
            let want = ab * var(&x0) + (1.0 - ab);
            let got = var(&xt);
            assert!((got - want).abs() / want <= 0.02, "t={t} {got} vs {want}");
        }
    }

    #[test]
    fn guidance_identities() {
        let c = Tensor::from_vec(vec![1.0, 2.0]);
        let n = Tensor::from_vec(vec![-1.0, 0.5]);
        assert_eq!(cfg_combine(&c, &n, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_combine(&c, &n, 0.0).unwrap().data(), n.data());
        assert_eq!(cfg_combine(&c, &c, 7.0).unwrap().data(), c.data());
        assert!(cfg_combine(&c, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn respacing_covers_range() {
        let s = DiffusionSchedule::default();
        let ts = s.respaced(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(s.respaced(1001).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -1.0])];
        let g = vec![Tensor::from_vec(vec![0.3, -5.0])];
        let mut adam = Adam::new(0.1, &p);
        adam.update(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn init_loss_is_noise_energy() {
        let model = Ledit::new(tiny(), &mut RngStream::new(0, 0)).unwrap();
        let mut rng = RngStream::new(1, 0);
        let noise = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let (loss, grads) = sample_loss(&model, &x, 10, 0, &noise, &ForwardOptions::default()).unwrap();
        let want = noise.data().iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!((loss - want).abs() < 1e-12);
        assert_eq!(grads.len(), model.params().len());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut model = Ledit::new(tiny(), &mut RngStream::new(0, 0)).unwrap();
            let cfg = TrainConfig { batch: 2, ..TrainConfig::default() };
            let mut adam = Adam::new(cfg.lr, model.params());
            let mut rng = RngStream::new(5, 1);
            let images = vec![Tensor::full(&[1, 4, 4], 0.5), Tensor::full(&[1, 4, 4], -0.5)];
            let s = DiffusionSchedule::default();
            (0..3)
                .map(|_| training_step(&mut model, &mut adam, &images, &[0, 1], &s, &cfg, &mut rng).unwrap().loss)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let model = Ledit::new(tiny(), &mut RngStream::new(0, 0)).unwrap();
        let s = DiffusionSchedule::default();
        let cfg = SampleConfig { steps: 5, ..SampleConfig::default() };
        let a = ddpm_sample(&model, 8, 4, &s, &cfg, &mut RngStream::new(3, 0)).unwrap();
        let b = ddpm_sample(&model, 8, 4, &s, &cfg, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(a.shape(), &[1, 8, 4]);
        assert!(a.bit_eq(&b));
        assert!(matches!(
            ddpm_sample(&model, 5, 4, &s, &cfg, &mut RngStream::new(3, 0)),
            Err(Error::Dimension(_))
        ));
    }
}
