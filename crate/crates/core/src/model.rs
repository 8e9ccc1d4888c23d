//! The full denoiser: patch embedding, locality conv, a stack of
//! self-/causal-attention blocks with adaLN-Zero, and a linear head.
//!
//! No positional encoding is added anywhere. Masks are built for whatever
//! grid the input produces, so the same weights run at any resolution that
//! the patch size divides.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use crate::attention::{self, AttentionVars, LogitScalePolicy, ScaleMode};
use crate::autograd::{Tape, Var};
use crate::conditioning::{self, Label, TimestepMlp};
use crate::error::{Error, Result};
use crate::locality::{self, ConvSpec, MultiDilationPolicy};
use crate::mask::{self, ScanVariant};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockOrder {
    /// First half causal, second half self-attention.
    CaThenSa,
    /// First half self-attention, second half causal.
    SaThenCa,
    AltCaSa,
    #[default]
    AltSaCa,
}

impl BlockOrder {
    pub const ALL: [BlockOrder; 4] = [
        BlockOrder::CaThenSa,
        BlockOrder::SaThenCa,
        BlockOrder::AltCaSa,
        BlockOrder::AltSaCa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockOrder::CaThenSa => "ca_then_sa",
            BlockOrder::SaThenCa => "sa_then_ca",
            BlockOrder::AltCaSa => "alt_ca_sa",
            BlockOrder::AltSaCa => "alt_sa_ca",
        }
    }
}

impl fmt::Display for BlockOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockOrder::ALL
            .into_iter()
            .find(|o| o.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown block order `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttention,
    Causal,
}

pub fn assign_block_modes(order: BlockOrder, depth: usize) -> Result<Vec<AttentionMode>> {
    use AttentionMode::{Causal as Ca, SelfAttention as Sa};
    if depth == 0 || !depth.is_multiple_of(2) {
        return Err(Error::config(format!("depth {depth} must be even and positive")));
    }
    let half = depth / 2;
    Ok((0..depth)
        .map(|i| match order {
            BlockOrder::CaThenSa => if i < half { Ca } else { Sa },
            BlockOrder::SaThenCa => if i < half { Sa } else { Ca },
            BlockOrder::AltCaSa => if i % 2 == 0 { Ca } else { Sa },
            BlockOrder::AltSaCa => if i % 2 == 0 { Sa } else { Ca },
        })
        .collect())
}

/// Per-block attention modes plus an optional timestep threshold below which
/// causal blocks drop their mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionModeSchedule {
    modes: Vec<AttentionMode>,
    switch_threshold: Option<usize>,
}

impl AttentionModeSchedule {
    pub fn new(modes: Vec<AttentionMode>, switch_threshold: Option<usize>) -> Self {
        Self {
            modes,
            switch_threshold,
        }
    }

    pub fn modes(&self) -> &[AttentionMode] {
        &self.modes
    }

    pub fn switch_threshold(&self) -> Option<usize> {
        self.switch_threshold
    }

    /// Effective mode of `block` at timestep `t`.
    pub fn mode_at(&self, block: usize, t: usize) -> AttentionMode {
        match (self.modes[block], self.switch_threshold) {
            (AttentionMode::Causal, Some(tp)) if t < tp => AttentionMode::SelfAttention,
            (m, _) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    /// Width of the timestep sinusoid fed to the timestep MLP.
    pub freq_dim: usize,
    pub scan: ScanVariant,
    pub order: BlockOrder,
    /// When false every block is self-attention.
    pub causal: bool,
    /// When false the locality conv is skipped.
    pub locality_conv: bool,
    pub dilation: MultiDilationPolicy,
    pub train_size: (usize, usize),
    pub classes: usize,
    pub logit_scale: ScaleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            hidden: 192,
            heads: 6,
            patch: 2,
            channels: 3,
            mlp_ratio: 4,
            freq_dim: 256,
            scan: ScanVariant::default(),
            order: BlockOrder::default(),
            causal: true,
            locality_conv: true,
            dilation: MultiDilationPolicy::default(),
            train_size: (16, 16),
            classes: 4,
            logit_scale: ScaleMode::LogRatio,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return Err(Error::config(format!("depth {} must be even and positive", self.depth)));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.classes == 0 {
            return Err(Error::config("patch, channels, mlp_ratio and classes must be positive"));
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::config(format!("freq_dim {} must be even", self.freq_dim)));
        }
        let (h, w) = self.train_size;
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::config(format!(
                "train size {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        if self.train_tokens() < 2 {
            return Err(Error::config("training grid needs at least two tokens"));
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let rates: Vec<String> = self.dilation.rates().iter().map(ToString::to_string).collect();
        vec![
            ("depth", self.depth.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("patch", self.patch.to_string()),
            ("channels", self.channels.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("freq_dim", self.freq_dim.to_string()),
            ("scan", self.scan.to_string()),
            ("order", self.order.to_string()),
            ("causal", self.causal.to_string()),
            ("locality_conv", self.locality_conv.to_string()),
            ("dilation_prob", format!("{:?}", self.dilation.probability())),
            ("dilation_rates", rates.join(",")),
            ("train_height", self.train_size.0.to_string()),
            ("train_width", self.train_size.1.to_string()),
            ("classes", self.classes.to_string()),
            ("logit_scale", self.logit_scale.to_string()),
        ]
    }

    /// Sets one field from text. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "depth" => self.depth = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "freq_dim" => self.freq_dim = parse(key, value)?,
            "scan" => self.scan = value.trim().parse()?,
            "order" => self.order = value.trim().parse()?,
            "causal" => self.causal = parse(key, value)?,
            "locality_conv" => self.locality_conv = parse(key, value)?,
            "dilation_prob" => {
                let p = parse(key, value)?;
                self.dilation = MultiDilationPolicy::new(p, self.dilation.rates().to_vec())?;
            }
            "dilation_rates" => {
                let rates = value
                    .split(',')
                    .map(|r| parse(key, r))
                    .collect::<Result<Vec<usize>>>()?;
                self.dilation = MultiDilationPolicy::new(self.dilation.probability(), rates)?;
            }
            "train_height" => self.train_size.0 = parse(key, value)?,
            "train_width" => self.train_size.1 = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "logit_scale" => self.logit_scale = value.trim().parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn train_tokens(&self) -> usize {
        (self.train_size.0 / self.patch) * (self.train_size.1 / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn block_modes(&self) -> Result<Vec<AttentionMode>> {
        let modes = assign_block_modes(self.order, self.depth)?;
        if self.causal {
            Ok(modes)
        } else {
            Ok(vec![AttentionMode::SelfAttention; self.depth])
        }
    }

    pub fn schedule(&self, switch_threshold: Option<usize>) -> Result<AttentionModeSchedule> {
        Ok(AttentionModeSchedule::new(self.block_modes()?, switch_threshold))
    }

    pub fn scale_policy(&self) -> LogitScalePolicy {
        LogitScalePolicy {
            train_len: self.train_tokens(),
            mode: self.logit_scale,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ada_w: usize,
    ada_b: usize,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    conv_w: usize,
    conv_b: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    labels: usize,
    blocks: Vec<BlockIds>,
    final_ada_w: usize,
    final_ada_b: usize,
    final_w: usize,
    final_b: usize,
}

enum Init {
    Zeros,
    Normal(f64),
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform in `+-1/sqrt(fan_in)` with `fan_in` given.
    FanIn(usize),
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut RngStream,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
            Init::Xavier => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, self.rng)
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, self.rng)
            }
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

/// Tape handles of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    /// adaLN projection `[d, 6d]` and bias `[6d]`.
    pub ada_w: Var,
    pub ada_b: Var,
    pub attn: AttentionVars,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub output: Var,
    /// Attention branch before gating.
    pub attention: Var,
}

/// One adaLN-Zero block on tokens `x: [n, d]` with conditioning `cond: [1, d]`:
///
/// ```text
/// x = x + gate_attn * Attn(modulate(LN(x), shift_attn, scale_attn))
/// x = x + gate_mlp  * MLP(modulate(LN(x), shift_mlp, scale_mlp))
/// ```
///
/// `mask` selects causal attention; `None` is self-attention.
pub fn transformer_block(
    tape: &mut Tape<'_>,
    x: Var,
    cond: Var,
    v: &BlockVars,
    heads: usize,
    mask: Option<&Tensor>,
    scale: f64,
) -> Result<BlockOutput> {
    let m = conditioning::modulation(tape, cond, v.ada_w, v.ada_b)?;
    let h = conditioning::modulate(tape, x, m.shift_attn, m.scale_attn)?;
    let attention = attention::attention_on_tape(tape, h, v.attn, heads, mask, scale, None)?;
    let x = conditioning::gated_residual(tape, x, m.gate_attn, attention)?;

    let h = conditioning::modulate(tape, x, m.shift_mlp, m.scale_mlp)?;
    let h = tape.matmul(h, v.fc1_w)?;
    let h = tape.add_row(h, v.fc1_b)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, v.fc2_w)?;
    let h = tape.add_row(h, v.fc2_b)?;
    let output = conditioning::gated_residual(tape, x, m.gate_mlp, h)?;
    Ok(BlockOutput { output, attention })
}

/// Runtime switches for one forward call.
#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Locality conv filter; inference always uses the base filter.
    pub conv_spec: ConvSpec,
    /// Logit multiplier; `None` derives it from the config's policy and the
    /// current token count.
    pub logit_scale: Option<f64>,
    pub switch_threshold: Option<usize>,
    /// Block whose attention output and block output are returned.
    pub capture_block: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            conv_spec: ConvSpec::BASE,
            logit_scale: None,
            switch_threshold: None,
            capture_block: None,
        }
    }
}

/// Result of [`Ledit::forward_on_tape`].
pub struct ForwardTrace {
    /// Per-token head output, `[h * w, p * p * C]`.
    pub patches: Var,
    pub captured: Option<CapturedVars>,
    pub grid: (usize, usize),
}

/// Activations of the captured block, each `[tokens, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct CapturedVars {
    /// Attention output before the gate and residual.
    pub attention: Var,
    /// Block output after both residual branches.
    pub block: Var,
}

#[derive(Clone, Debug)]
pub struct Captured {
    pub attention: Tensor,
    pub block: Tensor,
}

pub struct Ledit {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    masks: Mutex<HashMap<(ScanVariant, usize, usize), Arc<Tensor>>>,
}

impl Clone for Ledit {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            masks: Mutex::new(HashMap::new()),
        }
    }
}

impl fmt::Debug for Ledit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledit")
            .field("config", &self.config)
            .field("params", &self.param_count())
            .finish()
    }
}

impl Ledit {
    /// Fresh model with seeded initialization. The adaLN projections and the
    /// output head start at zero, so every block is an identity map and the
    /// model predicts zero.
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let pd = config.patch_dim();
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        };
        let patch_w = b.add("patch.w".into(), &[pd, d], Init::Xavier);
        let patch_b = b.add("patch.b".into(), &[d], Init::Zeros);
        let conv_w = b.add("conv.w".into(), &[d, d, 3, 3], Init::FanIn(d * 9));
        let conv_b = b.add("conv.b".into(), &[d], Init::Zeros);
        let t_w1 = b.add("time.w1".into(), &[config.freq_dim, d], Init::Normal(0.02));
        let t_b1 = b.add("time.b1".into(), &[d], Init::Zeros);
        let t_w2 = b.add("time.w2".into(), &[d, d], Init::Normal(0.02));
        let t_b2 = b.add("time.b2".into(), &[d], Init::Zeros);
        let labels = b.add("labels".into(), &[config.classes + 1, d], Init::Normal(0.02));
        let hidden_mlp = d * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|i| BlockIds {
                ada_w: b.add(format!("block{i}.ada.w"), &[d, 6 * d], Init::Zeros),
                ada_b: b.add(format!("block{i}.ada.b"), &[6 * d], Init::Zeros),
                w_q: b.add(format!("block{i}.attn.q"), &[d, d], Init::Xavier),
                w_k: b.add(format!("block{i}.attn.k"), &[d, d], Init::Xavier),
                w_v: b.add(format!("block{i}.attn.v"), &[d, d], Init::Xavier),
                w_o: b.add(format!("block{i}.attn.o"), &[d, d], Init::Xavier),
                fc1_w: b.add(format!("block{i}.mlp.w1"), &[d, hidden_mlp], Init::Xavier),
                fc1_b: b.add(format!("block{i}.mlp.b1"), &[hidden_mlp], Init::Zeros),
                fc2_w: b.add(format!("block{i}.mlp.w2"), &[hidden_mlp, d], Init::Xavier),
                fc2_b: b.add(format!("block{i}.mlp.b2"), &[d], Init::Zeros),
            })
            .collect();
        let final_ada_w = b.add("final.ada.w".into(), &[d, 2 * d], Init::Zeros);
        let final_ada_b = b.add("final.ada.b".into(), &[2 * d], Init::Zeros);
        let final_w = b.add("final.w".into(), &[d, pd], Init::Zeros);
        let final_b = b.add("final.b".into(), &[pd], Init::Zeros);
        let layout = Layout {
            patch_w,
            patch_b,
            conv_w,
            conv_b,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            labels,
            blocks,
            final_ada_w,
            final_ada_b,
            final_w,
            final_b,
        };
        let (names, params) = (b.names, b.tensors);
        Ok(Self {
            config,
            names,
            params,
            layout,
            masks: Mutex::new(HashMap::new()),
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against a freshly laid-out model.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, &mut RngStream::new(0, 0))?;
        if tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != model.names[i] {
                return Err(Error::Format(format!(
                    "tensor {i} is `{name}`, expected `{}`",
                    model.names[i]
                )));
            }
            if t.shape() != model.params[i].shape() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: model.params[i].shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            model.params[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// The locality conv weight read under `spec`. Every spec shares one tensor.
    pub fn conv_weight(&self, spec: ConvSpec) -> Result<&Tensor> {
        spec.check_shape_preserving()?;
        Ok(&self.params[self.layout.conv_w])
    }

    /// Places every parameter on the tape, learnable or constant.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, learnable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if learnable {
                    tape.param_ref(p)
                } else {
                    tape.constant_ref(p)
                }
            })
            .collect()
    }

    /// Additive mask for `variant` on an `h x w` grid, built once per size.
    pub fn additive_mask(&self, variant: ScanVariant, h: usize, w: usize) -> Result<Arc<Tensor>> {
        let mut cache = self.masks.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(m) = cache.get(&(variant, h, w)) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(mask::to_additive(&mask::build_mask(variant, h, w)?));
        cache.insert((variant, h, w), Arc::clone(&m));
        Ok(m)
    }

    pub fn cached_masks(&self) -> usize {
        self.masks.lock().map(|c| c.len()).unwrap_or(0)
    }

    /// Conditioning vector `[1, d]`: timestep embedding plus label row.
    pub fn condition(&self, tape: &mut Tape<'_>, vars: &[Var], t: usize, label_row: usize) -> Result<Var> {
        let l = &self.layout;
        let mlp = TimestepMlp {
            w1: vars[l.t_w1],
            b1: vars[l.t_b1],
            w2: vars[l.t_w2],
            b2: vars[l.t_b2],
        };
        let temb = conditioning::timestep_embedding(tape, t, self.config.freq_dim, mlp)?;
        let lemb = tape.gather_rows(vars[l.labels], &[label_row])?;
        tape.add(temb, lemb)
    }

    /// Table row for a label, without dropout.
    pub fn label_row(&self, label: Label) -> Result<usize> {
        conditioning::label_row(label, self.config.classes, 0.0, None)
    }

    /// Records the whole forward pass of one image `x_t: [C, H, W]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        x_t: &Tensor,
        t: usize,
        label_row: usize,
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let l = &self.layout;
        if let Some(b) = opts.capture_block {
            if b >= cfg.depth {
                return Err(Error::input(format!("block {b} out of range for depth {}", cfg.depth)));
            }
        }
        let (c, hh, ww) = x_t.dims3()?;
        if c != cfg.channels {
            return Err(Error::dim(format!("expected {} channels, got {c}", cfg.channels)));
        }
        let rows = locality::patch_rows(x_t, cfg.patch)?;
        let grid = (hh / cfg.patch, ww / cfg.patch);
        let n = grid.0 * grid.1;

        let rows = tape.constant(rows);
        let emb = tape.matmul(rows, vars[l.patch_w])?;
        let mut x = tape.add_row(emb, vars[l.patch_b])?;
        if cfg.locality_conv {
            x = locality::locality_conv_on_tape(tape, x, grid, vars[l.conv_w], vars[l.conv_b], opts.conv_spec)?;
        }

        let cond = self.condition(tape, vars, t, label_row)?;
        let scale = match opts.logit_scale {
            Some(s) => s,
            None => attention::attention_logit_scale(cfg.scale_policy(), n)?,
        };
        let schedule = cfg.schedule(opts.switch_threshold)?;
        let causal_mask = if schedule.modes().contains(&AttentionMode::Causal) {
            Some(self.additive_mask(cfg.scan, grid.0, grid.1)?)
        } else {
            None
        };

        let mut captured = None;
        for (i, ids) in l.blocks.iter().enumerate() {
            let mask = match schedule.mode_at(i, t) {
                AttentionMode::Causal => causal_mask.as_deref(),
                AttentionMode::SelfAttention => None,
            };
            let block = BlockVars {
                ada_w: vars[ids.ada_w],
                ada_b: vars[ids.ada_b],
                attn: AttentionVars {
                    w_q: vars[ids.w_q],
                    w_k: vars[ids.w_k],
                    w_v: vars[ids.w_v],
                    w_o: vars[ids.w_o],
                },
                fc1_w: vars[ids.fc1_w],
                fc1_b: vars[ids.fc1_b],
                fc2_w: vars[ids.fc2_w],
                fc2_b: vars[ids.fc2_b],
            };
            let out = transformer_block(tape, x, cond, &block, cfg.heads, mask, scale)?;
            x = out.output;
            if opts.capture_block == Some(i) {
                captured = Some(CapturedVars {
                    attention: out.attention,
                    block: x,
                });
            }
            if !tape.value(x).is_finite() {
                return Err(Error::Numeric(format!("non-finite activation after block {i}")));
            }
        }

        let fin = conditioning::modulation_rows(tape, cond, vars[l.final_ada_w], vars[l.final_ada_b], 2)?;
        let h = conditioning::modulate(tape, x, fin[0], fin[1])?;
        let h = tape.matmul(h, vars[l.final_w])?;
        let patches = tape.add_row(h, vars[l.final_b])?;
        debug_assert_eq!(tape.value(patches).shape(), &[n, cfg.patch_dim()]);
        Ok(ForwardTrace {
            patches,
            captured,
            grid,
        })
    }

    /// Predicted noise for `x_t`, same shape as the input.
    pub fn forward(&self, x_t: &Tensor, t: usize, label: Label, opts: &ForwardOptions) -> Result<Tensor> {
        Ok(self.forward_capture(x_t, t, label, opts)?.0)
    }

    /// Like [`Ledit::forward`], also returning the captured attention output.
    pub fn forward_capture(
        &self,
        x_t: &Tensor,
        t: usize,
        label: Label,
        opts: &ForwardOptions,
    ) -> Result<(Tensor, Option<Captured>)> {
        let row = self.label_row(label)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let trace = self.forward_on_tape(&mut tape, &vars, x_t, t, row, opts)?;
        let (_, hh, ww) = x_t.dims3()?;
        let out = locality::unpatch_rows(
            tape.value(trace.patches),
            self.config.channels,
            hh,
            ww,
            self.config.patch,
        )?;
        out.check_finite("model output")?;
        let captured = trace.captured.map(|c| Captured {
            attention: tape.value(c.attention).clone(),
            block: tape.value(c.block).clone(),
        });
        Ok((out, captured))
    }
}
