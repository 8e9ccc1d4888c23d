//! Command implementations. Each returns a one-line summary; artifacts go
//! to the given output directory.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ledit_core::attention;
use ledit_core::checkpoint::{self, Checkpoint};
use ledit_core::dataset;
use ledit_core::diffusion::{self, Adam, SampleConfig};
use ledit_core::gradcheck;
use ledit_core::image;
use ledit_core::mask::{self, ScanVariant};
use ledit_core::model::AttentionMode;
use ledit_core::rng::RngState;
use ledit_core::variance::{self, ProbeSite, SimConfig, VarianceReport};
use ledit_core::{Error, Label, Ledit, Result, RngStream, Tensor};

use crate::config::RunConfig;

pub const INDEX_FILE: &str = "index.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Steps averaged at each end of the loss curve in the training summary.
pub const SMOOTHING_WINDOW: usize = 50;

/// Stream ids derived from the master seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const PROBE: u64 = 3;
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}

/// A CSV writer whose first line is a `# key=value ...` metadata row.
fn csv_with_metadata(path: &Path, metadata: &[(&str, String)]) -> Result<csv::Writer<File>> {
    let mut file = File::create(path)?;
    let meta: Vec<String> = metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(file, "# {}", meta.join(" "))?;
    Ok(csv::Writer::from_writer(file))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn variance_sim(cfg: &SimConfig, out_dir: &Path) -> Result<(VarianceReport, String)> {
    let report = variance::simulate_causal_variance(cfg)?;
    ensure_dir(out_dir)?;
    let meta = [
        ("n", cfg.n.to_string()),
        ("trials", cfg.trials.to_string()),
        ("law", cfg.law.to_string()),
        ("mu", cfg.mu.to_string()),
        ("sigma", cfg.sigma.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    let path = out_dir.join("variance_sim.csv");
    let mut w = csv_with_metadata(&path, &meta)?;
    w.write_record(["position", "empirical_var", "theoretical_var", "rel_error"])
        .map_err(csv_err)?;
    for p in &report.positions {
        w.write_record([
            p.position.to_string(),
            format!("{:e}", p.empirical_var),
            format!("{:e}", p.theoretical_var),
            format!("{:e}", p.rel_error),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let moments = out_dir.join("weight_moments.csv");
    let mut w = csv_with_metadata(&moments, &meta)?;
    w.write_record(["position", "weight_mean", "dirichlet_mean", "weight_sq_mean", "dirichlet_sq_mean"])
        .map_err(csv_err)?;
    for p in &report.positions {
        w.write_record([
            p.position.to_string(),
            format!("{:e}", p.weight_mean),
            format!("{:e}", variance::dirichlet_first_moment(p.position)?),
            format!("{:e}", p.weight_sq_mean),
            format!("{:e}", variance::dirichlet_second_moment(p.position)?),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let summary = format!(
        "variance-sim n={} trials={} law={} mu={} sigma={} max_rel_error={:.6} csv={}",
        cfg.n,
        cfg.trials,
        cfg.law,
        cfg.mu,
        cfg.sigma,
        report.max_rel_error(),
        path.display()
    );
    Ok((report, summary))
}

pub fn mask_dump(variant: ScanVariant, height: usize, width: usize, out_dir: &Path) -> Result<String> {
    let m = mask::build_mask(variant, height, width)?;
    ensure_dir(out_dir)?;
    let stem = format!("mask_{variant}_{height}x{width}");
    let txt = out_dir.join(format!("{stem}.txt"));
    fs::write(&txt, mask::to_ascii(&m))?;
    let n = m.tokens();
    fs::write(
        out_dir.join(format!("{stem}.pgm")),
        image::encode_pgm_bits(n, n, |q, k| m.is_visible(q, k)),
    )?;
    Ok(format!(
        "mask-dump variant={variant} grid={height}x{width} tokens={n} visible_pairs={} ascii={}",
        m.visible_pairs(),
        txt.display()
    ))
}

/// Writes `class{c}_{i}.ppm` files (PGM for one channel) plus an index of
/// `relative_path class` lines.
pub fn gen_data(
    classes: usize,
    n_per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<String> {
    let data = dataset::generate(classes, n_per_class, channels, height, width, seed)?;
    ensure_dir(out_dir)?;
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    let mut index = String::new();
    for (k, (img, class)) in data.iter().enumerate() {
        let name = format!("class{class}_{:04}.{ext}", k % n_per_class);
        image::write_pnm(&out_dir.join(&name), img)?;
        index.push_str(&format!("{name} {class}\n"));
    }
    fs::write(out_dir.join(INDEX_FILE), index)?;
    Ok(format!(
        "gen-data classes={classes} images={} size={height}x{width} dir={}",
        data.len(),
        out_dir.display()
    ))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(Tensor, usize)>> {
    let index_path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path)?;
    let mut out = Vec::new();
    for (n, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (name, class) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected `path class`", index_path.display(), n + 1)))?;
        let class = class
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{}:{}: bad class `{class}`", index_path.display(), n + 1)))?;
        out.push((image::read_pnm(&dir.join(name))?, class));
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{} lists no images", index_path.display())));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub conv_dilation: usize,
}

pub struct TrainOutcome {
    pub model: Ledit,
    pub log: Vec<TrainLogRow>,
    pub rng: RngState,
}

/// Mean of the first and last `window` entries.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// Trains a fresh model. `progress` sees each step's log row.
pub fn train_model(
    cfg: &RunConfig,
    data: &[(Tensor, usize)],
    mut progress: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = &cfg.model;
    let want = [mc.channels, mc.train_size.0, mc.train_size.1];
    for (img, class) in data {
        if img.shape() != want {
            return Err(Error::Input(format!(
                "dataset image {:?} differs from training shape {want:?}",
                img.shape()
            )));
        }
        if *class >= mc.classes {
            return Err(Error::Input(format!("dataset class {class} exceeds {} classes", mc.classes)));
        }
    }
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let seed = cfg.train.seed;
    let mut model = Ledit::new(mc.clone(), &mut RngStream::new(seed, streams::INIT))?;
    let mut adam = Adam::new(cfg.train.lr, model.params());
    let schedule = cfg.schedule()?;
    let mut rng = RngStream::new(seed, streams::TRAIN);
    let mut log = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let picks: Vec<usize> = (0..cfg.train.batch).map(|_| rng.below(data.len())).collect();
        let images: Vec<Tensor> = picks.iter().map(|&i| data[i].0.clone()).collect();
        let labels: Vec<usize> = picks.iter().map(|&i| data[i].1).collect();
        let report = diffusion::training_step(&mut model, &mut adam, &images, &labels, &schedule, &cfg.train, &mut rng)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        let row = TrainLogRow {
            step,
            loss: report.loss,
            conv_dilation: report.conv_spec.d,
        };
        progress(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        model,
        log,
        rng: rng.state(),
    })
}

pub fn write_train_log(path: &Path, log: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "loss", "conv_dilation"]).map_err(csv_err)?;
    for r in log {
        w.write_record([r.step.to_string(), format!("{:e}", r.loss), r.conv_dilation.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<(TrainOutcome, String)> {
    cfg.validate()?;
    let data = load_dataset(data_dir)?;
    ensure_dir(out_dir)?;
    let every = cfg.log_every;
    let outcome = train_model(cfg, &data, |r| {
        if every > 0 && (r.step % every == 0 || r.step + 1 == cfg.train.steps) {
            eprintln!("step {} loss {:.5} dilation {}", r.step, r.loss, r.conv_dilation);
        }
    })?;
    write_train_log(&out_dir.join("train_log.csv"), &outcome.log)?;
    fs::write(out_dir.join("run.cfg"), cfg.to_text())?;
    let ck = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save_checkpoint(&ck, &outcome.model, outcome.log.len() as u64, outcome.rng)?;
    let losses: Vec<f64> = outcome.log.iter().map(|r| r.loss).collect();
    let (first, last) = smoothed_endpoints(&losses, SMOOTHING_WINDOW).expect("at least one step");
    let summary = format!(
        "train steps={} smoothed_initial_loss={first:.5} smoothed_final_loss={last:.5} checkpoint={}",
        losses.len(),
        ck.display()
    );
    Ok((outcome, summary))
}

pub fn parse_label(text: &str) -> Result<Label> {
    match text.trim() {
        "null" | "none" => Ok(Label::Null),
        v => v
            .parse()
            .map(Label::Class)
            .map_err(|_| Error::Config(format!("label must be a class id or `null`, got `{v}`"))),
    }
}

pub fn sample_config(cfg: &RunConfig, label: Label) -> SampleConfig {
    SampleConfig {
        steps: cfg.sample_steps,
        cfg_scale: cfg.cfg_scale,
        label,
        switch_threshold: cfg.switch_threshold,
        logit_scale: None,
    }
}

/// Samples one image from a checkpoint with `seed`'s sampling stream.
pub fn sample_image(
    model: &Ledit,
    cfg: &RunConfig,
    label: Label,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Tensor> {
    let schedule = cfg.schedule()?;
    let mut rng = RngStream::new(seed, streams::SAMPLE);
    diffusion::ddpm_sample(model, height, width, &schedule, &sample_config(cfg, label), &mut rng)
}

fn logit_scale_for(model: &Ledit, height: usize, width: usize) -> Result<f64> {
    let p = model.config().patch;
    attention::attention_logit_scale(model.config().scale_policy(), (height / p) * (width / p))
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    ck: &Checkpoint,
    cfg: &RunConfig,
    label: Label,
    height: usize,
    width: usize,
    seed: u64,
    out_dir: &Path,
    stem: &str,
) -> Result<(Tensor, String)> {
    let img = sample_image(&ck.model, cfg, label, height, width, seed)?;
    ensure_dir(out_dir)?;
    let ext = if img.shape()[0] == 1 { "pgm" } else { "ppm" };
    let path = out_dir.join(format!("{stem}_{height}x{width}.{ext}"));
    image::write_pnm(&path, &img)?;
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let threshold = cfg.switch_threshold.map_or("none".into(), |t| t.to_string());
    let summary = format!(
        "{stem} size={height}x{width} label={} logit_scale={:.4} switch_threshold={threshold} min={lo:.4} max={hi:.4} image={}",
        match label {
            Label::Class(c) => c.to_string(),
            Label::Null => "null".into(),
        },
        logit_scale_for(&ck.model, height, width)?,
        path.display()
    );
    Ok((img, summary))
}

/// First causal block of the model, if any.
pub fn last_causal_block(model: &Ledit) -> Result<Option<usize>> {
    Ok(model
        .config()
        .block_modes()?
        .iter()
        .rposition(|&m| m == AttentionMode::Causal))
}

/// Per-token variance profile on in-memory synthetic images and its rank
/// correlation with token position.
#[allow(clippy::too_many_arguments)]
pub fn layer_profile(
    model: &Ledit,
    cfg: &RunConfig,
    t: usize,
    layer: usize,
    height: usize,
    width: usize,
    batch: usize,
    site: ProbeSite,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let mc = model.config();
    let classes = mc.classes.min(dataset::PATTERN_CLASSES);
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let per_class = batch.div_ceil(classes);
    let images: Vec<(Tensor, Label)> = dataset::generate(classes, per_class, mc.channels, height, width, seed)?
        .into_iter()
        .map(|(x, c)| (x, Label::Class(c)))
        .take(batch)
        .collect();
    let mut rng = RngStream::new(seed, streams::PROBE);
    let profile = variance::model_layer_variance(model, &images, &cfg.schedule()?, t, layer, site, &mut rng)?;
    let positions: Vec<f64> = (0..profile.len()).map(|i| i as f64).collect();
    let rho = variance::spearman(&positions, &profile)?;
    Ok((profile, rho))
}

pub fn write_layer_var(path: &Path, profile: &[f64], meta: &[(&str, String)]) -> Result<()> {
    let mut w = csv_with_metadata(path, meta)?;
    w.write_record(["position", "variance"]).map_err(csv_err)?;
    for (i, v) in profile.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:e}")]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn gradcheck(seeds: &[u64], out_dir: &Path) -> Result<(f64, String)> {
    ensure_dir(out_dir)?;
    let path = out_dir.join("gradcheck.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["op", "seed", "max_rel_error"]).map_err(csv_err)?;
    let mut worst = 0.0_f64;
    for &seed in seeds {
        for (name, err) in gradcheck::standard_suite(seed)? {
            worst = worst.max(err);
            w.write_record([name.to_string(), seed.to_string(), format!("{err:e}")])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok((
        worst,
        format!("gradcheck seeds={} worst_rel_error={worst:e} csv={}", seeds.len(), path.display()),
    ))
}

/// `full=L^2 causal=L(L+1)/2`, plus the visible-pair count of a 2D variant
/// when a grid is given.
pub fn flops(len: usize, grid: Option<(ScanVariant, usize, usize)>) -> Result<String> {
    if len == 0 {
        return Err(Error::Config("len must be positive".into()));
    }
    let mut s = format!(
        "full={} causal={}",
        attention::score_op_count(len, false),
        attention::score_op_count(len, true)
    );
    if let Some((v, h, w)) = grid {
        if h * w != len {
            return Err(Error::Config(format!("grid {h}x{w} does not hold {len} tokens")));
        }
        let m = mask::build_mask(v, h, w)?;
        s.push_str(&format!(" variant_{v}={}", attention::mask_score_op_count(&m)));
    }
    Ok(s)
}

/// Output root: explicit directory, else `$LEDIT_OUT`, else `./ledit-out`.
pub fn output_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(crate::OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ledit-out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_line() {
        assert_eq!(flops(4, None).unwrap(), "full=16 causal=10");
        assert_eq!(
            flops(4, Some((ScanVariant::LowerRightCorner, 2, 2))).unwrap(),
            "full=16 causal=10 variant_d=15"
        );
        assert!(flops(4, Some((ScanVariant::OneD, 3, 3))).is_err());
    }

    #[test]
    fn labels_parse() {
        assert_eq!(parse_label("2").unwrap(), Label::Class(2));
        assert_eq!(parse_label("null").unwrap(), Label::Null);
        assert!(parse_label("x").is_err());
    }

    #[test]
    fn smoothing_windows() {
        let l = [4.0, 2.0, 1.0, 1.0];
        assert_eq!(smoothed_endpoints(&l, 2), Some((3.0, 1.0)));
        assert_eq!(smoothed_endpoints(&l, 10), Some((2.0, 2.0)));
        assert_eq!(smoothed_endpoints(&[], 3), None);
    }
}
