use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ledit_cli::commands;
use ledit_cli::config::RunConfig;
use ledit_cli::error_line;
use ledit_core::checkpoint;
use ledit_core::mask::ScanVariant;
use ledit_core::variance::{LogitLaw, ProbeSite, SimConfig};
use ledit_core::{Error, Result};

const SCHEMAS: &str = "\
CSV schemas (a leading `# key=value ...` line records run metadata where noted):
  variance_sim.csv    # metadata, then position,empirical_var,theoretical_var,rel_error
  weight_moments.csv  # metadata, then position,weight_mean,dirichlet_mean,weight_sq_mean,dirichlet_sq_mean
  layer_var.csv       # metadata, then position,variance
  train_log.csv       step,loss,conv_dilation
  gradcheck.csv       op,seed,max_rel_error
Config files hold `key = value` lines; `--set key=value` and command flags override them.";

#[derive(Parser, Debug)]
#[command(name = "ledit", version, about = "Toy positional-encoding-free diffusion transformer", after_help = SCHEMAS)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (default: `$LEDIT_OUT/<command>` or `ledit-out/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte-Carlo variance of causal attention outputs per position.
    VarianceSim {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        trials: usize,
        /// `exp` (exact Dirichlet weights) or `gaussian` (softmax of N(0,1) logits).
        #[arg(long, default_value = "exp")]
        law: LogitLaw,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write a scan-variant mask as ASCII and PGM.
    MaskDump {
        #[arg(long, default_value = "d")]
        variant: ScanVariant,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
    },
    /// Generate the synthetic class-conditional dataset.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a fresh model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample at the training resolution (or any given size).
    Sample(SampleArgs),
    /// Sample at a resolution other than the training one.
    Extrapolate(SampleArgs),
    /// Per-token variance profile of a causal block.
    LayerVar {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 900)]
        t: usize,
        /// Block index (default: deepest causal block).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// `attention` (branch before gating) or `block` (block output).
        #[arg(long, default_value = "attention")]
        site: ProbeSite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Attention score counts for full and causal attention.
    Flops {
        #[arg(long)]
        len: usize,
        #[arg(long, requires_all = ["height", "width"])]
        variant: Option<ScanVariant>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
}

#[derive(clap::Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Class id or `null`.
    #[arg(long, default_value = "0")]
    label: String,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    sample_steps: Option<usize>,
    /// Timestep below which causal blocks run unmasked, or `none`.
    #[arg(long)]
    switch_threshold: Option<String>,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::VarianceSim { .. } => "variance-sim",
        Command::MaskDump { .. } => "mask-dump",
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::Sample(_) => "sample",
        Command::Extrapolate(_) => "extrapolate",
        Command::LayerVar { .. } => "layer-var",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Flops { .. } => "flops",
    }
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint> {
    checkpoint::load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn run_sample(cfg: &mut RunConfig, args: &SampleArgs, out: &Path, extrapolate: bool) -> Result<String> {
    set_opt(cfg, "cfg_scale", &args.cfg_scale)?;
    set_opt(cfg, "sample_steps", &args.sample_steps)?;
    set_opt(cfg, "switch_threshold", &args.switch_threshold)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    cfg.model = ck.model.config().clone();
    cfg.validate()?;
    let (th, tw) = cfg.model.train_size;
    let (dh, dw) = if extrapolate { (2 * th, 2 * tw) } else { (th, tw) };
    let (h, w) = (args.height.unwrap_or(dh), args.width.unwrap_or(dw));
    if extrapolate && (h, w) == (th, tw) {
        return Err(Error::Config(format!(
            "extrapolate needs a size other than the training size {th}x{tw}"
        )));
    }
    let label = commands::parse_label(&args.label)?;
    let stem = if extrapolate { "extrapolate" } else { "sample" };
    Ok(commands::sample(&ck, cfg, label, h, w, args.seed, out, stem)?.1)
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set_assignment(o)?;
    }
    let out = match cli.out.clone() {
        Some(dir) => dir,
        None => commands::output_root(None).join(command_name(&cli.command)),
    };
    match &cli.command {
        Command::VarianceSim { n, trials, law, mu, sigma, seed, threads } => {
            let sim = SimConfig {
                n: *n,
                trials: *trials,
                law: *law,
                mu: *mu,
                sigma: *sigma,
                seed: *seed,
                threads: *threads,
            };
            Ok(commands::variance_sim(&sim, &out)?.1)
        }
        Command::MaskDump { variant, height, width } => commands::mask_dump(*variant, *height, *width, &out),
        Command::GenData { classes, n_per_class, height, width, seed } => {
            set_opt(&mut cfg, "classes", classes)?;
            set_opt(&mut cfg, "n_per_class", n_per_class)?;
            set_opt(&mut cfg, "train_height", height)?;
            set_opt(&mut cfg, "train_width", width)?;
            set_opt(&mut cfg, "seed", seed)?;
            cfg.validate()?;
            let m = &cfg.model;
            commands::gen_data(
                m.classes,
                cfg.n_per_class,
                m.channels,
                m.train_size.0,
                m.train_size.1,
                cfg.train.seed,
                &out,
            )
        }
        Command::Train { data, steps, batch, seed } => {
            set_opt(&mut cfg, "steps", steps)?;
            set_opt(&mut cfg, "batch", batch)?;
            set_opt(&mut cfg, "seed", seed)?;
            Ok(commands::train(&cfg, data, &out)?.1)
        }
        Command::Sample(args) => run_sample(&mut cfg, args, &out, false),
        Command::Extrapolate(args) => run_sample(&mut cfg, args, &out, true),
        Command::LayerVar { checkpoint, t, layer, height, width, batch, site, seed } => {
            let ck = load_checkpoint(checkpoint)?;
            cfg.model = ck.model.config().clone();
            cfg.validate()?;
            let layer = match layer {
                Some(l) => *l,
                None => commands::last_causal_block(&ck.model)?
                    .ok_or_else(|| Error::Input("model has no causal block".into()))?,
            };
            let (th, tw) = cfg.model.train_size;
            let (h, w) = (height.unwrap_or(th), width.unwrap_or(tw));
            let (profile, rho) =
                commands::layer_profile(&ck.model, &cfg, *t, layer, h, w, *batch, *site, *seed)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("layer_var.csv");
            let meta = [
                ("t", t.to_string()),
                ("layer", layer.to_string()),
                ("height", h.to_string()),
                ("width", w.to_string()),
                ("batch", batch.to_string()),
                ("seed", seed.to_string()),
                ("spearman", format!("{rho:.6}")),
            ];
            commands::write_layer_var(&path, &profile, &meta)?;
            Ok(format!(
                "layer-var t={t} layer={layer} size={h}x{w} tokens={} spearman={rho:.4} csv={}",
                profile.len(),
                path.display()
            ))
        }
        Command::Gradcheck { seeds } => Ok(commands::gradcheck(seeds, &out)?.1),
        Command::Flops { len, variant, height, width } => {
            let grid = match (variant, height, width) {
                (Some(v), Some(h), Some(w)) => Some((*v, *h, *w)),
                _ => None,
            };
            commands::flops(*len, grid)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}
