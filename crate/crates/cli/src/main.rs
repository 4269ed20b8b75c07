use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deformkit::harness::{
    ablate, evaluate, load_table_rows, profile, render_figures, render_table, write_eval, AblationRow, DataProvider,
    Predictor, RunConfig, OUTPUT_ROOT_ENV,
};
use deformkit::models::{RegistrationModel, VariantConfig, VariantName};
use deformkit::Dims3;

#[derive(Parser)]
#[command(name = "deformkit", version, about = "Deformable 3D registration experiments")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "DEFORMKIT_LOG")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory; relative paths go under $DEFORMKIT_OUTPUT_ROOT.
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant; writes checkpoints, a JSONL loss log and a summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the variant named in the config.
        #[arg(long)]
        variant: Option<VariantName>,
    },
    /// Score a checkpoint (or the zero field) on seeded evaluation pairs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; omit for the zero-field baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of pairs (defaults to the config's eval_pairs).
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train and evaluate several rows under one config and write the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rows, e.g. affine,VXM,DWP,DWCP,DWCPI.
        #[arg(long, value_delimiter = ',', required = true)]
        rows: Vec<String>,
    },
    /// Re-render table.csv and table.md from an ablation.json.
    Report {
        /// ablation.json written by `ablate`.
        input: PathBuf,
        /// Directory for the tables (defaults to the input's directory).
        #[arg(long, short)]
        output_dir: Option<PathBuf>,
    },
    /// Render figure panels for one evaluation pair.
    Figures {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to render; the zero-field baseline is always included.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Index of the evaluation pair.
        #[arg(long, default_value_t = 0)]
        pair: usize,
    },
    /// Parameter counts, forward FLOPs and forward time per variant.
    Profile {
        /// Variants to profile (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<VariantName>,
        /// Input extents as X,Y,Z (multiples of 16).
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [32, 32, 32])]
        extents: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
        /// Only count parameters of the published configurations; no forward pass.
        #[arg(long)]
        published: bool,
    },
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_model(path: &Path) -> Result<RegistrationModel> {
    let (model, extra) = RegistrationModel::load_checkpoint(path)?;
    log::info!("loaded {} ({} parameters) {extra}", model.name(), model.count_parameters());
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, variant } => {
            let mut cfg = common.load()?;
            if let Some(v) = variant {
                cfg.model.variant = v;
                cfg.model.config = None;
            }
            let out = deformkit::harness::train(&cfg)?;
            let last = out.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            println!(
                "{}",
                serde_json::json!({
                    "variant": out.model.name(),
                    "iterations": out.log.len(),
                    "final_loss": last,
                    "best_epoch_loss": out.best_epoch_loss,
                    "pair_hash": out.pair_hash,
                    "output_dir": out.output_dir,
                })
            );
        }
        Command::Evaluate { common, checkpoint, pairs } => {
            let cfg = common.load()?;
            let provider = DataProvider::from_config(&cfg)?;
            let pred = match &checkpoint {
                Some(p) => Predictor::Model(Box::new(load_model(p)?)),
                None => Predictor::Identity,
            };
            let eval = evaluate(&pred, &provider, pairs.unwrap_or(cfg.eval_pairs), cfg.seed, !cfg.deterministic)?;
            let dir = out_dir(&cfg)?;
            write_eval(&dir, &eval)?;
            println!("{}", serde_json::to_string_pretty(&eval.report)?);
        }
        Command::Ablate { common, rows } => {
            let cfg = common.load()?;
            let rows = rows.iter().map(|r| r.parse::<AblationRow>()).collect::<Result<Vec<_>, _>>()?;
            let result = ablate(&rows, &cfg)?;
            let (_, md) = render_table(&result.rows);
            println!("{md}");
            if !result.pairs_consistent {
                bail!("runs saw different pair sequences");
            }
            let failed: Vec<&str> = result.rows.iter().filter(|r| !r.ok).map(|r| r.row.as_str()).collect();
            if !failed.is_empty() {
                bail!("rows failed: {}", failed.join(", "));
            }
        }
        Command::Report { input, output_dir } => {
            let rows = load_table_rows(&input)?;
            let dir = output_dir.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            let (csv, md) = render_table(&rows);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("table.csv"), csv).context("writing table.csv")?;
            std::fs::write(dir.join("table.md"), &md).context("writing table.md")?;
            println!("{md}");
        }
        Command::Figures { common, checkpoint, pair } => {
            let cfg = common.load()?;
            let provider = DataProvider::from_config(&cfg)?;
            let schedule = provider.eval_schedule(pair + 1, cfg.seed)?;
            let sample = provider.pair(schedule[pair], true)?;
            let dir = out_dir(&cfg)?.join("figures");
            let mut preds = vec![Predictor::Identity];
            for p in &checkpoint {
                preds.push(Predictor::Model(Box::new(load_model(p)?)));
            }
            for pred in &preds {
                let field = pred.full_field(&sample)?;
                let ann = render_figures(&dir, pred.name(), &sample, &field)?;
                println!("{}", serde_json::to_string(&ann)?);
            }
        }
        Command::Profile { variants, extents, width_divisor, published } => {
            let variants = if variants.is_empty() { VariantName::ALL.to_vec() } else { variants };
            if published {
                for v in variants {
                    let m = RegistrationModel::build(&VariantConfig::published(v))?;
                    println!("{}", serde_json::json!({ "variant": v.as_str(), "parameters": m.count_parameters() }));
                }
            } else {
                let d = Dims3::new(extents[0], extents[1], extents[2]);
                for row in profile(&variants, d, width_divisor)? {
                    println!("{}", serde_json::to_string(&row)?);
                }
            }
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<deformkit::Error>() {
        e.kind()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "other"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
        log::debug!("output root {}", PathBuf::from(root).display());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "kind": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
