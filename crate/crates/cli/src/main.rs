use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qface::config::RunConfig;
use qface::model::ModelKind;
use qface::trainer::{LogRow, Trainer};
use qface::workflow::{self, Variant};
use qface::{Error, Result};
use qface_numerics::Checkpoint;

/// Multi-task face analysis with a query-driven decoder, on synthetic faces.
#[derive(Parser)]
#[command(name = "qface", version)]
struct Cli {
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the run seed (the data seed for `gen-data`).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory written by `gen-data`; images are rendered in memory otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the train and test splits as PGM images plus JSON manifests.
    GenData(Common),
    /// Masked image modeling on the training split.
    Pretrain(Common),
    /// Multi-task fine-tuning.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint providing the encoder weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// qface, qface_no_mff, multihead or taskspecific.
        #[arg(long, default_value = "qface")]
        model: String,
    },
    /// Evaluate a fine-tuned checkpoint (or an untrained model) on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fine-tuning checkpoint; a fresh model is evaluated when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "qface")]
        model: String,
    },
    /// Export decoder cross-attention maps for one test image.
    Attn {
        #[command(flatten)]
        common: Common,
        /// Fine-tuning checkpoint of a query model.
        #[arg(long)]
        init: PathBuf,
        /// Test image index.
        #[arg(long, default_value_t = 0)]
        image: usize,
    },
    /// Train every variant for each seed and write the ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn with_run_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seeds.run = s;
    }
    cfg
}

fn load_ckpt(p: &Path) -> Result<Checkpoint> {
    Checkpoint::load(p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
}

fn progress(quiet: bool, total: usize) -> impl FnMut(&str, &LogRow) {
    let every = (total / 20).max(1);
    move |name: &str, r: &LogRow| {
        if !quiet && ((r.step + 1).is_multiple_of(every) || r.step + 1 == total) {
            eprintln!("{name} step {}/{total} lr {:.3e} loss {:.4}", r.step + 1, r.lr, r.total);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.cmd {
        Cmd::GenData(c) => {
            let mut cfg = load_config(&c)?;
            if let Some(s) = c.seed {
                cfg.seeds.data = s;
            }
            let n = workflow::gen_data(&cfg, &c.out)?;
            if !quiet {
                eprintln!("wrote {n} images to {}", c.out.display());
            }
        }
        Cmd::Pretrain(c) => {
            let cfg = with_run_seed(load_config(&c)?, c.seed);
            let splits = workflow::load_splits(&cfg, c.data.as_deref())?;
            let s = workflow::run_pretrain(&cfg, &splits, &c.out)?;
            if !quiet {
                eprintln!("held-out masked L1 {:.5} -> {:.5}", s.initial_eval, s.final_eval);
            }
        }
        Cmd::Finetune { common: c, init, model } => {
            let cfg = with_run_seed(load_config(&c)?, c.seed);
            let variant = Variant::parse(&model)?;
            let init = init.as_deref().map(load_ckpt).transpose()?;
            let splits = workflow::load_splits(&cfg, c.data.as_deref())?;
            let report = workflow::run_variant(
                &cfg,
                variant,
                init.as_ref(),
                &splits,
                &c.out,
                progress(quiet, cfg.schedule.total_steps),
            )?;
            if !quiet {
                eprintln!("AVG {:.2}", report.avg()?);
            }
        }
        Cmd::Eval { common: c, init, model } => {
            let t = match &init {
                Some(p) => Trainer::resume(&load_ckpt(p)?)?,
                None => {
                    let kind = ModelKind::parse(&model)?;
                    Trainer::new(&with_run_seed(load_config(&c)?, c.seed), kind)?
                }
            };
            let splits = workflow::load_splits(&t.cfg, c.data.as_deref())?;
            let report = workflow::run_eval(&t, &splits.test, &c.out)?;
            if !quiet {
                eprintln!("AVG {:.2}", report.avg()?);
            }
        }
        Cmd::Attn { common: c, init, image } => {
            let t = Trainer::resume(&load_ckpt(&init)?)?;
            let splits = workflow::load_splits(&t.cfg, c.data.as_deref())?;
            let n = workflow::run_attn(&t, &splits.test, image, &c.out)?;
            if !quiet {
                eprintln!("wrote {n} attention maps to {}", c.out.display());
            }
        }
        Cmd::Ablate { common: c, init, seeds } => {
            let cfg = load_config(&c)?;
            let init = init.as_deref().map(load_ckpt).transpose()?;
            let splits = workflow::load_splits(&cfg, c.data.as_deref())?;
            let mut p = progress(quiet, cfg.schedule.total_steps);
            let table = workflow::run_ablation(&cfg, init.as_ref(), &splits, &seeds, &c.out, |seed, name, r| {
                p(&format!("seed {seed} {name}"), r)
            })?;
            if !quiet {
                for r in &table.rows {
                    eprintln!("{:<14} AVG {:.2}", r.variant.label(), r.avg);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let code = e.code();
            let msg = msg.strip_prefix(code).and_then(|m| m.strip_prefix(": ")).unwrap_or(&msg);
            eprintln!("error[{code}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
