use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use covert_alloc::causal_rate::rate_to_power_budget;
use covert_alloc::channel::{db_to_linear, ChannelModel};
use covert_alloc::checkpoint::Checkpoint;
use covert_alloc::harness::{
    format_sig9, run_sweep, write_csv, ExperimentConfig, Mode, Scheme, Sweep,
};
use covert_alloc::qlearn::train_with;

#[derive(Parser)]
#[command(
    name = "covert-alloc",
    version,
    about = "Covert power and rate allocation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sum-rate maximization with all block SNRs known in advance.
    NoncausalPower(Opts),
    /// Power minimization for a rate requirement with all block SNRs known.
    NoncausalRate(Opts),
    /// Train a Q-network for block-by-block power allocation.
    TrainDdqn(Opts),
    /// Block-by-block power allocation.
    CausalPower(Opts),
    /// Block-by-block rate allocation.
    CausalRate(Opts),
    /// Run the experiment described by the config file as is.
    Sweep(Opts),
}

#[derive(Args, Clone, Default)]
struct Opts {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sweep as `axis=v1,v2,...` with axis one of p0_db, r0, eps_db, snr_h_db, snr_g_db.
    #[arg(long)]
    sweep: Option<String>,
    /// Comma-separated schemes: proposed, convex, trivial, ddqn, average.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Master seed; for train-ddqn, the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network checkpoint to load, or for train-ddqn the file to write.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::NoncausalPower(o) => experiment(Some(Mode::NoncausalPower), &o),
        Command::NoncausalRate(o) => experiment(Some(Mode::NoncausalRate), &o),
        Command::CausalPower(o) => experiment(Some(Mode::CausalPower), &o),
        Command::CausalRate(o) => experiment(Some(Mode::CausalRate), &o),
        Command::Sweep(o) => {
            if o.config.is_none() {
                bail!("sweep needs --config");
            }
            experiment(None, &o)
        }
        Command::TrainDdqn(o) => train_ddqn(&o),
    }
}

/// Reads the config file (if any) and applies the subcommand's mode and the
/// flag overrides.
fn build_config(mode: Option<Mode>, o: &Opts) -> Result<ExperimentConfig> {
    let mut cfg = match (&o.config, mode) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let cfg = ExperimentConfig::from_toml_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            if let Some(mode) = mode {
                let explicit = text
                    .parse::<toml::Table>()
                    .map(|t| t.contains_key("mode"))
                    .unwrap_or(false);
                if explicit && cfg.mode != mode {
                    bail!(
                        "config mode {:?} does not match the {:?} subcommand",
                        cfg.mode,
                        mode
                    );
                }
                ExperimentConfig { mode, ..cfg }
            } else {
                cfg
            }
        }
        (None, Some(mode)) => ExperimentConfig::for_mode(mode),
        (None, None) => bail!("a config file is required"),
    };
    if let Some(s) = &o.sweep {
        cfg.sweep = Some(Sweep::parse(s)?);
    }
    if let Some(list) = &o.schemes {
        cfg.schemes = Some(
            list.iter()
                .map(|s| s.trim().parse::<Scheme>())
                .collect::<Result<_, _>>()?,
        );
    }
    if let Some(t) = o.trials {
        cfg.trials = Some(t);
    }
    if let Some(seed) = o.seed {
        cfg.channel.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.output = Some(out.clone());
    }
    if let Some(ck) = &o.checkpoint {
        cfg.checkpoint = Some(ck.clone());
    }
    Ok(cfg)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn experiment(mode: Option<Mode>, o: &Opts) -> Result<()> {
    let cfg = build_config(mode, o)?;
    let report = run_sweep(&cfg)?;
    let mut out = open_output(cfg.output.as_deref())?;
    write_csv(&report.rows, &mut out)?;
    out.flush()?;
    let audit = &report.audit;
    eprintln!(
        "checked {} allocations over {} blocks: {} constraint violations",
        audit.allocations, audit.blocks, audit.violations
    );
    if let Some(v) = &audit.first_violation {
        bail!("constraint violation: {v}");
    }
    Ok(())
}

fn train_ddqn(o: &Opts) -> Result<()> {
    let Some(ck_path) = &o.checkpoint else {
        bail!("train-ddqn needs --checkpoint to know where to write the network");
    };
    let mode = if o.config.is_some() {
        None
    } else {
        Some(Mode::CausalPower)
    };
    let cfg = build_config(
        mode,
        &Opts {
            checkpoint: None,
            ..o.clone()
        },
    )?;
    let mut train = cfg.train_config();
    if let Some(seed) = o.seed {
        train.seed = seed;
    }
    let model = ChannelModel::new(cfg.channel.clone())?;
    let eps = db_to_linear(cfg.eps_db);
    // a rate experiment trains on the power budget equivalent to its requirement
    let p0 = if cfg.mode.is_rate() {
        rate_to_power_budget(cfg.r0, 1, cfg.channel.num_blocks, model.grid_h().mean())
    } else {
        db_to_linear(cfg.p0_db)
    };
    let mut curves = open_output(o.out.as_deref())?;
    writeln!(curves, "episode,loss,eval_rate,xi")?;
    let mut write_err = None;
    let outcome = train_with(&model, p0, eps, &train, |stats| {
        if write_err.is_none() {
            if let Err(e) = writeln!(
                curves,
                "{},{},{},{}",
                stats.episode,
                format_sig9(stats.loss),
                format_sig9(stats.eval_rate),
                format_sig9(stats.xi)
            ) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    curves.flush()?;
    let checkpoint = Checkpoint {
        network: outcome.network,
        grid: outcome.grid,
        channel: cfg.channel.clone(),
        p0,
        eps,
        seed: train.seed,
        train: Some(train),
    };
    checkpoint
        .save(ck_path)
        .with_context(|| format!("writing {}", ck_path.display()))?;
    eprintln!(
        "wrote {} ({} target syncs)",
        ck_path.display(),
        outcome.target_syncs
    );
    Ok(())
}
