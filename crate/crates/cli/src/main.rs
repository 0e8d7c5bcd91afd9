use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use cooldown_cli::artifacts::{StageState, Store};
use cooldown_cli::export::{schedule_rows, standard_shapes};
use cooldown_cli::manifest::{At, Manifest};
use cooldown_cli::pipeline::Pipeline;
use cooldown_cli::tables::to_csv;
use cooldown_lab::analysis::Space;
use cooldown_lab::schedules::CooldownShape;
use cooldown_lab::Exec;

/// Cooldown experiments on tiny transformers, driven by a TOML manifest.
#[derive(Parser)]
#[command(name = "cooldown", version)]
struct Cli {
    /// Root under which each manifest gets its artifact directory.
    #[arg(long, global = true, env = "COOLDOWN_LAB_OUT", default_value = "artifacts")]
    out: PathBuf,
    /// Override the base run's init seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArg {
    /// Path to the experiment manifest.
    manifest: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage the manifest asks for, then the export bundle.
    Run(ManifestArg),
    /// The base (pre-cooldown) run.
    Train(ManifestArg),
    /// A single cooldown from the base checkpoint.
    Cooldown {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long)]
        shape: CooldownShape,
        #[arg(long, default_value_t = 0)]
        order_seed: u64,
    },
    /// Cooldown against constant-lr continuation, per control seed.
    Control(ManifestArg),
    /// Shapes x seeds permutation sweep.
    Sweep(ManifestArg),
    /// Long sqrt-cooldown reference runs.
    Reference(ManifestArg),
    /// Disjoint-data cooldowns and their weight average.
    Soup(ManifestArg),
    /// Batch-size scaling sweep.
    BatchSweep(ManifestArg),
    /// AdamW beta power sweep.
    BetaSweep(ManifestArg),
    /// Bias-variance reports and shift/deviation.
    Analyze {
        #[command(flatten)]
        m: ManifestArg,
        /// Space to analyze (loss, weight, loss_simple, kl); repeatable.
        /// Defaults to the manifest's list.
        #[arg(long)]
        space: Vec<Space>,
        /// Also compute shift and deviation.
        #[arg(long)]
        shift: bool,
    },
    /// Loss-landscape grids (start, mid, end); repeatable.
    Landscape {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long)]
        at: Vec<At>,
    },
    /// Linear probes on the base and cooled-down checkpoints.
    Probe(ManifestArg),
    /// Plot-ready CSV bundle under export/.
    Export(ManifestArg),
    /// Check every recorded file hash in the artifact directory.
    Verify(ManifestArg),
    /// Print the learning-rate curve of each standard shape as CSV.
    Schedule {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long)]
        shape: Vec<CooldownShape>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<Manifest> {
    let mut m = Manifest::load(path)?;
    if let Some(s) = seed {
        m.base.init_seed = s;
    }
    Ok(m)
}

fn open(cli: &Cli, path: &Path) -> Result<Pipeline> {
    let m = load(path, cli.seed)?;
    let dir = m.artifact_dir(&cli.out);
    let exec = if cli.workers == 1 { Exec::Sequential } else { Exec::default() };
    Pipeline::open(m, &dir, exec)
}

fn execute(cli: &Cli) -> Result<bool> {
    let mut p = match &cli.command {
        Command::Verify(a) => {
            let m = load(&a.manifest, cli.seed)?;
            let store = Store::open(&m.artifact_dir(&cli.out))?;
            let problems = store.verify();
            for pr in &problems {
                println!("{pr}");
            }
            println!("{} files checked, {} problems", store.hashes().len(), problems.len());
            return Ok(problems.is_empty());
        }
        Command::Schedule { m, shape } => {
            let m = load(&m.manifest, cli.seed)?;
            let shapes = if shape.is_empty() { standard_shapes() } else { shape.clone() };
            let csv = to_csv(&schedule_rows(&m.schedule, &shapes))?;
            print!("{}", String::from_utf8(csv)?);
            return Ok(true);
        }
        Command::Run(a)
        | Command::Train(a)
        | Command::Control(a)
        | Command::Sweep(a)
        | Command::Reference(a)
        | Command::Soup(a)
        | Command::BatchSweep(a)
        | Command::BetaSweep(a)
        | Command::Probe(a)
        | Command::Export(a) => open(cli, &a.manifest)?,
        Command::Cooldown { m, .. } | Command::Analyze { m, .. } | Command::Landscape { m, .. } => {
            open(cli, &m.manifest)?
        }
    };
    let result = match &cli.command {
        Command::Run(_) => p.run_all(),
        Command::Train(_) => p.base().map(drop),
        Command::Cooldown { shape, order_seed, .. } => p.cooldown(*shape, *order_seed).map(drop),
        Command::Control(_) => p.control().map(drop),
        Command::Sweep(_) => p.sweep(),
        Command::Reference(_) => p.reference().map(drop),
        Command::Soup(_) => p.soup().map(drop),
        Command::BatchSweep(_) => p.batch_sweep().map(drop),
        Command::BetaSweep(_) => p.beta_sweep().map(drop),
        Command::Analyze { space, shift, .. } => (|| {
            let spaces = if space.is_empty() { p.manifest.analysis.spaces.clone() } else { space.clone() };
            if spaces.is_empty() && !shift {
                bail!("nothing to analyze");
            }
            for s in spaces {
                p.analyze(s)?;
            }
            if *shift {
                p.shift()?;
            }
            Ok(())
        })(),
        Command::Landscape { at, .. } => (|| {
            let at = if at.is_empty() {
                p.manifest.landscape.as_ref().map(|l| l.at.clone()).unwrap_or_default()
            } else {
                at.clone()
            };
            for a in at {
                p.landscape(a)?;
            }
            Ok(())
        })(),
        Command::Probe(_) => p.probe().map(drop),
        Command::Export(_) => p.export().map(|missing| {
            for m in missing {
                eprintln!("missing: {m}");
            }
        }),
        Command::Verify(_) | Command::Schedule { .. } => unreachable!(),
    };
    for r in p.reports() {
        let state = match r.state {
            StageState::Done => "done",
            StageState::Partial => "partial",
            StageState::Failed => "failed",
        };
        let cached = if r.cached { " (cached)" } else { "" };
        eprintln!("{:<28} {state}{cached}", r.stage);
        for e in &r.errors {
            eprintln!("    {e}");
        }
    }
    eprintln!("artifacts: {}", p.store.root().display());
    result?;
    Ok(p.all_ok())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.workers;
    match cooldown_lab::exec::with_workers(workers, || execute(&cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
