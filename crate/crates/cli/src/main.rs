use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use brsim::experiment::{self, ExperimentError, SweepOptions, SweepVar};
use brsim::metrics::{summarize, write_csv, PacketOutcome, RunMetrics};
use brsim::scenario::{load_scenario, ProtocolChoice, Scenario, ScenarioError};
use clap::{Args, Parser, Subcommand};

/// Bernoulli relaying and greedy baseline simulator.
#[derive(Parser)]
#[command(name = "brsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override a scenario value, e.g. `--set br.relay_probability=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed and write per-run traces.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Overrides the scenario's protocol selection.
        #[arg(long)]
        protocol: Option<ProtocolChoice>,
        /// Also write the full event trace.
        #[arg(long)]
        trace: bool,
    },
    /// Run many seeds over a range of node counts or relay probabilities.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Tandem node counts, `A..B` inclusive.
        #[arg(long, conflicts_with = "p", required_unless_present = "p")]
        nodes: Option<String>,
        /// Relay probabilities, `A..B:STEP`.
        #[arg(long)]
        p: Option<String>,
        #[arg(long)]
        seeds: u64,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Exit status for bad input, as opposed to a failed run.
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("brsim: {:#}", e);
            let config = e.chain().any(|c| {
                c.is::<ScenarioError>()
                    || matches!(
                        c.downcast_ref::<ExperimentError>(),
                        Some(ExperimentError::Scenario(_) | ExperimentError::Range(_))
                    )
            });
            ExitCode::from(if config { EXIT_CONFIG } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            common,
            seed,
            protocol,
            trace,
        } => {
            let mut scenario = load(&common)?;
            if let Some(p) = protocol {
                scenario.protocol = p;
            }
            run(&scenario, seed, trace, &common.out)
        }
        Command::Sweep {
            common,
            nodes,
            p,
            seeds,
            threads,
        } => {
            let scenario = load(&common)?;
            let var = match (nodes, p) {
                (Some(n), _) => SweepVar::NodeCount(experiment::parse_node_range(&n)?),
                (None, Some(p)) => SweepVar::RelayProbability(experiment::parse_p_range(&p)?),
                (None, None) => unreachable!("clap requires one of --nodes/--p"),
            };
            sweep(&scenario, &var, seeds, threads, &common.out)
        }
    }
}

fn load(common: &Common) -> Result<Scenario> {
    let s = load_scenario(&common.scenario, &common.set)
        .with_context(|| format!("loading {}", common.scenario.display()))?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(s)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_routes(m: &RunMetrics, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "uid\tsource\toutcome\thops\troute")?;
    for (uid, p) in &m.packets {
        let (outcome, hops) = match p.outcome {
            Some(PacketOutcome::Delivered { hops, .. }) => ("delivered".to_string(), hops.to_string()),
            Some(PacketOutcome::Dropped(r)) => (format!("dropped:{}", r.as_str()), "-".into()),
            None => ("pending".into(), "-".into()),
        };
        let route: Vec<String> = m.route(*uid).iter().map(|n| n.to_string()).collect();
        writeln!(w, "{}\t{}\t{}\t{}\t{}", uid, p.source, outcome, hops, route.join(">"))?;
    }
    w.flush()?;
    Ok(())
}

fn run(scenario: &Scenario, seed: u64, trace: bool, out: &Path) -> Result<()> {
    let runs = experiment::run(scenario, seed, trace)?;
    let mut all = Vec::new();
    for r in &runs {
        let name = r.protocol.as_str();
        let m = &r.output.metrics;
        let mut w = create(&out.join(format!("{}_hops.tsv", name)))?;
        m.write_hop_trace(&mut w)?;
        w.flush()?;
        write_routes(m, &out.join(format!("{}_routes.tsv", name)))?;
        if let Some(t) = &r.output.trace {
            let path = out.join(format!("{}_events.trace", name));
            fs::write(&path, t).with_context(|| format!("writing {}", path.display()))?;
        }
        println!(
            "{} seed {}: {} delivered of {}, mean hops {}, {} events",
            name,
            seed,
            m.delivered(),
            m.generated(),
            m.mean_hops().map_or("n/a".into(), |h| format!("{:.3}", h)),
            r.output.events
        );
        all.push(m.clone());
    }
    write_csv(&summarize(&all)?, &out.join("summary.csv"))?;
    Ok(())
}

fn sweep(scenario: &Scenario, var: &SweepVar, seeds: u64, threads: Option<usize>, out: &Path) -> Result<()> {
    anyhow::ensure!(seeds > 0, "--seeds must be at least 1");
    let opts = SweepOptions {
        seeds,
        threads,
        keep_runs: false,
        trace: false,
    };
    let result = experiment::sweep(scenario, var, &opts)?;
    match var {
        SweepVar::NodeCount(_) => {
            let rows: Vec<_> = result.points.iter().flat_map(|p| p.rows.clone()).collect();
            let path = out.join("sweep.csv");
            write_csv(&rows, &path)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        SweepVar::RelayProbability(_) => {
            for p in &result.points {
                let path = out.join(format!("sweep_{}.csv", p.label));
                write_csv(&p.rows, &path)?;
                println!("{} rows -> {}", p.rows.len(), path.display());
            }
        }
    }
    Ok(())
}
