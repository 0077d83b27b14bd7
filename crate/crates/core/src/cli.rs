//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::charging::write_stations;
use crate::control::PolicyKind;
use crate::error::{Error, Result};
use crate::network::RoadNetwork;
use crate::predictor::{LookupTable, SampleReader, SampleWriter};
use crate::sim::config::SimConfig;
use crate::sim::engine::{build_stations, Simulation};
use crate::sim::run::{comparison_table, run_simulation, write_json, write_manifest, RunSummary, Timings};
use crate::trips::{ingest_trips, write_preprocessed, IngestOptions};

/// Output root used when `--out` is not given.
pub const OUT_ENV: &str = "EVPOOL_OUT";

#[derive(Debug, Parser)]
#[command(name = "evpool", version, about = "EV ridepooling fleet simulator with charging control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean raw trips and match them to network vertices.
    Preprocess {
        #[arg(long)]
        trips: PathBuf,
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the network, demand and stations of a config as files.
    Generate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one or more simulations.
    Simulate(SimulateArgs),
    /// Record idle-time samples from a charging-free run.
    Logsamples {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the lookup predictor from a sample file.
    Buildtable {
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate the summaries of finished runs.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub policy: Option<PolicyKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Charger count, or a comma list to sweep.
    #[arg(long, value_delimiter = ',')]
    pub chargers: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn out_dir(given: Option<PathBuf>, default_name: &str) -> PathBuf {
    given.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(default_name)
    })
}

pub fn cmd_preprocess(trips: &Path, network: &Path, out: &Path) -> Result<()> {
    let net = RoadNetwork::load_graphml(network)?;
    let (reqs, report) = ingest_trips(trips, &net, &IngestOptions::default())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("report.json"), &report)?;
    if reqs.is_empty() {
        warn!("no trips left after filtering");
        return Err(Error::Empty(format!("{} produced no trips after filtering", trips.display())));
    }
    write_preprocessed(&out.join("trips.pre.csv"), &reqs)?;
    info!("{} of {} rows kept", report.emitted, report.rows);
    Ok(())
}

pub fn cmd_generate(config: &Path, out: &Path) -> Result<()> {
    let mut cfg = SimConfig::load(config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let net = cfg.build_network()?;
    let demand = cfg.build_demand(&net)?;
    net.write_graphml(&out.join("network.graphml"))?;
    write_preprocessed(&out.join("trips.pre.csv"), &demand)?;
    let stations = build_stations(&cfg, &net)?;
    if !stations.is_empty() {
        write_stations(&out.join("stations.csv"), &stations)?;
        cfg.chargers.stations = Some("stations.csv".into());
    }
    cfg.network.grid = None;
    cfg.network.graphml = Some("network.graphml".into());
    cfg.demand.synthetic = None;
    cfg.demand.trips = Some("trips.pre.csv".into());
    let text = cfg.to_toml()?;
    let p = out.join("scenario.toml");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    info!("{} requests, {} stations written to {}", demand.len(), stations.len(), out.display());
    Ok(())
}

/// Run the configuration once per charger count. Returns the run directories.
pub fn cmd_simulate(args: SimulateArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = SimConfig::load(&args.config)?;
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let base = out_dir(args.out, &format!("{}-seed{}", cfg.policy, cfg.seed));
    let sweep: Vec<Option<usize>> = if args.chargers.is_empty() {
        vec![None]
    } else {
        args.chargers.iter().map(|&k| Some(k)).collect()
    };
    let mut dirs = Vec::new();
    for k in sweep {
        let mut c = cfg.clone();
        let dir = match k {
            Some(k) => {
                c.chargers.count = k;
                c.chargers.stations = None;
                if args.chargers.len() > 1 {
                    base.join(format!("chargers-{k}"))
                } else {
                    base.clone()
                }
            }
            None => base.clone(),
        };
        c.validate()?;
        let out = run_simulation(Simulation::new(c)?, Some(&dir))?;
        info!(
            "{}: reward ${:.2}, on-time {:.2}%, {} served",
            dir.display(),
            out.summary.reward_cents as f64 / 100.0,
            100.0 * out.summary.ontime_rate,
            out.summary.served
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn cmd_logsamples(config: &Path, out: &Path, seed: Option<u64>) -> Result<u64> {
    let mut cfg = SimConfig::load(config)?;
    if cfg.charging_enabled {
        return Err(Error::Invalid(
            "logsamples needs a charging-free run; set charging_enabled = false in the config".into(),
        ));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let started = std::time::Instant::now();
    let mut sim = Simulation::new(cfg.clone())?;
    let n = sim.router().network().num_vertices();
    sim.collect_samples(Some(SampleWriter::create(out, n)?));
    sim.run_to_end()?;
    let count = sim.finish_samples()?.unwrap_or(0);
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        let name = out.file_name().and_then(|s| s.to_str()).unwrap_or("samples.bin");
        let timings = Timings {
            wall_s: started.elapsed().as_secs_f64(),
            ..Default::default()
        };
        write_manifest(dir, "logsamples", &cfg, &[name], timings)?;
    }
    info!("{count} samples written to {}", out.display());
    Ok(count)
}

pub fn cmd_buildtable(samples: &Path, out: &Path) -> Result<LookupTable> {
    let (n, s) = SampleReader::read_all(samples)?;
    let t = LookupTable::build(n, &s)?;
    t.write(out)?;
    info!("table from {} samples written to {}", s.len(), out.display());
    Ok(t)
}

pub fn cmd_compare(dirs: &[PathBuf], w: &mut dyn std::io::Write) -> Result<()> {
    let mut runs = Vec::new();
    for d in dirs {
        let name = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string());
        runs.push((name, RunSummary::load(d)?));
    }
    comparison_table(&runs, w).map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { trips, network, out } => cmd_preprocess(&trips, &network, &out),
        Command::Generate { config, out } => cmd_generate(&config, &out),
        Command::Simulate(args) => cmd_simulate(args).map(|_| ()),
        Command::Logsamples { config, out, seed } => cmd_logsamples(&config, &out, seed).map(|_| ()),
        Command::Buildtable { samples, out } => cmd_buildtable(&samples, &out).map(|_| ()),
        Command::Compare { dirs } => cmd_compare(&dirs, &mut std::io::stdout().lock()),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
