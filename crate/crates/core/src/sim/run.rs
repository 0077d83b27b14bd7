//! Whole runs: output files, summary and manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::PolicyKind;
use crate::error::{Error, Result};
use crate::predictor::IdlePredictor;

use super::config::SimConfig;
use super::engine::{build_predictor, Counters, Scenario, Simulation, StepTiming};
use super::events::EventLog;
use super::ledger::{MetricsRow, Totals};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUNTIME_FILE: &str = "runtime.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Deterministic end-of-run figures (no wall-clock values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub seed: u64,
    pub vehicles: usize,
    pub stations: usize,
    pub chargers: usize,
    pub network_vertices: usize,
    pub warmup_minutes: i64,
    pub run_minutes: i64,
    pub reward_cents: i64,
    pub share_cents: i64,
    pub op_cents: i64,
    pub charge_cents: i64,
    pub tow_cents: i64,
    pub served: u64,
    pub ontime: u64,
    pub rejected: u64,
    pub ontime_rate: f64,
    pub mean_delay_s: f64,
    pub customers_per_vehicle: f64,
    pub consumed_kwh: f64,
    pub charged_kwh: f64,
    pub kwh_per_ontime: f64,
    pub peak_grid_mw: f64,
    pub arrived: u64,
    pub carried_in: u64,
    pub in_flight_end: u64,
    pub strandings: u64,
    pub tows: u64,
    pub towed_requests: u64,
    pub charge_decisions: u64,
    pub sessions: u64,
    pub samples: u64,
}

impl RunSummary {
    pub fn from_sim(sim: &Simulation) -> Self {
        let cfg = sim.config();
        let t: &Totals = sim.ledger().totals();
        let c: &Counters = sim.counters();
        RunSummary {
            policy: cfg.policy,
            seed: cfg.seed,
            vehicles: sim.vehicles().len(),
            stations: sim.charging().stations.len(),
            chargers: sim.charging().total_chargers(),
            network_vertices: sim.router().network().num_vertices(),
            warmup_minutes: cfg.warmup_minutes(),
            run_minutes: cfg.run_minutes(),
            reward_cents: t.reward_cents,
            share_cents: t.share_cents,
            op_cents: t.op_cents,
            charge_cents: t.charge_cents,
            tow_cents: t.tow_cents,
            served: t.served,
            ontime: t.ontime,
            rejected: t.rejected,
            ontime_rate: t.ontime_rate(),
            mean_delay_s: t.mean_delay_s(),
            customers_per_vehicle: t.customers_per_vehicle(),
            consumed_kwh: t.consumed_kwh,
            charged_kwh: t.charged_kwh,
            kwh_per_ontime: t.kwh_per_ontime(),
            peak_grid_mw: t.peak_grid_mw,
            arrived: c.arrived,
            carried_in: c.carried_in,
            in_flight_end: sim.in_flight() as u64,
            strandings: c.strandings,
            tows: c.tows,
            towed_requests: t.towed_requests,
            charge_decisions: c.charge_decisions,
            sessions: c.sessions,
            samples: c.samples,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Wall-clock figures of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub wall_s: f64,
    pub steps: usize,
    pub mean_step_ms: f64,
    pub mean_dispatch_ms: f64,
    pub mean_control_ms: f64,
    pub max_control_ms: f64,
}

impl Timings {
    pub fn from_steps(steps: &[StepTiming], wall_s: f64) -> Self {
        let n = steps.len().max(1) as f64;
        Timings {
            wall_s,
            steps: steps.len(),
            mean_step_ms: steps.iter().map(|s| s.step_ms).sum::<f64>() / n,
            mean_dispatch_ms: steps.iter().map(|s| s.dispatch_ms).sum::<f64>() / n,
            mean_control_ms: steps.iter().map(|s| s.control_ms).sum::<f64>() / n,
            max_control_ms: steps.iter().map(|s| s.control_ms).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: SimConfig,
    pub files: Vec<FileEntry>,
    pub timings: Timings,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((bytes.len() as u64, hex))
}

pub fn write_manifest(dir: &Path, command: &str, cfg: &SimConfig, files: &[&str], timings: Timings) -> Result<Manifest> {
    let mut entries = Vec::new();
    for name in files {
        let (bytes, sha256) = sha256_file(&dir.join(name))?;
        entries.push(FileEntry {
            name: name.to_string(),
            bytes,
            sha256,
        });
    }
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        files: entries,
        timings,
    };
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_runtime(path: &Path, steps: &[StepTiming]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["minute", "dispatch_ms", "control_ms", "step_ms", "candidates", "decisions"])?;
    for s in steps {
        w.write_record([
            s.minute.to_string(),
            format!("{:.4}", s.dispatch_ms),
            format!("{:.4}", s.control_ms),
            format!("{:.4}", s.step_ms),
            s.candidates.to_string(),
            s.decisions.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Outcome of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub timings: Timings,
    pub rows: Vec<MetricsRow>,
    pub steps: Vec<StepTiming>,
    pub dir: Option<PathBuf>,
}

/// Run a simulation to completion. With `out`, writes metrics, events,
/// summary, runtime log and manifest there.
pub fn run_simulation(mut sim: Simulation, out: Option<&Path>) -> Result<RunOutput> {
    let started = Instant::now();
    let flush_every = sim.config().output.flush_every_min.max(1) as usize;
    let mut metrics = None;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if sim.config().output.events {
            sim.set_event_log(EventLog::create(&dir.join(EVENTS_FILE))?);
        }
        metrics = Some(csv::Writer::from_path(dir.join(METRICS_FILE))?);
    }
    let mut rows = Vec::new();
    let mut write_rows = |sim: &mut Simulation, rows: &mut Vec<MetricsRow>, force: bool| -> Result<()> {
        if !force && sim.rows().len() < flush_every {
            return Ok(());
        }
        let batch = sim.take_rows();
        if let Some(w) = metrics.as_mut() {
            for r in &batch {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        rows.extend(batch);
        Ok(())
    };
    while sim.step()? {
        write_rows(&mut sim, &mut rows, false)?;
    }
    write_rows(&mut sim, &mut rows, true)?;
    sim.events_mut().flush()?;
    if let Some(mut w) = metrics {
        if rows.is_empty() {
            // header only, so the file is still a valid table
            w.write_record([
                "minute",
                "reward_cents",
                "cum_reward_cents",
                "served",
                "rejected",
                "ontime",
                "mean_delay_s",
                "mean_soc",
                "occupancy_rate",
                "grid_mw",
                "energy_kwh",
                "customers_per_vehicle",
            ])?;
        }
        w.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
    }
    let summary = RunSummary::from_sim(&sim);
    let steps = sim.timings().to_vec();
    let timings = Timings::from_steps(&steps, started.elapsed().as_secs_f64());
    if let Some(dir) = out {
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        write_runtime(&dir.join(RUNTIME_FILE), &steps)?;
        let mut files = vec![METRICS_FILE, SUMMARY_FILE, RUNTIME_FILE];
        if sim.config().output.events {
            files.insert(1, EVENTS_FILE);
        }
        write_manifest(dir, "simulate", sim.config(), &files, timings.clone())?;
    }
    Ok(RunOutput {
        summary,
        timings,
        rows,
        steps,
        dir: out.map(Path::to_path_buf),
    })
}

/// Build and run one configuration.
pub fn simulate(cfg: SimConfig, out: Option<&Path>) -> Result<RunOutput> {
    run_simulation(Simulation::new(cfg)?, out)
}

/// Run against a prebuilt scenario, optionally with an injected predictor.
pub fn simulate_scenario(
    cfg: SimConfig,
    scenario: &Scenario,
    predictor: Option<Box<dyn IdlePredictor>>,
    out: Option<&Path>,
) -> Result<RunOutput> {
    let predictor = match predictor {
        Some(p) => p,
        None => build_predictor(&cfg, &scenario.net)?,
    };
    run_simulation(Simulation::from_scenario(cfg, scenario, predictor)?, out)
}

/// Write a plain-text table of run summaries.
pub fn comparison_table(runs: &[(String, RunSummary)], w: &mut dyn Write) -> std::io::Result<()> {
    let mut warn = Vec::new();
    if let Some((_, first)) = runs.first() {
        for (name, s) in &runs[1..] {
            if s.vehicles != first.vehicles
                || s.network_vertices != first.network_vertices
                || s.run_minutes != first.run_minutes
                || s.seed != first.seed
            {
                warn.push(name.clone());
            }
        }
    }
    if !warn.is_empty() {
        writeln!(w, "WARNING: scenarios differ (fleet, network, window or seed): {}", warn.join(", "))?;
    }
    writeln!(
        w,
        "{:<24} {:>6} {:>14} {:>12} {:>10} {:>10} {:>13} {:>15} {:>12}",
        "run", "policy", "reward_usd", "mean_delay_s", "ontime_%", "rejected", "cust_per_veh", "kwh_per_ontime", "peak_mw"
    )?;
    for (name, s) in runs {
        writeln!(
            w,
            "{:<24} {:>6} {:>14.2} {:>12.1} {:>10.2} {:>10} {:>13.3} {:>15.3} {:>12.4}",
            name,
            s.policy.as_str(),
            s.reward_cents as f64 / 100.0,
            s.mean_delay_s,
            100.0 * s.ontime_rate,
            s.rejected,
            s.customers_per_vehicle,
            s.kwh_per_ontime,
            s.peak_grid_mw
        )?;
    }
    Ok(())
}
