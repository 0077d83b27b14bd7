//! Line-delimited JSON event log for audit replay.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::charging::EndReason;
use crate::clock::{Minute, Secs};
use crate::control::{ChargeAssignment, PolicyKind};
use crate::error::{Error, Result};
use crate::ev::{RequestId, StationId, VehicleId};
use crate::network::Vertex;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Start {
        policy: PolicyKind,
        seed: u64,
        vehicles: usize,
        stations: usize,
        chargers: usize,
        charging_enabled: bool,
    },
    /// Fleet state when the measured phase begins.
    Vehicle {
        vehicle: VehicleId,
        type_name: String,
        seats: u32,
        battery_kwh: f64,
        soc: f64,
        onboard_passengers: u32,
        in_flight: Vec<RequestId>,
    },
    Request {
        request: RequestId,
        request_s: Secs,
        origin: Vertex,
        destination: Vertex,
        passengers: u32,
        direct_travel_s: Secs,
        direct_m: f64,
        fare_cents: i64,
    },
    Assign {
        vehicle: VehicleId,
        requests: Vec<RequestId>,
        idle_since_s: Option<Secs>,
        cost_s: Secs,
    },
    Reject {
        request: RequestId,
        age_s: Secs,
    },
    Pickup {
        request: RequestId,
        vehicle: VehicleId,
        at_s: Secs,
        passengers: u32,
    },
    Dropoff {
        request: RequestId,
        vehicle: VehicleId,
        at_s: Secs,
        passengers: u32,
        delay_s: Secs,
        direct_travel_s: Secs,
        direct_m: f64,
        fare_cents: i64,
        share_cents: i64,
        ontime: bool,
        towed: bool,
    },
    ChargeDecision {
        policy: PolicyKind,
        #[serde(flatten)]
        decision: ChargeAssignment,
    },
    SessionStart {
        station: StationId,
        vehicle: VehicleId,
        slot: usize,
        waited_s: Secs,
    },
    SessionEnd {
        station: StationId,
        vehicle: VehicleId,
        slot: usize,
        delivered_kwh: f64,
        plugged_s: Secs,
        reason: EndReason,
    },
    Strand {
        vehicle: VehicleId,
        at_s: Secs,
        vertex: Vertex,
    },
    Tow {
        vehicle: VehicleId,
        station: StationId,
        km: f64,
        cost_cents: i64,
    },
    Reposition {
        vehicle: VehicleId,
        target: Vertex,
        travel_s: Secs,
    },
    Costs {
        op_dollars: f64,
        charged_kwh: f64,
        op_cents: i64,
        charge_cents: i64,
        tow_cents: i64,
        reward_cents: i64,
    },
}

#[derive(Serialize)]
struct Record<'a> {
    minute: Minute,
    #[serde(flatten)]
    event: &'a Event,
}

/// Event sink; discards everything when no file is attached.
#[derive(Debug, Default)]
pub struct EventLog {
    out: Option<(PathBuf, BufWriter<File>)>,
    written: u64,
}

impl EventLog {
    pub fn discard() -> Self {
        EventLog::default()
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            out: Some((path.to_path_buf(), BufWriter::new(f))),
            written: 0,
        })
    }

    pub fn is_active(&self) -> bool {
        self.out.is_some()
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn emit(&mut self, minute: Minute, event: &Event) -> Result<()> {
        let Some((path, w)) = &mut self.out else { return Ok(()) };
        serde_json::to_writer(&mut *w, &Record { minute, event })?;
        w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}
