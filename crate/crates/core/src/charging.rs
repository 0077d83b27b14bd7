//! Charging stations: placement, reservations, FIFO queues and sessions.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Minute, Secs, STEP_SECS};
use crate::error::{Error, Result};
use crate::ev::{
    charge_power, integrate_charge, ChargeIntegration, StationId, Vehicle, VehicleId, VehicleState, VehicleTypeSpec,
};
use crate::network::{RoadNetwork, Vertex};

pub const DEFAULT_SUPPLY_KW: f64 = 72.0;

/// What a vehicle asks of a station: charge toward `target_soc`, optionally
/// bounded by a plugged-in duration and an absolute deadline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeRequest {
    pub target_soc: f64,
    pub max_duration_s: Option<Secs>,
    pub deadline_s: Option<Secs>,
}

impl ChargeRequest {
    pub fn to_soc(target_soc: f64) -> Self {
        ChargeRequest {
            target_soc,
            max_duration_s: None,
            deadline_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inbound {
    pub vehicle: VehicleId,
    /// First minute whose station step can plug the vehicle in.
    pub eta_minute: Minute,
    pub request: ChargeRequest,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Queued {
    pub vehicle: VehicleId,
    pub request: ChargeRequest,
    pub arrived_s: Secs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Session {
    pub vehicle: VehicleId,
    pub request: ChargeRequest,
    pub started_minute: Minute,
    pub elapsed_s: Secs,
    pub delivered_kwh: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargingStation {
    pub id: StationId,
    pub vertex: Vertex,
    pub charger_count: usize,
    pub supply_limit_kw: f64,
    pub queue: VecDeque<Queued>,
    pub slots: Vec<Option<Session>>,
    pub inbound: Vec<Inbound>,
}

impl ChargingStation {
    pub fn new(id: StationId, vertex: Vertex, charger_count: usize, supply_limit_kw: f64) -> Self {
        ChargingStation {
            id,
            vertex,
            charger_count,
            supply_limit_kw,
            queue: VecDeque::new(),
            slots: vec![None; charger_count],
            inbound: Vec::new(),
        }
    }

    pub fn active_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.slots.iter().flatten()
    }

    /// Vehicles occupying or claiming a charger here.
    pub fn committed(&self) -> usize {
        self.active_count() + self.queue.len() + self.inbound.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Holding {
    Inbound,
    Queued,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Duration,
    Full,
    Deadline,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StationEvent {
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
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub events: Vec<StationEvent>,
    pub delivered_kwh: f64,
    /// Instantaneous supply at the start of the step, kW, per station.
    pub power_kw: Vec<f64>,
}

impl StepReport {
    pub fn grid_mw(&self) -> f64 {
        self.power_kw.iter().sum::<f64>() / 1000.0
    }
}

/// All stations plus the fleet-wide reservation registry.
#[derive(Debug, Clone, Default)]
pub struct ChargingSystem {
    pub stations: Vec<ChargingStation>,
    pub integration: ChargeIntegration,
    holdings: BTreeMap<VehicleId, (StationId, Holding)>,
    next_seq: u64,
}

impl ChargingSystem {
    pub fn new(stations: Vec<ChargingStation>, integration: ChargeIntegration) -> Self {
        ChargingSystem {
            stations,
            integration,
            holdings: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn total_chargers(&self) -> usize {
        self.stations.iter().map(|s| s.charger_count).sum()
    }

    pub fn total_committed(&self) -> usize {
        self.stations.iter().map(|s| s.committed()).sum()
    }

    pub fn holding(&self, v: VehicleId) -> Option<(StationId, Holding)> {
        self.holdings.get(&v).copied()
    }

    pub fn active_sessions(&self) -> usize {
        self.stations.iter().map(|s| s.active_count()).sum()
    }

    pub fn occupancy_rate(&self) -> f64 {
        let total = self.total_chargers();
        if total == 0 {
            0.0
        } else {
            self.active_sessions() as f64 / total as f64
        }
    }

    /// Reserve a charger for a vehicle that will arrive after `travel_s` seconds.
    pub fn request_charge(
        &mut self,
        station: StationId,
        vehicle: VehicleId,
        request: ChargeRequest,
        now: Minute,
        travel_s: Secs,
    ) -> Result<()> {
        if station >= self.stations.len() {
            return Err(Error::Invalid(format!("unknown station {station}")));
        }
        if let Some((s, _)) = self.holdings.get(&vehicle) {
            return Err(Error::Invariant(format!("vehicle {vehicle} already holds a reservation at station {s}")));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let eta = now + (travel_s.max(0) + STEP_SECS - 1) / STEP_SECS;
        self.stations[station].inbound.push(Inbound {
            vehicle,
            eta_minute: eta,
            request,
            seq,
        });
        self.holdings.insert(vehicle, (station, Holding::Inbound));
        Ok(())
    }

    /// Move a vehicle from inbound to the back of the station queue.
    pub fn arrive(&mut self, vehicle: VehicleId, now_s: Secs) -> Result<StationId> {
        let Some(&(sid, Holding::Inbound)) = self.holdings.get(&vehicle) else {
            return Err(Error::Invariant(format!("vehicle {vehicle} arrived without a reservation")));
        };
        let st = &mut self.stations[sid];
        let pos = st
            .inbound
            .iter()
            .position(|i| i.vehicle == vehicle)
            .ok_or_else(|| Error::Invariant(format!("reservation of vehicle {vehicle} missing at station {sid}")))?;
        let ib = st.inbound.remove(pos);
        st.queue.push_back(Queued {
            vehicle,
            request: ib.request,
            arrived_s: now_s,
        });
        self.holdings.insert(vehicle, (sid, Holding::Queued));
        Ok(sid)
    }

    /// Put a vehicle straight into a queue (towed vehicles, or already at the station).
    pub fn enqueue(&mut self, station: StationId, vehicle: VehicleId, request: ChargeRequest, now_s: Secs) -> Result<()> {
        if self.holdings.contains_key(&vehicle) {
            return Err(Error::Invariant(format!("vehicle {vehicle} already holds a reservation")));
        }
        self.stations[station].queue.push_back(Queued {
            vehicle,
            request,
            arrived_s: now_s,
        });
        self.holdings.insert(vehicle, (station, Holding::Queued));
        Ok(())
    }

    /// Drop an inbound reservation. Queued or active vehicles cannot cancel.
    pub fn cancel_inbound(&mut self, vehicle: VehicleId) -> bool {
        match self.holdings.get(&vehicle) {
            Some(&(sid, Holding::Inbound)) => {
                self.stations[sid].inbound.retain(|i| i.vehicle != vehicle);
                self.holdings.remove(&vehicle);
                true
            }
            _ => false,
        }
    }

    /// One minute of station activity: end finished sessions, promote queue
    /// heads in FIFO order, then charge every plugged-in vehicle.
    pub fn step(&mut self, now: Minute, vehicles: &mut [Vehicle]) -> StepReport {
        let now_s = now * STEP_SECS;
        let mut report = StepReport {
            power_kw: vec![0.0; self.stations.len()],
            ..Default::default()
        };
        for st in &mut self.stations {
            for (slot, entry) in st.slots.iter_mut().enumerate() {
                let Some(sess) = entry else { continue };
                let reason = if sess.done {
                    Some(EndReason::Full)
                } else if sess.request.max_duration_s.is_some_and(|d| sess.elapsed_s >= d) {
                    Some(EndReason::Duration)
                } else if sess.request.deadline_s.is_some_and(|d| now_s >= d) {
                    Some(EndReason::Deadline)
                } else {
                    None
                };
                if let Some(reason) = reason {
                    report.events.push(StationEvent::SessionEnd {
                        station: st.id,
                        vehicle: sess.vehicle,
                        slot,
                        delivered_kwh: sess.delivered_kwh,
                        plugged_s: sess.elapsed_s,
                        reason,
                    });
                    let v = &mut vehicles[sess.vehicle];
                    v.state = VehicleState::Idle;
                    v.charge_plan = None;
                    self.holdings.remove(&sess.vehicle);
                    *entry = None;
                }
            }
            for slot in 0..st.slots.len() {
                if st.slots[slot].is_some() {
                    continue;
                }
                let Some(q) = st.queue.pop_front() else { break };
                st.slots[slot] = Some(Session {
                    vehicle: q.vehicle,
                    request: q.request,
                    started_minute: now,
                    elapsed_s: 0,
                    delivered_kwh: 0.0,
                    done: false,
                });
                vehicles[q.vehicle].state = VehicleState::Charging;
                self.holdings.insert(q.vehicle, (st.id, Holding::Active));
                report.events.push(StationEvent::SessionStart {
                    station: st.id,
                    vehicle: q.vehicle,
                    slot,
                    waited_s: now_s - q.arrived_s,
                });
            }
            for sess in st.slots.iter_mut().flatten() {
                let v = &mut vehicles[sess.vehicle];
                let mut dt = STEP_SECS;
                if let Some(d) = sess.request.max_duration_s {
                    dt = dt.min(d - sess.elapsed_s);
                }
                if let Some(d) = sess.request.deadline_s {
                    dt = dt.min(d - now_s);
                }
                let dt = dt.max(0);
                report.power_kw[st.id] += charge_power(&v.spec, v.soc(), st.supply_limit_kw);
                let (delivered, done) =
                    v.apply_charging_step(st.supply_limit_kw, dt as f64, sess.request.target_soc, &self.integration);
                sess.elapsed_s += dt;
                sess.delivered_kwh += delivered;
                sess.done = done;
                report.delivered_kwh += delivered;
            }
        }
        report
    }

    /// Number of station steps a session would occupy starting from `energy_kwh`.
    pub fn session_steps(&self, spec: &VehicleTypeSpec, energy_kwh: f64, station: StationId, req: &ChargeRequest, start: Minute) -> i64 {
        let limit = self.stations[station].supply_limit_kw;
        session_steps(spec, energy_kwh, limit, req, start, 0, &self.integration)
    }

    /// Seconds from `now` until a vehicle arriving now would plug in, by simulating
    /// the FIFO forward over active, queued and inbound vehicles.
    pub fn expected_wait(&self, station: StationId, now: Minute, vehicles: &[Vehicle]) -> Secs {
        let st = &self.stations[station];
        let limit = st.supply_limit_kw;
        let integ = &self.integration;
        let mut free_at: Vec<Minute> = Vec::with_capacity(st.charger_count);
        for entry in &st.slots {
            match entry {
                None => free_at.push(now),
                Some(s) if s.done => free_at.push(now),
                Some(s) => {
                    let v = &vehicles[s.vehicle];
                    let steps = session_steps(&v.spec, v.energy_kwh, limit, &s.request, now, s.elapsed_s, integ);
                    free_at.push(now + steps);
                }
            }
        }
        if free_at.is_empty() {
            return Secs::MAX / 4;
        }
        let mut take = |ready: Minute, vehicle: VehicleId, req: &ChargeRequest| {
            let (i, &f) = free_at
                .iter()
                .enumerate()
                .min_by_key(|&(i, &f)| (f, i))
                .expect("station has chargers");
            let start = f.max(ready);
            let v = &vehicles[vehicle];
            free_at[i] = start + session_steps(&v.spec, v.energy_kwh, limit, req, start, 0, integ);
        };
        for q in &st.queue {
            take(now, q.vehicle, &q.request);
        }
        let mut inbound: Vec<&Inbound> = st.inbound.iter().collect();
        inbound.sort_by_key(|i| (i.eta_minute, i.seq));
        for ib in inbound {
            take(ib.eta_minute.max(now), ib.vehicle, &ib.request);
        }
        let earliest = free_at.iter().copied().min().unwrap_or(now);
        (earliest - now).max(0) * STEP_SECS
    }

    /// Exclusivity check over all stations; returns a description of the first violation.
    pub fn check_exclusive(&self) -> Result<()> {
        let mut seen: BTreeMap<VehicleId, StationId> = BTreeMap::new();
        for st in &self.stations {
            let ids = st
                .inbound
                .iter()
                .map(|i| i.vehicle)
                .chain(st.queue.iter().map(|q| q.vehicle))
                .chain(st.sessions().map(|s| s.vehicle));
            for v in ids {
                if let Some(prev) = seen.insert(v, st.id) {
                    return Err(Error::Invariant(format!(
                        "vehicle {v} held by stations {prev} and {}",
                        st.id
                    )));
                }
            }
            if st.active_count() > st.charger_count {
                return Err(Error::Invariant(format!("station {} over capacity", st.id)));
            }
        }
        if seen.len() != self.holdings.len() {
            return Err(Error::Invariant("reservation registry out of sync".into()));
        }
        Ok(())
    }
}

/// Station steps until a session ends, mirroring `ChargingSystem::step`.
fn session_steps(
    spec: &VehicleTypeSpec,
    energy_kwh: f64,
    limit_kw: f64,
    req: &ChargeRequest,
    start: Minute,
    elapsed_s: Secs,
    integ: &ChargeIntegration,
) -> i64 {
    let mut e = energy_kwh;
    let mut elapsed = elapsed_s;
    let mut steps = 0;
    let mut minute = start;
    loop {
        if req.max_duration_s.is_some_and(|d| elapsed >= d) || req.deadline_s.is_some_and(|d| minute * STEP_SECS >= d) {
            return steps;
        }
        let mut dt = STEP_SECS;
        if let Some(d) = req.max_duration_s {
            dt = dt.min(d - elapsed);
        }
        if let Some(d) = req.deadline_s {
            dt = dt.min(d - minute * STEP_SECS);
        }
        let s = integrate_charge(spec, e, limit_kw, dt as f64, req.target_soc, integ);
        steps += 1;
        if s.reached_cap || steps > 100_000 {
            return steps;
        }
        e = s.energy_kwh;
        elapsed += dt;
        minute += 1;
    }
}

/// Sample `k` chargers over parking vertices with closeness-weighted draws;
/// repeated draws merge into multi-charger stations, sorted by vertex.
pub fn place_chargers(
    parking: &[Vertex],
    centrality: &[f64],
    k: usize,
    seed: u64,
    supply_limit_kw: f64,
) -> Result<Vec<ChargingStation>> {
    if k == 0 {
        return Err(Error::Invalid("charger count must be positive".into()));
    }
    if parking.is_empty() {
        return Err(Error::Empty("no parking vertices for charger placement".into()));
    }
    let weights: Vec<f64> = parking.iter().map(|&v| centrality[v]).collect();
    let total: f64 = weights.iter().sum();
    let dist = WeightedIndex::new(weights.iter().map(|w| w / total))
        .map_err(|e| Error::Invalid(format!("placement weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<Vertex, usize> = BTreeMap::new();
    for _ in 0..k {
        *counts.entry(parking[dist.sample(&mut rng)]).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(id, (v, c))| ChargingStation::new(id, v, c, supply_limit_kw))
        .collect())
}

/// Seeded random subset of vertices used as parking candidates, sorted.
pub fn parking_subset(num_vertices: usize, fraction: f64, seed: u64) -> Vec<Vertex> {
    let m = ((num_vertices as f64 * fraction).round() as usize).clamp(1, num_vertices);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Vertex> = sample(&mut rng, num_vertices, m).into_iter().collect();
    v.sort_unstable();
    v
}

/// Place `k` chargers on a network using its closeness centrality.
pub fn place_on_network(
    net: &RoadNetwork,
    parking_fraction: f64,
    k: usize,
    seed: u64,
    supply_limit_kw: f64,
) -> Result<Vec<ChargingStation>> {
    let centrality = net.closeness_centrality()?;
    let parking = parking_subset(net.num_vertices(), parking_fraction, seed);
    place_chargers(&parking, &centrality, k, seed.wrapping_add(1), supply_limit_kw)
}

#[derive(Debug, Serialize, Deserialize)]
struct StationRow {
    station_id: StationId,
    vertex: Vertex,
    charger_count: usize,
}

pub fn write_stations(path: &Path, stations: &[ChargingStation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stations {
        w.serialize(StationRow {
            station_id: s.id,
            vertex: s.vertex,
            charger_count: s.charger_count,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stations(path: &Path, num_vertices: usize, supply_limit_kw: f64) -> Result<Vec<ChargingStation>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: StationRow = row?;
        if r.vertex >= num_vertices || r.charger_count == 0 {
            return Err(Error::Invalid(format!("station {} has invalid vertex or charger count", r.station_id)));
        }
        out.push(ChargingStation::new(out.len(), r.vertex, r.charger_count, supply_limit_kw));
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{} lists no stations", path.display())));
    }
    Ok(out)
}
