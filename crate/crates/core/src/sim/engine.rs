//! The per-minute world update: requests, dispatch, charging control,
//! repositioning, motion and the ledger.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::charging::{place_on_network, read_stations, ChargeRequest, ChargingStation, ChargingSystem, StationEvent};
use crate::clock::{Minute, Secs, SimClock, STEP_SECS};
use crate::control::{baseline_step, itx_step, stranded_step, ChargeAssignment, ControlInput, PolicyKind};
use crate::dispatch::{dispatch, Committed, PendingRequest, VehicleSnapshot};
use crate::error::{Error, Result};
use crate::ev::{
    traversal_energy, ChargePlan, Onboard, RequestId, StopKind, Vehicle, VehicleId, VehicleState, VehicleTypeSpec,
    UNCOUPLE_SOC,
};
use crate::network::{RoadNetwork, Vertex};
use crate::predictor::{
    ConstantPredictor, FleetSnapshot, GcnPredictor, GcnWeights, IdleFeatures, IdlePredictor, IdleSample, LookupTable,
    SampleWriter, TablePredictor,
};
use crate::reposition::{reposition, DemandWindow, IdleVehicle};
use crate::routing::{Router, TravelTimeModel};
use crate::trips::{DemandStream, RequestState, TripRequest};

use super::config::{PredictorKind, SimConfig};
use super::events::{Event, EventLog};
use super::ledger::{fare_cents, Ledger, MetricsRow, MinuteState};

/// Immutable inputs shared by runs of the same scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: Arc<RoadNetwork>,
    pub model: TravelTimeModel,
    pub demand: Arc<Vec<TripRequest>>,
    pub stations: Vec<ChargingStation>,
    /// One spec per vehicle, in fleet order.
    pub fleet: Vec<Arc<VehicleTypeSpec>>,
}

impl Scenario {
    pub fn build(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Arc::new(cfg.build_network()?);
        let model = cfg.travel_model()?;
        let demand = Arc::new(cfg.build_demand(&net)?);
        let stations = build_stations(cfg, &net)?;
        let mut fleet = Vec::with_capacity(cfg.fleet_size());
        for entry in &cfg.fleet {
            let spec = Arc::new(entry.resolve()?);
            fleet.extend(std::iter::repeat_n(spec, entry.count));
        }
        Ok(Scenario {
            net,
            model,
            demand,
            stations,
            fleet,
        })
    }
}

pub fn build_stations(cfg: &SimConfig, net: &RoadNetwork) -> Result<Vec<ChargingStation>> {
    let c = &cfg.chargers;
    if let Some(p) = &c.stations {
        return read_stations(p, net.num_vertices(), c.supply_kw);
    }
    if c.count == 0 {
        return Ok(Vec::new());
    }
    place_on_network(net, c.parking_fraction, c.count, c.seed, c.supply_kw)
}

pub fn build_predictor(cfg: &SimConfig, net: &RoadNetwork) -> Result<Box<dyn IdlePredictor>> {
    let clock = SimClock::new(cfg.start_weekday);
    let path = || {
        cfg.predictor
            .path
            .as_deref()
            .ok_or_else(|| Error::Invalid("predictor path is required".into()))
    };
    Ok(match cfg.predictor.kind {
        PredictorKind::Constant => Box::new(ConstantPredictor(cfg.predictor.constant_s)),
        PredictorKind::Table => {
            let t = LookupTable::load(path()?)?;
            if t.num_vertices() != net.num_vertices() {
                return Err(Error::Invalid(format!(
                    "lookup table covers {} vertices, network has {}",
                    t.num_vertices(),
                    net.num_vertices()
                )));
            }
            Box::new(TablePredictor::new(t, clock))
        }
        PredictorKind::Gcn => {
            let w = Arc::new(GcnWeights::load(path()?)?);
            Box::new(GcnPredictor::new(w, net.normalized_adjacency(), clock)?)
        }
    })
}

#[derive(Debug, Clone)]
struct Req {
    trip: TripRequest,
    request_s: Secs,
    direct_travel_s: Secs,
    direct_m: f64,
    fare_cents: i64,
    state: RequestState,
    promise_s: Secs,
}

/// Wall-clock timings of one measured step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTiming {
    pub minute: Minute,
    pub dispatch_ms: f64,
    pub control_ms: f64,
    pub step_ms: f64,
    pub candidates: usize,
    pub decisions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct Counters {
    /// Requests arriving in the measured phase.
    pub arrived: u64,
    /// Requests already assigned or onboard when the measured phase began.
    pub carried_in: u64,
    pub completed: u64,
    pub rejected: u64,
    pub strandings: u64,
    pub tows: u64,
    pub charge_decisions: u64,
    pub sessions: u64,
    pub samples: u64,
}

/// A steppable simulation over warmup and measured phases.
pub struct Simulation {
    cfg: SimConfig,
    clock: SimClock,
    router: Router,
    vehicles: Vec<Vehicle>,
    charging: ChargingSystem,
    demand: DemandStream,
    predictor: Box<dyn IdlePredictor>,
    window: DemandWindow,
    minute: Minute,
    warmup_end: Minute,
    end: Minute,
    requests: BTreeMap<RequestId, Req>,
    pending: Vec<RequestId>,
    ledger: Ledger,
    events: EventLog,
    rows: Vec<MetricsRow>,
    timings: Vec<StepTiming>,
    counters: Counters,
    /// Features of vehicles waiting for their next assignment.
    idle_features: BTreeMap<VehicleId, IdleFeatures>,
    sample_out: Option<SampleWriter>,
    samples: Vec<IdleSample>,
    collect_samples: bool,
    became_idle: Vec<VehicleId>,
    grid_mw: f64,
}

fn invariant(msg: String) -> Error {
    Error::Invariant(msg)
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let scenario = Scenario::build(&cfg)?;
        let predictor = if cfg.policy == PolicyKind::Itx && cfg.charging_enabled {
            build_predictor(&cfg, &scenario.net)?
        } else {
            Box::new(ConstantPredictor(cfg.predictor.constant_s))
        };
        Self::from_scenario(cfg, &scenario, predictor)
    }

    pub fn from_scenario(cfg: SimConfig, sc: &Scenario, predictor: Box<dyn IdlePredictor>) -> Result<Self> {
        cfg.validate()?;
        if sc.fleet.is_empty() {
            return Err(Error::Invalid("fleet is empty".into()));
        }
        let router = Router::new(sc.net.clone(), sc.model.clone())?;
        let n = sc.net.num_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let [lo, hi] = cfg.initial_soc;
        let vehicles = sc
            .fleet
            .iter()
            .enumerate()
            .map(|(id, spec)| {
                let at = rng.random_range(0..n);
                let soc = if hi > lo { rng.random_range(lo..hi) } else { lo };
                Vehicle::new(id, spec.clone(), at, soc)
            })
            .collect();
        let warmup_end = cfg.warmup_minutes();
        let end = warmup_end + cfg.run_minutes();
        let stations = if cfg.charging_enabled { sc.stations.clone() } else { Vec::new() };
        Ok(Simulation {
            clock: SimClock::new(cfg.start_weekday),
            router,
            vehicles,
            charging: ChargingSystem::new(stations, cfg.integration),
            demand: DemandStream::new(sc.demand.as_ref().clone()),
            predictor,
            window: DemandWindow::new(n),
            minute: 0,
            warmup_end,
            end,
            requests: BTreeMap::new(),
            pending: Vec::new(),
            ledger: Ledger::new(cfg.costs.ontime_delay_s, cfg.costs.charge_per_kwh),
            events: EventLog::discard(),
            rows: Vec::new(),
            timings: Vec::new(),
            counters: Counters::default(),
            idle_features: BTreeMap::new(),
            sample_out: None,
            samples: Vec::new(),
            collect_samples: false,
            became_idle: Vec::new(),
            grid_mw: 0.0,
            cfg,
        })
    }

    pub fn set_event_log(&mut self, log: EventLog) {
        self.events = log;
    }

    /// Record idle-time samples in the measured phase, streamed to `out`
    /// when given, otherwise kept in memory.
    pub fn collect_samples(&mut self, out: Option<SampleWriter>) {
        self.collect_samples = true;
        self.sample_out = out;
    }

    pub fn take_samples(&mut self) -> Vec<IdleSample> {
        std::mem::take(&mut self.samples)
    }

    pub fn finish_samples(&mut self) -> Result<Option<u64>> {
        match self.sample_out.take() {
            Some(w) => Ok(Some(w.finish()?)),
            None => Ok(None),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn minute(&self) -> Minute {
        self.minute
    }

    pub fn end_minute(&self) -> Minute {
        self.end
    }

    pub fn warmup_end(&self) -> Minute {
        self.warmup_end
    }

    pub fn is_done(&self) -> bool {
        self.minute >= self.end
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn charging(&self) -> &ChargingSystem {
        &self.charging
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn take_rows(&mut self) -> Vec<MetricsRow> {
        std::mem::take(&mut self.rows)
    }

    pub fn timings(&self) -> &[StepTiming] {
        &self.timings
    }

    pub fn events_mut(&mut self) -> &mut EventLog {
        &mut self.events
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    /// Requests neither completed nor rejected.
    pub fn in_flight(&self) -> usize {
        self.requests.len()
    }

    fn measured(&self) -> bool {
        self.minute >= self.warmup_end
    }

    fn energy_on(&self) -> bool {
        self.measured() && self.cfg.charging_enabled
    }

    fn emit(&mut self, e: Event) -> Result<()> {
        if self.measured() {
            self.events.emit(self.minute, &e)?;
        }
        Ok(())
    }

    /// Advance one minute. Returns false once the run window is exhausted.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let started = Instant::now();
        let m = self.minute;
        if m == self.warmup_end {
            self.begin_measured()?;
        }
        self.router.set_time(m);
        self.retrieve(m)?;
        self.expire(m)?;
        let t = Instant::now();
        self.dispatch_step(m)?;
        let dispatch_ms = t.elapsed().as_secs_f64() * 1e3;
        let (mut control_ms, mut candidates, mut decisions) = (0.0, 0, 0);
        if self.energy_on() {
            self.tow_step(m)?;
            let t = Instant::now();
            (candidates, decisions) = self.control_step(m)?;
            control_ms = t.elapsed().as_secs_f64() * 1e3;
        }
        if self.cfg.reposition.enabled {
            self.reposition_step(m)?;
        }
        self.grid_mw = 0.0;
        if self.energy_on() {
            self.station_step(m)?;
        }
        self.motion(m)?;
        self.capture_features(m)?;
        if self.measured() {
            self.close_minute(m)?;
            self.timings.push(StepTiming {
                minute: m,
                dispatch_ms,
                control_ms,
                step_ms: started.elapsed().as_secs_f64() * 1e3,
                candidates,
                decisions,
            });
            if (m - self.warmup_end + 1) % self.cfg.output.flush_every_min == 0 {
                self.events.flush()?;
            }
        }
        self.check_invariants(m)?;
        self.minute += 1;
        Ok(true)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step()? {}
        self.events.flush()
    }

    fn begin_measured(&mut self) -> Result<()> {
        self.counters.carried_in = self.requests.values().filter(|r| r.state != RequestState::Pending).count() as u64;
        let start = Event::Start {
            policy: self.cfg.policy,
            seed: self.cfg.seed,
            vehicles: self.vehicles.len(),
            stations: self.charging.stations.len(),
            chargers: self.charging.total_chargers(),
            charging_enabled: self.cfg.charging_enabled,
        };
        self.events.emit(self.minute, &start)?;
        for i in 0..self.vehicles.len() {
            let v = &self.vehicles[i];
            let mut in_flight: Vec<RequestId> = v.stops.iter().map(|s| s.request).collect();
            in_flight.sort_unstable();
            in_flight.dedup();
            let e = Event::Vehicle {
                vehicle: v.id,
                type_name: v.spec.name.clone(),
                seats: v.spec.seats,
                battery_kwh: v.spec.battery_kwh,
                soc: v.soc(),
                onboard_passengers: v.occupied_seats(),
                in_flight,
            };
            self.events.emit(self.minute, &e)?;
        }
        // pending requests from warmup stay pending; count and log them as arrivals
        self.counters.arrived += self.pending.len() as u64;
        for id in &self.pending {
            let r = &self.requests[id];
            let e = Event::Request {
                request: *id,
                request_s: r.request_s,
                origin: r.trip.origin,
                destination: r.trip.destination,
                passengers: r.trip.passengers,
                direct_travel_s: r.direct_travel_s,
                direct_m: r.direct_m,
                fare_cents: r.fare_cents,
            };
            self.events.emit(self.minute, &e)?;
        }
        Ok(())
    }

    fn retrieve(&mut self, m: Minute) -> Result<()> {
        let n = self.router.network().num_vertices();
        let mut counts = vec![0u32; n];
        let arriving: Vec<TripRequest> = self.demand.requests_at(m).to_vec();
        for trip in arriving {
            counts[trip.origin] += 1;
            if self.measured() {
                self.counters.arrived += 1;
            }
            let (direct_travel_s, direct_m) = match (
                self.router.tt(trip.origin, trip.destination),
                self.router.path_length_m(trip.origin, trip.destination),
            ) {
                (Ok(t), Ok(d)) => (t, d),
                _ => {
                    self.reject(trip.id, 0)?;
                    continue;
                }
            };
            let fare = fare_cents(direct_travel_s as f64 / 60.0, direct_m / 1000.0);
            self.emit(Event::Request {
                request: trip.id,
                request_s: m * STEP_SECS,
                origin: trip.origin,
                destination: trip.destination,
                passengers: trip.passengers,
                direct_travel_s,
                direct_m,
                fare_cents: fare,
            })?;
            if self.requests.contains_key(&trip.id) {
                return Err(invariant(format!("duplicate request id {}", trip.id)));
            }
            self.requests.insert(
                trip.id,
                Req {
                    trip,
                    request_s: m * STEP_SECS,
                    direct_travel_s,
                    direct_m,
                    fare_cents: fare,
                    state: RequestState::Pending,
                    promise_s: 0,
                },
            );
            self.pending.push(trip.id);
        }
        self.window.update(m, &counts)
    }

    fn reject(&mut self, id: RequestId, age_s: Secs) -> Result<()> {
        self.requests.remove(&id);
        if self.measured() {
            self.ledger.reject();
            self.counters.rejected += 1;
        }
        self.emit(Event::Reject { request: id, age_s })
    }

    fn expire(&mut self, m: Minute) -> Result<()> {
        let now_s = m * STEP_SECS;
        let max_age = self.cfg.dispatch.max_delay_s;
        let mut keep = Vec::with_capacity(self.pending.len());
        for id in std::mem::take(&mut self.pending) {
            let age = now_s - self.requests[&id].request_s;
            if age >= max_age {
                self.reject(id, age)?;
            } else {
                keep.push(id);
            }
        }
        self.pending = keep;
        Ok(())
    }

    /// Where a vehicle can start a new route, and when.
    fn route_start(&self, v: &Vehicle, now_s: Secs) -> (Vertex, Secs) {
        match v.path.front() {
            Some(&e) if v.edge_progress_s > 0 => {
                let head = self.router.network().edge(e).to;
                (head, now_s + (self.router.edge_secs(e) - v.edge_progress_s).max(0))
            }
            _ => (v.location, now_s),
        }
    }

    fn snapshot(&self, v: &Vehicle, now_s: Secs) -> VehicleSnapshot {
        let (start, start_s) = self.route_start(v, now_s);
        let mut committed = Vec::new();
        for s in &v.stops {
            if s.kind != StopKind::Dropoff {
                continue;
            }
            let origin = v
                .stops
                .iter()
                .find(|p| p.kind == StopKind::Pickup && p.request == s.request)
                .map(|p| p.vertex);
            committed.push(Committed {
                request: s.request,
                origin,
                destination: s.vertex,
                passengers: s.passengers,
                promise_s: self.requests[&s.request].promise_s,
            });
        }
        VehicleSnapshot {
            id: v.id,
            now_s,
            start,
            start_s,
            seats: v.spec.seats,
            committed,
            stops: v.stops.iter().map(|s| (s.request, s.kind)).collect(),
        }
    }

    fn dispatch_step(&mut self, m: Minute) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let now_s = m * STEP_SECS;
        let snaps: Vec<VehicleSnapshot> = self
            .vehicles
            .iter()
            .filter(|v| match v.state {
                VehicleState::Idle | VehicleState::Repositioning => true,
                VehicleState::Dispatching | VehicleState::Serving => v.vacant_seats() > 0,
                _ => false,
            })
            .map(|v| self.snapshot(v, now_s))
            .collect();
        let reqs: Vec<PendingRequest> = self
            .pending
            .iter()
            .map(|id| {
                let r = &self.requests[id];
                PendingRequest {
                    id: *id,
                    origin: r.trip.origin,
                    destination: r.trip.destination,
                    passengers: r.trip.passengers,
                    request_s: r.request_s,
                    direct_travel_s: r.direct_travel_s,
                }
            })
            .collect();
        let outcome = dispatch(now_s, &reqs, &snaps, &self.router, &self.cfg.dispatch);
        let mut chosen: Vec<_> = outcome.chosen().cloned().collect();
        chosen.sort_by_key(|t| t.vehicle);
        let mut assigned = Vec::new();
        for trip in chosen {
            let vid = trip.vehicle;
            let (was_empty, idle_since) = {
                let v = &self.vehicles[vid];
                (v.stops.is_empty(), v.idle_since_s)
            };
            if was_empty {
                if let Some(since) = idle_since {
                    self.record_sample(vid, (now_s - since) as f64)?;
                }
            }
            self.emit(Event::Assign {
                vehicle: vid,
                requests: trip.requests.clone(),
                idle_since_s: if was_empty { idle_since } else { None },
                cost_s: trip.plan.cost,
            })?;
            for &(rid, promise) in &trip.plan.promises {
                let r = self
                    .requests
                    .get_mut(&rid)
                    .ok_or_else(|| invariant(format!("assigned unknown request {rid}")))?;
                if r.state != RequestState::Pending {
                    return Err(invariant(format!("request {rid} assigned twice")));
                }
                r.state = RequestState::Assigned;
                r.promise_s = promise;
                assigned.push(rid);
            }
            let v = &mut self.vehicles[vid];
            v.stops = trip.plan.order.iter().copied().collect();
            v.idle_since_s = None;
            v.reposition_target = None;
            v.state = if v.onboard.is_empty() {
                VehicleState::Dispatching
            } else {
                VehicleState::Serving
            };
            let next = v.stops.front().map(|s| s.vertex);
            if let Some(target) = next {
                self.reroute(vid, target)?;
            }
        }
        assigned.sort_unstable();
        self.pending.retain(|id| assigned.binary_search(id).is_err());
        Ok(())
    }

    /// Point a vehicle at `target`, finishing its current edge first.
    fn reroute(&mut self, vid: VehicleId, target: Vertex) -> Result<Secs> {
        let now_s = self.minute * STEP_SECS;
        let (start, start_s) = self.route_start(&self.vehicles[vid], now_s);
        let edges = self.router.path_edges(start, target)?;
        let travel: Secs = edges.iter().map(|&e| self.router.edge_secs(e)).sum();
        let v = &mut self.vehicles[vid];
        if v.edge_progress_s > 0 && !v.path.is_empty() {
            let cur = v.path[0];
            v.path.clear();
            v.path.push_back(cur);
        } else {
            v.path.clear();
            v.edge_progress_s = 0;
        }
        v.path.extend(edges);
        Ok(start_s - now_s + travel)
    }

    fn tow_step(&mut self, m: Minute) -> Result<()> {
        let now_s = m * STEP_SECS;
        let tows = stranded_step(m, &self.vehicles, &self.charging, &self.router);
        for tow in tows {
            let vid = tow.vehicle;
            let mut requests: Vec<RequestId> = self.vehicles[vid]
                .stops
                .iter()
                .filter(|s| s.kind == StopKind::Dropoff)
                .map(|s| s.request)
                .collect();
            requests.sort_unstable();
            let had_customers = !requests.is_empty();
            for rid in requests {
                let pax = self.requests[&rid].trip.passengers;
                self.complete(rid, vid, now_s, pax, true)?;
            }
            self.charging.cancel_inbound(vid);
            let station_vertex = self.charging.stations[tow.station].vertex;
            let v = &mut self.vehicles[vid];
            v.stops.clear();
            v.onboard.clear();
            v.path.clear();
            v.edge_progress_s = 0;
            v.location = station_vertex;
            v.stranded_since_s = None;
            v.state = VehicleState::Queued;
            v.charge_plan = Some(ChargePlan {
                station: tow.station,
                target_soc: UNCOUPLE_SOC,
                max_duration_s: None,
            });
            if had_customers {
                v.idle_since_s = Some(now_s);
            }
            self.idle_features.remove(&vid);
            self.charging
                .enqueue(tow.station, vid, ChargeRequest::to_soc(UNCOUPLE_SOC), now_s)?;
            self.ledger.tow(tow.cost_cents);
            self.counters.tows += 1;
            self.emit(Event::Tow {
                vehicle: vid,
                station: tow.station,
                km: tow.km,
                cost_cents: tow.cost_cents,
            })?;
        }
        Ok(())
    }

    fn fleet_snapshot(&self, now_s: Secs) -> FleetSnapshot {
        let n = self.router.network().num_vertices();
        let fleet = self
            .vehicles
            .iter()
            .filter(|v| !v.state.is_charging_related() && v.state != VehicleState::Stranded)
            .map(|v| (v.location, v.vacant_seats()));
        FleetSnapshot::from_fleet(n, fleet, self.window.means(), now_s)
    }

    fn control_step(&mut self, m: Minute) -> Result<(usize, usize)> {
        let now_s = m * STEP_SECS;
        let candidates: Vec<VehicleId> = self
            .vehicles
            .iter()
            .filter(|v| {
                v.state == VehicleState::Idle || (v.state == VehicleState::Repositioning && v.edge_progress_s == 0)
            })
            .map(|v| v.id)
            .collect();
        if candidates.is_empty() || self.charging.stations.is_empty() {
            return Ok((candidates.len(), 0));
        }
        let policy = self.cfg.policy;
        let decisions: Vec<ChargeAssignment> = {
            let input = ControlInput {
                now: m,
                clock: self.clock,
                vehicles: &self.vehicles,
                candidates: &candidates,
                legs: &self.router,
                params: &self.cfg.charging,
            };
            if policy == PolicyKind::Itx {
                let snap = self.fleet_snapshot(now_s);
                self.predictor.begin_step(&snap);
                itx_step(&input, &mut self.charging, self.predictor.as_mut())?.assignments
            } else {
                baseline_step(policy, &input, &mut self.charging)?
            }
        };
        let count = decisions.len();
        for a in decisions {
            let vid = a.vehicle;
            let station_vertex = self.charging.stations[a.station].vertex;
            {
                let v = &mut self.vehicles[vid];
                v.state = VehicleState::EnrouteToCharger;
                v.reposition_target = None;
                v.charge_plan = Some(ChargePlan {
                    station: a.station,
                    target_soc: a.target_soc,
                    max_duration_s: a.max_duration_s,
                });
            }
            self.reroute(vid, station_vertex)?;
            let v = &self.vehicles[vid];
            if v.path.is_empty() && v.location == station_vertex {
                self.charging.arrive(vid, now_s)?;
                self.vehicles[vid].state = VehicleState::Queued;
            }
            self.counters.charge_decisions += 1;
            self.emit(Event::ChargeDecision { policy, decision: a })?;
        }
        Ok((candidates.len(), count))
    }

    fn reposition_step(&mut self, m: Minute) -> Result<()> {
        let idle: Vec<IdleVehicle> = self
            .vehicles
            .iter()
            .filter(|v| v.state == VehicleState::Idle && v.path.is_empty())
            .map(|v| IdleVehicle {
                id: v.id,
                location: v.location,
                seats: v.vacant_seats(),
            })
            .collect();
        if idle.is_empty() {
            return Ok(());
        }
        let _ = m;
        let moves = reposition(&idle, &self.window, self.cfg.reposition.horizon_min * STEP_SECS, &self.router);
        for mv in moves {
            if mv.travel_s == 0 || self.vehicles[mv.vehicle].location == mv.target {
                continue;
            }
            self.reroute(mv.vehicle, mv.target)?;
            let v = &mut self.vehicles[mv.vehicle];
            v.state = VehicleState::Repositioning;
            v.reposition_target = Some(mv.target);
            self.emit(Event::Reposition {
                vehicle: mv.vehicle,
                target: mv.target,
                travel_s: mv.travel_s,
            })?;
        }
        Ok(())
    }

    fn station_step(&mut self, m: Minute) -> Result<()> {
        let report = self.charging.step(m, &mut self.vehicles);
        self.grid_mw = report.grid_mw();
        self.ledger.charge(report.delivered_kwh);
        for e in report.events {
            let ev = match e {
                StationEvent::SessionStart {
                    station,
                    vehicle,
                    slot,
                    waited_s,
                } => {
                    self.counters.sessions += 1;
                    Event::SessionStart {
                        station,
                        vehicle,
                        slot,
                        waited_s,
                    }
                }
                StationEvent::SessionEnd {
                    station,
                    vehicle,
                    slot,
                    delivered_kwh,
                    plugged_s,
                    reason,
                } => Event::SessionEnd {
                    station,
                    vehicle,
                    slot,
                    delivered_kwh,
                    plugged_s,
                    reason,
                },
            };
            self.emit(ev)?;
        }
        Ok(())
    }

    /// Idle draw; queued vehicles never strand.
    fn idle_draw(&mut self, vid: VehicleId, dt: Secs, at_s: Secs) -> Result<()> {
        if dt <= 0 {
            return Ok(());
        }
        let v = &mut self.vehicles[vid];
        let used = if v.state == VehicleState::Queued {
            let want = v.spec.idle_power_w * dt as f64 / 3.6e6;
            let used = want.min(v.energy_kwh);
            v.energy_kwh -= used;
            v.idle_kwh += used;
            used
        } else {
            v.apply_idle_draw(dt as f64, at_s)
        };
        self.ledger.consume(used);
        if self.vehicles[vid].state == VehicleState::Stranded {
            self.on_strand(vid, at_s)?;
        }
        Ok(())
    }

    fn on_strand(&mut self, vid: VehicleId, at_s: Secs) -> Result<()> {
        self.charging.cancel_inbound(vid);
        let v = &mut self.vehicles[vid];
        v.charge_plan = None;
        let vertex = v.location;
        self.counters.strandings += 1;
        self.emit(Event::Strand {
            vehicle: vid,
            at_s,
            vertex,
        })
    }

    fn motion(&mut self, m: Minute) -> Result<()> {
        let now_s = m * STEP_SECS;
        self.became_idle.clear();
        for vid in 0..self.vehicles.len() {
            match self.vehicles[vid].state {
                VehicleState::Stranded | VehicleState::Charging => continue,
                _ => {}
            }
            let budget = self.advance(vid, now_s)?;
            let v = &self.vehicles[vid];
            if self.energy_on() && budget > 0 && v.path.is_empty() && v.state != VehicleState::Stranded && v.state != VehicleState::Charging {
                self.idle_draw(vid, budget, now_s + STEP_SECS)?;
            }
        }
        Ok(())
    }

    /// Move one vehicle through the minute. Returns the unused seconds.
    fn advance(&mut self, vid: VehicleId, now_s: Secs) -> Result<Secs> {
        let energy = self.energy_on();
        let measured = self.measured();
        let mut budget = STEP_SECS;
        if self.vehicles[vid].edge_progress_s == 0 {
            self.process_stops(vid, now_s)?;
        }
        loop {
            if self.vehicles[vid].state == VehicleState::Stranded {
                return Ok(0);
            }
            let t = now_s + STEP_SECS - budget;
            if self.vehicles[vid].path.is_empty() {
                self.vehicles[vid].edge_progress_s = 0;
                self.path_end(vid, t)?;
                if self.vehicles[vid].path.is_empty() {
                    return Ok(budget);
                }
                continue;
            }
            let e = self.vehicles[vid].path[0];
            let secs = self.router.edge_secs(e);
            let edge = *self.router.network().edge(e);
            let v = &mut self.vehicles[vid];
            let need = (secs - v.edge_progress_s).max(0);
            if need > budget {
                v.edge_progress_s += budget;
                return Ok(0);
            }
            budget -= need;
            v.edge_progress_s = 0;
            v.path.pop_front();
            v.location = edge.to;
            let t = now_s + STEP_SECS - budget;
            if measured {
                self.ledger.drive(edge.length_m / 1000.0, v.spec.op_cost_per_km);
            }
            if energy {
                let kwh = traversal_energy(&v.spec, edge.length_m, secs as f64, v.passengers_onboard());
                let used = v.apply_drive(kwh, edge.length_m);
                self.ledger.consume(used);
                if self.vehicles[vid].energy_kwh <= 0.0 {
                    self.vehicles[vid].energy_kwh = 0.0;
                    self.vehicles[vid].strand(t);
                    self.on_strand(vid, t)?;
                    return Ok(0);
                }
            } else {
                v.driven_m += edge.length_m;
            }
            self.process_stops(vid, t)?;
        }
    }

    /// The vehicle has no route left: charger arrival, end of repositioning,
    /// or a route to the next stop.
    fn path_end(&mut self, vid: VehicleId, t: Secs) -> Result<()> {
        let v = &self.vehicles[vid];
        match v.state {
            VehicleState::EnrouteToCharger => {
                let plan = v.charge_plan.ok_or_else(|| invariant(format!("vehicle {vid} en route without a plan")))?;
                let sv = self.charging.stations[plan.station].vertex;
                if v.location == sv {
                    self.charging.arrive(vid, t)?;
                    self.vehicles[vid].state = VehicleState::Queued;
                } else {
                    self.reroute(vid, sv)?;
                }
            }
            VehicleState::Repositioning => {
                let v = &mut self.vehicles[vid];
                v.state = VehicleState::Idle;
                v.reposition_target = None;
            }
            VehicleState::Dispatching | VehicleState::Serving => {
                if let Some(s) = v.stops.front() {
                    if s.vertex != v.location {
                        let target = s.vertex;
                        self.reroute(vid, target)?;
                    } else {
                        self.process_stops(vid, t)?;
                    }
                } else {
                    self.vehicles[vid].state = VehicleState::Idle;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn process_stops(&mut self, vid: VehicleId, t: Secs) -> Result<()> {
        let mut dropped = false;
        loop {
            let v = &self.vehicles[vid];
            let Some(&s) = v.stops.front() else { break };
            if s.vertex != v.location {
                break;
            }
            self.vehicles[vid].stops.pop_front();
            match s.kind {
                StopKind::Pickup => {
                    let r = self
                        .requests
                        .get_mut(&s.request)
                        .ok_or_else(|| invariant(format!("pickup of unknown request {}", s.request)))?;
                    if !r.state.can_become(RequestState::Onboard) {
                        return Err(invariant(format!("request {} picked up from state {:?}", s.request, r.state)));
                    }
                    r.state = RequestState::Onboard;
                    let dest = r.trip.destination;
                    let v = &mut self.vehicles[vid];
                    v.onboard.push(Onboard {
                        request: s.request,
                        destination: dest,
                        passengers: s.passengers,
                    });
                    v.state = VehicleState::Serving;
                    if v.occupied_seats() > v.spec.seats {
                        return Err(invariant(format!("vehicle {vid} over capacity after pickup of {}", s.request)));
                    }
                    self.emit(Event::Pickup {
                        request: s.request,
                        vehicle: vid,
                        at_s: t,
                        passengers: s.passengers,
                    })?;
                }
                StopKind::Dropoff => {
                    self.complete(s.request, vid, t, s.passengers, false)?;
                    dropped = true;
                }
            }
        }
        let v = &mut self.vehicles[vid];
        if matches!(v.state, VehicleState::Dispatching | VehicleState::Serving) {
            if v.stops.is_empty() {
                v.state = VehicleState::Idle;
                v.path.clear();
                v.edge_progress_s = 0;
                if dropped {
                    v.idle_since_s = Some(t);
                    self.became_idle.push(vid);
                }
            } else {
                v.state = if v.onboard.is_empty() {
                    VehicleState::Dispatching
                } else {
                    VehicleState::Serving
                };
                if v.path.is_empty() {
                    let target = v.stops[0].vertex;
                    self.reroute(vid, target)?;
                }
            }
        }
        Ok(())
    }

    fn complete(&mut self, rid: RequestId, vid: VehicleId, t: Secs, passengers: u32, towed: bool) -> Result<()> {
        let r = self
            .requests
            .remove(&rid)
            .ok_or_else(|| invariant(format!("dropoff of unknown request {rid}")))?;
        let v = &mut self.vehicles[vid];
        v.onboard.retain(|o| o.request != rid);
        if !towed && r.state != RequestState::Onboard {
            return Err(invariant(format!("request {rid} dropped off from state {:?}", r.state)));
        }
        if !self.measured() {
            return Ok(());
        }
        let delay = t - r.promise_s;
        let s = self.ledger.settle(r.fare_cents, delay);
        self.counters.completed += 1;
        if towed {
            self.ledger.note_towed_request();
        }
        self.emit(Event::Dropoff {
            request: rid,
            vehicle: vid,
            at_s: t,
            passengers,
            delay_s: delay,
            direct_travel_s: r.direct_travel_s,
            direct_m: r.direct_m,
            fare_cents: r.fare_cents,
            share_cents: s.share_cents,
            ontime: s.ontime,
            towed,
        })
    }

    fn capture_features(&mut self, m: Minute) -> Result<()> {
        if !self.collect_samples || !self.measured() || self.became_idle.is_empty() {
            return Ok(());
        }
        let snap = self.fleet_snapshot(m * STEP_SECS);
        for vid in std::mem::take(&mut self.became_idle) {
            let v = &self.vehicles[vid];
            let at = v.idle_since_s.unwrap_or(m * STEP_SECS);
            let f = IdleFeatures::build(v.location, &snap, &self.clock, at)?;
            self.idle_features.insert(vid, f);
        }
        Ok(())
    }

    fn record_sample(&mut self, vid: VehicleId, idle_s: f64) -> Result<()> {
        let Some(features) = self.idle_features.remove(&vid) else { return Ok(()) };
        let s = IdleSample { features, idle_s };
        self.counters.samples += 1;
        match &mut self.sample_out {
            Some(w) => w.write(&s),
            None => {
                self.samples.push(s);
                Ok(())
            }
        }
    }

    fn close_minute(&mut self, m: Minute) -> Result<()> {
        let n = self.vehicles.len() as f64;
        let mean_soc = self.vehicles.iter().map(|v| v.soc()).sum::<f64>() / n;
        let serving: Vec<&Vehicle> = self.vehicles.iter().filter(|v| !v.state.is_charging_related()).collect();
        let customers_per_vehicle = if serving.is_empty() {
            0.0
        } else {
            serving.iter().map(|v| v.passengers_onboard() as f64).sum::<f64>() / serving.len() as f64
        };
        let state = MinuteState {
            mean_soc,
            occupancy_rate: self.charging.occupancy_rate(),
            grid_mw: self.grid_mw,
            customers_per_vehicle,
        };
        let (row, lines) = self.ledger.close_minute(m, state);
        self.emit(Event::Costs {
            op_dollars: lines.op_dollars,
            charged_kwh: lines.charged_kwh,
            op_cents: lines.op_cents,
            charge_cents: lines.charge_cents,
            tow_cents: lines.tow_cents,
            reward_cents: row.reward_cents,
        })?;
        self.rows.push(row);
        Ok(())
    }

    fn check_invariants(&self, m: Minute) -> Result<()> {
        for v in &self.vehicles {
            if v.occupied_seats() > v.spec.seats {
                return Err(invariant(format!("vehicle {} over capacity at minute {m}", v.id)));
            }
            if !(v.energy_kwh >= 0.0 && v.energy_kwh <= v.spec.battery_kwh + 1e-9) {
                return Err(invariant(format!("vehicle {} energy {} out of range at minute {m}", v.id, v.energy_kwh)));
            }
        }
        if m % 60 == 0 {
            self.charging.check_exclusive()?;
            for v in &self.vehicles {
                let r = v.energy_residual();
                if r.abs() > 1e-6 {
                    return Err(invariant(format!("vehicle {} energy residual {r} at minute {m}", v.id)));
                }
            }
        }
        Ok(())
    }
}
