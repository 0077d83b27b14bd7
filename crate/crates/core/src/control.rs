//! Charging control: the idle-time-exploiting assignment loop, the rule-based
//! baselines and tow selection for stranded vehicles.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::{max_weight_matching, Matching, FORBIDDEN};
use crate::charging::{ChargeRequest, ChargingSystem};
use crate::clock::{Minute, Secs, SimClock, STEP_SECS};
use crate::error::{Error, Result};
use crate::ev::{traversal_energy, StationId, Vehicle, VehicleId, VehicleTypeSpec, UNCOUPLE_SOC};
use crate::network::Vertex;
use crate::predictor::IdlePredictor;
use crate::routing::Router;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Itx,
    Qn,
    Qa,
    Fn,
    Fa,
    Oq,
    Of,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Itx,
        PolicyKind::Qn,
        PolicyKind::Qa,
        PolicyKind::Fn,
        PolicyKind::Fa,
        PolicyKind::Oq,
        PolicyKind::Of,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Itx => "itx",
            PolicyKind::Qn => "qn",
            PolicyKind::Qa => "qa",
            PolicyKind::Fn => "fn",
            PolicyKind::Fa => "fa",
            PolicyKind::Oq => "oq",
            PolicyKind::Of => "of",
        }
    }

    /// Low-battery triggered baselines.
    pub fn is_threshold(self) -> bool {
        matches!(self, PolicyKind::Qn | PolicyKind::Qa | PolicyKind::Fn | PolicyKind::Fa)
    }

    pub fn is_overnight(self) -> bool {
        matches!(self, PolicyKind::Oq | PolicyKind::Of)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown policy '{s}' (expected one of itx, qn, qa, fn, fa, oq, of)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub soc_threshold: f64,
    pub quick_target: f64,
    pub full_target: f64,
    /// Overnight window as minutes after midnight, [start, end).
    pub overnight_start_min: u32,
    pub overnight_end_min: u32,
    pub t_min_s: f64,
    /// A station is reachable if the energy to reach it is at most this share of the battery content.
    pub reach_margin: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            soc_threshold: 0.10,
            quick_target: 0.70,
            full_target: 0.99,
            overnight_start_min: 90,
            overnight_end_min: 390,
            t_min_s: 300.0,
            reach_margin: 0.95,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if ![self.soc_threshold, self.quick_target, self.full_target, self.reach_margin]
            .into_iter()
            .all(unit)
        {
            return Err(Error::Invalid("policy soc parameters must lie in (0, 1]".into()));
        }
        if self.overnight_start_min >= self.overnight_end_min || self.overnight_end_min > 1440 {
            return Err(Error::Invalid("overnight window must be a non-empty range within a day".into()));
        }
        if !(self.t_min_s >= 0.0 && self.t_min_s.is_finite()) {
            return Err(Error::Invalid("t_min must be non-negative".into()));
        }
        Ok(())
    }

    pub fn in_overnight_window(&self, clock: &SimClock, now_s: Secs) -> bool {
        let m = clock.minute_of_day(now_s);
        m >= self.overnight_start_min && m < self.overnight_end_min
    }

    pub fn target_for(&self, kind: PolicyKind) -> f64 {
        match kind {
            PolicyKind::Qn | PolicyKind::Qa | PolicyKind::Oq => self.quick_target,
            _ => self.full_target,
        }
    }
}

/// Potential effective charging time for one vehicle-station pair.
pub fn pect(t_idle: f64, t_travel: f64, t_queue: f64, t_idle_after: f64) -> f64 {
    let wait = t_travel.max(t_queue);
    t_idle - wait - (wait + t_idle_after - t_idle).max(0.0)
}

/// A route from a vertex to a station, edge by edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Leg {
    pub travel_s: Secs,
    pub length_m: f64,
    /// (length m, seconds) per edge.
    pub edges: Vec<(f64, Secs)>,
}

impl Leg {
    pub fn energy_kwh(&self, spec: &VehicleTypeSpec) -> f64 {
        self.edges
            .iter()
            .map(|&(len, secs)| traversal_energy(spec, len, secs as f64, 0))
            .sum()
    }
}

pub trait LegProvider {
    fn leg(&self, from: Vertex, to: Vertex) -> Option<Leg>;
}

impl LegProvider for Router {
    fn leg(&self, from: Vertex, to: Vertex) -> Option<Leg> {
        let path = self.path_edges(from, to).ok()?;
        let net = self.network();
        let edges: Vec<(f64, Secs)> = path.iter().map(|&e| (net.edge(e).length_m, self.edge_secs(e))).collect();
        Some(Leg {
            travel_s: edges.iter().map(|e| e.1).sum(),
            length_m: edges.iter().map(|e| e.0).sum(),
            edges,
        })
    }
}

/// Per-decision legs from vehicle locations to stations, computed lazily.
struct LegCache<'a> {
    legs: &'a dyn LegProvider,
    cache: HashMap<(Vertex, StationId), Option<Leg>>,
}

impl<'a> LegCache<'a> {
    fn new(legs: &'a dyn LegProvider) -> Self {
        LegCache {
            legs,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, from: Vertex, station: StationId, station_vertex: Vertex) -> Option<&Leg> {
        self.cache
            .entry((from, station))
            .or_insert_with(|| self.legs.leg(from, station_vertex))
            .as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChargeAssignment {
    pub vehicle: VehicleId,
    pub station: StationId,
    pub decided_at: Minute,
    pub soc: f64,
    pub travel_s: Secs,
    pub queue_s: Secs,
    pub target_soc: f64,
    pub max_duration_s: Option<Secs>,
    pub deadline_s: Option<Secs>,
    /// Only for the idle-time policy.
    pub pect_s: Option<f64>,
    pub predicted_idle_s: Option<f64>,
    pub predicted_after_s: Option<f64>,
    pub iteration: Option<usize>,
}

impl ChargeAssignment {
    pub fn request(&self) -> ChargeRequest {
        ChargeRequest {
            target_soc: self.target_soc,
            max_duration_s: self.max_duration_s,
            deadline_s: self.deadline_s,
        }
    }
}

pub struct ControlInput<'a> {
    pub now: Minute,
    pub clock: SimClock,
    pub vehicles: &'a [Vehicle],
    /// Vehicles eligible for a charging decision this step.
    pub candidates: &'a [VehicleId],
    pub legs: &'a dyn LegProvider,
    pub params: &'a PolicyParams,
}

impl ControlInput<'_> {
    fn now_s(&self) -> Secs {
        self.now * STEP_SECS
    }

    fn reachable(&self, v: &Vehicle, leg: &Leg) -> bool {
        leg.energy_kwh(&v.spec) <= self.params.reach_margin * v.energy_kwh
    }
}

/// One Hungarian round: the PECT pairs offered and the matching committed.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    /// Expected station waits used in this round.
    pub queue_s: Vec<Secs>,
    /// (vehicle, station, value) for every reachable pair.
    pub evaluated: Vec<(VehicleId, StationId, f64)>,
    /// The evaluated pairs above `t_min`.
    pub edges: Vec<(VehicleId, StationId, f64)>,
    pub committed: Vec<(VehicleId, StationId, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItxReport {
    pub assignments: Vec<ChargeAssignment>,
    pub iterations: Vec<IterationTrace>,
}

fn time_to_full(charging: &ChargingSystem, v: &Vehicle, station: StationId, now: Minute, memo: &mut HashMap<(VehicleId, u64), Secs>) -> Secs {
    let limit = charging.stations[station].supply_limit_kw.to_bits();
    *memo.entry((v.id, limit)).or_insert_with(|| {
        charging.session_steps(&v.spec, v.energy_kwh, station, &ChargeRequest::to_soc(UNCOUPLE_SOC), now) * STEP_SECS
    })
}

/// Iterative PECT-maximising assignment of idle vehicles to stations. Each
/// round recomputes expected station waits, keeps pairs whose PECT (capped at
/// the time needed to reach the uncoupling soc) exceeds `t_min`, and commits a
/// maximum-weight matching.
pub fn itx_step(input: &ControlInput<'_>, charging: &mut ChargingSystem, predictor: &mut dyn IdlePredictor) -> Result<ItxReport> {
    let mut report = ItxReport::default();
    let now_s = input.now_s();
    let p = input.params;
    let mut pending: Vec<VehicleId> = input.candidates.to_vec();
    pending.sort_unstable();
    pending.retain(|&v| charging.holding(v).is_none() && input.vehicles[v].soc() < UNCOUPLE_SOC);
    if pending.is_empty() || charging.stations.is_empty() {
        return Ok(report);
    }
    let idle: HashMap<VehicleId, f64> = pending
        .iter()
        .map(|&v| (v, predictor.predict(input.vehicles[v].location, now_s)))
        .collect();
    let mut legs = LegCache::new(input.legs);
    let mut full_memo = HashMap::new();
    let mut after_memo: HashMap<(StationId, Secs), f64> = HashMap::new();
    let ns = charging.stations.len();
    loop {
        if pending.is_empty() {
            break;
        }
        let queue: Vec<Secs> = (0..ns).map(|s| charging.expected_wait(s, input.now, input.vehicles)).collect();
        let mut values = vec![vec![FORBIDDEN; ns]; pending.len()];
        let mut parts: HashMap<(usize, usize), (f64, f64, Secs)> = HashMap::new();
        let mut edges = Vec::new();
        let mut evaluated = Vec::new();
        for (i, &vid) in pending.iter().enumerate() {
            let v = &input.vehicles[vid];
            for s in 0..ns {
                let sv = charging.stations[s].vertex;
                let Some(leg) = legs.get(v.location, s, sv) else { continue };
                if !input.reachable(v, leg) {
                    continue;
                }
                let travel = leg.travel_s;
                let after = *after_memo
                    .entry((s, travel))
                    .or_insert_with(|| predictor.predict(sv, now_s + travel));
                let raw = pect(idle[&vid], travel as f64, queue[s] as f64, after);
                let value = raw.min(time_to_full(charging, v, s, input.now, &mut full_memo) as f64);
                evaluated.push((vid, s, value));
                if value > p.t_min_s {
                    values[i][s] = value;
                    parts.insert((i, s), (raw, after, travel));
                    edges.push((vid, s, value));
                }
            }
        }
        let matching = if edges.is_empty() {
            Matching { pairs: Vec::new(), value: 0.0 }
        } else {
            max_weight_matching(&values)
        };
        if matching.pairs.is_empty() {
            report.iterations.push(IterationTrace {
                queue_s: queue,
                evaluated,
                edges,
                committed: Vec::new(),
            });
            break;
        }
        let iteration = report.iterations.len();
        let mut committed = Vec::new();
        for &(i, s) in &matching.pairs {
            let vid = pending[i];
            let value = values[i][s];
            let (_, after, travel) = parts[&(i, s)];
            let a = ChargeAssignment {
                vehicle: vid,
                station: s,
                decided_at: input.now,
                soc: input.vehicles[vid].soc(),
                travel_s: travel,
                queue_s: queue[s],
                target_soc: UNCOUPLE_SOC,
                max_duration_s: Some(value.round() as Secs),
                deadline_s: None,
                pect_s: Some(value),
                predicted_idle_s: Some(idle[&vid]),
                predicted_after_s: Some(after),
                iteration: Some(iteration),
            };
            charging.request_charge(s, vid, a.request(), input.now, travel)?;
            committed.push((vid, s, value));
            report.assignments.push(a);
        }
        let taken: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
        pending = pending
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken.contains(i))
            .map(|(_, &v)| v)
            .collect();
        report.iterations.push(IterationTrace {
            queue_s: queue,
            evaluated,
            edges,
            committed,
        });
    }
    Ok(report)
}

/// Station choice for one vehicle: nearest by travel time, or lowest travel
/// plus expected wait among reachable stations (falling back to nearest).
fn choose_station(
    input: &ControlInput<'_>,
    charging: &ChargingSystem,
    legs: &mut LegCache<'_>,
    v: &Vehicle,
    aware: bool,
) -> Option<(StationId, Secs, Secs)> {
    let mut nearest: Option<(Secs, StationId)> = None;
    let mut best: Option<(Secs, StationId, Secs, Secs)> = None;
    for (s, st) in charging.stations.iter().enumerate() {
        let Some(leg) = legs.get(v.location, s, st.vertex) else { continue };
        let travel = leg.travel_s;
        if nearest.is_none_or(|(t, _)| travel < t) {
            nearest = Some((travel, s));
        }
        if aware && input.reachable(v, leg) {
            let wait = charging.expected_wait(s, input.now, input.vehicles);
            let score = travel + wait;
            if best.is_none_or(|(b, ..)| score < b) {
                best = Some((score, s, travel, wait));
            }
        }
    }
    if let Some((_, s, travel, wait)) = best {
        return Some((s, travel, wait));
    }
    let (travel, s) = nearest?;
    let wait = charging.expected_wait(s, input.now, input.vehicles);
    Some((s, travel, wait))
}

/// Rule-based charging decisions for the six baselines.
pub fn baseline_step(kind: PolicyKind, input: &ControlInput<'_>, charging: &mut ChargingSystem) -> Result<Vec<ChargeAssignment>> {
    if kind == PolicyKind::Itx {
        return Err(Error::Invalid("baseline_step called with the idle-time policy".into()));
    }
    let p = input.params;
    let now_s = input.now_s();
    let target = p.target_for(kind);
    let mut cands: Vec<&Vehicle> = input
        .candidates
        .iter()
        .map(|&v| &input.vehicles[v])
        .filter(|v| charging.holding(v.id).is_none())
        .collect();
    let mut deadline = None;
    if kind.is_threshold() {
        cands.retain(|v| v.soc() < p.soc_threshold);
        cands.sort_by_key(|v| v.id);
    } else {
        if !p.in_overnight_window(&input.clock, now_s) {
            return Ok(Vec::new());
        }
        let free = charging.total_chargers().saturating_sub(charging.total_committed());
        cands.retain(|v| v.soc() < target);
        cands.sort_by(|a, b| a.soc().total_cmp(&b.soc()).then(a.id.cmp(&b.id)));
        cands.truncate(free);
        let day_start = now_s - (input.clock.minute_of_day(now_s) as Secs) * STEP_SECS;
        deadline = Some(day_start + p.overnight_end_min as Secs * STEP_SECS);
    }
    let aware = !matches!(kind, PolicyKind::Qn | PolicyKind::Fn);
    let mut legs = LegCache::new(input.legs);
    let mut out = Vec::new();
    for v in cands {
        let Some((s, travel, wait)) = choose_station(input, charging, &mut legs, v, aware) else {
            continue;
        };
        let a = ChargeAssignment {
            vehicle: v.id,
            station: s,
            decided_at: input.now,
            soc: v.soc(),
            travel_s: travel,
            queue_s: wait,
            target_soc: target,
            max_duration_s: None,
            deadline_s: deadline,
            pect_s: None,
            predicted_idle_s: None,
            predicted_after_s: None,
            iteration: None,
        };
        charging.request_charge(s, v.id, a.request(), input.now, travel)?;
        out.push(a);
    }
    Ok(out)
}

pub const TOW_HOLD_S: Secs = 3600;
pub const TOW_BASE_CENTS: i64 = 12_500;
pub const TOW_CENTS_PER_KM: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tow {
    pub vehicle: VehicleId,
    pub station: StationId,
    pub km: f64,
    pub cost_cents: i64,
}

pub fn tow_cost_cents(km: f64) -> i64 {
    TOW_BASE_CENTS + (TOW_CENTS_PER_KM * km).round() as i64
}

/// Vehicles stranded for at least an hour, each paired with the nearest
/// station by travel time.
pub fn stranded_step(now: Minute, vehicles: &[Vehicle], charging: &ChargingSystem, legs: &dyn LegProvider) -> Vec<Tow> {
    let now_s = now * STEP_SECS;
    let mut out = Vec::new();
    for v in vehicles {
        let Some(since) = v.stranded_since_s else { continue };
        if now_s - since < TOW_HOLD_S {
            continue;
        }
        let mut best: Option<(Secs, StationId, f64)> = None;
        for (s, st) in charging.stations.iter().enumerate() {
            if let Some(leg) = legs.leg(v.location, st.vertex) {
                if best.is_none_or(|(t, ..)| leg.travel_s < t) {
                    best = Some((leg.travel_s, s, leg.length_m));
                }
            }
        }
        if let Some((_, station, m)) = best {
            let km = m / 1000.0;
            out.push(Tow {
                vehicle: v.id,
                station,
                km,
                cost_cents: tow_cost_cents(km),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charging::ChargingStation;
    use crate::ev::ChargeIntegration;
    use crate::network::{Coord, RoadNetwork};
    use crate::predictor::{ConstantPredictor, FleetSnapshot};
    use crate::routing::TravelTimeModel;
    use std::sync::Arc;

    #[test]
    fn pect_examples() {
        assert_eq!(pect(600.0, 120.0, 0.0, 300.0), 480.0);
        assert_eq!(pect(600.0, 120.0, 0.0, 600.0), 360.0);
        assert!(pect(100.0, 300.0, 0.0, 0.0) < 0.0);
        assert_eq!(pect(600.0, 60.0, 200.0, 0.0), 400.0);
    }

    #[test]
    fn policy_names() {
        for k in PolicyKind::ALL {
            assert_eq!(k.as_str().parse::<PolicyKind>().unwrap(), k);
        }
        assert_eq!("ITX".parse::<PolicyKind>().unwrap(), PolicyKind::Itx);
        assert!("xx".parse::<PolicyKind>().is_err());
        assert_eq!(tow_cost_cents(4.0), 13_500);
    }

    /// Line 0 - 1 - 2 with 600 m edges: 72 s per edge at 30 km/h.
    fn line_router() -> Router {
        let vs = (0..3).map(|i| (i.to_string(), Coord::new(40.0, -74.0 + i as f64 * 0.00705))).collect();
        let es = vec![(0, 1, 600.0), (1, 0, 600.0), (1, 2, 600.0), (2, 1, 600.0)];
        let net = Arc::new(RoadNetwork::from_raw(vs, es).unwrap());
        Router::new(net, TravelTimeModel::ConstantSpeed { speed_mps: 30.0 / 3.6 }).unwrap()
    }

    fn leaf_at(id: usize, loc: Vertex, soc: f64) -> Vehicle {
        Vehicle::new(id, Arc::new(VehicleTypeSpec::nissan_leaf()), loc, soc)
    }

    #[test]
    fn nearest_versus_aware_choice() {
        let router = line_router();
        let mut cs = ChargingSystem::new(
            vec![ChargingStation::new(0, 1, 1, 50.0), ChargingStation::new(1, 2, 1, 50.0)],
            ChargeIntegration::default(),
        );
        let mut vehicles = vec![leaf_at(0, 0, 0.09), leaf_at(1, 1, 0.5), leaf_at(2, 1, 0.05)];
        // occupy station 0 for a long session
        cs.enqueue(0, 1, ChargeRequest::to_soc(0.99), 0).unwrap();
        cs.step(0, &mut vehicles);
        let params = PolicyParams::default();
        let input = ControlInput {
            now: 1,
            clock: SimClock::new(0),
            vehicles: &vehicles,
            candidates: &[0, 1],
            legs: &router,
            params: &params,
        };
        let mut qn = cs.clone();
        let a = baseline_step(PolicyKind::Qn, &input, &mut qn).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].vehicle, a[0].station, a[0].target_soc), (0, 0, 0.70));
        let mut qa = cs.clone();
        let a = baseline_step(PolicyKind::Qa, &input, &mut qa).unwrap();
        assert_eq!((a[0].vehicle, a[0].station), (0, 1));
        assert!(a[0].queue_s == 0 && a[0].travel_s == 144);
        let mut fa = cs.clone();
        let a = baseline_step(PolicyKind::Fa, &input, &mut fa).unwrap();
        assert_eq!(a[0].target_soc, 0.99);
    }

    #[test]
    fn overnight_window_and_slots() {
        let router = line_router();
        let mut cs = ChargingSystem::new(vec![ChargingStation::new(0, 1, 2, 50.0)], ChargeIntegration::default());
        let vehicles = vec![leaf_at(0, 0, 0.6), leaf_at(1, 0, 0.3), leaf_at(2, 2, 0.5), leaf_at(3, 2, 0.8)];
        let params = PolicyParams::default();
        let mk = |now| ControlInput {
            now,
            clock: SimClock::new(0),
            vehicles: &vehicles,
            candidates: &[0, 1, 2, 3],
            legs: &router,
            params: &params,
        };
        assert!(baseline_step(PolicyKind::Oq, &mk(7 * 60), &mut cs).unwrap().is_empty());
        assert!(baseline_step(PolicyKind::Oq, &mk(89), &mut cs).unwrap().is_empty());
        let a = baseline_step(PolicyKind::Oq, &mk(1440 + 120), &mut cs).unwrap();
        let ids: Vec<_> = a.iter().map(|x| x.vehicle).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(a[0].deadline_s, Some((1440 + 390) * 60));
        assert!(baseline_step(PolicyKind::Of, &mk(1440 + 121), &mut cs).unwrap().is_empty());
    }

    #[test]
    fn itx_no_candidates_or_short_pect() {
        let router = line_router();
        let mut cs = ChargingSystem::new(vec![ChargingStation::new(0, 1, 1, 50.0)], ChargeIntegration::default());
        let vehicles = vec![leaf_at(0, 0, 0.5)];
        let params = PolicyParams::default();
        let mut pred = ConstantPredictor(400.0);
        pred.begin_step(&FleetSnapshot::empty(3, 0));
        let input = ControlInput {
            now: 0,
            clock: SimClock::new(0),
            vehicles: &vehicles,
            candidates: &[],
            legs: &router,
            params: &params,
        };
        assert!(itx_step(&input, &mut cs, &mut pred).unwrap().assignments.is_empty());
        let input = ControlInput { candidates: &[0], ..input };
        // 400 - 72 - max(0, 72 + 400 - 400) = 256 <= 300
        assert!(itx_step(&input, &mut cs, &mut pred).unwrap().assignments.is_empty());
    }

    #[test]
    fn tow_after_an_hour() {
        let router = line_router();
        let cs = ChargingSystem::new(vec![ChargingStation::new(0, 2, 1, 50.0)], ChargeIntegration::default());
        let mut vehicles = vec![leaf_at(0, 0, 0.0)];
        vehicles[0].strand(0);
        assert!(stranded_step(59, &vehicles, &cs, &router).is_empty());
        let t = stranded_step(60, &vehicles, &cs, &router);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].station, 0);
        assert!((t[0].km - 1.2).abs() < 1e-9);
        assert_eq!(t[0].cost_cents, 12_500 + 300);
    }
}
