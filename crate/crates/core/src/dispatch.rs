//! Ridepooling dispatch: pairwise and vehicle feasibility under a delay cap,
//! trip enumeration per vehicle, and trip-vehicle assignment with rejection penalty.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock::Secs;
use crate::ev::{RequestId, Stop, StopKind, VehicleId};
use crate::network::Vertex;
use crate::routing::Router;

/// Travel-time oracle used by dispatch.
pub trait TravelTimes {
    fn tt(&self, u: Vertex, v: Vertex) -> Secs;

    /// Travel times from each of `sources` to `target`.
    fn times_to(&self, target: Vertex, sources: &[Vertex]) -> Vec<Secs> {
        sources.iter().map(|&s| self.tt(s, target)).collect()
    }
}

/// Effectively infinite travel time for unreachable pairs.
pub const UNREACHABLE: Secs = Secs::MAX / 8;

impl TravelTimes for Router {
    fn tt(&self, u: Vertex, v: Vertex) -> Secs {
        Router::tt(self, u, v).unwrap_or(UNREACHABLE)
    }

    fn times_to(&self, target: Vertex, sources: &[Vertex]) -> Vec<Secs> {
        let tree = self.reverse_tree(target);
        sources.iter().map(|&s| tree.dist(s).unwrap_or(UNREACHABLE)).collect()
    }
}

/// Dense all-pairs table; handy for small graphs and tests.
#[derive(Debug, Clone)]
pub struct TimeMatrix(pub Vec<Vec<Secs>>);

impl TravelTimes for TimeMatrix {
    fn tt(&self, u: Vertex, v: Vertex) -> Secs {
        self.0[u][v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchParams {
    pub max_delay_s: Secs,
    pub reject_penalty_s: Secs,
    pub rv_candidates: usize,
    pub max_trip_size: usize,
    pub rtv_timeout_ms: u64,
    pub exact_var_limit: usize,
    pub assign_budget_ms: u64,
    pub max_search_nodes: u64,
    /// Existing stops keep their order when a vehicle has more than this many.
    pub fix_order_above: usize,
    pub max_trips_per_vehicle: usize,
}

impl Default for DispatchParams {
    fn default() -> Self {
        DispatchParams {
            max_delay_s: 300,
            reject_penalty_s: 3600,
            rv_candidates: 30,
            max_trip_size: 4,
            rtv_timeout_ms: 5000,
            exact_var_limit: 5000,
            assign_budget_ms: 10_000,
            max_search_nodes: 2_000_000,
            fix_order_above: 6,
            max_trips_per_vehicle: 400,
        }
    }
}

/// A request waiting for assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingRequest {
    pub id: RequestId,
    pub origin: Vertex,
    pub destination: Vertex,
    pub passengers: u32,
    pub request_s: Secs,
    pub direct_travel_s: Secs,
}

/// A customer already committed to a vehicle. `origin` is `None` once onboard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Committed {
    pub request: RequestId,
    pub origin: Option<Vertex>,
    pub destination: Vertex,
    pub passengers: u32,
    pub promise_s: Secs,
}

/// What dispatch needs to know about one vehicle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VehicleSnapshot {
    pub id: VehicleId,
    /// Decision time.
    pub now_s: Secs,
    /// Vertex where a new route can begin and the second the vehicle is there.
    pub start: Vertex,
    pub start_s: Secs,
    pub seats: u32,
    pub committed: Vec<Committed>,
    /// Current stop order over committed customers.
    pub stops: Vec<(RequestId, StopKind)>,
}

impl VehicleSnapshot {
    pub fn load(&self) -> u32 {
        self.committed.iter().filter(|c| c.origin.is_none()).map(|c| c.passengers).sum()
    }
}

/// Feasible service plan for one vehicle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub order: Vec<Stop>,
    /// Σ new delays + Σ change in committed delays.
    pub cost: Secs,
    /// Estimated delay per customer in the plan.
    pub delays: Vec<(RequestId, Secs)>,
    /// Promise time of each new request (request + direct wait + direct travel).
    pub promises: Vec<(RequestId, Secs)>,
    /// Σ direct waits of the new requests; used only to break ties.
    pub wait_s: Secs,
}

#[derive(Debug, Clone, Copy)]
struct Cust {
    request: RequestId,
    origin: Option<usize>,
    dest: usize,
    passengers: u32,
    promise: Secs,
    limit: Secs,
    current: Secs,
}

#[derive(Debug, Clone, Copy)]
struct PStop {
    cust: usize,
    kind: StopKind,
    at: usize,
    rank: Option<usize>,
}

struct Search<'a> {
    mat: Vec<Vec<Secs>>,
    custs: Vec<Cust>,
    stops: Vec<PStop>,
    seats: u32,
    fixed: bool,
    best: Option<(Secs, Vec<usize>, Vec<Secs>)>,
    path: Vec<usize>,
    delay: Vec<Secs>,
    vertex_of: &'a [Vertex],
}

impl Search<'_> {
    fn run(&mut self, at: usize, t: Secs, load: u32, visited: u32, cost: Secs, next_rank: usize) {
        let n = self.stops.len();
        if self.path.len() == n {
            if self.best.as_ref().is_none_or(|b| cost < b.0) {
                self.best = Some((cost, self.path.clone(), self.delay.clone()));
            }
            return;
        }
        for s in 0..n {
            if visited & (1 << s) != 0 {
                continue;
            }
            let st = self.stops[s];
            if self.fixed {
                if let Some(r) = st.rank {
                    if r != next_rank {
                        continue;
                    }
                }
            }
            let c = self.custs[st.cust];
            let nt = t + self.mat[at][st.at];
            let mut nload = load;
            let mut ncost = cost;
            match st.kind {
                StopKind::Pickup => {
                    if load + c.passengers > self.seats {
                        continue;
                    }
                    nload += c.passengers;
                }
                StopKind::Dropoff => {
                    // dropoff needs the pickup first, unless already onboard
                    if c.origin.is_some() && !self.picked(visited, st.cust) {
                        continue;
                    }
                    let d = nt - c.promise;
                    if d > c.limit {
                        continue;
                    }
                    nload -= c.passengers;
                    ncost += d;
                    self.delay[st.cust] = d;
                }
            }
            let nvisited = visited | (1 << s);
            let Some(lb) = self.lower_bound(st.at, nt, nvisited) else { continue };
            if self.best.as_ref().is_some_and(|b| ncost + lb >= b.0) {
                continue;
            }
            let nrank = if st.rank.is_some() { next_rank + 1 } else { next_rank };
            self.path.push(s);
            self.run(st.at, nt, nload, nvisited, ncost, nrank);
            self.path.pop();
        }
    }

    fn picked(&self, visited: u32, cust: usize) -> bool {
        self.stops
            .iter()
            .enumerate()
            .any(|(i, s)| s.cust == cust && s.kind == StopKind::Pickup && visited & (1 << i) != 0)
    }

    /// Sum of per-customer delay lower bounds for unfinished customers, or
    /// `None` if one of them can no longer meet its limit.
    fn lower_bound(&self, at: usize, t: Secs, visited: u32) -> Option<Secs> {
        let mut lb = 0;
        for (i, s) in self.stops.iter().enumerate() {
            if s.kind != StopKind::Dropoff || visited & (1 << i) != 0 {
                continue;
            }
            let c = &self.custs[s.cust];
            let done_at = match c.origin {
                Some(o) if !self.picked(visited, s.cust) => t + self.mat[at][o] + self.mat[o][c.dest],
                _ => t + self.mat[at][c.dest],
            };
            let d = done_at - c.promise;
            if d > c.limit {
                return None;
            }
            lb += d;
        }
        Some(lb)
    }
}

/// Replay the snapshot's current stop order and return each committed customer's delay.
pub fn current_delays(v: &VehicleSnapshot, tt: &dyn TravelTimes) -> BTreeMap<RequestId, Secs> {
    let mut out = BTreeMap::new();
    let mut at = v.start;
    let mut t = v.start_s;
    for &(rid, kind) in &v.stops {
        let Some(c) = v.committed.iter().find(|c| c.request == rid) else { continue };
        let target = match kind {
            StopKind::Pickup => c.origin.unwrap_or(c.destination),
            StopKind::Dropoff => c.destination,
        };
        t += tt.tt(at, target);
        at = target;
        if kind == StopKind::Dropoff {
            out.insert(rid, t - c.promise_s);
        }
    }
    out
}

/// Best stop order for serving `new` on top of the vehicle's commitments,
/// with every delay within the cap. Committed customers whose current plan
/// already exceeds the cap may not get worse.
pub fn vehicle_feasibility(
    v: &VehicleSnapshot,
    new: &[&PendingRequest],
    tt: &dyn TravelTimes,
    p: &DispatchParams,
) -> Option<Plan> {
    let new_pax: u32 = new.iter().map(|r| r.passengers).sum();
    if new.is_empty() || new.iter().any(|r| r.passengers > v.seats) || new_pax == 0 {
        return None;
    }
    let current = current_delays(v, tt);
    let mut verts: Vec<Vertex> = vec![v.start];
    let local = |x: Vertex, verts: &mut Vec<Vertex>| match verts.iter().position(|&y| y == x) {
        Some(i) => i,
        None => {
            verts.push(x);
            verts.len() - 1
        }
    };
    let mut custs = Vec::new();
    let mut stops = Vec::new();
    for (rank, &(rid, kind)) in v.stops.iter().enumerate() {
        let ci = match custs.iter().position(|c: &Cust| c.request == rid) {
            Some(i) => i,
            None => {
                let c = v.committed.iter().find(|c| c.request == rid)?;
                let cur = current.get(&rid).copied().unwrap_or(0);
                custs.push(Cust {
                    request: rid,
                    origin: c.origin.map(|o| local(o, &mut verts)),
                    dest: local(c.destination, &mut verts),
                    passengers: c.passengers,
                    promise: c.promise_s,
                    limit: p.max_delay_s.max(cur),
                    current: cur,
                });
                custs.len() - 1
            }
        };
        let at = match kind {
            StopKind::Pickup => custs[ci].origin?,
            StopKind::Dropoff => custs[ci].dest,
        };
        stops.push(PStop {
            cust: ci,
            kind,
            at,
            rank: Some(rank),
        });
    }
    let n_existing = custs.len();
    let mut wait_s = 0;
    for r in new {
        let o = local(r.origin, &mut verts);
        let d = local(r.destination, &mut verts);
        let direct_wait = v.start_s - v.now_s + tt.tt(v.start, r.origin);
        wait_s += direct_wait;
        custs.push(Cust {
            request: r.id,
            origin: Some(o),
            dest: d,
            passengers: r.passengers,
            promise: r.request_s + direct_wait + r.direct_travel_s,
            limit: p.max_delay_s,
            current: 0,
        });
        let ci = custs.len() - 1;
        stops.push(PStop {
            cust: ci,
            kind: StopKind::Pickup,
            at: o,
            rank: None,
        });
        stops.push(PStop {
            cust: ci,
            kind: StopKind::Dropoff,
            at: d,
            rank: None,
        });
    }
    if stops.len() > 30 {
        return None;
    }
    let mat: Vec<Vec<Secs>> = verts
        .iter()
        .map(|&a| verts.iter().map(|&b| if a == b { 0 } else { tt.tt(a, b) }).collect())
        .collect();
    let n_custs = custs.len();
    let mut search = Search {
        mat,
        custs,
        stops,
        seats: v.seats,
        fixed: v.stops.len() > p.fix_order_above,
        best: None,
        path: Vec::new(),
        delay: vec![0; n_custs],
        vertex_of: &verts,
    };
    search.run(0, v.start_s, v.load(), 0, 0, 0);
    let (total, order, delays) = search.best.take()?;
    let base: Secs = search.custs[..n_existing].iter().map(|c| c.current).sum();
    let order = order
        .iter()
        .map(|&s| {
            let st = search.stops[s];
            let c = &search.custs[st.cust];
            Stop {
                kind: st.kind,
                request: c.request,
                vertex: search.vertex_of[st.at],
                passengers: c.passengers,
            }
        })
        .collect();
    Some(Plan {
        order,
        cost: total - base,
        delays: search.custs.iter().zip(&delays).map(|(c, &d)| (c.request, d)).collect(),
        promises: search.custs[n_existing..].iter().map(|c| (c.request, c.promise)).collect(),
        wait_s,
    })
}

/// Can two pending requests share a ride? Evaluates the six pickup/dropoff
/// sequences from a virtual vehicle at the first pickup and returns the
/// smallest total delay among sequences that keep both delays within the cap.
pub fn pair_feasibility(
    r1: &PendingRequest,
    r2: &PendingRequest,
    now_s: Secs,
    tt: &dyn TravelTimes,
    max_delay_s: Secs,
    max_seats: u32,
) -> Option<Secs> {
    #[derive(Clone, Copy)]
    enum S {
        O1,
        O2,
        D1,
        D2,
    }
    use S::*;
    const SEQS: [[S; 4]; 6] = [
        [O1, O2, D1, D2],
        [O1, O2, D2, D1],
        [O1, D1, O2, D2],
        [O2, O1, D2, D1],
        [O2, O1, D1, D2],
        [O2, D2, O1, D1],
    ];
    let vertex = |s: S| match s {
        O1 => r1.origin,
        O2 => r2.origin,
        D1 => r1.destination,
        D2 => r2.destination,
    };
    let mut best: Option<Secs> = None;
    for seq in SEQS {
        let overlap = !matches!(seq[1], D1 | D2);
        if overlap && r1.passengers + r2.passengers > max_seats {
            continue;
        }
        let first = vertex(seq[0]);
        let mut at = first;
        let mut t = now_s;
        let mut done = [0; 2];
        for &s in &seq[1..] {
            let v = vertex(s);
            t += tt.tt(at, v);
            at = v;
            match s {
                D1 => done[0] = t,
                D2 => done[1] = t,
                _ => {}
            }
        }
        let wait1 = if matches!(seq[0], O1) { 0 } else { tt.tt(first, r1.origin) };
        let wait2 = if matches!(seq[0], O2) { 0 } else { tt.tt(first, r2.origin) };
        let d1 = done[0] - (r1.request_s + wait1 + r1.direct_travel_s);
        let d2 = done[1] - (r2.request_s + wait2 + r2.direct_travel_s);
        if d1 <= max_delay_s && d2 <= max_delay_s {
            let c = d1 + d2;
            if best.is_none_or(|b| c < b) {
                best = Some(c);
            }
        }
    }
    best
}

/// A candidate trip for one vehicle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trip {
    pub vehicle: VehicleId,
    pub requests: Vec<RequestId>,
    pub plan: Plan,
}

impl Trip {
    pub fn cost(&self) -> Secs {
        self.plan.cost
    }
}

#[derive(Debug, Clone, Default)]
pub struct RvGraph {
    /// Request pairs that can share a vehicle, smaller id first.
    pub rr: BTreeSet<(RequestId, RequestId)>,
    /// Candidate (request, vehicle index) edges, nearest vehicles first per request.
    pub rv: BTreeMap<RequestId, Vec<usize>>,
}

pub fn build_rv(
    now_s: Secs,
    requests: &[PendingRequest],
    vehicles: &[VehicleSnapshot],
    tt: &dyn TravelTimes,
    p: &DispatchParams,
) -> RvGraph {
    let max_seats = vehicles.iter().map(|v| v.seats).max().unwrap_or(0);
    let mut g = RvGraph::default();
    for (i, a) in requests.iter().enumerate() {
        for b in &requests[i + 1..] {
            if pair_feasibility(a, b, now_s, tt, p.max_delay_s, max_seats).is_some() {
                g.rr.insert((a.id.min(b.id), a.id.max(b.id)));
            }
        }
    }
    let starts: Vec<Vertex> = vehicles.iter().map(|v| v.start).collect();
    for r in requests {
        let times = tt.times_to(r.origin, &starts);
        let mut near: Vec<(Secs, usize)> = vehicles
            .iter()
            .enumerate()
            .filter(|(_, v)| v.seats >= r.passengers)
            .map(|(i, v)| (v.start_s + times[i], i))
            .collect();
        near.sort_unstable();
        near.truncate(p.rv_candidates);
        g.rv.insert(r.id, near.into_iter().map(|(_, i)| i).collect());
    }
    g
}

/// Grow feasible trips per vehicle from size 1 upward. Candidate size-k trips
/// join two size-(k-1) trips and need every size-(k-1) subset feasible and every
/// request pair linked in the pairwise graph.
pub fn build_rtv(
    requests: &[PendingRequest],
    vehicles: &[VehicleSnapshot],
    rv: &RvGraph,
    tt: &dyn TravelTimes,
    p: &DispatchParams,
    timeout: Duration,
) -> Vec<Trip> {
    let started = Instant::now();
    let by_id: BTreeMap<RequestId, &PendingRequest> = requests.iter().map(|r| (r.id, r)).collect();
    let mut per_vehicle: Vec<Vec<RequestId>> = vec![Vec::new(); vehicles.len()];
    for (&rid, vs) in &rv.rv {
        for &vi in vs {
            per_vehicle[vi].push(rid);
        }
    }
    let mut out = Vec::new();
    let mut pairs_allowed = true;
    let mut timed_out = false;
    for (vi, v) in vehicles.iter().enumerate() {
        let mut layer: BTreeMap<Vec<RequestId>, Plan> = BTreeMap::new();
        for &rid in &per_vehicle[vi] {
            if let Some(plan) = vehicle_feasibility(v, &[by_id[&rid]], tt, p) {
                layer.insert(vec![rid], plan);
            }
        }
        let mut count = layer.len();
        out.extend(layer.iter().map(|(k, plan)| Trip {
            vehicle: v.id,
            requests: k.clone(),
            plan: plan.clone(),
        }));
        if timed_out || started.elapsed() >= timeout {
            timed_out = true;
            pairs_allowed = false;
        }
        let mut size = 1;
        while pairs_allowed && size < p.max_trip_size && layer.len() > 1 {
            size += 1;
            let keys: Vec<&Vec<RequestId>> = layer.keys().collect();
            let mut next: BTreeMap<Vec<RequestId>, Plan> = BTreeMap::new();
            'outer: for (i, a) in keys.iter().enumerate() {
                for b in &keys[i + 1..] {
                    if a[..size - 2] != b[..size - 2] {
                        break;
                    }
                    let mut cand: Vec<RequestId> = a.to_vec();
                    cand.push(*b.last().expect("non-empty"));
                    cand.sort_unstable();
                    if next.contains_key(&cand) {
                        continue;
                    }
                    let linked = cand
                        .iter()
                        .enumerate()
                        .all(|(x, &r1)| cand[x + 1..].iter().all(|&r2| rv.rr.contains(&(r1, r2))));
                    if !linked {
                        continue;
                    }
                    let closed = (0..cand.len()).all(|skip| {
                        let sub: Vec<RequestId> =
                            cand.iter().enumerate().filter(|&(j, _)| j != skip).map(|(_, &r)| r).collect();
                        layer.contains_key(&sub)
                    });
                    if !closed {
                        continue;
                    }
                    if started.elapsed() >= timeout {
                        timed_out = true;
                        break 'outer;
                    }
                    let reqs: Vec<&PendingRequest> = cand.iter().map(|r| by_id[r]).collect();
                    if let Some(plan) = vehicle_feasibility(v, &reqs, tt, p) {
                        next.insert(cand, plan);
                        count += 1;
                        if count >= p.max_trips_per_vehicle {
                            break 'outer;
                        }
                    }
                }
            }
            out.extend(next.iter().map(|(k, plan)| Trip {
                vehicle: v.id,
                requests: k.clone(),
                plan: plan.clone(),
            }));
            if timed_out || count >= p.max_trips_per_vehicle {
                break;
            }
            layer = next;
        }
        if timed_out {
            pairs_allowed = false;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Indices into the trip list, at most one per vehicle.
    pub chosen: Vec<usize>,
    pub unassigned: Vec<RequestId>,
    pub objective: Secs,
    pub exact: bool,
}

/// Objective of a selection: Σ trip costs + penalty per uncovered request.
pub fn objective(trips: &[Trip], chosen: &[usize], requests: &[RequestId], penalty: Secs) -> Secs {
    let covered: usize = chosen.iter().map(|&i| trips[i].requests.len()).sum();
    chosen.iter().map(|&i| trips[i].cost()).sum::<Secs>() + penalty * (requests.len() - covered) as Secs
}

fn trip_key(t: &Trip) -> (std::cmp::Reverse<usize>, Secs, Secs, VehicleId, &[RequestId]) {
    (std::cmp::Reverse(t.requests.len()), t.cost(), t.plan.wait_s, t.vehicle, &t.requests)
}

/// Choose at most one trip per vehicle and at most one trip per request to minimize
/// Σ cost + penalty for each request left out.
pub fn assign_trips(trips: &[Trip], requests: &[RequestId], p: &DispatchParams) -> Assignment {
    let started = Instant::now();
    let budget = Duration::from_millis(p.assign_budget_ms);
    let mut reqs: Vec<RequestId> = requests.to_vec();
    reqs.sort_unstable();
    reqs.dedup();
    let idx: BTreeMap<RequestId, usize> = reqs.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let valid: Vec<usize> = (0..trips.len())
        .filter(|&t| trips[t].requests.iter().all(|r| idx.contains_key(r)))
        .collect();

    let greedy = greedy_assign(trips, &valid, &idx);
    let mut best = greedy.clone();
    let mut best_obj = objective(trips, &best, &reqs, p.reject_penalty_s);
    let mut exact = false;
    if valid.len() <= p.exact_var_limit {
        let mut bb = BranchAndBound::new(trips, &valid, &reqs, &idx, p.reject_penalty_s);
        bb.best12 = best_obj * 12;
        bb.best = best.clone();
        bb.node_limit = p.max_search_nodes;
        bb.deadline = Some(started + budget);
        bb.search();
        exact = !bb.aborted;
        best = bb.best;
        best_obj = bb.best12 / 12;
    } else {
        improve_by_exchange(trips, &valid, &idx, &reqs, p, &mut best, started + budget);
        best_obj = objective(trips, &best, &reqs, p.reject_penalty_s);
    }
    best.sort_by_key(|&t| trips[t].vehicle);
    let covered: HashSet<RequestId> = best.iter().flat_map(|&t| trips[t].requests.iter().copied()).collect();
    Assignment {
        chosen: best,
        unassigned: reqs.iter().copied().filter(|r| !covered.contains(r)).collect(),
        objective: best_obj,
        exact,
    }
}

fn greedy_assign(trips: &[Trip], valid: &[usize], idx: &BTreeMap<RequestId, usize>) -> Vec<usize> {
    let mut order = valid.to_vec();
    order.sort_by(|&a, &b| trip_key(&trips[a]).cmp(&trip_key(&trips[b])));
    let mut used_v = HashSet::new();
    let mut used_r = vec![false; idx.len()];
    let mut chosen = Vec::new();
    for t in order {
        let trip = &trips[t];
        if used_v.contains(&trip.vehicle) || trip.requests.iter().any(|r| used_r[idx[r]]) {
            continue;
        }
        used_v.insert(trip.vehicle);
        trip.requests.iter().for_each(|r| used_r[idx[r]] = true);
        chosen.push(t);
    }
    chosen
}

fn improve_by_exchange(
    trips: &[Trip],
    valid: &[usize],
    idx: &BTreeMap<RequestId, usize>,
    reqs: &[RequestId],
    p: &DispatchParams,
    chosen: &mut Vec<usize>,
    deadline: Instant,
) {
    let mut order = valid.to_vec();
    order.sort_by(|&a, &b| trip_key(&trips[a]).cmp(&trip_key(&trips[b])));
    let mut obj = objective(trips, chosen, reqs, p.reject_penalty_s);
    let mut rounds = 0u64;
    loop {
        let mut improved = false;
        for &t in &order {
            rounds += 1;
            if rounds.is_multiple_of(256) && Instant::now() >= deadline {
                return;
            }
            if chosen.contains(&t) {
                continue;
            }
            let cand = &trips[t];
            let mut trial: Vec<usize> = chosen
                .iter()
                .copied()
                .filter(|&c| {
                    let other = &trips[c];
                    other.vehicle != cand.vehicle && !other.requests.iter().any(|r| cand.requests.contains(r))
                })
                .collect();
            trial.push(t);
            // refill freed vehicles and requests greedily
            let mut used_v: HashSet<VehicleId> = trial.iter().map(|&c| trips[c].vehicle).collect();
            let mut used_r = vec![false; idx.len()];
            for &c in &trial {
                trips[c].requests.iter().for_each(|r| used_r[idx[r]] = true);
            }
            for &u in &order {
                let tr = &trips[u];
                if !used_v.contains(&tr.vehicle) && !tr.requests.iter().any(|r| used_r[idx[r]]) {
                    used_v.insert(tr.vehicle);
                    tr.requests.iter().for_each(|r| used_r[idx[r]] = true);
                    trial.push(u);
                }
            }
            let o = objective(trips, &trial, reqs, p.reject_penalty_s);
            if o < obj {
                obj = o;
                *chosen = trial;
                improved = true;
            }
        }
        if !improved || rounds > p.max_search_nodes {
            return;
        }
    }
}

struct BranchAndBound<'a> {
    trips: &'a [Trip],
    by_req: Vec<Vec<usize>>,
    members: Vec<Vec<usize>>,
    lb12: Vec<Secs>,
    penalty12: Secs,
    decided: Vec<bool>,
    used_v: HashSet<VehicleId>,
    stack: Vec<usize>,
    best: Vec<usize>,
    best12: Secs,
    nodes: u64,
    node_limit: u64,
    deadline: Option<Instant>,
    aborted: bool,
}

impl<'a> BranchAndBound<'a> {
    fn new(
        trips: &'a [Trip],
        valid: &[usize],
        reqs: &[RequestId],
        idx: &BTreeMap<RequestId, usize>,
        penalty: Secs,
    ) -> Self {
        let mut by_req: Vec<Vec<usize>> = vec![Vec::new(); reqs.len()];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); trips.len()];
        for &t in valid {
            for r in &trips[t].requests {
                by_req[idx[r]].push(t);
                members[t].push(idx[r]);
            }
        }
        for list in &mut by_req {
            list.sort_by(|&a, &b| {
                let (ta, tb) = (&trips[a], &trips[b]);
                (ta.cost() * 12 / ta.requests.len() as Secs, ta.plan.wait_s, ta.vehicle, &ta.requests).cmp(&(
                    tb.cost() * 12 / tb.requests.len() as Secs,
                    tb.plan.wait_s,
                    tb.vehicle,
                    &tb.requests,
                ))
            });
        }
        let penalty12 = penalty * 12;
        let lb12 = by_req
            .iter()
            .map(|list| {
                list.iter()
                    .map(|&t| trips[t].cost() * 12 / trips[t].requests.len() as Secs)
                    .fold(penalty12, Secs::min)
            })
            .collect();
        BranchAndBound {
            trips,
            by_req,
            members,
            lb12,
            penalty12,
            decided: vec![false; reqs.len()],
            used_v: HashSet::new(),
            stack: Vec::new(),
            best: Vec::new(),
            best12: Secs::MAX,
            nodes: 0,
            node_limit: u64::MAX,
            deadline: None,
            aborted: false,
        }
    }

    fn search(&mut self) {
        let lb: Secs = self.lb12.iter().sum();
        self.recurse(0, 0, lb);
    }

    fn recurse(&mut self, from: usize, cur12: Secs, remaining_lb: Secs) {
        if self.aborted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.node_limit
            || (self.nodes.is_multiple_of(4096) && self.deadline.is_some_and(|d| Instant::now() >= d))
        {
            self.aborted = true;
            return;
        }
        if cur12 + remaining_lb >= self.best12 {
            return;
        }
        let Some(r) = (from..self.decided.len()).find(|&i| !self.decided[i]) else {
            self.best12 = cur12;
            self.best = self.stack.clone();
            return;
        };
        for k in 0..self.by_req[r].len() {
            let t = self.by_req[r][k];
            let trip = &self.trips[t];
            if self.used_v.contains(&trip.vehicle) || self.members[t].iter().any(|&m| self.decided[m]) {
                continue;
            }
            let lb_drop: Secs = self.members[t].iter().map(|&m| self.lb12[m]).sum();
            let members = self.members[t].clone();
            members.iter().for_each(|&m| self.decided[m] = true);
            self.used_v.insert(trip.vehicle);
            self.stack.push(t);
            self.recurse(r + 1, cur12 + trip.cost() * 12, remaining_lb - lb_drop);
            self.stack.pop();
            self.used_v.remove(&trip.vehicle);
            members.iter().for_each(|&m| self.decided[m] = false);
        }
        self.decided[r] = true;
        self.recurse(r + 1, cur12 + self.penalty12, remaining_lb - self.lb12[r]);
        self.decided[r] = false;
    }
}

/// Full dispatch for one minute.
#[derive(Debug, Clone, Default)]
pub struct DispatchOutcome {
    pub trips: Vec<Trip>,
    pub assignment: Option<Assignment>,
    pub rr_edges: usize,
    pub rv_edges: usize,
}

impl DispatchOutcome {
    pub fn chosen(&self) -> impl Iterator<Item = &Trip> {
        self.assignment
            .iter()
            .flat_map(move |a| a.chosen.iter().map(move |&i| &self.trips[i]))
    }
}

pub fn dispatch(
    now_s: Secs,
    requests: &[PendingRequest],
    vehicles: &[VehicleSnapshot],
    tt: &dyn TravelTimes,
    p: &DispatchParams,
) -> DispatchOutcome {
    if requests.is_empty() || vehicles.is_empty() {
        return DispatchOutcome::default();
    }
    let rv = build_rv(now_s, requests, vehicles, tt, p);
    let trips = build_rtv(requests, vehicles, &rv, tt, p, Duration::from_millis(p.rtv_timeout_ms));
    let ids: Vec<RequestId> = requests.iter().map(|r| r.id).collect();
    let assignment = assign_trips(&trips, &ids, p);
    DispatchOutcome {
        rr_edges: rv.rr.len(),
        rv_edges: rv.rv.values().map(Vec::len).sum(),
        trips,
        assignment: Some(assignment),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Line graph 0-1-2-..., `step` seconds per hop.
    fn line(n: usize, step: Secs) -> TimeMatrix {
        TimeMatrix(
            (0..n)
                .map(|i| (0..n).map(|j| (i as Secs - j as Secs).abs() * step).collect())
                .collect(),
        )
    }

    fn req(id: RequestId, o: Vertex, d: Vertex, tt: &TimeMatrix) -> PendingRequest {
        PendingRequest {
            id,
            origin: o,
            destination: d,
            passengers: 1,
            request_s: 0,
            direct_travel_s: tt.tt(o, d),
        }
    }

    fn empty_vehicle(id: VehicleId, at: Vertex, seats: u32) -> VehicleSnapshot {
        VehicleSnapshot {
            id,
            now_s: 0,
            start: at,
            start_s: 0,
            seats,
            committed: vec![],
            stops: vec![],
        }
    }

    #[test]
    fn pair_with_identical_endpoints_costs_nothing() {
        let tt = line(4, 60);
        let (a, b) = (req(0, 0, 3, &tt), req(1, 0, 3, &tt));
        assert_eq!(pair_feasibility(&a, &b, 0, &tt, 300, 5), Some(0));
    }

    #[test]
    fn pair_far_apart_is_infeasible() {
        let tt = line(40, 60);
        let (a, b) = (req(0, 20, 39, &tt), req(1, 19, 0, &tt));
        assert_eq!(pair_feasibility(&a, &b, 0, &tt, 300, 5), None);
    }

    #[test]
    fn pair_destination_on_direct_path() {
        let tt = line(6, 60);
        let (a, b) = (req(0, 0, 5, &tt), req(1, 0, 2, &tt));
        // o1 o2 d2 d1 serves both with no detour
        assert_eq!(pair_feasibility(&a, &b, 0, &tt, 300, 5), Some(0));
    }

    #[test]
    fn single_request_plan() {
        let tt = line(5, 60);
        let v = empty_vehicle(0, 1, 4);
        let r = req(0, 2, 4, &tt);
        let plan = vehicle_feasibility(&v, &[&r], &tt, &DispatchParams::default()).unwrap();
        assert_eq!(plan.order.iter().map(|s| s.kind).collect::<Vec<_>>(), vec![StopKind::Pickup, StopKind::Dropoff]);
        assert_eq!(plan.cost, 0);
        assert_eq!(plan.promises, vec![(0, 180)]);
    }

    #[test]
    fn full_vehicle_is_infeasible() {
        let tt = line(5, 60);
        let mut v = empty_vehicle(0, 1, 2);
        v.committed.push(Committed {
            request: 9,
            origin: None,
            destination: 4,
            passengers: 2,
            promise_s: 180,
        });
        v.stops.push((9, StopKind::Dropoff));
        let r = req(0, 1, 4, &tt);
        assert!(vehicle_feasibility(&v, &[&r], &tt, &DispatchParams::default()).is_none());
    }

    #[test]
    fn rtv_closure_and_zero_timeout() {
        let tt = line(6, 60);
        let rs = vec![req(0, 0, 5, &tt), req(1, 0, 4, &tt)];
        let vs = vec![empty_vehicle(0, 0, 4)];
        let p = DispatchParams::default();
        let rv = build_rv(0, &rs, &vs, &tt, &p);
        let trips = build_rtv(&rs, &vs, &rv, &tt, &p, Duration::from_secs(5));
        let sets: Vec<Vec<RequestId>> = trips.iter().map(|t| t.requests.clone()).collect();
        assert_eq!(sets, vec![vec![0], vec![1], vec![0, 1]]);
        let only_singles = build_rtv(&rs, &vs, &rv, &tt, &p, Duration::ZERO);
        assert!(only_singles.iter().all(|t| t.requests.len() == 1));
        assert!(build_rtv(&rs, &vs, &RvGraph::default(), &tt, &p, Duration::from_secs(5)).is_empty());
    }

    #[test]
    fn assignment_rejects_when_nothing_is_feasible() {
        let a = assign_trips(&[], &[4], &DispatchParams::default());
        assert_eq!(a.unassigned, vec![4]);
        assert_eq!(a.objective, 3600);
    }

    fn trip(vehicle: VehicleId, requests: Vec<RequestId>, cost: Secs) -> Trip {
        Trip {
            vehicle,
            requests,
            plan: Plan {
                order: vec![],
                cost,
                delays: vec![],
                promises: vec![],
                wait_s: 0,
            },
        }
    }

    #[test]
    fn exact_beats_greedy() {
        // greedy takes the pair {0,1} on vehicle 0 and then cannot place 2 cheaply
        let trips = vec![
            trip(0, vec![0, 1], 100),
            trip(0, vec![2], 0),
            trip(1, vec![0], 0),
            trip(1, vec![1], 0),
            trip(0, vec![1], 0),
        ];
        let p = DispatchParams::default();
        let idx: BTreeMap<RequestId, usize> = (0..3).map(|i| (i, i as usize)).collect();
        let valid: Vec<usize> = (0..trips.len()).collect();
        let g = greedy_assign(&trips, &valid, &idx);
        let greedy_obj = objective(&trips, &g, &[0, 1, 2], 3600);
        let a = assign_trips(&trips, &[0, 1, 2], &p);
        assert!(a.exact);
        assert!(a.objective < greedy_obj);
        assert_eq!(a.objective, 3600);
    }
}
