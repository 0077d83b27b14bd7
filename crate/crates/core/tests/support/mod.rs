//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use evpool::dispatch::{Committed, PendingRequest, TimeMatrix, VehicleSnapshot};
use evpool::ev::StopKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config_path(name: &str) -> PathBuf {
    repo_root().join("configs").join(name)
}

// ---- assignment ----

fn permute(k: usize, used: &mut Vec<bool>, acc: i64, m: &[Vec<i64>], best: &mut i64) {
    if k == m.len() {
        *best = (*best).max(acc);
        return;
    }
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            permute(k + 1, used, acc + m[k][j], m, best);
            used[j] = false;
        }
    }
}

/// Best total over all injective row-to-column maps of the shorter side.
pub fn brute_force_max(m: &[Vec<i64>]) -> i64 {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0;
    }
    let m: Vec<Vec<i64>> = if rows <= cols {
        m.to_vec()
    } else {
        (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
    };
    let mut best = i64::MIN;
    permute(0, &mut vec![false; m[0].len()], 0, &m, &mut best);
    best
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<i64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-100..=100)).collect())
        .collect()
}

// ---- formulas ----

pub fn pect_ref(idle: f64, travel: f64, queue: f64, after: f64) -> f64 {
    let wait = if travel > queue { travel } else { queue };
    let penalty = wait + after - idle;
    idle - wait - if penalty > 0.0 { penalty } else { 0.0 }
}

/// Tractive power in W: aerodynamic drag plus rolling resistance.
pub fn power_ref(cd: f64, area: f64, cr: f64, mass: f64, v: f64) -> f64 {
    0.5 * 1.225 * cd * area * v * v * v + 9.81 * cr * mass * v
}

pub fn kwh_ref(power_w: f64, secs: f64) -> f64 {
    power_w * secs / 3.6e6
}

/// Fare in cents from direct seconds and metres, half-up.
pub fn fare_ref(direct_s: i64, direct_m: f64) -> i64 {
    let dollars = 2.55 + 0.35 * (direct_s as f64 / 60.0) + 1.09 * (direct_m / 1000.0);
    let cents = (dollars * 100.0 + 0.5 + 1e-7).floor() as i64;
    cents.max(700)
}

pub fn share_ref(fare: i64) -> i64 {
    // a quarter, half-up
    (fare * 25 + 50) / 100
}

pub fn tow_ref(km: f64) -> i64 {
    12_500 + (km * 250.0).round() as i64
}

// ---- event log ----

pub fn read_events(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[derive(Debug, Default, PartialEq)]
pub struct Recomputed {
    pub share: i64,
    pub op: i64,
    pub charge: i64,
    pub tow: i64,
    pub reward: i64,
    /// Σ of the per-minute reward lines as logged.
    pub logged_reward: i64,
    pub dropoffs: u64,
    pub problems: Vec<String>,
}

fn cents(d: f64) -> i64 {
    (d * 100.0).round() as i64
}

/// Rebuild every reward component from raw events.
pub fn recompute_reward(events: &[Value], charge_per_kwh: f64, ontime_s: i64) -> Recomputed {
    let mut r = Recomputed::default();
    let mut known: BTreeSet<u64> = BTreeSet::new();
    let mut op_total = 0.0;
    let mut kwh_total = 0.0;
    let mut op_booked = 0;
    let mut ch_booked = 0;
    let mut tow_logged = 0;
    for e in events {
        match e["kind"].as_str().unwrap() {
            "vehicle" => {
                for id in e["in_flight"].as_array().unwrap() {
                    known.insert(id.as_u64().unwrap());
                }
            }
            "request" => {
                known.insert(e["request"].as_u64().unwrap());
            }
            "dropoff" => {
                r.dropoffs += 1;
                let id = e["request"].as_u64().unwrap();
                if !known.remove(&id) {
                    r.problems.push(format!("dropoff of unseen request {id}"));
                }
                let fare = fare_ref(e["direct_travel_s"].as_i64().unwrap(), e["direct_m"].as_f64().unwrap());
                if fare != e["fare_cents"].as_i64().unwrap() {
                    r.problems.push(format!("request {id}: fare {fare} vs logged {}", e["fare_cents"]));
                }
                let share = if e["delay_s"].as_i64().unwrap() <= ontime_s { share_ref(fare) } else { 0 };
                if share != e["share_cents"].as_i64().unwrap() {
                    r.problems.push(format!("request {id}: share {share} vs logged {}", e["share_cents"]));
                }
                r.share += share;
            }
            "tow" => {
                let c = tow_ref(e["km"].as_f64().unwrap());
                if c != e["cost_cents"].as_i64().unwrap() {
                    r.problems.push(format!("tow cost {c} vs logged {}", e["cost_cents"]));
                }
                r.tow += c;
            }
            "costs" => {
                op_total += e["op_dollars"].as_f64().unwrap();
                kwh_total += e["charged_kwh"].as_f64().unwrap();
                let op_now = cents(op_total);
                let ch_now = cents(kwh_total * charge_per_kwh);
                if op_now - op_booked != e["op_cents"].as_i64().unwrap() {
                    r.problems.push(format!("minute {}: op cents {} vs logged {}", e["minute"], op_now - op_booked, e["op_cents"]));
                }
                if ch_now - ch_booked != e["charge_cents"].as_i64().unwrap() {
                    r.problems.push(format!("minute {}: charge cents mismatch", e["minute"]));
                }
                op_booked = op_now;
                ch_booked = ch_now;
                tow_logged += e["tow_cents"].as_i64().unwrap();
                r.logged_reward += e["reward_cents"].as_i64().unwrap();
            }
            _ => {}
        }
    }
    if tow_logged != r.tow {
        r.problems.push(format!("tow cents booked {tow_logged} vs tow events {}", r.tow));
    }
    r.op = op_booked;
    r.charge = ch_booked;
    r.reward = r.share - r.op - r.charge - r.tow;
    r
}

// ---- dispatch micro instances ----

pub struct MicroInstance {
    pub now_s: i64,
    pub tt: TimeMatrix,
    pub requests: Vec<PendingRequest>,
    pub vehicles: Vec<VehicleSnapshot>,
}

/// All-pairs shortest paths by Floyd-Warshall.
pub fn all_pairs(n: usize, edges: &[(usize, usize, i64)]) -> Vec<Vec<i64>> {
    let inf = i64::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b, w) in edges {
        d[a][b] = d[a][b].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

pub fn micro_instance(seed: u64) -> MicroInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(5..=20);
    let mut edges = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        edges.push((i, j, rng.random_range(20..=150)));
        edges.push((j, i, rng.random_range(20..=150)));
    }
    for _ in 0..rng.random_range(0..=n) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b, rng.random_range(20..=150)));
        }
    }
    let d = all_pairs(n, &edges);
    let now_s = 3600;
    let requests: Vec<PendingRequest> = (0..rng.random_range(1..=5))
        .map(|id| {
            let o = rng.random_range(0..n);
            let mut t = rng.random_range(0..n - 1);
            if t >= o {
                t += 1;
            }
            PendingRequest {
                id,
                origin: o,
                destination: t,
                passengers: [1, 1, 1, 2, 3][rng.random_range(0..5)],
                request_s: now_s - rng.random_range(0..=120),
                direct_travel_s: d[o][t],
            }
        })
        .collect();
    let vehicles = (0..rng.random_range(1..=4))
        .map(|id| {
            let start = rng.random_range(0..n);
            let start_s = now_s + if rng.random_bool(0.3) { rng.random_range(10..=90) } else { 0 };
            let seats = [2, 4, 4, 6][rng.random_range(0..4)];
            let mut committed = Vec::new();
            let mut stops = Vec::new();
            let roll: f64 = rng.random();
            if roll < 0.3 {
                // one rider onboard
                let dest = rng.random_range(0..n);
                let promise = start_s + d[start][dest] + rng.random_range(-120..=120);
                committed.push(Committed {
                    request: 100 + id as u64,
                    origin: None,
                    destination: dest,
                    passengers: 1,
                    promise_s: promise,
                });
                stops.push((100 + id as u64, StopKind::Dropoff));
            } else if roll < 0.45 {
                // one rider assigned but not yet picked up
                let o = rng.random_range(0..n);
                let dest = rng.random_range(0..n);
                let promise = start_s + d[start][o] + d[o][dest] + rng.random_range(-60..=120);
                committed.push(Committed {
                    request: 100 + id as u64,
                    origin: Some(o),
                    destination: dest,
                    passengers: 1,
                    promise_s: promise,
                });
                stops.push((100 + id as u64, StopKind::Pickup));
                stops.push((100 + id as u64, StopKind::Dropoff));
            }
            VehicleSnapshot {
                id,
                now_s,
                start,
                start_s,
                seats,
                committed,
                stops,
            }
        })
        .collect();
    MicroInstance {
        now_s,
        tt: TimeMatrix(d),
        requests,
        vehicles,
    }
}

struct Rider {
    origin: Option<usize>,
    dest: usize,
    passengers: u32,
    promise: i64,
    limit: i64,
}

fn best_route(d: &[Vec<i64>], riders: &[Rider], at: usize, t: i64, load: u32, seats: u32, picked: u64, dropped: u64) -> Option<i64> {
    if dropped.count_ones() as usize == riders.len() {
        return Some(0);
    }
    let mut best: Option<i64> = None;
    for (i, r) in riders.iter().enumerate() {
        let bit = 1u64 << i;
        if dropped & bit != 0 {
            continue;
        }
        let waiting = r.origin.is_some() && picked & bit == 0;
        let sub = if waiting {
            let o = r.origin.unwrap();
            if load + r.passengers > seats {
                continue;
            }
            best_route(d, riders, o, t + d[at][o], load + r.passengers, seats, picked | bit, dropped)
        } else {
            let nt = t + d[at][r.dest];
            let delay = nt - r.promise;
            if delay > r.limit {
                continue;
            }
            best_route(d, riders, r.dest, nt, load - r.passengers, seats, picked, dropped | bit).map(|c| c + delay)
        };
        if let Some(c) = sub {
            best = Some(best.map_or(c, |b: i64| b.min(c)));
        }
    }
    best
}

/// Lowest Σ-delay change for serving `subset` with vehicle `v`, by full enumeration.
pub fn oracle_trip_cost(inst: &MicroInstance, v: &VehicleSnapshot, subset: &[usize], max_delay: i64) -> Option<i64> {
    let d = &inst.tt.0;
    let mut riders = Vec::new();
    let mut t = v.start_s;
    let mut at = v.start;
    let mut current = BTreeMap::new();
    for &(rid, kind) in &v.stops {
        let c = v.committed.iter().find(|c| c.request == rid).unwrap();
        let target = match kind {
            StopKind::Pickup => c.origin.unwrap(),
            StopKind::Dropoff => c.destination,
        };
        t += d[at][target];
        at = target;
        if kind == StopKind::Dropoff {
            current.insert(rid, t - c.promise_s);
        }
    }
    let mut base = 0;
    for c in &v.committed {
        let cur = current[&c.request];
        base += cur;
        riders.push(Rider {
            origin: c.origin,
            dest: c.destination,
            passengers: c.passengers,
            promise: c.promise_s,
            limit: max_delay.max(cur),
        });
    }
    for &i in subset {
        let r = &inst.requests[i];
        if r.passengers > v.seats {
            return None;
        }
        let wait = v.start_s - v.now_s + d[v.start][r.origin];
        riders.push(Rider {
            origin: Some(r.origin),
            dest: r.destination,
            passengers: r.passengers,
            promise: r.request_s + wait + r.direct_travel_s,
            limit: max_delay,
        });
    }
    let load: u32 = v.committed.iter().filter(|c| c.origin.is_none()).map(|c| c.passengers).sum();
    let picked = v
        .committed
        .iter()
        .enumerate()
        .filter(|(_, c)| c.origin.is_none())
        .fold(0u64, |m, (i, _)| m | 1 << i);
    best_route(d, &riders, v.start, v.start_s, load, v.seats, picked, 0).map(|c| c - base)
}

/// Exhaustive optimum of Σ trip cost + penalty per unserved request.
pub fn oracle_objective(inst: &MicroInstance, max_delay: i64, penalty: i64, max_trip: usize) -> i64 {
    let nr = inst.requests.len();
    let nv = inst.vehicles.len();
    // cost[v][mask]
    let mut cost = vec![vec![None; 1 << nr]; nv];
    for (vi, v) in inst.vehicles.iter().enumerate() {
        cost[vi][0] = Some(0);
        for mask in 1usize..1 << nr {
            if mask.count_ones() as usize > max_trip {
                continue;
            }
            let subset: Vec<usize> = (0..nr).filter(|i| mask & (1 << i) != 0).collect();
            cost[vi][mask] = oracle_trip_cost(inst, v, &subset, max_delay);
        }
    }
    fn go(vi: usize, free: usize, cost: &[Vec<Option<i64>>], nr: usize, penalty: i64) -> i64 {
        if vi == cost.len() {
            return penalty * free.count_ones() as i64;
        }
        let mut best = i64::MAX;
        // every subset of the still-free requests, including none
        let mut sub = free;
        loop {
            if let Some(c) = cost[vi][sub] {
                best = best.min(c + go(vi + 1, free & !sub, cost, nr, penalty));
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & free;
        }
        best
    }
    go(0, (1 << nr) - 1, &cost, nr, penalty)
}
