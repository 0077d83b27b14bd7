//! Edge travel times and memoized shortest-path trees.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::clock::{hour_of_minute, Minute, Secs};
use crate::error::{Error, Result};
use crate::network::{RoadNetwork, Vertex};

pub const DEFAULT_SPEED_MPS: f64 = 25.0 / 3.6;

/// How edge travel times are derived. Edge times are whole seconds, at least 1.
#[derive(Debug, Clone, PartialEq)]
pub enum TravelTimeModel {
    ConstantSpeed { speed_mps: f64 },
    /// Base speed scaled by an hour-of-day multiplier.
    SpeedProfile { speed_mps: f64, multipliers: [f64; 24] },
    /// Per-edge, per-hour minutes; edges without an entry use `fallback_speed_mps`.
    Table {
        minutes: HashMap<(Vertex, Vertex, u32), f64>,
        fallback_speed_mps: f64,
    },
}

impl Default for TravelTimeModel {
    fn default() -> Self {
        TravelTimeModel::ConstantSpeed {
            speed_mps: DEFAULT_SPEED_MPS,
        }
    }
}

#[derive(Debug, Deserialize)]
struct TableRow {
    origin: Vertex,
    destination: Vertex,
    hour: u32,
    minutes: f64,
}

impl TravelTimeModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: f64| !(s.is_finite() && s > 0.0);
        match self {
            TravelTimeModel::ConstantSpeed { speed_mps } if bad(*speed_mps) => {
                Err(Error::Invalid(format!("speed must be positive, got {speed_mps}")))
            }
            TravelTimeModel::SpeedProfile { speed_mps, multipliers } => {
                if bad(*speed_mps) || multipliers.iter().any(|&m| bad(m)) {
                    Err(Error::Invalid("speed profile needs positive speed and multipliers".into()))
                } else {
                    Ok(())
                }
            }
            TravelTimeModel::Table {
                minutes,
                fallback_speed_mps,
            } => {
                if bad(*fallback_speed_mps) || minutes.values().any(|&m| bad(m)) {
                    Err(Error::Invalid("travel time table entries must be positive".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Load `origin,destination,hour,minutes` rows.
    pub fn load_table(path: &Path, fallback_speed_mps: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut minutes = HashMap::new();
        for row in rdr.deserialize() {
            let row: TableRow = row?;
            if row.hour >= 24 {
                return Err(Error::Parse(format!("travel time table hour {} out of range", row.hour)));
            }
            minutes.insert((row.origin, row.destination, row.hour), row.minutes);
        }
        let model = TravelTimeModel::Table {
            minutes,
            fallback_speed_mps,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn is_time_varying(&self) -> bool {
        !matches!(self, TravelTimeModel::ConstantSpeed { .. })
    }

    pub fn edge_seconds(&self, from: Vertex, to: Vertex, length_m: f64, hour: u32) -> Secs {
        let secs = match self {
            TravelTimeModel::ConstantSpeed { speed_mps } => length_m / speed_mps,
            TravelTimeModel::SpeedProfile { speed_mps, multipliers } => {
                length_m / (speed_mps * multipliers[hour as usize])
            }
            TravelTimeModel::Table {
                minutes,
                fallback_speed_mps,
            } => match minutes.get(&(from, to, hour)) {
                Some(m) => m * 60.0,
                None => length_m / fallback_speed_mps,
            },
        };
        (secs.round() as Secs).max(1)
    }
}

/// Shortest-path tree rooted at one vertex. For a forward tree `dist[v]` is the
/// time from the root to `v`; for a reverse tree it is the time from `v` to the root.
#[derive(Debug, Clone)]
pub struct PathTree {
    pub root: Vertex,
    pub reverse: bool,
    dist: Vec<u32>,
    /// Edge entering `v` from the root side (forward) or leaving `v` toward the root (reverse).
    link: Vec<u32>,
}

const NONE: u32 = u32::MAX;

impl PathTree {
    pub fn dist(&self, v: Vertex) -> Option<Secs> {
        (self.dist[v] != NONE).then(|| self.dist[v] as Secs)
    }
}

#[derive(Debug, Default)]
struct Cache {
    hour: Option<u32>,
    edge_secs: Vec<Secs>,
    forward: HashMap<Vertex, Arc<PathTree>>,
    reverse: HashMap<Vertex, Arc<PathTree>>,
}

/// Router over a fixed network. Trees are memoized for the current hour and dropped
/// when `set_time` crosses an hour boundary under a time-varying model.
#[derive(Debug)]
pub struct Router {
    net: Arc<RoadNetwork>,
    model: TravelTimeModel,
    cache: RefCell<Cache>,
    max_cached_trees: usize,
}

impl Router {
    pub fn new(net: Arc<RoadNetwork>, model: TravelTimeModel) -> Result<Self> {
        model.validate()?;
        let r = Router {
            max_cached_trees: 8 * net.num_vertices().max(1),
            net,
            model,
            cache: RefCell::new(Cache::default()),
        };
        r.set_time(0);
        Ok(r)
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn model(&self) -> &TravelTimeModel {
        &self.model
    }

    /// Move the router's clock. Cache is kept unless the hour changes and times vary by hour.
    pub fn set_time(&self, minute: Minute) {
        let hour = if self.model.is_time_varying() {
            hour_of_minute(minute)
        } else {
            0
        };
        let mut c = self.cache.borrow_mut();
        if c.hour == Some(hour) {
            return;
        }
        c.hour = Some(hour);
        c.edge_secs = self.edge_times_at(hour);
        c.forward.clear();
        c.reverse.clear();
    }

    fn edge_times_at(&self, hour: u32) -> Vec<Secs> {
        self.net
            .edges()
            .iter()
            .map(|e| self.model.edge_seconds(e.from, e.to, e.length_m, hour))
            .collect()
    }

    pub fn edge_secs(&self, e: usize) -> Secs {
        self.cache.borrow().edge_secs[e]
    }

    pub fn edge_secs_all(&self) -> Vec<Secs> {
        self.cache.borrow().edge_secs.clone()
    }

    pub fn forward_tree(&self, root: Vertex) -> Arc<PathTree> {
        self.tree(root, false)
    }

    pub fn reverse_tree(&self, root: Vertex) -> Arc<PathTree> {
        self.tree(root, true)
    }

    fn tree(&self, root: Vertex, reverse: bool) -> Arc<PathTree> {
        {
            let c = self.cache.borrow();
            let map = if reverse { &c.reverse } else { &c.forward };
            if let Some(t) = map.get(&root) {
                return t.clone();
            }
        }
        let mut c = self.cache.borrow_mut();
        let t = Arc::new(dijkstra(&self.net, &c.edge_secs, root, reverse));
        if c.forward.len() + c.reverse.len() >= self.max_cached_trees {
            c.forward.clear();
            c.reverse.clear();
        }
        let map = if reverse { &mut c.reverse } else { &mut c.forward };
        map.insert(root, t.clone());
        t
    }

    /// Travel time in seconds from `u` to `v` at the router's current hour.
    pub fn tt(&self, u: Vertex, v: Vertex) -> Result<Secs> {
        if u == v {
            return Ok(0);
        }
        self.forward_tree(u)
            .dist(v)
            .ok_or(Error::Unreachable { from: u, to: v })
    }

    /// Travel time evaluated at an explicit minute; uses the cache when the hour matches.
    pub fn travel_time(&self, u: Vertex, v: Vertex, at: Minute) -> Result<Secs> {
        if self.serves_minute(at) {
            return self.tt(u, v);
        }
        let edge_secs = self.edge_times_at(hour_of_minute(at));
        dijkstra(&self.net, &edge_secs, u, false)
            .dist(v)
            .ok_or(Error::Unreachable { from: u, to: v })
    }

    fn serves_minute(&self, at: Minute) -> bool {
        !self.model.is_time_varying() || self.cache.borrow().hour == Some(hour_of_minute(at))
    }

    /// Edge ids of the time-minimal path from `u` to `v`.
    pub fn path_edges(&self, u: Vertex, v: Vertex) -> Result<Vec<usize>> {
        if u == v {
            return Ok(Vec::new());
        }
        let tree = self.reverse_tree(v);
        if tree.dist[u] == NONE {
            return Err(Error::Unreachable { from: u, to: v });
        }
        let mut out = Vec::new();
        let mut cur = u;
        while cur != v {
            let e = tree.link[cur] as usize;
            out.push(e);
            cur = self.net.edge(e).to;
        }
        Ok(out)
    }

    /// Vertex sequence and total seconds of the time-minimal path.
    pub fn shortest_path(&self, u: Vertex, v: Vertex, at: Minute) -> Result<(Vec<Vertex>, Secs)> {
        if !self.serves_minute(at) {
            let edge_secs = self.edge_times_at(hour_of_minute(at));
            let tree = dijkstra(&self.net, &edge_secs, v, true);
            let total = tree.dist(u).ok_or(Error::Unreachable { from: u, to: v })?;
            let mut path = vec![u];
            let mut cur = u;
            while cur != v {
                cur = self.net.edge(tree.link[cur] as usize).to;
                path.push(cur);
            }
            return Ok((path, total));
        }
        let edges = self.path_edges(u, v)?;
        let mut path = Vec::with_capacity(edges.len() + 1);
        path.push(u);
        let mut total = 0;
        for e in edges {
            total += self.edge_secs(e);
            path.push(self.net.edge(e).to);
        }
        Ok((path, total))
    }

    pub fn path_length_m(&self, u: Vertex, v: Vertex) -> Result<f64> {
        Ok(self
            .path_edges(u, v)?
            .iter()
            .map(|&e| self.net.edge(e).length_m)
            .sum())
    }
}

fn dijkstra(net: &RoadNetwork, edge_secs: &[Secs], root: Vertex, reverse: bool) -> PathTree {
    let n = net.num_vertices();
    let mut dist = vec![NONE; n];
    let mut link = vec![NONE; n];
    let mut heap = BinaryHeap::new();
    dist[root] = 0;
    heap.push(Reverse((0u32, root)));
    while let Some(Reverse((d, v))) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        let adj = if reverse { net.in_edges(v) } else { net.out_edges(v) };
        for &e in adj {
            let edge = net.edge(e);
            let w = if reverse { edge.from } else { edge.to };
            let nd = d.saturating_add(edge_secs[e] as u32);
            if nd < dist[w] {
                dist[w] = nd;
                link[w] = e as u32;
                heap.push(Reverse((nd, w)));
            }
        }
    }
    PathTree {
        root,
        reverse,
        dist,
        link,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Coord;

    fn line(len_m: f64) -> Arc<RoadNetwork> {
        let vertices = (0..3)
            .map(|i| (i.to_string(), Coord::new(0.0, i as f64 * 0.01)))
            .collect();
        let edges = vec![(0, 1, len_m), (1, 2, len_m), (1, 0, len_m), (2, 1, len_m)];
        Arc::new(RoadNetwork::from_raw(vertices, edges).unwrap())
    }

    #[test]
    fn line_path_and_total() {
        let r = Router::new(line(100.0), TravelTimeModel::ConstantSpeed { speed_mps: 10.0 }).unwrap();
        assert_eq!(r.shortest_path(0, 2, 0).unwrap(), (vec![0, 1, 2], 20));
        assert_eq!(r.shortest_path(1, 1, 0).unwrap(), (vec![1], 0));
        assert_eq!(r.tt(1, 1).unwrap(), 0);
    }

    #[test]
    fn constant_speed_edge_time() {
        let r = Router::new(line(1000.0), TravelTimeModel::ConstantSpeed { speed_mps: 10.0 }).unwrap();
        assert_eq!(r.tt(0, 1).unwrap(), 100);
    }

    #[test]
    fn speed_profile_half_speed_doubles_time() {
        let mut multipliers = [1.0; 24];
        multipliers[8] = 0.5;
        let model = TravelTimeModel::SpeedProfile {
            speed_mps: 10.0,
            multipliers,
        };
        let r = Router::new(line(1000.0), model).unwrap();
        assert_eq!(r.travel_time(0, 1, 7 * 60).unwrap(), 100);
        assert_eq!(r.travel_time(0, 1, 8 * 60).unwrap(), 200);
        r.set_time(8 * 60 + 5);
        assert_eq!(r.tt(0, 2).unwrap(), 400);
        r.set_time(9 * 60);
        assert_eq!(r.tt(0, 2).unwrap(), 200);
    }

    #[test]
    fn table_overrides_listed_edges() {
        let mut minutes = HashMap::new();
        minutes.insert((0, 1, 0), 2.0);
        let model = TravelTimeModel::Table {
            minutes,
            fallback_speed_mps: 10.0,
        };
        let r = Router::new(line(100.0), model).unwrap();
        assert_eq!(r.tt(0, 1).unwrap(), 120);
        assert_eq!(r.tt(1, 0).unwrap(), 10);
    }

    #[test]
    fn rejects_non_positive_speed() {
        assert!(Router::new(line(10.0), TravelTimeModel::ConstantSpeed { speed_mps: 0.0 }).is_err());
    }

    #[test]
    fn reverse_and_forward_trees_agree() {
        let net = Arc::new(RoadNetwork::grid(5, 6, 300.0, Coord::new(40.7, -74.0)).unwrap());
        let r = Router::new(net.clone(), TravelTimeModel::default()).unwrap();
        for u in 0..net.num_vertices() {
            let rev = r.reverse_tree(u);
            for v in 0..net.num_vertices() {
                assert_eq!(rev.dist(v).unwrap(), r.tt(v, u).unwrap());
            }
        }
    }
}
