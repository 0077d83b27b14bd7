//! Directed road graph: loading, cleaning, coordinate matching and the
//! graph-level quantities used by charger placement and the idle-time model.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Index of a vertex in a cleaned network, dense in `0..num_vertices`.
pub type Vertex = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub lat: f64,
    pub lon: f64,
}

impl Coord {
    pub fn new(lat: f64, lon: f64) -> Self {
        Coord { lat, lon }
    }
}

/// Great-circle distance in meters.
pub fn haversine(p1: Coord, p2: Coord) -> f64 {
    let (phi1, phi2) = (p1.lat.to_radians(), p2.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (p2.lon - p1.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: Vertex,
    pub to: Vertex,
    pub length_m: f64,
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    coords: Vec<Coord>,
    labels: Vec<String>,
    edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl RoadNetwork {
    /// Build a cleaned network from raw vertices and edges.
    ///
    /// Vertices sharing identical coordinates are merged, self-loops are
    /// dropped, parallel edges keep the shortest length, and only the largest
    /// strongly connected component survives. The last rule removes dead-ends,
    /// pure sources and isolated islands in one pass.
    pub fn from_raw(vertices: Vec<(String, Coord)>, raw_edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        for (label, c) in &vertices {
            if !c.lat.is_finite() || !c.lon.is_finite() {
                return Err(Error::Invalid(format!("vertex {label} has non-finite coordinates")));
            }
        }
        // merge duplicate coordinates
        let mut canonical: HashMap<(u64, u64), usize> = HashMap::new();
        let mut remap = Vec::with_capacity(vertices.len());
        for (i, (_, c)) in vertices.iter().enumerate() {
            let key = (c.lat.to_bits(), c.lon.to_bits());
            remap.push(*canonical.entry(key).or_insert(i));
        }
        let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(u, v, len) in &raw_edges {
            if u >= vertices.len() || v >= vertices.len() {
                return Err(Error::Invalid(format!("edge ({u},{v}) references a missing vertex")));
            }
            if !(len.is_finite() && len >= 0.0) {
                return Err(Error::Invalid(format!("edge ({u},{v}) has invalid length {len}")));
            }
            let (u, v) = (remap[u], remap[v]);
            if u == v {
                continue;
            }
            best.entry((u, v))
                .and_modify(|l| *l = l.min(len))
                .or_insert(len);
        }

        let n = vertices.len();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut inc: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in best.keys() {
            out[u].push(v);
            inc[v].push(u);
        }
        let keep = largest_scc(&out, &inc);
        let mut new_id = vec![usize::MAX; n];
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for (old, &k) in keep.iter().enumerate() {
            if k {
                new_id[old] = coords.len();
                coords.push(vertices[old].1);
                labels.push(vertices[old].0.clone());
            }
        }
        if coords.len() < 2 {
            return Err(Error::Empty("network has no strongly connected part after cleaning".into()));
        }
        let edges: Vec<Edge> = best
            .iter()
            .filter(|((u, v), _)| keep[*u] && keep[*v])
            .map(|(&(u, v), &length_m)| Edge {
                from: new_id[u],
                to: new_id[v],
                length_m,
            })
            .collect();
        Ok(Self::assemble(coords, labels, edges))
    }

    fn assemble(coords: Vec<Coord>, labels: Vec<String>, mut edges: Vec<Edge>) -> Self {
        edges.sort_by_key(|e| (e.from, e.to));
        let n = coords.len();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            out_edges[e.from].push(i);
            in_edges[e.to].push(i);
        }
        RoadNetwork {
            coords,
            labels,
            edges,
            out_edges,
            in_edges,
        }
    }

    /// Bidirectional rectangular grid, vertex id = row * cols + col.
    pub fn grid(rows: usize, cols: usize, spacing_m: f64, origin: Coord) -> Result<Self> {
        if rows * cols < 2 || spacing_m <= 0.0 {
            return Err(Error::Invalid("grid needs at least two vertices and positive spacing".into()));
        }
        let dlat = (spacing_m / EARTH_RADIUS_M).to_degrees();
        let dlon = dlat / origin.lat.to_radians().cos();
        let mut vertices = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let coord = Coord::new(origin.lat + r as f64 * dlat, origin.lon + c as f64 * dlon);
                vertices.push((format!("{r}_{c}"), coord));
            }
        }
        let mut edges = Vec::new();
        let id = |r: usize, c: usize| r * cols + c;
        for r in 0..rows {
            for c in 0..cols {
                let mut link = |a: usize, b: usize| {
                    let len = haversine(vertices[a].1, vertices[b].1);
                    edges.push((a, b, len));
                    edges.push((b, a, len));
                };
                if c + 1 < cols {
                    link(id(r, c), id(r, c + 1));
                }
                if r + 1 < rows {
                    link(id(r, c), id(r + 1, c));
                }
            }
        }
        Self::from_raw(vertices, edges)
    }

    pub fn num_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn coord(&self, v: Vertex) -> Coord {
        self.coords[v]
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    /// Identifier of the vertex in the source file.
    pub fn label(&self, v: Vertex) -> &str {
        &self.labels[v]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, i: usize) -> &Edge {
        &self.edges[i]
    }

    pub fn out_edges(&self, v: Vertex) -> &[usize] {
        &self.out_edges[v]
    }

    pub fn in_edges(&self, v: Vertex) -> &[usize] {
        &self.in_edges[v]
    }

    pub fn find_edge(&self, from: Vertex, to: Vertex) -> Option<usize> {
        self.out_edges[from].iter().copied().find(|&e| self.edges[e].to == to)
    }

    /// Sorted neighbor lists of the undirected projection (no self-loops).
    pub fn undirected_neighbors(&self) -> Vec<Vec<Vertex>> {
        let mut nb: Vec<Vec<Vertex>> = vec![Vec::new(); self.num_vertices()];
        for e in &self.edges {
            nb[e.from].push(e.to);
            nb[e.to].push(e.from);
        }
        for list in &mut nb {
            list.sort_unstable();
            list.dedup();
        }
        nb
    }

    /// Vertex closest to `p` by haversine distance, lowest id on ties.
    pub fn nearest_vertex(&self, p: Coord) -> Vertex {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &c) in self.coords.iter().enumerate() {
            let d = haversine(p, c);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Closeness centrality on hop distances of the undirected projection.
    pub fn closeness_centrality(&self) -> Result<Vec<f64>> {
        closeness_centrality(&self.undirected_neighbors())
    }

    /// Renormalized adjacency D^-1/2 (A + I) D^-1/2 of the undirected projection.
    pub fn normalized_adjacency(&self) -> SparseMatrix {
        normalized_adjacency(&self.undirected_neighbors())
    }

    pub fn load_graphml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_graphml(&text)
    }

    /// Parse GraphML with node attributes `x` (longitude) and `y` (latitude)
    /// and edge attribute `length` in meters.
    pub fn parse_graphml(text: &str) -> Result<Self> {
        let doc = roxmltree::Document::parse(text).map_err(|e| Error::Parse(format!("graphml: {e}")))?;
        let mut key_names: HashMap<String, String> = HashMap::new();
        for key in doc.descendants().filter(|n| n.has_tag_name("key")) {
            if let (Some(id), Some(name)) = (key.attribute("id"), key.attribute("attr.name")) {
                key_names.insert(id.to_string(), name.to_string());
            }
        }
        let data_of = |node: roxmltree::Node, name: &str| -> Option<String> {
            node.children()
                .filter(|c| c.has_tag_name("data"))
                .find(|c| {
                    c.attribute("key")
                        .map(|k| key_names.get(k).map(String::as_str).unwrap_or(k) == name)
                        .unwrap_or(false)
                })
                .map(|c| c.text().unwrap_or("").trim().to_string())
        };
        let parse_f = |s: Option<String>, what: &str, owner: &str| -> Result<f64> {
            let s = s.ok_or_else(|| Error::Parse(format!("{owner} is missing attribute {what}")))?;
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("{owner}: attribute {what} is not a number: {s:?}")))
        };

        let mut index: HashMap<String, usize> = HashMap::new();
        let mut vertices = Vec::new();
        for node in doc.descendants().filter(|n| n.has_tag_name("node")) {
            let id = node
                .attribute("id")
                .ok_or_else(|| Error::Parse("node without id".into()))?
                .to_string();
            let owner = format!("node {id}");
            let lon = parse_f(data_of(node, "x"), "x", &owner)?;
            let lat = parse_f(data_of(node, "y"), "y", &owner)?;
            if index.insert(id.clone(), vertices.len()).is_some() {
                return Err(Error::Parse(format!("duplicate node id {id}")));
            }
            vertices.push((id, Coord::new(lat, lon)));
        }
        let mut edges = Vec::new();
        for edge in doc.descendants().filter(|n| n.has_tag_name("edge")) {
            let src = edge.attribute("source").ok_or_else(|| Error::Parse("edge without source".into()))?;
            let dst = edge.attribute("target").ok_or_else(|| Error::Parse("edge without target".into()))?;
            let owner = format!("edge {src}->{dst}");
            let u = *index.get(src).ok_or_else(|| Error::Parse(format!("{owner}: unknown source")))?;
            let v = *index.get(dst).ok_or_else(|| Error::Parse(format!("{owner}: unknown target")))?;
            let len = parse_f(data_of(edge, "length"), "length", &owner)?;
            edges.push((u, v, len));
        }
        if vertices.is_empty() {
            return Err(Error::Empty("graphml contains no nodes".into()));
        }
        Self::from_raw(vertices, edges)
    }

    pub fn to_graphml(&self) -> String {
        let mut s = String::new();
        s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
        s.push_str("  <key id=\"d0\" for=\"node\" attr.name=\"y\" attr.type=\"double\"/>\n");
        s.push_str("  <key id=\"d1\" for=\"node\" attr.name=\"x\" attr.type=\"double\"/>\n");
        s.push_str("  <key id=\"d2\" for=\"edge\" attr.name=\"length\" attr.type=\"double\"/>\n");
        s.push_str("  <graph edgedefault=\"directed\">\n");
        for (i, c) in self.coords.iter().enumerate() {
            let _ = writeln!(
                s,
                "    <node id=\"{i}\"><data key=\"d0\">{}</data><data key=\"d1\">{}</data></node>",
                c.lat, c.lon
            );
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "    <edge source=\"{}\" target=\"{}\"><data key=\"d2\">{}</data></edge>",
                e.from, e.to, e.length_m
            );
        }
        s.push_str("  </graph>\n</graphml>\n");
        s
    }

    pub fn write_graphml(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_graphml()).map_err(|e| Error::io(path, e))
    }
}

/// Mask of the vertices in the largest strongly connected component
/// (lowest minimum vertex id wins ties between equally sized components).
fn largest_scc(out: &[Vec<usize>], inc: &[Vec<usize>]) -> Vec<bool> {
    let n = out.len();
    // Kosaraju, iterative: finish order on the forward graph.
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for s in 0..n {
        if visited[s] {
            continue;
        }
        visited[s] = true;
        let mut stack = vec![(s, 0usize)];
        while let Some(&mut (v, ref mut i)) = stack.last_mut() {
            if *i < out[v].len() {
                let w = out[v][*i];
                *i += 1;
                if !visited[w] {
                    visited[w] = true;
                    stack.push((w, 0));
                }
            } else {
                order.push(v);
                stack.pop();
            }
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut sizes: Vec<(usize, usize)> = Vec::new();
    for &s in order.iter().rev() {
        if comp[s] != usize::MAX {
            continue;
        }
        let c = sizes.len();
        let mut size = 0;
        let mut min_v = s;
        comp[s] = c;
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            size += 1;
            min_v = min_v.min(v);
            for &w in &inc[v] {
                if comp[w] == usize::MAX {
                    comp[w] = c;
                    stack.push(w);
                }
            }
        }
        sizes.push((size, min_v));
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(c, _)| c);
    comp.iter().map(|&c| Some(c) == best).collect()
}

/// Closeness centrality from undirected neighbor lists (hop distances).
pub fn closeness_centrality(neighbors: &[Vec<Vertex>]) -> Result<Vec<f64>> {
    let n = neighbors.len();
    if n == 0 {
        return Err(Error::Empty("closeness centrality of an empty graph".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mut scores = Vec::with_capacity(n);
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[s] = 0;
        queue.clear();
        queue.push_back(s);
        let mut total = 0usize;
        let mut reached = 1usize;
        while let Some(v) = queue.pop_front() {
            for &w in &neighbors[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    total += dist[w];
                    reached += 1;
                    queue.push_back(w);
                }
            }
        }
        if reached != n {
            return Err(Error::Invalid("closeness centrality needs a connected graph".into()));
        }
        scores.push((n - 1) as f64 / total as f64);
    }
    Ok(scores)
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseMatrix {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col[k], self.val[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map(|(_, v)| v).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// Dense product `self * x` where `x` is row-major `n x cols`.
    pub fn mul_dense(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n * cols];
        for i in 0..self.n {
            let dst = &mut out[i * cols..(i + 1) * cols];
            for (j, a) in self.row(i) {
                let src = &x[j * cols..(j + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }
}

pub fn normalized_adjacency(neighbors: &[Vec<Vertex>]) -> SparseMatrix {
    let n = neighbors.len();
    let deg: Vec<f64> = neighbors.iter().map(|nb| nb.len() as f64 + 1.0).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col = Vec::new();
    let mut val = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let mut cols: Vec<usize> = neighbors[i].iter().copied().filter(|&j| j != i).collect();
        cols.push(i);
        cols.sort_unstable();
        cols.dedup();
        for j in cols {
            col.push(j);
            val.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
        row_ptr.push(col.len());
    }
    SparseMatrix { n, row_ptr, col, val }
}
