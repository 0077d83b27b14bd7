use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FleetSnapshot, IdleFeatures, IdlePredictor, TIME_FEATURES};
use crate::clock::{Secs, SimClock};
use crate::error::{Error, Result};
use crate::network::{SparseMatrix, Vertex};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"EVPGCN01";
pub const LAYER_NAMES: [&str; 5] = ["graphconv1", "graphconv2", "dense1", "dense2", "output"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    /// (inputs, outputs); the bias has `outputs` entries.
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    pub num_vertices: usize,
    pub time_features: usize,
    pub fleet_scale: f64,
    pub demand_scale: f64,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; cols],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.w[r * self.cols..(r + 1) * self.cols]
    }

    /// `x * W + b` for a single input vector.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (r, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(&mut out, xi, self.row(r));
            }
        }
        out
    }

    /// `X * W + b` for row-major `n x rows` input.
    fn apply_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.cols);
        for i in 0..n {
            out.extend(self.apply(&x[i * self.rows..(i + 1) * self.rows]));
        }
        out
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in dst.iter_mut().zip(x) {
        *d += a * s;
    }
}

fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Two graph convolutions followed by a three-layer dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnWeights {
    pub num_vertices: usize,
    pub fleet_scale: f64,
    pub demand_scale: f64,
    pub gc1: Layer,
    pub gc2: Layer,
    pub dense1: Layer,
    pub dense2: Layer,
    pub output: Layer,
}

impl GcnWeights {
    pub fn zeros(n: usize, f1: usize, f2: usize, d1: usize, d2: usize) -> Self {
        GcnWeights {
            num_vertices: n,
            fleet_scale: 1.0,
            demand_scale: 1.0,
            gc1: Layer::zeros(3, f1),
            gc2: Layer::zeros(f1, f2),
            dense1: Layer::zeros(n * f2 + TIME_FEATURES, d1),
            dense2: Layer::zeros(d1, d2),
            output: Layer::zeros(d2, 1),
        }
    }

    /// Uniform Glorot-style initialisation from a seed.
    pub fn seeded(n: usize, f1: usize, f2: usize, d1: usize, d2: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(n, f1, f2, d1, d2);
        for l in w.layers_mut() {
            let a = (6.0 / (l.rows + l.cols) as f64).sqrt();
            for x in l.w.iter_mut() {
                *x = rng.random_range(-a..a);
            }
            for x in l.b.iter_mut() {
                *x = rng.random_range(-0.1..0.1);
            }
        }
        w.output.b[0] = 300.0;
        w
    }

    fn layers(&self) -> [&Layer; 5] {
        [&self.gc1, &self.gc2, &self.dense1, &self.dense2, &self.output]
    }

    fn layers_mut(&mut self) -> [&mut Layer; 5] {
        [
            &mut self.gc1,
            &mut self.gc2,
            &mut self.dense1,
            &mut self.dense2,
            &mut self.output,
        ]
    }

    pub fn header(&self) -> WeightsHeader {
        WeightsHeader {
            num_vertices: self.num_vertices,
            time_features: TIME_FEATURES,
            fleet_scale: self.fleet_scale,
            demand_scale: self.demand_scale,
            layers: self
                .layers()
                .iter()
                .zip(LAYER_NAMES)
                .map(|(l, name)| LayerSpec {
                    name: name.to_string(),
                    shape: [l.rows, l.cols],
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_header(&self.header())?;
        for l in self.layers() {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.cols {
                return Err(Error::Invalid("layer buffer length differs from its shape".into()));
            }
            if l.w.iter().chain(&l.b).any(|x| !x.is_finite()) {
                return Err(Error::Invalid("non-finite weight".into()));
            }
        }
        Ok(())
    }

    /// Serialise: magic, u32 header length, JSON header, f32 blocks
    /// (weights then bias per layer, row-major), CRC32 of everything before it.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for l in self.layers() {
            for x in l.w.iter().chain(&l.b) {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(Error::Parse("not a weight file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Parse("weight file checksum mismatch".into()));
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let hjson = body
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Parse("weight header overruns file".into()))?;
        let header: WeightsHeader = serde_json::from_slice(hjson)?;
        check_header(&header)?;
        let mut floats = body[12 + hlen..].chunks_exact(4);
        if !floats.remainder().is_empty() {
            return Err(Error::Parse("weight payload is not a whole number of floats".into()));
        }
        let expected: usize = header.layers.iter().map(|l| l.shape[0] * l.shape[1] + l.shape[1]).sum();
        if floats.len() != expected {
            return Err(Error::Parse(format!(
                "weight payload has {} floats, header declares {expected}",
                floats.len()
            )));
        }
        let mut layers: Vec<Layer> = Vec::with_capacity(5);
        for spec in &header.layers {
            let [rows, cols] = spec.shape;
            let mut take = |k: usize| -> Vec<f64> {
                (&mut floats)
                    .take(k)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            };
            let w = take(rows * cols);
            let b = take(cols);
            layers.push(Layer { rows, cols, w, b });
        }
        let mut it = layers.into_iter();
        let mut next = || it.next().unwrap();
        let w = GcnWeights {
            num_vertices: header.num_vertices,
            fleet_scale: header.fleet_scale,
            demand_scale: header.demand_scale,
            gc1: next(),
            gc2: next(),
            dense1: next(),
            dense2: next(),
            output: next(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

fn check_header(h: &WeightsHeader) -> Result<()> {
    let bad = |m: String| Err(Error::Parse(format!("weight header: {m}")));
    if h.time_features != TIME_FEATURES {
        return bad(format!("expected {TIME_FEATURES} time features, got {}", h.time_features));
    }
    if h.num_vertices == 0 {
        return bad("zero vertices".into());
    }
    if !(h.fleet_scale > 0.0 && h.fleet_scale.is_finite() && h.demand_scale > 0.0 && h.demand_scale.is_finite()) {
        return bad("feature scales must be positive".into());
    }
    let names: Vec<&str> = h.layers.iter().map(|l| l.name.as_str()).collect();
    if names != LAYER_NAMES {
        return bad(format!("layers must be {LAYER_NAMES:?}, got {names:?}"));
    }
    let s: Vec<[usize; 2]> = h.layers.iter().map(|l| l.shape).collect();
    if s.iter().flatten().any(|&d| d == 0) {
        return bad("zero-sized layer".into());
    }
    let chain = s[0][0] == 3
        && s[1][0] == s[0][1]
        && s[2][0] == h.num_vertices * s[1][1] + TIME_FEATURES
        && s[3][0] == s[2][1]
        && s[4][0] == s[3][1]
        && s[4][1] == 1;
    if !chain {
        return bad(format!("layer shapes {s:?} do not chain for {} vertices", h.num_vertices));
    }
    Ok(())
}

/// Dense head on a flattened `n x f2` activation plus time features.
fn head(w: &GcnWeights, mut d1: Vec<f64>) -> f64 {
    relu(&mut d1);
    let mut d2 = w.dense2.apply(&d1);
    relu(&mut d2);
    let out = w.output.apply(&d2)[0];
    if out.is_finite() {
        out.max(0.0)
    } else {
        0.0
    }
}

fn graph_layers(w: &GcnWeights, x: &[f64], adj: &SparseMatrix) -> Vec<f64> {
    let n = w.num_vertices;
    let ax = adj.mul_dense(x, 3);
    let mut h1 = w.gc1.apply_rows(&ax, n);
    relu(&mut h1);
    let ah1 = adj.mul_dense(&h1, w.gc1.cols);
    let mut h2 = w.gc2.apply_rows(&ah1, n);
    relu(&mut h2);
    h2
}

/// Predicted idle seconds for one feature set, computed layer by layer.
pub fn gcn_forward(w: &GcnWeights, f: &IdleFeatures, adj: &SparseMatrix) -> Result<f64> {
    let n = w.num_vertices;
    if adj.n != n || f.num_vertices() != n || f.demand_mean.len() != n {
        return Err(Error::Invalid(format!(
            "shape mismatch: weights for {n} vertices, adjacency {}, features {}",
            adj.n,
            f.num_vertices()
        )));
    }
    let x = f.node_matrix(w.fleet_scale, w.demand_scale);
    let mut z = graph_layers(w, &x, adj);
    z.extend_from_slice(&f.time);
    Ok(head(w, w.dense1.apply(&z)))
}

/// Reuses a per-step base pass with an all-zero one-hot and only recomputes
/// the two-hop neighbourhood of each queried location.
pub struct GcnPredictor {
    weights: Arc<GcnWeights>,
    adj: SparseMatrix,
    clock: SimClock,
    /// Â·X0·W1 + b1 before activation.
    base_pre1: Vec<f64>,
    base_h1: Vec<f64>,
    base_h2: Vec<f64>,
    /// Dense-1 pre-activation from the base graph output, without time terms.
    base_d1: Vec<f64>,
    by_location: HashMap<Vertex, Vec<f64>>,
    ready: bool,
}

impl GcnPredictor {
    pub fn new(weights: Arc<GcnWeights>, adj: SparseMatrix, clock: SimClock) -> Result<Self> {
        weights.validate()?;
        if adj.n != weights.num_vertices {
            return Err(Error::Invalid(format!(
                "weights expect {} vertices, network has {}",
                weights.num_vertices, adj.n
            )));
        }
        Ok(GcnPredictor {
            weights,
            adj,
            clock,
            base_pre1: Vec::new(),
            base_h1: Vec::new(),
            base_h2: Vec::new(),
            base_d1: Vec::new(),
            by_location: HashMap::new(),
            ready: false,
        })
    }

    fn location_d1(&self, loc: Vertex) -> Vec<f64> {
        let w = &*self.weights;
        let (f1, f2) = (w.gc1.cols, w.gc2.cols);
        // one-hot at loc adds Â[:, loc] * W1[0, :] to layer-1 inputs (Â is symmetric)
        let w1_0 = w.gc1.row(0);
        let mut h1_delta: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, a) in self.adj.row(loc) {
            let mut h = self.base_pre1[i * f1..(i + 1) * f1].to_vec();
            axpy(&mut h, a, w1_0);
            relu(&mut h);
            for (hv, bv) in h.iter_mut().zip(&self.base_h1[i * f1..(i + 1) * f1]) {
                *hv -= bv;
            }
            h1_delta.push((i, h));
        }
        let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
        for (i, dh) in &h1_delta {
            for (j, a) in self.adj.row(*i) {
                let acc = rows.entry(j).or_insert_with(|| vec![0.0; f1]);
                axpy(acc, a, dh);
            }
        }
        let mut d1 = self.base_d1.clone();
        let mut touched: Vec<usize> = rows.keys().copied().collect();
        touched.sort_unstable();
        for j in touched {
            let delta = &rows[&j];
            // recover layer-2 pre-activation from the cached base terms
            let mut pre = w.gc2.b.clone();
            for (k, a) in self.adj.row(j) {
                axpy_row_mul(&mut pre, a, &self.base_h1[k * f1..(k + 1) * f1], &w.gc2);
            }
            axpy_row_mul(&mut pre, 1.0, delta, &w.gc2);
            relu(&mut pre);
            let base = &self.base_h2[j * f2..(j + 1) * f2];
            for (c, (&hv, &bv)) in pre.iter().zip(base).enumerate() {
                let dv = hv - bv;
                if dv != 0.0 {
                    axpy(&mut d1, dv, w.dense1.row(j * f2 + c));
                }
            }
        }
        d1
    }
}

/// `dst += a * (x * L.W)`.
fn axpy_row_mul(dst: &mut [f64], a: f64, x: &[f64], l: &Layer) {
    for (r, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(dst, a * xi, l.row(r));
        }
    }
}

impl IdlePredictor for GcnPredictor {
    fn begin_step(&mut self, snap: &FleetSnapshot) {
        let w = &*self.weights;
        let n = w.num_vertices;
        let base = IdleFeatures {
            location: 0,
            fleet_capacity: snap.fleet_seats.clone(),
            demand_mean: snap.demand_mean.clone(),
            time: [0.0; TIME_FEATURES],
        };
        let mut x = base.node_matrix(w.fleet_scale, w.demand_scale);
        x[0] = 0.0;
        let ax = self.adj.mul_dense(&x, 3);
        self.base_pre1 = w.gc1.apply_rows(&ax, n);
        self.base_h1 = self.base_pre1.clone();
        relu(&mut self.base_h1);
        let ah1 = self.adj.mul_dense(&self.base_h1, w.gc1.cols);
        self.base_h2 = w.gc2.apply_rows(&ah1, n);
        relu(&mut self.base_h2);
        let mut z = self.base_h2.clone();
        z.extend_from_slice(&[0.0; TIME_FEATURES]);
        self.base_d1 = w.dense1.apply(&z);
        self.by_location.clear();
        self.ready = true;
    }

    fn predict(&mut self, location: Vertex, at_s: Secs) -> f64 {
        if !self.ready {
            let n = self.weights.num_vertices;
            self.begin_step(&FleetSnapshot::empty(n, at_s));
        }
        if !self.by_location.contains_key(&location) {
            let d1 = self.location_d1(location);
            self.by_location.insert(location, d1);
        }
        let w = &*self.weights;
        let mut d1 = self.by_location[&location].clone();
        let t0 = w.num_vertices * w.gc2.cols;
        for (k, &t) in self.clock.time_features(at_s).iter().enumerate() {
            axpy(&mut d1, t, w.dense1.row(t0 + k));
        }
        head(w, d1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::normalized_adjacency;

    fn line_adj(n: usize) -> SparseMatrix {
        let nb: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        normalized_adjacency(&nb)
    }

    fn feats(n: usize, loc: usize, seed: u64, t: Secs) -> IdleFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snap = FleetSnapshot {
            fleet_seats: (0..n).map(|_| rng.random_range(0..8) as f64).collect(),
            demand_mean: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
            now_s: t,
        };
        IdleFeatures::build(loc, &snap, &SimClock::new(0), t).unwrap()
    }

    #[test]
    fn zero_weights_predict_zero() {
        let w = GcnWeights::zeros(5, 4, 4, 8, 8);
        let f = feats(5, 2, 1, 1000);
        assert_eq!(gcn_forward(&w, &f, &line_adj(5)).unwrap(), 0.0);
    }

    #[test]
    fn two_vertex_hand_computed() {
        // Â = [[.5,.5],[.5,.5]] for a single undirected edge with self-loops.
        let adj = line_adj(2);
        let mut w = GcnWeights::zeros(2, 1, 1, 1, 1);
        w.gc1.w = vec![1.0, 1.0, 0.0];
        w.gc1.b = vec![-1.0];
        w.gc2.w = vec![2.0];
        w.gc2.b = vec![0.5];
        w.dense1.w = vec![1.0, 3.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0];
        w.dense2.w = vec![2.0];
        w.dense2.b = vec![-1.0];
        w.output.w = vec![100.0];
        w.output.b = vec![7.0];
        let snap = FleetSnapshot {
            fleet_seats: vec![1.0, 3.0],
            demand_mean: vec![0.0, 0.0],
            now_s: 0,
        };
        // 00:15 Monday: minute features (sin .25 turn, cos .25 turn) = (1, 0)
        let f = IdleFeatures::build(0, &snap, &SimClock::new(0), 15 * 60).unwrap();
        // X·W1 = [1+1, 0+3] = [2, 3]; Â·(XW1) = [2.5, 2.5]; -1 => [1.5, 1.5]
        // Â·H1 = [1.5, 1.5]; *2 + .5 => [3.5, 3.5]
        // dense1: 3.5*1 + 3.5*3 + hour_sin*0 + hour_cos*10 = 14 + 10 = 24
        // dense2: 24*2 - 1 = 47; output 47*100 + 7 = 4707
        let got = gcn_forward(&w, &f, &adj).unwrap();
        assert!((got - 4707.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn deterministic_and_non_negative() {
        let adj = line_adj(6);
        let mut w = GcnWeights::seeded(6, 4, 3, 8, 5, 9);
        w.output.b[0] = -1e6;
        let f = feats(6, 3, 2, 5000);
        assert_eq!(gcn_forward(&w, &f, &adj).unwrap(), 0.0);
        let w = GcnWeights::seeded(6, 4, 3, 8, 5, 9);
        let a = gcn_forward(&w, &f, &adj).unwrap();
        assert_eq!(a, gcn_forward(&w, &f, &adj).unwrap());
        assert!(a.is_finite() && a >= 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let w = GcnWeights::zeros(5, 4, 4, 8, 8);
        assert!(gcn_forward(&w, &feats(6, 0, 1, 0), &line_adj(6)).is_err());
        assert!(GcnPredictor::new(Arc::new(w), line_adj(4), SimClock::new(0)).is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let w = GcnWeights::seeded(7, 4, 3, 8, 5, 3);
        let bytes = w.to_bytes().unwrap();
        let back = GcnWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back.header(), w.header());
        for (a, b) in back.dense1.w.iter().zip(&w.dense1.w) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(GcnWeights::from_bytes(&bad).is_err());
        assert!(GcnWeights::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn incremental_matches_naive() {
        let n = 9;
        let adj = line_adj(n);
        let w = GcnWeights::seeded(n, 5, 4, 12, 6, 11);
        let clock = SimClock::new(2);
        let mut p = GcnPredictor::new(Arc::new(w.clone()), adj.clone(), clock).unwrap();
        for step in 0..3u64 {
            let f0 = feats(n, 0, 100 + step, 0);
            let snap = FleetSnapshot {
                fleet_seats: f0.fleet_capacity.clone(),
                demand_mean: f0.demand_mean.clone(),
                now_s: 0,
            };
            p.begin_step(&snap);
            for loc in 0..n {
                for t in [0, 7_777, 90_000 + step as Secs * 3_333] {
                    let f = IdleFeatures::build(loc, &snap, &clock, t).unwrap();
                    let naive = gcn_forward(&w, &f, &adj).unwrap();
                    let fast = p.predict(loc, t);
                    assert!((naive - fast).abs() < 1e-9 * naive.abs().max(1.0), "{loc} {t}: {naive} vs {fast}");
                }
            }
        }
    }
}
