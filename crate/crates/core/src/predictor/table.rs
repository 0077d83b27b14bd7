use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use super::{FleetSnapshot, IdlePredictor, IdleSample, TIME_FEATURES};
use crate::clock::{Secs, SimClock};
use crate::error::{Error, Result};
use crate::network::Vertex;

pub const TABLE_MAGIC: &[u8; 8] = b"EVPTBL1\0";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Bucket {
    sum: f64,
    count: u64,
}

impl Bucket {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

/// Mean idle time bucketed by (vertex, hour, weekend flag) with fallbacks
/// to the graph-wide (hour, weekend flag) bucket and then the global mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    num_vertices: usize,
    vertex: BTreeMap<(u32, u8, u8), Bucket>,
    hourly: BTreeMap<(u8, u8), Bucket>,
    global: Bucket,
}

fn cyclic_index(sin: f64, cos: f64, period: u32) -> u32 {
    let a = sin.atan2(cos);
    ((a / TAU * period as f64).round() as i64).rem_euclid(period as i64) as u32
}

/// Hour of day and weekend flag recovered from the encoded time features.
pub fn decode_time(time: &[f64; TIME_FEATURES]) -> (u32, bool) {
    let hour = cyclic_index(time[0], time[1], 24);
    let weekday = cyclic_index(time[4], time[5], 7);
    (hour, weekday >= 5)
}

impl LookupTable {
    pub fn build(num_vertices: usize, samples: &[IdleSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no idle samples to build a table from".into()));
        }
        let mut t = LookupTable {
            num_vertices,
            vertex: BTreeMap::new(),
            hourly: BTreeMap::new(),
            global: Bucket::default(),
        };
        for s in samples {
            let (hour, weekend) = decode_time(&s.features.time);
            let (h, w) = (hour as u8, weekend as u8);
            let v = s.features.location as u32;
            t.vertex.entry((v, h, w)).or_default().add(s.idle_s);
            t.hourly.entry((h, w)).or_default().add(s.idle_s);
            t.global.add(s.idle_s);
        }
        Ok(t)
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn sample_count(&self) -> u64 {
        self.global.count
    }

    pub fn lookup(&self, v: Vertex, hour: u32, weekend: bool) -> f64 {
        let (h, w) = (hour as u8, weekend as u8);
        let b = self
            .vertex
            .get(&(v as u32, h, w))
            .or_else(|| self.hourly.get(&(h, w)))
            .unwrap_or(&self.global);
        b.mean().max(0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&(self.num_vertices as u32).to_le_bytes());
        out.extend_from_slice(&self.global.sum.to_le_bytes());
        out.extend_from_slice(&self.global.count.to_le_bytes());
        out.extend_from_slice(&(self.hourly.len() as u32).to_le_bytes());
        for (&(h, w), b) in &self.hourly {
            out.extend_from_slice(&[h, w]);
            out.extend_from_slice(&b.sum.to_le_bytes());
            out.extend_from_slice(&b.count.to_le_bytes());
        }
        out.extend_from_slice(&(self.vertex.len() as u32).to_le_bytes());
        for (&(v, h, w), b) in &self.vertex {
            out.extend_from_slice(&v.to_le_bytes());
            out.extend_from_slice(&[h, w]);
            out.extend_from_slice(&b.sum.to_le_bytes());
            out.extend_from_slice(&b.count.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { b: bytes, at: 0 };
        if r.take(8)? != TABLE_MAGIC {
            return Err(Error::Parse("not an idle-time table file".into()));
        }
        let num_vertices = r.u32()? as usize;
        let global = Bucket {
            sum: r.f64()?,
            count: r.u64()?,
        };
        if global.count == 0 {
            return Err(Error::Empty("idle-time table holds no samples".into()));
        }
        let mut hourly = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.take(2)?;
            let key = (k[0], k[1]);
            let b = Bucket {
                sum: r.f64()?,
                count: r.u64()?,
            };
            if key.0 >= 24 || key.1 > 1 || b.count == 0 {
                return Err(Error::Parse("bad hourly bucket in table".into()));
            }
            hourly.insert(key, b);
        }
        let mut vertex = BTreeMap::new();
        for _ in 0..r.u32()? {
            let v = r.u32()?;
            let k = r.take(2)?;
            let b = Bucket {
                sum: r.f64()?,
                count: r.u64()?,
            };
            if v as usize >= num_vertices || k[0] >= 24 || k[1] > 1 || b.count == 0 {
                return Err(Error::Parse("bad vertex bucket in table".into()));
            }
            vertex.insert((v, k[0], k[1]), b);
        }
        if r.at != bytes.len() {
            return Err(Error::Parse("trailing bytes after table".into()));
        }
        Ok(LookupTable {
            num_vertices,
            vertex,
            hourly,
            global,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .b
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Parse("truncated table file".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub struct TablePredictor {
    table: LookupTable,
    clock: SimClock,
}

impl TablePredictor {
    pub fn new(table: LookupTable, clock: SimClock) -> Self {
        TablePredictor { table, clock }
    }

    pub fn table(&self) -> &LookupTable {
        &self.table
    }
}

impl IdlePredictor for TablePredictor {
    fn begin_step(&mut self, _: &FleetSnapshot) {}

    fn predict(&mut self, location: Vertex, at_s: Secs) -> f64 {
        self.table
            .lookup(location, self.clock.hour_of_day(at_s), self.clock.is_weekend(at_s))
    }
}
