use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::clock::{Secs, SimClock};
use crate::error::{Error, Result};
use crate::network::Vertex;

pub const TIME_FEATURES: usize = 6;
pub const SAMPLE_MAGIC: &[u8; 8] = b"EVPSMP1\0";
const HEADER_LEN: u64 = 8 + 4 + 8;

/// Per-vertex fleet and demand arrays frozen at the start of a control step.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetSnapshot {
    /// Vacant seats of non-charging vehicles, summed per vertex.
    pub fleet_seats: Vec<f64>,
    /// Mean requests per minute over the last hour, per vertex.
    pub demand_mean: Vec<f64>,
    pub now_s: Secs,
}

impl FleetSnapshot {
    pub fn empty(n: usize, now_s: Secs) -> Self {
        FleetSnapshot {
            fleet_seats: vec![0.0; n],
            demand_mean: vec![0.0; n],
            now_s,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.fleet_seats.len()
    }

    /// Build from (location, vacant seats) pairs of the non-charging fleet.
    pub fn from_fleet(n: usize, vehicles: impl IntoIterator<Item = (Vertex, u32)>, demand_mean: Vec<f64>, now_s: Secs) -> Self {
        let mut fleet_seats = vec![0.0; n];
        for (v, seats) in vehicles {
            fleet_seats[v] += seats as f64;
        }
        FleetSnapshot {
            fleet_seats,
            demand_mean,
            now_s,
        }
    }
}

/// The three stacked per-vertex arrays plus time encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleFeatures {
    pub location: Vertex,
    pub fleet_capacity: Vec<f64>,
    pub demand_mean: Vec<f64>,
    pub time: [f64; TIME_FEATURES],
}

impl IdleFeatures {
    pub fn build(location: Vertex, snapshot: &FleetSnapshot, clock: &SimClock, at_s: Secs) -> Result<Self> {
        let n = snapshot.num_vertices();
        if location >= n {
            return Err(Error::Invalid(format!("location {location} outside network of {n} vertices")));
        }
        if snapshot.demand_mean.len() != n {
            return Err(Error::Invalid("demand array length differs from fleet array".into()));
        }
        Ok(IdleFeatures {
            location,
            fleet_capacity: snapshot.fleet_seats.clone(),
            demand_mean: snapshot.demand_mean.clone(),
            time: clock.time_features(at_s),
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.fleet_capacity.len()
    }

    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_vertices()];
        v[self.location] = 1.0;
        v
    }

    /// Row-major `n x 3` node matrix (one-hot, fleet, demand per vertex).
    pub fn node_matrix(&self, fleet_scale: f64, demand_scale: f64) -> Vec<f64> {
        let n = self.num_vertices();
        let mut x = vec![0.0; n * 3];
        for v in 0..n {
            x[v * 3] = if v == self.location { 1.0 } else { 0.0 };
            x[v * 3 + 1] = self.fleet_capacity[v] / fleet_scale;
            x[v * 3 + 2] = self.demand_mean[v] / demand_scale;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdleSample {
    pub features: IdleFeatures,
    pub idle_s: f64,
}

impl IdleSample {
    fn record_floats(n: usize) -> usize {
        3 * n + TIME_FEATURES + 1
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let f = &self.features;
        let n = f.num_vertices();
        for v in 0..n {
            out.extend_from_slice(&(if v == f.location { 1.0f32 } else { 0.0 }).to_le_bytes());
        }
        for x in f.fleet_capacity.iter().chain(&f.demand_mean).chain(&f.time) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out.extend_from_slice(&(self.idle_s as f32).to_le_bytes());
    }

    fn decode(buf: &[f32], n: usize) -> Result<Self> {
        let onehot = &buf[..n];
        let mut location = None;
        for (v, &x) in onehot.iter().enumerate() {
            if x == 1.0 {
                if location.is_some() {
                    return Err(Error::Parse("sample one-hot has more than one hot entry".into()));
                }
                location = Some(v);
            } else if x != 0.0 {
                return Err(Error::Parse("sample one-hot entry is not 0 or 1".into()));
            }
        }
        let location = location.ok_or_else(|| Error::Parse("sample one-hot has no hot entry".into()))?;
        let mut time = [0.0; TIME_FEATURES];
        for (t, &x) in time.iter_mut().zip(&buf[3 * n..3 * n + TIME_FEATURES]) {
            *t = x as f64;
        }
        let idle_s = buf[3 * n + TIME_FEATURES] as f64;
        if !(idle_s >= 0.0 && idle_s.is_finite()) {
            return Err(Error::Parse(format!("sample label {idle_s} is not a non-negative number")));
        }
        Ok(IdleSample {
            features: IdleFeatures {
                location,
                fleet_capacity: buf[n..2 * n].iter().map(|&x| x as f64).collect(),
                demand_mean: buf[2 * n..3 * n].iter().map(|&x| x as f64).collect(),
                time,
            },
            idle_s,
        })
    }
}

/// Appends samples to the binary dataset file and keeps the header count current.
pub struct SampleWriter {
    path: PathBuf,
    out: BufWriter<File>,
    n: usize,
    count: u64,
    buf: Vec<u8>,
}

impl SampleWriter {
    pub fn create(path: &Path, n: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = SampleWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            n,
            count: 0,
            buf: Vec::new(),
        };
        w.out.write_all(SAMPLE_MAGIC).map_err(|e| Error::io(path, e))?;
        w.out.write_all(&(n as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        w.out.write_all(&0u64.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    /// Open an existing dataset for appending, or create it.
    pub fn append(path: &Path, n: usize) -> Result<Self> {
        if !path.exists() {
            return Self::create(path, n);
        }
        let (file_n, count) = {
            let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
            read_header(&mut f, path)?
        };
        if file_n != n {
            return Err(Error::Invalid(format!(
                "sample file has {file_n} vertices, network has {n}"
            )));
        }
        let expected = HEADER_LEN + count * (IdleSample::record_floats(n) * 4) as u64;
        let mut file = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len != expected {
            return Err(Error::Parse(format!("sample file length {len} does not match {count} records")));
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        Ok(SampleWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            n,
            count,
            buf: Vec::new(),
        })
    }

    pub fn write(&mut self, s: &IdleSample) -> Result<()> {
        if s.features.num_vertices() != self.n || s.features.demand_mean.len() != self.n {
            return Err(Error::Invalid("sample vertex count differs from file".into()));
        }
        self.buf.clear();
        s.encode(&mut self.buf);
        self.out.write_all(&self.buf).map_err(|e| Error::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Flush records and rewrite the header count.
    pub fn finish(mut self) -> Result<u64> {
        let path = self.path.clone();
        self.out.flush().map_err(|e| Error::io(&path, e))?;
        let file = self.out.get_mut();
        file.seek(SeekFrom::Start(12)).map_err(|e| Error::io(&path, e))?;
        file.write_all(&self.count.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        file.sync_all().map_err(|e| Error::io(&path, e))?;
        Ok(self.count)
    }
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<(usize, u64)> {
    let mut h = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut h).map_err(|_| Error::Parse(format!("{}: truncated sample header", path.display())))?;
    if &h[..8] != SAMPLE_MAGIC {
        return Err(Error::Parse(format!("{}: not a sample file", path.display())));
    }
    let n = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(h[12..20].try_into().unwrap());
    if n == 0 {
        return Err(Error::Parse(format!("{}: sample file declares zero vertices", path.display())));
    }
    Ok((n, count))
}

/// Streams records from a sample dataset.
pub struct SampleReader {
    input: BufReader<File>,
    path: PathBuf,
    n: usize,
    count: u64,
    read: u64,
    raw: Vec<u8>,
    floats: Vec<f32>,
}

impl SampleReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let (n, count) = read_header(&mut input, path)?;
        let rec = IdleSample::record_floats(n);
        Ok(SampleReader {
            input,
            path: path.to_path_buf(),
            n,
            count,
            read: 0,
            raw: vec![0; rec * 4],
            floats: vec![0.0; rec],
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Read every record.
    pub fn read_all(path: &Path) -> Result<(usize, Vec<IdleSample>)> {
        let r = Self::open(path)?;
        let n = r.n;
        let all = r.collect::<Result<Vec<_>>>()?;
        Ok((n, all))
    }
}

impl Iterator for SampleReader {
    type Item = Result<IdleSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.count {
            return None;
        }
        self.read += 1;
        if self.input.read_exact(&mut self.raw).is_err() {
            self.read = self.count;
            return Some(Err(Error::Parse(format!("{}: truncated sample record", self.path.display()))));
        }
        for (f, c) in self.floats.iter_mut().zip(self.raw.chunks_exact(4)) {
            *f = f32::from_le_bytes(c.try_into().unwrap());
        }
        Some(IdleSample::decode(&self.floats, self.n))
    }
}
