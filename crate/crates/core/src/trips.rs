//! Trip requests: CSV ingestion with cleaning filters, the replay stream and
//! synthetic Poisson demand.

use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::clock::Minute;
use crate::error::{Error, Result};
use crate::ev::RequestId;
use crate::network::{haversine, Coord, RoadNetwork, Vertex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripRequest {
    pub id: RequestId,
    pub request_minute: Minute,
    pub origin: Vertex,
    pub destination: Vertex,
    pub passengers: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Pending,
    Assigned,
    Onboard,
    Completed,
    Rejected,
}

impl RequestState {
    pub fn can_become(self, next: RequestState) -> bool {
        use RequestState::*;
        matches!(
            (self, next),
            (Pending, Assigned) | (Assigned, Onboard) | (Onboard, Completed) | (Pending, Rejected)
        )
    }
}

/// Header names in the raw trip CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub pickup_datetime: String,
    pub dropoff_datetime: Option<String>,
    pub pickup_lat: String,
    pub pickup_lon: String,
    pub dropoff_lat: String,
    pub dropoff_lon: String,
    pub passengers: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            pickup_datetime: "pickup_datetime".into(),
            dropoff_datetime: Some("dropoff_datetime".into()),
            pickup_lat: "pickup_lat".into(),
            pickup_lon: "pickup_lon".into(),
            dropoff_lat: "dropoff_lat".into(),
            dropoff_lon: "dropoff_lon".into(),
            passengers: "passengers".into(),
        }
    }
}

/// Closed polygon in (lat, lon) used to restrict trips to a service area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub points: Vec<Coord>,
}

impl Region {
    pub fn contains(&self, p: Coord) -> bool {
        let pts = &self.points;
        let mut inside = false;
        let mut j = pts.len().wrapping_sub(1);
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[j]);
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = (b.lon - a.lon) * (p.lat - a.lat) / (b.lat - a.lat) + a.lon;
                if p.lon < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub columns: ColumnMap,
    pub region: Option<Region>,
    pub min_speed_kmh: f64,
    pub max_speed_kmh: f64,
    pub max_party: u32,
    /// Datetime of simulation minute 0; defaults to midnight of the earliest pickup date.
    pub epoch: Option<NaiveDateTime>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            columns: ColumnMap::default(),
            region: None,
            min_speed_kmh: 1.0,
            max_speed_kmh: 100.0,
            max_party: 7,
            epoch: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: u64,
    pub emitted: u64,
    pub dropped_speed: u64,
    pub dropped_region: u64,
    pub dropped_same_vertex: u64,
    pub dropped_party: u64,
    pub dropped_malformed: u64,
    pub speed_filter_applied: bool,
    pub epoch: String,
    pub start_weekday: u32,
}

impl IngestReport {
    pub fn balanced(&self) -> bool {
        self.rows
            == self.emitted
                + self.dropped_speed
                + self.dropped_region
                + self.dropped_same_vertex
                + self.dropped_party
                + self.dropped_malformed
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    chrono::DateTime::parse_from_rfc3339(s).ok().map(|t| t.naive_utc())
}

struct RawTrip {
    row: u64,
    pickup_time: NaiveDateTime,
    pickup: Coord,
    dropoff: Coord,
    passengers: u32,
    duration_s: Option<f64>,
}

/// Read, clean and vertex-match raw trips.
pub fn ingest_trips(path: &Path, net: &RoadNetwork, opts: &IngestOptions) -> Result<(Vec<TripRequest>, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, net, opts)
}

pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    net: &RoadNetwork,
    opts: &IngestOptions,
) -> Result<(Vec<TripRequest>, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column {name:?}")))
    };
    let c = &opts.columns;
    let i_pt = col(&c.pickup_datetime)?;
    let i_dt = match &c.dropoff_datetime {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };
    let (i_plat, i_plon) = (col(&c.pickup_lat)?, col(&c.pickup_lon)?);
    let (i_dlat, i_dlon) = (col(&c.dropoff_lat)?, col(&c.dropoff_lon)?);
    let i_pax = col(&c.passengers)?;

    let mut report = IngestReport {
        speed_filter_applied: i_dt.is_some(),
        ..Default::default()
    };
    if i_dt.is_none() {
        log::info!("no dropoff time column; speed filter skipped");
    }
    let mut raws = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        report.rows += 1;
        let Ok(rec) = rec else {
            report.dropped_malformed += 1;
            continue;
        };
        let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).filter(|x| x.is_finite());
        let parsed = (|| {
            let pickup_time = parse_timestamp(rec.get(i_pt)?)?;
            let pickup = Coord::new(num(i_plat)?, num(i_plon)?);
            let dropoff = Coord::new(num(i_dlat)?, num(i_dlon)?);
            let passengers: u32 = rec.get(i_pax)?.parse().ok()?;
            let duration_s = match i_dt {
                Some(i) => {
                    let t = parse_timestamp(rec.get(i)?)?;
                    Some((t - pickup_time).num_milliseconds() as f64 / 1000.0)
                }
                None => None,
            };
            let valid = |p: Coord| p.lat.abs() <= 90.0 && p.lon.abs() <= 180.0;
            (passengers >= 1 && valid(pickup) && valid(dropoff)).then_some(RawTrip {
                row: row as u64,
                pickup_time,
                pickup,
                dropoff,
                passengers,
                duration_s,
            })
        })();
        match parsed {
            Some(t) => raws.push(t),
            None => report.dropped_malformed += 1,
        }
    }

    let epoch = match opts.epoch {
        Some(e) => e,
        None => match raws.iter().map(|t| t.pickup_time).min() {
            Some(t) => t.date().and_hms_opt(0, 0, 0).expect("midnight exists"),
            None => NaiveDate::from_ymd_opt(1970, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
        },
    };
    report.epoch = epoch.format("%Y-%m-%dT%H:%M:%S").to_string();
    report.start_weekday = epoch.weekday().num_days_from_monday();

    let mut kept: Vec<(Minute, u64, Vertex, Vertex, u32)> = Vec::new();
    for t in raws {
        if let Some(region) = &opts.region {
            if !region.contains(t.pickup) || !region.contains(t.dropoff) {
                report.dropped_region += 1;
                continue;
            }
        }
        if let Some(d) = t.duration_s {
            let kmh = if d > 0.0 {
                haversine(t.pickup, t.dropoff) / d * 3.6
            } else {
                f64::INFINITY
            };
            if !(opts.min_speed_kmh..=opts.max_speed_kmh).contains(&kmh) {
                report.dropped_speed += 1;
                continue;
            }
        }
        if t.passengers > opts.max_party {
            report.dropped_party += 1;
            continue;
        }
        let (o, d) = (net.nearest_vertex(t.pickup), net.nearest_vertex(t.dropoff));
        if o == d {
            report.dropped_same_vertex += 1;
            continue;
        }
        let minute = (t.pickup_time - epoch).num_seconds().div_euclid(60);
        kept.push((minute, t.row, o, d, t.passengers));
    }
    kept.sort_by_key(|k| (k.0, k.1));
    report.emitted = kept.len() as u64;
    if kept.is_empty() {
        return Err(Error::Empty("no trips left after filtering".into()));
    }
    let requests = kept
        .into_iter()
        .enumerate()
        .map(|(i, (m, _, o, d, p))| TripRequest {
            id: i as RequestId,
            request_minute: m,
            origin: o,
            destination: d,
            passengers: p,
        })
        .collect();
    Ok((requests, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct PreRow {
    request_minute: Minute,
    origin_vertex: Vertex,
    dest_vertex: Vertex,
    passengers: u32,
}

pub fn write_preprocessed(path: &Path, requests: &[TripRequest]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in requests {
        w.serialize(PreRow {
            request_minute: r.request_minute,
            origin_vertex: r.origin,
            dest_vertex: r.destination,
            passengers: r.passengers,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a preprocessed stream, validating vertex ids against `num_vertices`.
pub fn read_preprocessed(path: &Path, num_vertices: usize) -> Result<Vec<TripRequest>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows: Vec<PreRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    for r in &rows {
        if r.origin_vertex >= num_vertices || r.dest_vertex >= num_vertices {
            return Err(Error::Invalid(format!("trip references vertex outside 0..{num_vertices}")));
        }
        if r.origin_vertex == r.dest_vertex || r.passengers == 0 {
            return Err(Error::Invalid("trip with identical endpoints or zero passengers".into()));
        }
    }
    rows.sort_by_key(|r| r.request_minute);
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| TripRequest {
            id: i as RequestId,
            request_minute: r.request_minute,
            origin: r.origin_vertex,
            destination: r.dest_vertex,
            passengers: r.passengers,
        })
        .collect())
}

/// Requests ordered by minute then id, queried per minute.
#[derive(Debug, Clone, Default)]
pub struct DemandStream {
    requests: Vec<TripRequest>,
}

impl DemandStream {
    pub fn new(mut requests: Vec<TripRequest>) -> Self {
        requests.sort_by_key(|r| (r.request_minute, r.id));
        DemandStream { requests }
    }

    pub fn requests_at(&self, minute: Minute) -> &[TripRequest] {
        let lo = self.requests.partition_point(|r| r.request_minute < minute);
        let hi = self.requests.partition_point(|r| r.request_minute <= minute);
        &self.requests[lo..hi]
    }

    pub fn all(&self) -> &[TripRequest] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDemand {
    /// Length in days; a scenario config treats 0 as its full horizon.
    pub days: f64,
    pub base_rate: f64,
    pub hourly_multipliers: Vec<f64>,
    /// (vertex, weight) origin hotspots; empty means uniform over all vertices.
    pub hotspots: Vec<(Vertex, f64)>,
    /// Relative weights of party sizes 1, 2, ...
    pub party_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticDemand {
    fn default() -> Self {
        SyntheticDemand {
            days: 0.0,
            base_rate: 2.0,
            hourly_multipliers: vec![1.0; 24],
            hotspots: Vec::new(),
            party_weights: vec![0.72, 0.16, 0.06, 0.04, 0.02],
            seed: 0,
        }
    }
}

/// Morning and evening peaks over a quiet night.
pub fn rush_hour_profile() -> Vec<f64> {
    vec![
        0.35, 0.25, 0.2, 0.15, 0.15, 0.3, 0.6, 1.1, 1.6, 1.4, 1.0, 0.95, //
        1.0, 0.95, 0.95, 1.05, 1.25, 1.6, 1.8, 1.4, 1.1, 0.9, 0.7, 0.5,
    ]
}

pub fn synthesize_demand(net: &RoadNetwork, cfg: &SyntheticDemand) -> Result<Vec<TripRequest>> {
    let n = net.num_vertices();
    if !(cfg.base_rate > 0.0 && cfg.base_rate.is_finite()) {
        return Err(Error::Invalid("base_rate must be > 0".into()));
    }
    if cfg.hourly_multipliers.len() != 24 || cfg.hourly_multipliers.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::Invalid("hourly_multipliers needs 24 non-negative values".into()));
    }
    if !(cfg.days >= 0.0) || n < 2 {
        return Err(Error::Invalid("synthetic demand needs days >= 0 and two vertices".into()));
    }
    let origins: WeightedIndex<f64> = if cfg.hotspots.is_empty() {
        WeightedIndex::new(vec![1.0; n])
    } else {
        if let Some(&(v, _)) = cfg.hotspots.iter().find(|(v, _)| *v >= n) {
            return Err(Error::Invalid(format!("hotspot vertex {v} outside the network")));
        }
        WeightedIndex::new(cfg.hotspots.iter().map(|h| h.1))
    }
    .map_err(|e| Error::Invalid(format!("hotspot weights: {e}")))?;
    let party = WeightedIndex::new(&cfg.party_weights).map_err(|e| Error::Invalid(format!("party weights: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let minutes = (cfg.days * 1440.0).round() as Minute;
    let mut out = Vec::new();
    for m in 0..minutes {
        let lambda = cfg.base_rate * cfg.hourly_multipliers[((m % 1440) / 60) as usize];
        if lambda <= 0.0 {
            continue;
        }
        let k: f64 = Poisson::new(lambda)
            .map_err(|e| Error::Invalid(format!("poisson rate: {e}")))?
            .sample(&mut rng);
        for _ in 0..k as u64 {
            let o = if cfg.hotspots.is_empty() {
                origins.sample(&mut rng)
            } else {
                cfg.hotspots[origins.sample(&mut rng)].0
            };
            let mut d = rng.random_range(0..n - 1);
            if d >= o {
                d += 1;
            }
            out.push(TripRequest {
                id: out.len() as RequestId,
                request_minute: m,
                origin: o,
                destination: d,
                passengers: party.sample(&mut rng) as u32 + 1,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> RoadNetwork {
        RoadNetwork::grid(4, 4, 500.0, Coord::new(40.70, -74.00)).unwrap()
    }

    fn csv_for(net: &RoadNetwork, rows: &[(&str, &str, Vertex, Vertex, u32)]) -> String {
        let mut s = String::from("pickup_datetime,dropoff_datetime,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,passengers\n");
        for (pt, dt, o, d, p) in rows {
            let (a, b) = (net.coord(*o), net.coord(*d));
            s.push_str(&format!("{pt},{dt},{},{},{},{},{p}\n", a.lat, a.lon, b.lat, b.lon));
        }
        s
    }

    #[test]
    fn well_formed_rows_come_out_in_time_order() {
        let net = small_net();
        let text = csv_for(
            &net,
            &[
                ("2015-11-02 08:10:00", "2015-11-02 08:20:00", 0, 15, 1),
                ("2015-11-02 08:01:30", "2015-11-02 08:09:00", 3, 12, 2),
                ("2015-11-02 09:00:00", "2015-11-02 09:06:00", 5, 6, 1),
            ],
        );
        let (reqs, rep) = ingest_reader(text.as_bytes(), &net, &IngestOptions::default()).unwrap();
        assert_eq!(reqs.len(), 3);
        assert_eq!(reqs.iter().map(|r| r.request_minute).collect::<Vec<_>>(), vec![481, 490, 540]);
        assert_eq!(reqs[0].origin, 3);
        assert_eq!(rep.start_weekday, 0);
        assert!(rep.balanced());
    }

    #[test]
    fn slow_and_same_vertex_trips_are_dropped() {
        let net = small_net();
        let a = net.coord(0);
        // ~100 m displacement over 30 minutes
        let b = Coord::new(a.lat + 0.0009, a.lon);
        let mut text = csv_for(&net, &[("2015-11-02 08:00:00", "2015-11-02 08:10:00", 0, 15, 1)]);
        text.push_str(&format!("2015-11-02 08:00:00,2015-11-02 08:30:00,{},{},{},{},1\n", a.lat, a.lon, b.lat, b.lon));
        text.push_str(&format!("2015-11-02 08:00:00,2015-11-02 08:00:02,{},{},{},{},1\n", a.lat, a.lon, a.lat + 1e-5, a.lon));
        text.push_str("garbage,row,,,,,\n");
        let (reqs, rep) = ingest_reader(text.as_bytes(), &net, &IngestOptions::default()).unwrap();
        assert_eq!(reqs.len(), 1);
        assert_eq!(rep.dropped_speed, 1);
        assert_eq!(rep.dropped_same_vertex, 1);
        assert_eq!(rep.dropped_malformed, 1);
        assert!(rep.balanced());
    }

    #[test]
    fn missing_column_is_an_error() {
        let net = small_net();
        let text = "pickup_datetime,pickup_lat\n2015-11-02 08:00:00,40.7\n";
        assert!(matches!(ingest_reader(text.as_bytes(), &net, &IngestOptions::default()), Err(Error::Parse(_))));
    }

    #[test]
    fn stream_partitions_by_minute() {
        let mk = |id, m| TripRequest {
            id,
            request_minute: m,
            origin: 0,
            destination: 1,
            passengers: 1,
        };
        let s = DemandStream::new(vec![mk(2, 10), mk(0, 3), mk(1, 10)]);
        assert!(s.requests_at(5).is_empty());
        assert_eq!(s.requests_at(10).iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2]);
        let total: usize = (0..20).map(|m| s.requests_at(m).len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn synthetic_demand_rate_and_determinism() {
        let net = small_net();
        assert!(synthesize_demand(&net, &SyntheticDemand { base_rate: 0.0, ..Default::default() }).is_err());
        let tiny = synthesize_demand(&net, &SyntheticDemand { base_rate: 1e-9, ..Default::default() }).unwrap();
        assert!(tiny.is_empty());
        let cfg = SyntheticDemand {
            days: 1.0,
            seed: 7,
            ..Default::default()
        };
        let a = synthesize_demand(&net, &cfg).unwrap();
        assert_eq!(a, synthesize_demand(&net, &cfg).unwrap());
        let sigma = 2880f64.sqrt();
        assert!((a.len() as f64 - 2880.0).abs() < 3.0 * sigma, "{}", a.len());
        assert!(a.iter().all(|r| r.origin != r.destination && r.passengers >= 1));
    }

    #[test]
    fn region_contains() {
        let sq = Region {
            points: vec![Coord::new(0.0, 0.0), Coord::new(0.0, 1.0), Coord::new(1.0, 1.0), Coord::new(1.0, 0.0)],
        };
        assert!(sq.contains(Coord::new(0.5, 0.5)));
        assert!(!sq.contains(Coord::new(1.5, 0.5)));
    }
}
