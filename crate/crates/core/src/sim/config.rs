use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::charging::DEFAULT_SUPPLY_KW;
use crate::control::{PolicyKind, PolicyParams};
use crate::dispatch::DispatchParams;
use crate::error::{Error, Result};
use crate::ev::{ChargeIntegration, VehicleTypeSpec};
use crate::network::{Coord, RoadNetwork};
use crate::routing::{TravelTimeModel, DEFAULT_SPEED_MPS};
use crate::trips::{read_preprocessed, synthesize_demand, SyntheticDemand, TripRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_spacing")]
    pub spacing_m: f64,
}

fn default_spacing() -> f64 {
    400.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub graphml: Option<PathBuf>,
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TravelMode {
    Constant,
    Profile,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TravelTimeConfig {
    pub mode: TravelMode,
    pub speed_kmh: f64,
    pub multipliers: Vec<f64>,
    pub table: Option<PathBuf>,
}

impl Default for TravelTimeConfig {
    fn default() -> Self {
        TravelTimeConfig {
            mode: TravelMode::Constant,
            speed_kmh: DEFAULT_SPEED_MPS * 3.6,
            multipliers: Vec::new(),
            table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Preprocessed trips (request_minute, origin_vertex, dest_vertex, passengers).
    pub trips: Option<PathBuf>,
    pub synthetic: Option<SyntheticDemand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetEntry {
    /// One of leaf, model3, env200; ignored when `spec` is given.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub spec: Option<VehicleTypeSpec>,
    pub count: usize,
}

impl FleetEntry {
    pub fn resolve(&self) -> Result<VehicleTypeSpec> {
        let spec = match (&self.spec, self.preset.as_deref()) {
            (Some(s), _) => s.clone(),
            (None, Some("leaf")) => VehicleTypeSpec::nissan_leaf(),
            (None, Some("model3")) => VehicleTypeSpec::tesla_model3(),
            (None, Some("env200")) => VehicleTypeSpec::nissan_env200(),
            (None, Some(other)) => {
                return Err(Error::Invalid(format!("unknown vehicle preset '{other}' (leaf, model3, env200)")))
            }
            (None, None) => return Err(Error::Invalid("fleet entry needs a preset or a spec".into())),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn default_fleet() -> Vec<FleetEntry> {
    [("leaf", 3), ("model3", 2), ("env200", 1)]
        .into_iter()
        .map(|(p, c)| FleetEntry {
            preset: Some(p.into()),
            spec: None,
            count: c,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChargerConfig {
    /// Number of charger draws; repeated vertices merge into one station.
    pub count: usize,
    pub parking_fraction: f64,
    pub seed: u64,
    pub supply_kw: f64,
    /// Station list (station_id, vertex, charger_count); overrides placement.
    pub stations: Option<PathBuf>,
}

impl Default for ChargerConfig {
    fn default() -> Self {
        ChargerConfig {
            count: 20,
            parking_fraction: 0.2,
            seed: 7,
            supply_kw: DEFAULT_SUPPLY_KW,
            stations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Constant,
    Table,
    Gcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub path: Option<PathBuf>,
    pub constant_s: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::Constant,
            path: None,
            constant_s: 900.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepositionConfig {
    pub enabled: bool,
    pub horizon_min: i64,
}

impl Default for RepositionConfig {
    fn default() -> Self {
        RepositionConfig {
            enabled: true,
            horizon_min: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub charge_per_kwh: f64,
    /// Fare share is only credited when the delay is at most this.
    pub ontime_delay_s: i64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            charge_per_kwh: 0.40,
            ontime_delay_s: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub events: bool,
    pub flush_every_min: i64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            events: true,
            flush_every_min: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub policy: PolicyKind,
    /// Weekday of minute 0, Monday = 0.
    pub start_weekday: u32,
    pub warmup_days: f64,
    pub run_days: f64,
    /// Off: no energy use and no charging in the measured phase either.
    pub charging_enabled: bool,
    pub initial_soc: [f64; 2],
    pub network: NetworkConfig,
    pub travel_time: TravelTimeConfig,
    pub demand: DemandConfig,
    pub fleet: Vec<FleetEntry>,
    pub chargers: ChargerConfig,
    pub predictor: PredictorConfig,
    pub dispatch: DispatchParams,
    pub reposition: RepositionConfig,
    pub charging: PolicyParams,
    pub integration: ChargeIntegration,
    pub costs: CostConfig,
    pub output: OutputConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            policy: PolicyKind::Itx,
            start_weekday: 0,
            warmup_days: 3.0,
            run_days: 1.0,
            charging_enabled: true,
            initial_soc: [0.5, 1.0],
            network: NetworkConfig::default(),
            travel_time: TravelTimeConfig::default(),
            demand: DemandConfig::default(),
            fleet: default_fleet(),
            chargers: ChargerConfig::default(),
            predictor: PredictorConfig::default(),
            dispatch: DispatchParams::default(),
            reposition: RepositionConfig::default(),
            charging: PolicyParams::default(),
            integration: ChargeIntegration::default(),
            costs: CostConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// Load a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.network.graphml);
        resolve(base, &mut self.travel_time.table);
        resolve(base, &mut self.demand.trips);
        resolve(base, &mut self.chargers.stations);
        resolve(base, &mut self.predictor.path);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config serialisation: {e}")))
    }

    pub fn warmup_minutes(&self) -> i64 {
        (self.warmup_days * 1440.0).round() as i64
    }

    pub fn run_minutes(&self) -> i64 {
        (self.run_days * 1440.0).round() as i64
    }

    pub fn fleet_size(&self) -> usize {
        self.fleet.iter().map(|f| f.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_days >= 0.0 && self.run_days >= 0.0) {
            return Err(Error::Invalid("warmup_days and run_days must be >= 0".into()));
        }
        let [lo, hi] = self.initial_soc;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid("initial_soc must satisfy 0 < lo <= hi <= 1".into()));
        }
        match (&self.network.graphml, &self.network.grid) {
            (Some(_), Some(_)) => return Err(Error::Invalid("network: give either graphml or grid, not both".into())),
            (None, None) => return Err(Error::Invalid("network: graphml or grid is required".into())),
            _ => {}
        }
        if self.demand.trips.is_some() == self.demand.synthetic.is_some() {
            return Err(Error::Invalid("demand: give exactly one of trips or synthetic".into()));
        }
        for f in &self.fleet {
            f.resolve()?;
        }
        if self.fleet_size() == 0 {
            return Err(Error::Invalid("fleet is empty".into()));
        }
        self.charging.validate()?;
        self.integration.validate()?;
        if self.reposition.horizon_min <= 0 || self.output.flush_every_min <= 0 {
            return Err(Error::Invalid("reposition horizon and flush interval must be positive".into()));
        }
        if !(self.chargers.supply_kw > 0.0) {
            return Err(Error::Invalid("charger supply must be positive".into()));
        }
        if self.charging_enabled && self.chargers.count == 0 && self.chargers.stations.is_none() {
            return Err(Error::Invalid("charging enabled but no chargers configured".into()));
        }
        if self.policy == PolicyKind::Itx && self.predictor.kind != PredictorKind::Constant && self.predictor.path.is_none() {
            return Err(Error::Invalid("predictor path is required for table and gcn predictors".into()));
        }
        Ok(())
    }

    pub fn build_network(&self) -> Result<RoadNetwork> {
        match (&self.network.graphml, &self.network.grid) {
            (Some(p), _) => RoadNetwork::load_graphml(p),
            (None, Some(g)) => RoadNetwork::grid(g.rows, g.cols, g.spacing_m, Coord::new(40.75, -73.98)),
            (None, None) => Err(Error::Invalid("network: graphml or grid is required".into())),
        }
    }

    pub fn travel_model(&self) -> Result<TravelTimeModel> {
        let speed = self.travel_time.speed_kmh / 3.6;
        let model = match self.travel_time.mode {
            TravelMode::Constant => TravelTimeModel::ConstantSpeed { speed_mps: speed },
            TravelMode::Profile => {
                let m: [f64; 24] = self
                    .travel_time
                    .multipliers
                    .clone()
                    .try_into()
                    .map_err(|_| Error::Invalid("travel_time.multipliers needs 24 values".into()))?;
                TravelTimeModel::SpeedProfile {
                    speed_mps: speed,
                    multipliers: m,
                }
            }
            TravelMode::Table => {
                let p = self
                    .travel_time
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("travel_time.table path missing".into()))?;
                TravelTimeModel::load_table(p, speed)?
            }
        };
        model.validate()?;
        Ok(model)
    }

    /// Requests covering warmup and the measured window.
    pub fn build_demand(&self, net: &RoadNetwork) -> Result<Vec<TripRequest>> {
        if let Some(p) = &self.demand.trips {
            return read_preprocessed(p, net.num_vertices());
        }
        let mut s = self.demand.synthetic.clone().unwrap_or_default();
        if s.days <= 0.0 {
            s.days = self.warmup_days + self.run_days;
        }
        synthesize_demand(net, &s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 5
policy = "qa"
warmup_days = 0.0
run_days = 0.5

[network.grid]
rows = 4
cols = 4

[demand.synthetic]
base_rate = 1.0
seed = 3

[[fleet]]
preset = "leaf"
count = 4

[[fleet]]
count = 1
[fleet.spec]
name = "custom"
curb_mass_kg = 1500.0
drag_coeff = 0.3
frontal_area_m2 = 2.2
rolling_coeff = 0.01
battery_kwh = 50.0
max_charge_kw = 50.0
seats = 4
op_cost_per_km = 0.1
"#;

    #[test]
    fn parses_and_validates() {
        let c = SimConfig::from_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.policy, PolicyKind::Qa);
        assert_eq!(c.fleet_size(), 5);
        assert_eq!(c.fleet[1].resolve().unwrap().seats, 4);
        assert_eq!(c.run_minutes(), 720);
        assert_eq!(c.charging.t_min_s, 300.0);
        let net = c.build_network().unwrap();
        assert_eq!(net.num_vertices(), 16);
        assert!(!c.build_demand(&net).unwrap().is_empty());
        let again = SimConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SimConfig::from_toml("policy = \"zz\"").is_err());
        assert!(SimConfig::from_toml("unknown_key = 1").is_err());
        let mut c = SimConfig::from_toml(MINIMAL).unwrap();
        c.initial_soc = [0.9, 0.5];
        assert!(c.validate().is_err());
        let mut c = SimConfig::from_toml(MINIMAL).unwrap();
        c.demand.trips = Some("x.csv".into());
        assert!(c.validate().is_err());
        let mut c = SimConfig::from_toml(MINIMAL).unwrap();
        c.fleet[0].preset = Some("bus".into());
        assert!(c.validate().is_err());
    }
}
