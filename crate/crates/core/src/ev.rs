//! Vehicle types, the drive and charging power models, and per-vehicle state.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::Secs;
use crate::error::{Error, Result};
use crate::network::Vertex;

pub const AIR_DENSITY: f64 = 1.225;
pub const GRAVITY: f64 = 9.81;
pub const PASSENGER_MASS_KG: f64 = 80.0;
pub const TAPER_SOC: f64 = 0.7;
pub const UNCOUPLE_SOC: f64 = 0.99;
const ENERGY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleTypeSpec {
    pub name: String,
    pub curb_mass_kg: f64,
    pub drag_coeff: f64,
    pub frontal_area_m2: f64,
    pub rolling_coeff: f64,
    pub battery_kwh: f64,
    pub max_charge_kw: f64,
    pub seats: u32,
    pub op_cost_per_km: f64,
    #[serde(default = "default_idle_power")]
    pub idle_power_w: f64,
}

fn default_idle_power() -> f64 {
    1500.0
}

impl VehicleTypeSpec {
    pub fn nissan_leaf() -> Self {
        VehicleTypeSpec {
            name: "nissan_leaf".into(),
            curb_mass_kg: 1580.0,
            drag_coeff: 0.28,
            frontal_area_m2: 2.27,
            rolling_coeff: 0.010,
            battery_kwh: 39.0,
            max_charge_kw: 50.0,
            seats: 5,
            op_cost_per_km: 0.12,
            idle_power_w: 1500.0,
        }
    }

    pub fn tesla_model3() -> Self {
        VehicleTypeSpec {
            name: "tesla_model3_lr".into(),
            curb_mass_kg: 1844.0,
            drag_coeff: 0.23,
            frontal_area_m2: 2.22,
            rolling_coeff: 0.009,
            battery_kwh: 75.0,
            max_charge_kw: 72.0,
            seats: 5,
            op_cost_per_km: 0.14,
            idle_power_w: 1500.0,
        }
    }

    pub fn nissan_env200() -> Self {
        VehicleTypeSpec {
            name: "nissan_env200".into(),
            curb_mass_kg: 1698.0,
            drag_coeff: 0.32,
            frontal_area_m2: 2.80,
            rolling_coeff: 0.011,
            battery_kwh: 40.0,
            max_charge_kw: 46.0,
            seats: 7,
            op_cost_per_km: 0.16,
            idle_power_w: 1500.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("curb_mass_kg", self.curb_mass_kg),
            ("drag_coeff", self.drag_coeff),
            ("frontal_area_m2", self.frontal_area_m2),
            ("rolling_coeff", self.rolling_coeff),
            ("battery_kwh", self.battery_kwh),
            ("max_charge_kw", self.max_charge_kw),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("vehicle type {}: {field} must be > 0", self.name)));
            }
        }
        if self.seats == 0 {
            return Err(Error::Invalid(format!("vehicle type {}: seats must be >= 1", self.name)));
        }
        if !(self.op_cost_per_km >= 0.0 && self.idle_power_w >= 0.0) {
            return Err(Error::Invalid(format!("vehicle type {}: negative cost or idle power", self.name)));
        }
        Ok(())
    }
}

/// Tractive power in watts at constant speed.
pub fn drive_power(spec: &VehicleTypeSpec, speed_mps: f64, passengers: u32) -> f64 {
    let mass = spec.curb_mass_kg + PASSENGER_MASS_KG * passengers as f64;
    0.5 * AIR_DENSITY * spec.drag_coeff * spec.frontal_area_m2 * speed_mps.powi(3)
        + GRAVITY * spec.rolling_coeff * mass * speed_mps
}

/// Energy in kWh to cover `length_m` in `travel_s` seconds.
pub fn traversal_energy(spec: &VehicleTypeSpec, length_m: f64, travel_s: f64, passengers: u32) -> f64 {
    if travel_s <= 0.0 {
        return 0.0;
    }
    drive_power(spec, length_m / travel_s, passengers) * travel_s / 3.6e6
}

/// Charger supply in kW, flat up to the taper point then linear to zero at full.
pub fn charge_power(spec: &VehicleTypeSpec, soc: f64, station_limit_kw: f64) -> f64 {
    let base = spec.max_charge_kw.min(station_limit_kw);
    if soc <= TAPER_SOC {
        base
    } else {
        (base * (1.0 - soc) / (1.0 - TAPER_SOC)).max(0.0)
    }
}

/// Explicit Euler settings for battery charging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeIntegration {
    pub step_s: f64,
    pub fine_step_s: f64,
    pub fine_above_soc: f64,
}

impl Default for ChargeIntegration {
    fn default() -> Self {
        ChargeIntegration {
            step_s: 60.0,
            fine_step_s: 1.0,
            fine_above_soc: 0.95,
        }
    }
}

impl ChargeIntegration {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_s > 0.0 && self.fine_step_s > 0.0 && (0.0..=1.0).contains(&self.fine_above_soc)) {
            return Err(Error::Invalid("charge integration steps must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of integrating one charging interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeStep {
    pub energy_kwh: f64,
    pub delivered_kwh: f64,
    pub reached_cap: bool,
}

/// Integrate charging from `energy_kwh` over `dt` seconds, never exceeding
/// `min(target_soc, 0.99)` of capacity.
pub fn integrate_charge(
    spec: &VehicleTypeSpec,
    energy_kwh: f64,
    station_limit_kw: f64,
    dt: f64,
    target_soc: f64,
    integ: &ChargeIntegration,
) -> ChargeStep {
    let cap = spec.battery_kwh;
    let stop_at = target_soc.min(UNCOUPLE_SOC) * cap;
    let mut e = energy_kwh;
    if e >= stop_at - ENERGY_EPS {
        return ChargeStep {
            energy_kwh: e,
            delivered_kwh: 0.0,
            reached_cap: true,
        };
    }
    let mut remaining = dt;
    let mut reached = false;
    while remaining > 0.0 {
        let soc = e / cap;
        let h = if soc > integ.fine_above_soc { integ.fine_step_s } else { integ.step_s }.min(remaining);
        let de = charge_power(spec, soc, station_limit_kw) * h / 3600.0;
        if e + de >= stop_at - ENERGY_EPS {
            e = stop_at;
            reached = true;
            break;
        }
        e += de;
        remaining -= h;
    }
    ChargeStep {
        energy_kwh: e,
        delivered_kwh: e - energy_kwh,
        reached_cap: reached,
    }
}

pub type RequestId = u64;
pub type VehicleId = usize;
pub type StationId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleState {
    Idle,
    Repositioning,
    Dispatching,
    Serving,
    EnrouteToCharger,
    Queued,
    Charging,
    Stranded,
}

impl VehicleState {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleState::Idle => "idle",
            VehicleState::Repositioning => "repositioning",
            VehicleState::Dispatching => "dispatching",
            VehicleState::Serving => "serving",
            VehicleState::EnrouteToCharger => "enroute_to_charger",
            VehicleState::Queued => "queued",
            VehicleState::Charging => "charging",
            VehicleState::Stranded => "stranded",
        }
    }

    pub fn is_charging_related(self) -> bool {
        matches!(
            self,
            VehicleState::EnrouteToCharger | VehicleState::Queued | VehicleState::Charging
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stop {
    pub kind: StopKind,
    pub request: RequestId,
    pub vertex: Vertex,
    pub passengers: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Onboard {
    pub request: RequestId,
    pub destination: Vertex,
    pub passengers: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargePlan {
    pub station: StationId,
    pub target_soc: f64,
    pub max_duration_s: Option<Secs>,
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: VehicleId,
    pub spec: Arc<VehicleTypeSpec>,
    pub energy_kwh: f64,
    pub location: Vertex,
    /// Seconds already spent on the first edge of `path`, or carried at the vertex.
    pub edge_progress_s: Secs,
    /// Planned route as edge ids.
    pub path: VecDeque<usize>,
    pub onboard: Vec<Onboard>,
    pub stops: VecDeque<Stop>,
    pub state: VehicleState,
    pub charge_plan: Option<ChargePlan>,
    pub stranded_since_s: Option<Secs>,
    /// Exact second of the last dropoff that left the vehicle empty.
    pub idle_since_s: Option<Secs>,
    pub reposition_target: Option<Vertex>,
    pub drive_kwh: f64,
    pub idle_kwh: f64,
    pub charged_kwh: f64,
    pub initial_kwh: f64,
    pub driven_m: f64,
}

impl Vehicle {
    pub fn new(id: VehicleId, spec: Arc<VehicleTypeSpec>, location: Vertex, soc: f64) -> Self {
        let energy = spec.battery_kwh * soc.clamp(0.0, 1.0);
        Vehicle {
            id,
            spec,
            energy_kwh: energy,
            location,
            edge_progress_s: 0,
            path: VecDeque::new(),
            onboard: Vec::new(),
            stops: VecDeque::new(),
            state: VehicleState::Idle,
            charge_plan: None,
            stranded_since_s: None,
            idle_since_s: None,
            reposition_target: None,
            drive_kwh: 0.0,
            idle_kwh: 0.0,
            charged_kwh: 0.0,
            initial_kwh: energy,
            driven_m: 0.0,
        }
    }

    pub fn soc(&self) -> f64 {
        self.energy_kwh / self.spec.battery_kwh
    }

    pub fn occupied_seats(&self) -> u32 {
        self.onboard.iter().map(|o| o.passengers).sum()
    }

    pub fn vacant_seats(&self) -> u32 {
        self.spec.seats.saturating_sub(self.occupied_seats())
    }

    pub fn passengers_onboard(&self) -> u32 {
        self.occupied_seats()
    }

    pub fn is_idle(&self) -> bool {
        self.state == VehicleState::Idle
    }

    /// Draw idle power for `dt` seconds. Reaching zero energy strands the vehicle.
    pub fn apply_idle_draw(&mut self, dt: f64, now_s: Secs) -> f64 {
        if self.state == VehicleState::Stranded || dt <= 0.0 {
            return 0.0;
        }
        let want = self.spec.idle_power_w * dt / 3.6e6;
        let used = want.min(self.energy_kwh);
        self.energy_kwh -= used;
        self.idle_kwh += used;
        if self.energy_kwh <= 0.0 {
            self.energy_kwh = 0.0;
            self.strand(now_s);
        }
        used
    }

    /// Deduct driving energy, floored at zero. Returns the energy actually drawn.
    pub fn apply_drive(&mut self, kwh: f64, length_m: f64) -> f64 {
        let used = kwh.min(self.energy_kwh);
        self.energy_kwh -= used;
        self.drive_kwh += used;
        self.driven_m += length_m;
        used
    }

    /// Charge for `dt` seconds. Returns (delivered kWh, should uncouple).
    pub fn apply_charging_step(
        &mut self,
        station_limit_kw: f64,
        dt: f64,
        target_soc: f64,
        integ: &ChargeIntegration,
    ) -> (f64, bool) {
        let step = integrate_charge(&self.spec, self.energy_kwh, station_limit_kw, dt, target_soc, integ);
        self.energy_kwh = step.energy_kwh;
        self.charged_kwh += step.delivered_kwh;
        let done = step.reached_cap || self.soc() >= UNCOUPLE_SOC - ENERGY_EPS / self.spec.battery_kwh;
        (step.delivered_kwh, done)
    }

    pub fn strand(&mut self, now_s: Secs) {
        if self.state != VehicleState::Stranded {
            self.state = VehicleState::Stranded;
            self.stranded_since_s = Some(now_s);
            self.path.clear();
            self.edge_progress_s = 0;
            self.reposition_target = None;
        }
    }

    /// Energy balance residual; zero up to rounding.
    pub fn energy_residual(&self) -> f64 {
        self.initial_kwh + self.charged_kwh - self.drive_kwh - self.idle_kwh - self.energy_kwh
    }
}
