//! C interface to the evpool simulator.
//!
//! Every function returns an [`EvpStatus`]; results go through out-pointers.
//! On failure, `evp_last_error` gives a message for the calling thread.
//! Simulations are opaque handles released with `evp_simulation_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use evpool::assignment::{max_weight_matching, FORBIDDEN};
use evpool::control::pect;
use evpool::ev::{self, VehicleTypeSpec};
use evpool::sim::config::SimConfig;
use evpool::sim::engine::Simulation;
use evpool::sim::events::EventLog;
use evpool::sim::ledger;
use evpool::sim::run::{run_simulation, RunSummary};
use evpool::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Invariant = 5,
    Panic = 6,
}

/// Built-in vehicle types.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvpVehicleType {
    Leaf = 0,
    Model3 = 1,
    Env200 = 2,
}

/// End-of-run figures. Money in cents.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvpSummary {
    pub minute: i64,
    pub done: bool,
    pub vehicles: u64,
    pub stations: u64,
    pub chargers: u64,
    pub reward_cents: i64,
    pub share_cents: i64,
    pub op_cents: i64,
    pub charge_cents: i64,
    pub tow_cents: i64,
    pub served: u64,
    pub ontime: u64,
    pub rejected: u64,
    pub ontime_rate: f64,
    pub mean_delay_s: f64,
    pub customers_per_vehicle: f64,
    pub consumed_kwh: f64,
    pub charged_kwh: f64,
    pub peak_grid_mw: f64,
    pub strandings: u64,
    pub tows: u64,
    pub charge_decisions: u64,
}

/// Opaque simulation handle.
pub struct EvpSimulation {
    sim: Simulation,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: EvpStatus, msg: impl Into<String>) -> EvpStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> EvpStatus {
    match e {
        Error::Io { .. } => EvpStatus::Io,
        Error::Invalid(_) => EvpStatus::InvalidArgument,
        Error::Invariant(_) => EvpStatus::Invariant,
        _ => EvpStatus::Data,
    }
}

/// Run `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), EvpStatus>) -> EvpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvpStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(EvpStatus::Panic, msg)
        }
    }
}

fn lift<T>(r: evpool::Result<T>) -> Result<T, EvpStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, EvpStatus> {
    if p.is_null() {
        return Err(fail(EvpStatus::NullPointer, format!("{what} is null")));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) if !s.is_empty() => Ok(PathBuf::from(s)),
        Ok(_) => Err(fail(EvpStatus::InvalidArgument, format!("{what} is empty"))),
        Err(_) => Err(fail(EvpStatus::InvalidArgument, format!("{what} is not UTF-8"))),
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, EvpStatus> {
    p.as_mut().ok_or_else(|| fail(EvpStatus::NullPointer, format!("{what} is null")))
}

fn spec_of(t: EvpVehicleType) -> VehicleTypeSpec {
    match t {
        EvpVehicleType::Leaf => VehicleTypeSpec::nissan_leaf(),
        EvpVehicleType::Model3 => VehicleTypeSpec::tesla_model3(),
        EvpVehicleType::Env200 => VehicleTypeSpec::nissan_env200(),
    }
}

fn finite(x: f64, what: &str) -> Result<f64, EvpStatus> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(fail(EvpStatus::InvalidArgument, format!("{what} is not finite")))
    }
}

fn fill_summary(s: &RunSummary, minute: i64, done: bool) -> EvpSummary {
    EvpSummary {
        minute,
        done,
        vehicles: s.vehicles as u64,
        stations: s.stations as u64,
        chargers: s.chargers as u64,
        reward_cents: s.reward_cents,
        share_cents: s.share_cents,
        op_cents: s.op_cents,
        charge_cents: s.charge_cents,
        tow_cents: s.tow_cents,
        served: s.served,
        ontime: s.ontime,
        rejected: s.rejected,
        ontime_rate: s.ontime_rate,
        mean_delay_s: s.mean_delay_s,
        customers_per_vehicle: s.customers_per_vehicle,
        consumed_kwh: s.consumed_kwh,
        charged_kwh: s.charged_kwh,
        peak_grid_mw: s.peak_grid_mw,
        strandings: s.strandings,
        tows: s.tows,
        charge_decisions: s.charge_decisions,
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn evp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn evp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a scenario config and build a simulation. `events_path` may be null;
/// otherwise the event log is written there.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_simulation_new(
    config_path: *const c_char,
    events_path: *const c_char,
    out: *mut *mut EvpSimulation,
) -> EvpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let cfg = lift(SimConfig::load(&path_arg(config_path, "config_path")?))?;
        let mut sim = lift(Simulation::new(cfg))?;
        if !events_path.is_null() {
            let p = path_arg(events_path, "events_path")?;
            sim.set_event_log(lift(EventLog::create(&p))?);
        }
        *out = Box::into_raw(Box::new(EvpSimulation { sim }));
        Ok(())
    })
}

/// Release a simulation. Null is ignored.
///
/// # Safety
/// `sim` must come from `evp_simulation_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn evp_simulation_free(sim: *mut EvpSimulation) {
    if !sim.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(sim))));
    }
}

/// Advance one minute. `advanced` (may be null) receives false once the run
/// window is exhausted.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evp_simulation_step(sim: *mut EvpSimulation, advanced: *mut bool) -> EvpStatus {
    guard(|| {
        let h = out_ref(sim, "sim")?;
        let more = lift(h.sim.step())?;
        if let Some(a) = advanced.as_mut() {
            *a = more;
        }
        Ok(())
    })
}

/// Run to the end of the window.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evp_simulation_run(sim: *mut EvpSimulation) -> EvpStatus {
    guard(|| {
        let h = out_ref(sim, "sim")?;
        lift(h.sim.run_to_end())
    })
}

/// Current totals of a simulation.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evp_simulation_summary(sim: *const EvpSimulation, out: *mut EvpSummary) -> EvpStatus {
    guard(|| {
        let h = sim.as_ref().ok_or_else(|| fail(EvpStatus::NullPointer, "sim is null"))?;
        *out_ref(out, "out")? = fill_summary(&RunSummary::from_sim(&h.sim), h.sim.minute(), h.sim.is_done());
        Ok(())
    })
}

/// Run a config to completion and write the run directory to `out_dir`.
/// `summary` may be null.
///
/// # Safety
/// String arguments must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn evp_simulate(config_path: *const c_char, out_dir: *const c_char, summary: *mut EvpSummary) -> EvpStatus {
    guard(|| {
        let cfg = lift(SimConfig::load(&path_arg(config_path, "config_path")?))?;
        let dir = path_arg(out_dir, "out_dir")?;
        let sim = lift(Simulation::new(cfg))?;
        let done = lift(run_simulation(sim, Some(Path::new(&dir))))?;
        if let Some(s) = summary.as_mut() {
            let r = &done.summary;
            *s = fill_summary(r, r.warmup_minutes + r.run_minutes, true);
        }
        Ok(())
    })
}

/// Maximum-weight matching on a row-major `rows x cols` matrix. Non-finite
/// entries are forbidden pairs. `row_to_col` receives `rows` entries, -1 for
/// an unmatched row; `value` (may be null) the matched total.
///
/// # Safety
/// `values` must hold `rows * cols` doubles and `row_to_col` `rows` slots.
#[no_mangle]
pub unsafe extern "C" fn evp_max_weight_matching(
    values: *const f64,
    rows: usize,
    cols: usize,
    row_to_col: *mut i64,
    value: *mut f64,
) -> EvpStatus {
    guard(|| {
        let Some(n) = rows.checked_mul(cols) else {
            return Err(fail(EvpStatus::InvalidArgument, "matrix too large"));
        };
        if rows > 0 && row_to_col.is_null() {
            return Err(fail(EvpStatus::NullPointer, "row_to_col is null"));
        }
        if n > 0 && values.is_null() {
            return Err(fail(EvpStatus::NullPointer, "values is null"));
        }
        let flat = if n > 0 { std::slice::from_raw_parts(values, n) } else { &[] };
        let m: Vec<Vec<f64>> = (0..rows)
            .map(|i| flat[i * cols..(i + 1) * cols].iter().map(|&x| if x.is_finite() { x } else { FORBIDDEN }).collect())
            .collect();
        let matching = max_weight_matching(&m);
        if rows > 0 {
            let out = std::slice::from_raw_parts_mut(row_to_col, rows);
            out.fill(-1);
            for &(i, j) in &matching.pairs {
                out[i] = j as i64;
            }
        }
        if let Some(v) = value.as_mut() {
            *v = matching.value;
        }
        Ok(())
    })
}

/// Expected charging time of a vehicle-station pair, seconds.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_pect(t_idle: f64, t_travel: f64, t_queue: f64, t_idle_after: f64, out: *mut f64) -> EvpStatus {
    guard(|| {
        for (x, name) in [(t_idle, "t_idle"), (t_travel, "t_travel"), (t_queue, "t_queue"), (t_idle_after, "t_idle_after")] {
            finite(x, name)?;
        }
        *out_ref(out, "out")? = pect(t_idle, t_travel, t_queue, t_idle_after);
        Ok(())
    })
}

/// Fare in cents for a direct trip.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_fare_cents(direct_travel_min: f64, direct_km: f64, out: *mut i64) -> EvpStatus {
    guard(|| {
        finite(direct_travel_min, "direct_travel_min")?;
        finite(direct_km, "direct_km")?;
        *out_ref(out, "out")? = ledger::fare_cents(direct_travel_min, direct_km);
        Ok(())
    })
}

/// Tractive power in watts of a built-in vehicle type.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_drive_power(kind: EvpVehicleType, speed_mps: f64, passengers: u32, out: *mut f64) -> EvpStatus {
    guard(|| {
        if finite(speed_mps, "speed_mps")? < 0.0 {
            return Err(fail(EvpStatus::InvalidArgument, "speed_mps is negative"));
        }
        *out_ref(out, "out")? = ev::drive_power(&spec_of(kind), speed_mps, passengers);
        Ok(())
    })
}

/// Charger supply in kW of a built-in vehicle type at a state of charge.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_charge_power(kind: EvpVehicleType, soc: f64, station_limit_kw: f64, out: *mut f64) -> EvpStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&finite(soc, "soc")?) {
            return Err(fail(EvpStatus::InvalidArgument, "soc outside [0, 1]"));
        }
        if finite(station_limit_kw, "station_limit_kw")? < 0.0 {
            return Err(fail(EvpStatus::InvalidArgument, "station_limit_kw is negative"));
        }
        *out_ref(out, "out")? = ev::charge_power(&spec_of(kind), soc, station_limit_kw);
        Ok(())
    })
}
