use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use evpool_ffi::*;

const TINY: &str = r#"
seed = 3
policy = "itx"
warmup_days = 0.0
run_days = 0.05

[network.grid]
rows = 5
cols = 5
spacing_m = 400.0

[demand.synthetic]
base_rate = 1.0
seed = 2

[[fleet]]
preset = "leaf"
count = 6

[chargers]
count = 2
seed = 1
"#;

fn tiny_config(dir: &Path) -> CString {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = evp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn step_until_done_then_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let events = CString::new(dir.path().join("events.jsonl").to_str().unwrap()).unwrap();
    let mut sim = ptr::null_mut();
    unsafe {
        assert_eq!(evp_simulation_new(cfg.as_ptr(), events.as_ptr(), &mut sim), EvpStatus::Ok);
        assert!(!sim.is_null());
        let mut steps = 0;
        let mut more = true;
        while more {
            assert_eq!(evp_simulation_step(sim, &mut more), EvpStatus::Ok);
            steps += more as i64;
        }
        let mut s = EvpSummary::default();
        assert_eq!(evp_simulation_summary(sim, &mut s), EvpStatus::Ok);
        assert!(s.done);
        assert_eq!(s.minute, steps);
        assert_eq!(s.minute, 72);
        assert_eq!((s.vehicles, s.stations), (6, 2));
        assert_eq!(s.reward_cents, s.share_cents - s.op_cents - s.charge_cents - s.tow_cents);
        // stepping past the end is a no-op
        assert_eq!(evp_simulation_step(sim, &mut more), EvpStatus::Ok);
        assert!(!more);
        evp_simulation_free(sim);
    }
    assert!(std::fs::metadata(dir.path().join("events.jsonl")).unwrap().len() > 0);
}

#[test]
fn handle_and_one_shot_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let mut a = EvpSummary::default();
    let mut b = EvpSummary::default();
    unsafe {
        assert_eq!(evp_simulate(cfg.as_ptr(), out.as_ptr(), &mut a), EvpStatus::Ok);
        let mut sim = ptr::null_mut();
        assert_eq!(evp_simulation_new(cfg.as_ptr(), ptr::null(), &mut sim), EvpStatus::Ok);
        assert_eq!(evp_simulation_run(sim), EvpStatus::Ok);
        assert_eq!(evp_simulation_summary(sim, &mut b), EvpStatus::Ok);
        evp_simulation_free(sim);
    }
    assert_eq!(a, b);
    assert!(dir.path().join("run/summary.json").exists());
}

#[test]
fn errors_map_to_codes() {
    let mut sim = ptr::null_mut();
    unsafe {
        assert_eq!(evp_simulation_new(ptr::null(), ptr::null(), &mut sim), EvpStatus::NullPointer);
        assert!(last_error().contains("config_path"));
        let missing = CString::new("/nonexistent/evpool.toml").unwrap();
        assert_eq!(evp_simulation_new(missing.as_ptr(), ptr::null(), &mut sim), EvpStatus::Io);
        assert!(sim.is_null());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "seed = 1\nrun_days = -1.0\n[network.grid]\nrows = 2\ncols = 2\nspacing_m = 100.0\n").unwrap();
        let bad = CString::new(p.to_str().unwrap()).unwrap();
        let s = evp_simulation_new(bad.as_ptr(), ptr::null(), &mut sim);
        assert!(matches!(s, EvpStatus::InvalidArgument | EvpStatus::Data), "{s:?}");
        assert!(!last_error().is_empty());
        assert_eq!(evp_simulation_step(ptr::null_mut(), ptr::null_mut()), EvpStatus::NullPointer);
        assert_eq!(evp_simulation_summary(ptr::null(), ptr::null_mut()), EvpStatus::NullPointer);
        evp_simulation_free(ptr::null_mut());
        let mut x = 0.0;
        assert_eq!(evp_pect(f64::NAN, 0.0, 0.0, 0.0, &mut x), EvpStatus::InvalidArgument);
        assert_eq!(evp_charge_power(EvpVehicleType::Leaf, 1.5, 50.0, &mut x), EvpStatus::InvalidArgument);
        assert_eq!(evp_pect(1.0, 0.0, 0.0, 0.0, ptr::null_mut()), EvpStatus::NullPointer);
        // success clears the message
        assert_eq!(evp_pect(1.0, 0.0, 0.0, 0.0, &mut x), EvpStatus::Ok);
        assert!(evp_last_error().is_null());
    }
}

#[test]
fn scalar_functions() {
    let mut x = 0.0;
    let mut c = 0i64;
    unsafe {
        assert_eq!(evp_pect(1800.0, 300.0, 600.0, 200.0, &mut x), EvpStatus::Ok);
        // wait is the larger of travel and queue; the slot after it fits inside the idle time
        assert_eq!(x, 1800.0 - 600.0);
        assert_eq!(evp_pect(1000.0, 300.0, 100.0, 900.0, &mut x), EvpStatus::Ok);
        assert_eq!(x, 1000.0 - 300.0 - (300.0 + 900.0 - 1000.0));
        assert_eq!(evp_fare_cents(10.0, 3.0, &mut c), EvpStatus::Ok);
        assert_eq!(c, 932);
        assert_eq!(evp_fare_cents(0.0, 0.0, &mut c), EvpStatus::Ok);
        assert_eq!(c, 700);
        assert_eq!(evp_drive_power(EvpVehicleType::Model3, 0.0, 0, &mut x), EvpStatus::Ok);
        assert_eq!(x, 0.0);
        assert_eq!(evp_drive_power(EvpVehicleType::Model3, 10.0, 2, &mut x), EvpStatus::Ok);
        assert!(x > 0.0);
        assert_eq!(evp_charge_power(EvpVehicleType::Leaf, 0.99, 1000.0, &mut x), EvpStatus::Ok);
        assert!(x > 0.0);
        assert_eq!(evp_charge_power(EvpVehicleType::Leaf, 1.0, 1000.0, &mut x), EvpStatus::Ok);
        assert_eq!(x, 0.0);
    }
}

#[test]
fn matching_through_pointers() {
    let inf = f64::NEG_INFINITY;
    let m = [inf, 2.0, inf, inf, 9.0, inf, -1.0, inf, inf];
    let mut out = [7i64; 3];
    let mut v = 0.0;
    unsafe {
        assert_eq!(evp_max_weight_matching(m.as_ptr(), 3, 3, out.as_mut_ptr(), &mut v), EvpStatus::Ok);
    }
    assert_eq!(out, [-1, 1, -1]);
    assert_eq!(v, 9.0);
    let tall = [4.0, 4.0, 4.0, 1.0, 2.0, 2.0];
    unsafe {
        assert_eq!(evp_max_weight_matching(tall.as_ptr(), 3, 2, out.as_mut_ptr(), &mut v), EvpStatus::Ok);
        assert_eq!(evp_max_weight_matching(ptr::null(), 0, 0, ptr::null_mut(), ptr::null_mut()), EvpStatus::Ok);
        assert_eq!(evp_max_weight_matching(ptr::null(), 2, 2, out.as_mut_ptr(), &mut v), EvpStatus::NullPointer);
    }
    assert_eq!(v, 8.0);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/evpool.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "evp_simulation_new",
        "evp_simulation_step",
        "evp_simulation_run",
        "evp_simulation_summary",
        "evp_simulation_free",
        "evp_simulate",
        "evp_max_weight_matching",
        "evp_pect",
        "evp_fare_cents",
        "evp_drive_power",
        "evp_charge_power",
        "evp_last_error",
        "typedef struct EvpSimulation EvpSimulation",
        "EVP_STATUS_NULL_POINTER = 1",
        "EVP_STATUS_PANIC = 6",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"evpool.h\"\nint main(void) { EvpSummary s; (void)s; EvpStatus st = EVP_STATUS_OK; return (int)st; }\n",
    )
    .unwrap();
    let inc = header().parent().unwrap().to_path_buf();
    let st = Command::new(cc)
        .arg("-std=c99")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&inc)
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
