//! Simulation time. Second 0 is midnight at the start of the simulated
//! timeline; the timeline advances in whole-minute steps.

use serde::{Deserialize, Serialize};

/// Simulation minute index.
pub type Minute = i64;
/// Simulation time in seconds.
pub type Secs = i64;

pub const STEP_SECS: Secs = 60;
pub const SECS_PER_DAY: Secs = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimClock {
    /// Weekday of day 0, Monday = 0.
    pub start_weekday: u32,
}

impl SimClock {
    pub fn new(start_weekday: u32) -> Self {
        SimClock {
            start_weekday: start_weekday % 7,
        }
    }

    pub fn hour_of_day(&self, t: Secs) -> u32 {
        (t.rem_euclid(SECS_PER_DAY) / 3600) as u32
    }

    pub fn minute_of_hour(&self, t: Secs) -> u32 {
        (t.rem_euclid(3600) / 60) as u32
    }

    pub fn minute_of_day(&self, t: Secs) -> u32 {
        (t.rem_euclid(SECS_PER_DAY) / 60) as u32
    }

    pub fn weekday(&self, t: Secs) -> u32 {
        ((self.start_weekday as i64 + t.div_euclid(SECS_PER_DAY)).rem_euclid(7)) as u32
    }

    pub fn is_weekend(&self, t: Secs) -> bool {
        self.weekday(t) >= 5
    }

    /// Cyclic (sin, cos) encodings of hour, minute and weekday.
    pub fn time_features(&self, t: Secs) -> [f64; 6] {
        use std::f64::consts::TAU;
        let h = self.hour_of_day(t) as f64 / 24.0;
        let m = self.minute_of_hour(t) as f64 / 60.0;
        let w = self.weekday(t) as f64 / 7.0;
        [
            (TAU * h).sin(),
            (TAU * h).cos(),
            (TAU * m).sin(),
            (TAU * m).cos(),
            (TAU * w).sin(),
            (TAU * w).cos(),
        ]
    }
}

/// Hour of day of a simulation minute.
pub fn hour_of_minute(m: Minute) -> u32 {
    (m.rem_euclid(1440) / 60) as u32
}

/// Parse "HH:MM" into minutes after midnight.
pub fn parse_hhmm(s: &str) -> Option<u32> {
    let (h, m) = s.split_once(':')?;
    let h: u32 = h.trim().parse().ok()?;
    let m: u32 = m.trim().parse().ok()?;
    (h < 24 && m < 60).then_some(h * 60 + m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midnight_monday_encodes_to_unit_cosines() {
        let clock = SimClock::new(0);
        let f = clock.time_features(0);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[4], 0.0);
        assert_eq!(f[5], 1.0);
    }

    #[test]
    fn weekday_rolls_over() {
        let clock = SimClock::new(5);
        assert_eq!(clock.weekday(0), 5);
        assert_eq!(clock.weekday(SECS_PER_DAY * 2), 0);
        assert!(clock.is_weekend(10));
        assert!(!clock.is_weekend(SECS_PER_DAY * 2));
    }

    #[test]
    fn hhmm() {
        assert_eq!(parse_hhmm("01:30"), Some(90));
        assert_eq!(parse_hhmm("06:30"), Some(390));
        assert_eq!(parse_hhmm("24:00"), None);
    }
}
