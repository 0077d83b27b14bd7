//! Fares, operator reward and per-minute metric rows. Money is integer cents.

use serde::{Deserialize, Serialize};

use crate::clock::{Minute, Secs};

pub const BASE_FARE_CENTS: f64 = 255.0;
pub const CENTS_PER_MINUTE: f64 = 35.0;
pub const CENTS_PER_KM: f64 = 109.0;
pub const MIN_FARE_CENTS: i64 = 700;

/// Trip fare from direct travel time and distance, rounded half-up to cents.
pub fn fare_cents(direct_travel_min: f64, direct_km: f64) -> i64 {
    let raw = BASE_FARE_CENTS + CENTS_PER_MINUTE * direct_travel_min.max(0.0) + CENTS_PER_KM * direct_km.max(0.0);
    // tolerate binary noise just below a half cent
    let cents = (raw + 0.5 + 1e-7).floor() as i64;
    cents.max(MIN_FARE_CENTS)
}

/// The operator keeps a quarter of the fare, rounded half-up to cents.
pub fn operator_share_cents(fare_cents: i64) -> i64 {
    (fare_cents + 2).div_euclid(4)
}

/// Round an exact dollar total to cents, half away from zero.
pub fn dollars_to_cents(d: f64) -> i64 {
    (d * 100.0).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub minute: Minute,
    pub reward_cents: i64,
    pub cum_reward_cents: i64,
    pub served: u64,
    pub rejected: u64,
    pub ontime: u64,
    pub mean_delay_s: f64,
    pub mean_soc: f64,
    pub occupancy_rate: f64,
    pub grid_mw: f64,
    pub energy_kwh: f64,
    pub customers_per_vehicle: f64,
}

/// Per-minute snapshot values the engine hands to the ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MinuteState {
    pub mean_soc: f64,
    pub occupancy_rate: f64,
    pub grid_mw: f64,
    pub customers_per_vehicle: f64,
}

/// Cost lines booked in one minute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLines {
    /// Operating cost accrued this minute, exact dollars.
    pub op_dollars: f64,
    pub charged_kwh: f64,
    pub op_cents: i64,
    pub charge_cents: i64,
    pub tow_cents: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub reward_cents: i64,
    pub fare_cents: i64,
    pub share_cents: i64,
    pub op_cents: i64,
    pub charge_cents: i64,
    pub tow_cents: i64,
    pub served: u64,
    pub ontime: u64,
    pub rejected: u64,
    pub towed_requests: u64,
    pub delay_sum_s: i64,
    pub consumed_kwh: f64,
    pub charged_kwh: f64,
    pub peak_grid_mw: f64,
    pub customers_per_vehicle_sum: f64,
    pub minutes: u64,
}

impl Totals {
    pub fn ontime_rate(&self) -> f64 {
        ratio(self.ontime as f64, self.served as f64)
    }

    pub fn mean_delay_s(&self) -> f64 {
        ratio(self.delay_sum_s as f64, self.served as f64)
    }

    pub fn customers_per_vehicle(&self) -> f64 {
        ratio(self.customers_per_vehicle_sum, self.minutes as f64)
    }

    pub fn kwh_per_ontime(&self) -> f64 {
        ratio(self.consumed_kwh, self.ontime as f64)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

/// Settlement of one completed request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settlement {
    pub delay_s: Secs,
    pub ontime: bool,
    pub share_cents: i64,
}

/// Single-writer episode ledger. Cost totals are kept in exact units and
/// booked as the change in their rounded cent value, so the cumulative
/// reward always equals the sum of the per-minute rows.
#[derive(Debug, Clone)]
pub struct Ledger {
    ontime_delay_s: Secs,
    charge_per_kwh: f64,
    totals: Totals,
    op_dollars_total: f64,
    kwh_total: f64,
    cur: Minute,
    m_share: i64,
    m_tow: i64,
    m_op_dollars: f64,
    m_kwh: f64,
    m_served: u64,
    m_rejected: u64,
    m_ontime: u64,
    m_delay: i64,
    m_consumed: f64,
}

impl Ledger {
    pub fn new(ontime_delay_s: Secs, charge_per_kwh: f64) -> Self {
        Ledger {
            ontime_delay_s,
            charge_per_kwh,
            totals: Totals::default(),
            op_dollars_total: 0.0,
            kwh_total: 0.0,
            cur: 0,
            m_share: 0,
            m_tow: 0,
            m_op_dollars: 0.0,
            m_kwh: 0.0,
            m_served: 0,
            m_rejected: 0,
            m_ontime: 0,
            m_delay: 0,
            m_consumed: 0.0,
        }
    }

    pub fn totals(&self) -> &Totals {
        &self.totals
    }

    pub fn settle(&mut self, fare_cents: i64, delay_s: Secs) -> Settlement {
        let ontime = delay_s <= self.ontime_delay_s;
        let share = if ontime { operator_share_cents(fare_cents) } else { 0 };
        self.m_served += 1;
        self.m_delay += delay_s;
        if ontime {
            self.m_ontime += 1;
            self.m_share += share;
            self.totals.fare_cents += fare_cents;
        }
        Settlement {
            delay_s,
            ontime,
            share_cents: share,
        }
    }

    pub fn reject(&mut self) {
        self.m_rejected += 1;
    }

    pub fn drive(&mut self, km: f64, op_cost_per_km: f64) {
        self.m_op_dollars += km * op_cost_per_km;
    }

    pub fn consume(&mut self, kwh: f64) {
        self.m_consumed += kwh;
    }

    pub fn charge(&mut self, kwh: f64) {
        self.m_kwh += kwh;
    }

    pub fn tow(&mut self, cents: i64) {
        self.m_tow += cents;
    }

    /// Close the minute and return its row and cost lines.
    pub fn close_minute(&mut self, minute: Minute, s: MinuteState) -> (MetricsRow, CostLines) {
        self.cur = minute;
        let old_op = dollars_to_cents(self.op_dollars_total);
        let old_ch = dollars_to_cents(self.kwh_total * self.charge_per_kwh);
        self.op_dollars_total += self.m_op_dollars;
        self.kwh_total += self.m_kwh;
        let op_cents = dollars_to_cents(self.op_dollars_total) - old_op;
        let charge_cents = dollars_to_cents(self.kwh_total * self.charge_per_kwh) - old_ch;
        let reward = self.m_share - op_cents - charge_cents - self.m_tow;
        let t = &mut self.totals;
        t.reward_cents += reward;
        t.share_cents += self.m_share;
        t.op_cents += op_cents;
        t.charge_cents += charge_cents;
        t.tow_cents += self.m_tow;
        t.served += self.m_served;
        t.ontime += self.m_ontime;
        t.rejected += self.m_rejected;
        t.delay_sum_s += self.m_delay;
        t.consumed_kwh += self.m_consumed;
        t.charged_kwh += self.m_kwh;
        t.peak_grid_mw = t.peak_grid_mw.max(s.grid_mw);
        t.customers_per_vehicle_sum += s.customers_per_vehicle;
        t.minutes += 1;
        let row = MetricsRow {
            minute,
            reward_cents: reward,
            cum_reward_cents: t.reward_cents,
            served: self.m_served,
            rejected: self.m_rejected,
            ontime: self.m_ontime,
            mean_delay_s: ratio(self.m_delay as f64, self.m_served as f64),
            mean_soc: s.mean_soc,
            occupancy_rate: s.occupancy_rate,
            grid_mw: s.grid_mw,
            energy_kwh: self.m_consumed,
            customers_per_vehicle: s.customers_per_vehicle,
        };
        let lines = CostLines {
            op_dollars: self.m_op_dollars,
            charged_kwh: self.m_kwh,
            op_cents,
            charge_cents,
            tow_cents: self.m_tow,
        };
        self.m_share = 0;
        self.m_tow = 0;
        self.m_op_dollars = 0.0;
        self.m_kwh = 0.0;
        self.m_served = 0;
        self.m_rejected = 0;
        self.m_ontime = 0;
        self.m_delay = 0;
        self.m_consumed = 0.0;
        (row, lines)
    }

    pub fn note_towed_request(&mut self) {
        self.totals.towed_requests += 1;
    }

    pub fn last_minute(&self) -> Minute {
        self.cur
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fare_examples() {
        assert_eq!(fare_cents(0.0, 0.0), 700);
        assert_eq!(fare_cents(10.0, 3.0), 932);
        assert_eq!(fare_cents(5.0, 1.0), 700);
        // 255 + 35*12.5 + 109*2.5 = 965 exactly
        assert_eq!(fare_cents(12.5, 2.5), 965);
        // half a cent rounds up
        assert_eq!(fare_cents(10.0, 4.5 / 109.0 + 4.0), 1046);
    }

    #[test]
    fn operator_share() {
        assert_eq!(operator_share_cents(932), 233);
        assert_eq!(operator_share_cents(700), 175);
        assert_eq!(operator_share_cents(702), 176);
        assert_eq!(operator_share_cents(701), 175);
    }

    #[test]
    fn settle_threshold() {
        let mut l = Ledger::new(300, 0.40);
        assert_eq!(l.settle(932, 180).share_cents, 233);
        let s = l.settle(932, 360);
        assert!(!s.ontime);
        assert_eq!(s.share_cents, 0);
        l.reject();
        let (row, _) = l.close_minute(0, MinuteState::default());
        assert_eq!((row.served, row.ontime, row.rejected, row.reward_cents), (2, 1, 1, 233));
        assert_eq!(row.mean_delay_s, 270.0);
    }

    #[test]
    fn costs_book_cent_deltas() {
        let mut l = Ledger::new(300, 0.40);
        l.drive(10.0, 0.12);
        l.charge(1.2);
        let (row, c) = l.close_minute(0, MinuteState::default());
        assert_eq!((c.op_cents, c.charge_cents), (120, 48));
        assert_eq!(row.reward_cents, -168);
        // sub-cent amounts accumulate until they cross a cent boundary
        let mut sum = row.reward_cents;
        for m in 1..=10 {
            l.drive(0.01, 0.12);
            let (r, _) = l.close_minute(m, MinuteState::default());
            sum += r.reward_cents;
            assert_eq!(r.cum_reward_cents, sum);
        }
        assert_eq!(l.totals().op_cents, 121);
        assert_eq!(l.totals().reward_cents, sum);
        l.tow(tow_for_test());
        let (r, _) = l.close_minute(11, MinuteState::default());
        assert_eq!(r.reward_cents, -13500);
    }

    fn tow_for_test() -> i64 {
        crate::control::tow_cost_cents(4.0)
    }
}
