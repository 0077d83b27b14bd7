//! Idle-vehicle repositioning toward recently observed demand.

use crate::clock::{Minute, Secs};
use crate::dispatch::TravelTimes;
use crate::error::{Error, Result};
use crate::ev::VehicleId;
use crate::network::Vertex;

pub const WINDOW_MINUTES: usize = 60;

/// Per-vertex request counts over the last 60 minutes.
#[derive(Debug, Clone)]
pub struct DemandWindow {
    slots: Vec<Vec<u32>>,
    head: usize,
    sums: Vec<u64>,
    last_minute: Option<Minute>,
}

impl DemandWindow {
    pub fn new(num_vertices: usize) -> Self {
        DemandWindow {
            slots: vec![vec![0; num_vertices]; WINDOW_MINUTES],
            head: 0,
            sums: vec![0; num_vertices],
            last_minute: None,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.sums.len()
    }

    /// Push one minute of counts, evicting the oldest slot.
    pub fn update(&mut self, minute: Minute, counts: &[u32]) -> Result<()> {
        if counts.len() != self.sums.len() {
            return Err(Error::Invalid("demand counts length differs from vertex count".into()));
        }
        if self.last_minute.is_some_and(|m| m >= minute) {
            return Err(Error::Invariant(format!("demand window updated twice at minute {minute}")));
        }
        self.last_minute = Some(minute);
        let slot = &mut self.slots[self.head];
        for ((s, old), &new) in self.sums.iter_mut().zip(slot.iter_mut()).zip(counts) {
            *s = *s - *old as u64 + new as u64;
            *old = new;
        }
        self.head = (self.head + 1) % WINDOW_MINUTES;
        Ok(())
    }

    /// Mean requests per minute at `v`.
    pub fn mean(&self, v: Vertex) -> f64 {
        self.sums[v] as f64 / WINDOW_MINUTES as f64
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.sums.len()).map(|v| self.mean(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdleVehicle {
    pub id: VehicleId,
    pub location: Vertex,
    pub seats: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub vehicle: VehicleId,
    pub target: Vertex,
    pub travel_s: Secs,
    /// Demand at the target before this vehicle was subtracted.
    pub demand_before: f64,
}

/// Greedy coverage: repeatedly take the vertex with the most remaining expected
/// demand and send the idle vehicle with the best seats-per-second ratio within
/// the horizon. Moves with `travel_s == 0` are no-ops.
pub fn reposition(idle: &[IdleVehicle], window: &DemandWindow, horizon_s: Secs, tt: &dyn TravelTimes) -> Vec<Move> {
    let horizon_min = horizon_s as f64 / 60.0;
    let mut demand: Vec<f64> = window.means().iter().map(|x| x * horizon_min).collect();
    let mut open: Vec<bool> = demand.iter().map(|&d| d > 0.0).collect();
    let mut free: Vec<IdleVehicle> = idle.to_vec();
    free.sort_by_key(|v| v.id);
    let mut moves = Vec::new();
    loop {
        let positive: f64 = demand.iter().filter(|&&d| d > 0.0).sum();
        if free.is_empty() || positive <= 0.0 {
            break;
        }
        let mut target = None;
        for (v, &d) in demand.iter().enumerate() {
            if open[v] && d > 0.0 && target.is_none_or(|(_, bd)| d > bd) {
                target = Some((v, d));
            }
        }
        let Some((n, d)) = target else { break };
        let locations: Vec<Vertex> = free.iter().map(|v| v.location).collect();
        let times = tt.times_to(n, &locations);
        let mut pick: Option<(usize, f64, Secs)> = None;
        for (i, (veh, &t)) in free.iter().zip(&times).enumerate() {
            if t > horizon_s {
                continue;
            }
            let h = if t == 0 { f64::INFINITY } else { veh.seats as f64 / t as f64 };
            if pick.is_none_or(|(_, bh, _)| h > bh) {
                pick = Some((i, h, t));
            }
        }
        match pick {
            None => open[n] = false,
            Some((i, _, t)) => {
                let veh = free.remove(i);
                moves.push(Move {
                    vehicle: veh.id,
                    target: n,
                    travel_s: t,
                    demand_before: d,
                });
                demand[n] -= veh.seats as f64;
            }
        }
    }
    moves
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::TimeMatrix;

    #[test]
    fn window_means() {
        let mut w = DemandWindow::new(6);
        w.update(0, &[0; 6]).unwrap();
        assert!(w.means().iter().all(|&x| x == 0.0));
        let mut spike = [0; 6];
        spike[5] = 60;
        w.update(1, &spike).unwrap();
        assert_eq!(w.mean(5), 1.0);
        assert!(w.update(1, &[0; 6]).is_err());

        let mut c = DemandWindow::new(6);
        let mut two = [0; 6];
        two[3] = 2;
        for m in 0..200 {
            c.update(m, &two).unwrap();
        }
        assert_eq!(c.mean(3), 2.0);
    }

    fn tt3(times: [[Secs; 3]; 3]) -> TimeMatrix {
        TimeMatrix(times.iter().map(|r| r.to_vec()).collect())
    }

    #[test]
    fn no_idle_vehicles() {
        let mut w = DemandWindow::new(3);
        w.update(0, &[0, 0, 60]).unwrap();
        let tt = tt3([[0; 3]; 3]);
        assert!(reposition(&[], &w, 1800, &tt).is_empty());
    }

    #[test]
    fn single_vehicle_goes_to_demand() {
        let mut w = DemandWindow::new(3);
        w.update(0, &[0, 0, 6]).unwrap();
        let tt = tt3([[0, 60, 120], [60, 0, 60], [120, 60, 0]]);
        let m = reposition(&[IdleVehicle { id: 4, location: 0, seats: 5 }], &w, 1800, &tt);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].vehicle, m[0].target, m[0].travel_s), (4, 2, 120));
        assert!((m[0].demand_before - 3.0).abs() < 1e-12);
    }

    #[test]
    fn near_small_vehicle_beats_far_large_one() {
        let mut w = DemandWindow::new(3);
        w.update(0, &[0, 0, 12]).unwrap();
        // 7 seats from 600 s away vs 5 seats from 120 s away
        let tt = tt3([[0, 600, 600], [600, 0, 120], [600, 120, 0]]);
        let idle = [
            IdleVehicle { id: 0, location: 0, seats: 7 },
            IdleVehicle { id: 1, location: 1, seats: 5 },
        ];
        let m = reposition(&idle, &w, 1800, &tt);
        assert_eq!(m[0].vehicle, 1);
        // D = 12/60 * 30 = 6; after 5 seats, 1 remains for the 7-seater
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].vehicle, 0);
    }

    #[test]
    fn horizon_excludes_far_vehicles() {
        let mut w = DemandWindow::new(3);
        w.update(0, &[0, 0, 60]).unwrap();
        let tt = tt3([[0, 0, 4000], [0, 0, 4000], [4000, 4000, 0]]);
        let m = reposition(&[IdleVehicle { id: 0, location: 0, seats: 5 }], &w, 1800, &tt);
        assert!(m.is_empty());
    }
}
