//! Idle-time prediction: feature construction, the binary sample log, a
//! bucketed lookup table and GraphConv inference from exported weights.

mod features;
mod gcn;
mod table;

pub use features::{
    FleetSnapshot, IdleFeatures, IdleSample, SampleReader, SampleWriter, SAMPLE_MAGIC, TIME_FEATURES,
};
pub use gcn::{gcn_forward, GcnPredictor, GcnWeights, LayerSpec, WeightsHeader, WEIGHTS_MAGIC};
pub use table::{LookupTable, TablePredictor, TABLE_MAGIC};

use crate::clock::Secs;
use crate::network::Vertex;

/// Predicts how long a vehicle at a vertex would stay idle.
pub trait IdlePredictor {
    /// Freeze the fleet and demand state used for all predictions this step.
    fn begin_step(&mut self, snapshot: &FleetSnapshot);
    /// Idle seconds for a vehicle that is at `location` at time `at_s`.
    fn predict(&mut self, location: Vertex, at_s: Secs) -> f64;
}

/// Same answer everywhere; useful as a neutral baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl IdlePredictor for ConstantPredictor {
    fn begin_step(&mut self, _: &FleetSnapshot) {}

    fn predict(&mut self, _: Vertex, _: Secs) -> f64 {
        self.0.max(0.0)
    }
}
