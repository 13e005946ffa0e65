//! Operational intensity, machine balance and roofline classification.

use std::fmt;

use serde::Serialize;

use crate::profiles::{total_load, DeviceProfile, ModelProfile};
use crate::scalar::Scalar;
use crate::strategy::FusionStrategy;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RooflineError {
    #[error("DegenerateSplit: fractions must lie strictly inside (0, 1), got lambda_c={lambda_c}, lambda_m={lambda_m}")]
    DegenerateSplit { lambda_c: f64, lambda_m: f64 },
}

/// Which roof limits a workload on a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bound {
    /// Intensity above the machine balance: limited by peak compute (CC).
    ComputeConstrained,
    /// Intensity at or below the machine balance: limited by bandwidth (MC).
    MemoryConstrained,
}

impl Bound {
    pub fn short(self) -> &'static str {
        match self {
            Bound::ComputeConstrained => "CC",
            Bound::MemoryConstrained => "MC",
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Ridge point of the roofline, `peak_compute / mem_bandwidth` in FLOP/byte.
pub fn machine_balance<T: Scalar>(d: &DeviceProfile<T>) -> T {
    d.peak_compute / d.mem_bandwidth
}

pub fn model_intensity<T: Scalar>(flops: T, bytes: T) -> T {
    flops / bytes
}

/// Ties at the ridge point classify as memory constrained.
pub fn classify<T: Scalar>(intensity: T, d: &DeviceProfile<T>) -> Bound {
    if intensity > machine_balance(d) {
        Bound::ComputeConstrained
    } else {
        Bound::MemoryConstrained
    }
}

/// Intensities of the two sub-models given the FLOP and byte fractions
/// assigned to the first one.
pub fn sub_intensities<T: Scalar>(lambda_c: T, lambda_m: T, i0: T) -> Result<(T, T), RooflineError> {
    let inside = |x: T| x > T::zero() && x < T::one();
    if !inside(lambda_c) || !inside(lambda_m) {
        return Err(RooflineError::DegenerateSplit {
            lambda_c: lambda_c.as_f64(),
            lambda_m: lambda_m.as_f64(),
        });
    }
    let i1 = lambda_c / lambda_m * i0;
    let i2 = (T::one() - lambda_c) / (T::one() - lambda_m) * i0;
    Ok((i1, i2))
}

/// Whether each sub-model reaches its device's ridge point (`I ≥ π/β`).
pub fn feasibility<T: Scalar>(i1: T, i2: T, d1: &DeviceProfile<T>, d2: &DeviceProfile<T>) -> (bool, bool) {
    (i1 >= machine_balance(d1), i2 >= machine_balance(d2))
}

/// Attainable FLOP/s: `μ · min(π, I·β)`.
pub fn effective_rate<T: Scalar>(d: &DeviceProfile<T>, intensity: T) -> T {
    d.utilization * d.peak_compute.min(intensity * d.mem_bandwidth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityReport<T> {
    pub intensity: T,
    pub bound: Bound,
    /// Roofline-attainable FLOP/s, ignoring utilization.
    pub attainable: T,
}

impl<T: Scalar> IntensityReport<T> {
    pub fn new(intensity: T, d: &DeviceProfile<T>) -> Self {
        IntensityReport {
            intensity,
            bound: classify(intensity, d),
            attainable: d.peak_compute.min(intensity * d.mem_bandwidth),
        }
    }
}

/// One cell of the model × device classification matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflineRow<T> {
    pub model: String,
    pub device: String,
    pub intensity: T,
    pub balance: T,
    pub class: Bound,
}

/// Classifies every model (at its unfused, full-structure intensity) against
/// every device. Rows are ordered model-major, in input order.
pub fn roofline_matrix<T: Scalar>(models: &[&ModelProfile<T>], devices: &[DeviceProfile<T>]) -> Vec<RooflineRow<T>> {
    let mut rows = Vec::with_capacity(models.len() * devices.len());
    for model in models {
        let load = total_load(model, FusionStrategy::S3SsS1);
        let intensity = model_intensity(load.flops, load.bytes);
        for d in devices {
            rows.push(RooflineRow {
                model: model.name.clone(),
                device: d.name.clone(),
                intensity,
                balance: machine_balance(d),
                class: classify(intensity, d),
            });
        }
    }
    rows
}
