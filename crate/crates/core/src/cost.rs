//! Latency, accuracy-loss and Lagrangian evaluation of a candidate plan.
//!
//! A plan cuts the model at a layer boundary `k`: layers `[0, k)` run on the
//! first device under strategy `θ1`, layers `[k, n)` on the second device
//! under `θ2`, and the activation leaving layer `k - 1` crosses the link.

use serde::Serialize;

use crate::profiles::{AccuracyPenaltyTable, DeviceProfile, LinkProfile, Load, ModelProfile, SubModel};
use crate::roofline::{effective_rate, feasibility, model_intensity};
use crate::scalar::Scalar;
pub use crate::strategy::FusionStrategy;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("DegenerateSplit: cut {cut} leaves an empty segment of a {layers}-layer model")]
    DegenerateSplit { cut: usize, layers: usize },
}

/// Per-stage latency in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency<T> {
    pub t1: T,
    pub t2: T,
    pub t3: T,
    pub t_total: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown<T> {
    pub t1: T,
    pub t2: T,
    pub t3: T,
    pub t_total: T,
    /// Weighted accuracy penalty in accuracy points.
    #[serde(rename = "dA_total")]
    pub d_a_total: T,
    /// `t_total + λ₁·dA_total`.
    pub lagrangian: T,
}

impl<T: Scalar> CostBreakdown<T> {
    pub fn latency(&self) -> Latency<T> {
        Latency {
            t1: self.t1,
            t2: self.t2,
            t3: self.t3,
            t_total: self.t_total,
        }
    }
}

/// A fully evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionPlan<T> {
    pub cut_index: usize,
    /// Fraction of FLOPs placed on the first device.
    pub lambda_c: T,
    /// Fraction of bytes placed on the first device.
    pub lambda_m: T,
    pub intensity1: T,
    pub intensity2: T,
    pub theta1: FusionStrategy,
    pub theta2: FusionStrategy,
    pub cost: CostBreakdown<T>,
    pub feasible: (bool, bool),
}

impl<T: Scalar> PartitionPlan<T> {
    /// Recomputes the split fractions from the model and compares them with
    /// the stored values.
    pub fn is_consistent_with(&self, model: &ModelProfile<T>) -> bool {
        match split_loads(model, self.cut_index, self.theta1, self.theta2) {
            Ok((a, b)) => {
                let (lc, lm) = fractions(&a, &b);
                lc == self.lambda_c && lm == self.lambda_m
            }
            Err(_) => false,
        }
    }
}

/// Read-only inputs shared by every candidate evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a, T> {
    pub model: &'a ModelProfile<T>,
    pub device1: &'a DeviceProfile<T>,
    pub device2: &'a DeviceProfile<T>,
    pub link: &'a LinkProfile<T>,
    pub penalties: &'a AccuracyPenaltyTable<T>,
    pub lambda1: T,
}

/// FLOP and byte totals of the two segments.
pub fn split_loads<T: Scalar>(
    model: &ModelProfile<T>,
    cut: usize,
    theta1: FusionStrategy,
    theta2: FusionStrategy,
) -> Result<(Load<T>, Load<T>), CostError> {
    let n = model.layer_count();
    if cut == 0 || cut >= n {
        return Err(CostError::DegenerateSplit { cut, layers: n });
    }
    Ok((model.segment_load(0..cut, theta1), model.segment_load(cut..n, theta2)))
}

fn fractions<T: Scalar>(first: &Load<T>, second: &Load<T>) -> (T, T) {
    (
        first.flops / (first.flops + second.flops),
        first.bytes / (first.bytes + second.bytes),
    )
}

/// Seconds to run `load` on `device` at its roofline-capped rate.
pub fn compute_time<T: Scalar>(load: &Load<T>, device: &DeviceProfile<T>) -> T {
    load.flops / effective_rate(device, model_intensity(load.flops, load.bytes))
}

/// Seconds to ship `bytes` across the link.
pub fn transfer_time<T: Scalar>(bytes: T, link: &LinkProfile<T>) -> T {
    bytes / link.bandwidth + link.fixed_latency
}

pub fn latency<T: Scalar>(
    model: &ModelProfile<T>,
    cut: usize,
    theta1: FusionStrategy,
    theta2: FusionStrategy,
    d1: &DeviceProfile<T>,
    d2: &DeviceProfile<T>,
    link: &LinkProfile<T>,
) -> Result<Latency<T>, CostError> {
    let (first, second) = split_loads(model, cut, theta1, theta2)?;
    let t1 = compute_time(&first, d1);
    let t2 = compute_time(&second, d2);
    let t3 = transfer_time(model.cut_activation_bytes(cut), link);
    Ok(Latency {
        t1,
        t2,
        t3,
        t_total: t1 + t2 + t3,
    })
}

/// `λ·ΔA₁(θ1) + (1−λ)·ΔA₂(θ2)`, with `λ` the first device's share.
pub fn accuracy_loss<T: Scalar>(
    theta1: FusionStrategy,
    theta2: FusionStrategy,
    lambda: T,
    table: &AccuracyPenaltyTable<T>,
) -> T {
    lambda * table.penalty(SubModel::First, theta1) + (T::one() - lambda) * table.penalty(SubModel::Second, theta2)
}

pub fn lagrangian<T: Scalar>(t_total: T, d_a: T, lambda1: T) -> T {
    t_total + lambda1 * d_a
}

/// Evaluates one `(cut, θ1, θ2)` candidate.
///
/// The accuracy weighting uses the FLOP fraction `lambda_c` as the partition
/// point.
pub fn evaluate<T: Scalar>(
    problem: &Problem<'_, T>,
    cut: usize,
    theta1: FusionStrategy,
    theta2: FusionStrategy,
) -> Result<PartitionPlan<T>, CostError> {
    let (first, second) = split_loads(problem.model, cut, theta1, theta2)?;
    let (lambda_c, lambda_m) = fractions(&first, &second);
    let intensity1 = model_intensity(first.flops, first.bytes);
    let intensity2 = model_intensity(second.flops, second.bytes);

    let t1 = compute_time(&first, problem.device1);
    let t2 = compute_time(&second, problem.device2);
    let t3 = transfer_time(problem.model.cut_activation_bytes(cut), problem.link);
    let t_total = t1 + t2 + t3;
    let d_a_total = accuracy_loss(theta1, theta2, lambda_c, problem.penalties);

    Ok(PartitionPlan {
        cut_index: cut,
        lambda_c,
        lambda_m,
        intensity1,
        intensity2,
        theta1,
        theta2,
        cost: CostBreakdown {
            t1,
            t2,
            t3,
            t_total,
            d_a_total,
            lagrangian: lagrangian(t_total, d_a_total, problem.lambda1),
        },
        feasible: feasibility(intensity1, intensity2, problem.device1, problem.device2),
    })
}
