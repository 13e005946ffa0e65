//! Co-design planner for splitting a re-parameterized network across two
//! edge devices joined by a network link.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases. The simulator works in `f64`.

pub mod cost;
pub mod optimizer;
pub mod profiles;
pub mod reparam;
pub mod report;
pub mod roofline;
pub mod scalar;
pub mod simulator;
pub mod split_consistency;
pub mod strategy;

pub use cost::{evaluate, CostBreakdown, CostError, PartitionPlan, Problem};
pub use optimizer::{grid_search, ranked_candidates, refine_lambda, snap_and_compare, OptimizeError, Refinement};
pub use profiles::{
    load_config, load_device, load_model, parse_config, AccuracyPenaltyTable, Config, ConfigError, DeviceProfile,
    LayerProfile, LinkProfile, ModelProfile, SubModel,
};
pub use reparam::{fuse, fusion_check, FusionCheck, Kernel3x3, RepBlock, ReparamError};
pub use roofline::{classify, machine_balance, Bound, RooflineRow};
pub use scalar::Scalar;
pub use simulator::{validate_against_model, SimConfig, SimError, SimReport, StageTimes};
pub use split_consistency::{rate_check, ConvergenceError, QuadraticObjective, RateReport};
pub use strategy::{FusionStrategy, StrategyTable};

pub type DeviceProfileF64 = DeviceProfile<f64>;
pub type DeviceProfileF32 = DeviceProfile<f32>;
pub type LinkProfileF64 = LinkProfile<f64>;
pub type LinkProfileF32 = LinkProfile<f32>;
pub type ModelProfileF64 = ModelProfile<f64>;
pub type ModelProfileF32 = ModelProfile<f32>;
pub type ConfigF64 = Config<f64>;
pub type ConfigF32 = Config<f32>;
pub type PartitionPlanF64 = PartitionPlan<f64>;
pub type PartitionPlanF32 = PartitionPlan<f32>;
pub type Kernel3x3F64 = Kernel3x3<f64>;
pub type Kernel3x3F32 = Kernel3x3<f32>;
pub type RepBlockF64 = RepBlock<f64>;
pub type RepBlockF32 = RepBlock<f32>;
pub type QuadraticObjectiveF64 = QuadraticObjective<f64>;
pub type QuadraticObjectiveF32 = QuadraticObjective<f32>;
