//! Branch-retention strategies for a re-parameterizable block.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

/// Which branches of a three-branch block (3×3 conv, shortcut, 1×1 conv)
/// remain active at inference time.
///
/// Variant order is the canonical enumeration order used for tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionStrategy {
    /// 3×3 convolution only; equivalent to the fully fused single kernel.
    S3,
    /// 3×3 convolution plus identity shortcut.
    S3Ss,
    /// 3×3 convolution plus 1×1 convolution.
    S3S1,
    /// All three branches.
    S3SsS1,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::S3,
        FusionStrategy::S3Ss,
        FusionStrategy::S3S1,
        FusionStrategy::S3SsS1,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn has_shortcut(self) -> bool {
        matches!(self, FusionStrategy::S3Ss | FusionStrategy::S3SsS1)
    }

    pub fn has_1x1(self) -> bool {
        matches!(self, FusionStrategy::S3S1 | FusionStrategy::S3SsS1)
    }

    pub fn branch_count(self) -> usize {
        1 + self.has_shortcut() as usize + self.has_1x1() as usize
    }

    /// True when every branch active in `self` is also active in `other`.
    pub fn is_subset_of(self, other: FusionStrategy) -> bool {
        (!self.has_shortcut() || other.has_shortcut()) && (!self.has_1x1() || other.has_1x1())
    }

    /// Canonical name as used in configuration files and reports.
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::S3 => "S3",
            FusionStrategy::S3Ss => "S3+Ss",
            FusionStrategy::S3S1 => "S3+S1",
            FusionStrategy::S3SsS1 => "S3+Ss+S1",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown fusion strategy `{0}`")]
pub struct UnknownStrategy(pub String);

impl FromStr for FusionStrategy {
    type Err = UnknownStrategy;

    /// Accepts the canonical `S3+Ss+S1` spelling and the `S3_Ss_S1` alias.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().replace('_', "+").as_str() {
            "S3" => Ok(FusionStrategy::S3),
            "S3+Ss" => Ok(FusionStrategy::S3Ss),
            "S3+S1" => Ok(FusionStrategy::S3S1),
            "S3+Ss+S1" => Ok(FusionStrategy::S3SsS1),
            _ => Err(UnknownStrategy(s.to_string())),
        }
    }
}

impl Serialize for FusionStrategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FusionStrategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// One value per strategy, indexed by [`FusionStrategy`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StrategyTable<T>(pub [T; 4]);

impl<T: Copy> StrategyTable<T> {
    pub fn uniform(value: T) -> Self {
        StrategyTable([value; 4])
    }

    pub fn from_fn(mut f: impl FnMut(FusionStrategy) -> T) -> Self {
        StrategyTable(FusionStrategy::ALL.map(&mut f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (FusionStrategy, T)> + '_ {
        FusionStrategy::ALL.iter().map(move |&s| (s, self.0[s.ordinal()]))
    }
}

impl<T> Index<FusionStrategy> for StrategyTable<T> {
    type Output = T;
    fn index(&self, s: FusionStrategy) -> &T {
        &self.0[s.ordinal()]
    }
}

impl<T> IndexMut<FusionStrategy> for StrategyTable<T> {
    fn index_mut(&mut self, s: FusionStrategy) -> &mut T {
        &mut self.0[s.ordinal()]
    }
}
