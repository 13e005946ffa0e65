//! Device, link, model and accuracy-penalty descriptions, plus the JSON
//! configuration loader that produces them.
//!
//! All quantities are raw SI numbers: FLOPs, bytes, seconds, FLOP/s, bytes/s.
//! The loader walks the document by hand so that every error can name the
//! exact key that caused it (`link.bandwidth`, `model.layers[3].flops.S3`).

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::scalar::Scalar;
use crate::strategy::{FusionStrategy, StrategyTable};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("Parse: {0}")]
    Parse(String),
    #[error("MissingField: {0}")]
    MissingField(String),
    #[error("NonPositiveQuantity: {0}")]
    NonPositiveQuantity(String),
    #[error("UnknownStrategyName: {0}")]
    UnknownStrategyName(String),
    #[error("InvalidValue: {key}: {reason}")]
    InvalidValue { key: String, reason: String },
}

impl ConfigError {
    /// Short error name used by the command-line exit contract.
    pub fn name(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "Io",
            ConfigError::Parse(_) => "Parse",
            ConfigError::MissingField(_) => "MissingField",
            ConfigError::NonPositiveQuantity(_) => "NonPositiveQuantity",
            ConfigError::UnknownStrategyName(_) => "UnknownStrategyName",
            ConfigError::InvalidValue { .. } => "InvalidValue",
        }
    }

    fn invalid(key: &str, reason: impl Into<String>) -> Self {
        ConfigError::InvalidValue {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Peak compute, memory bandwidth and achievable utilization of one platform.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile<T> {
    pub name: String,
    /// FLOP/s.
    pub peak_compute: T,
    /// bytes/s.
    pub mem_bandwidth: T,
    /// Fraction of the roofline actually reached, in (0, 1].
    pub utilization: T,
}

impl<T: Scalar> DeviceProfile<T> {
    pub fn new(name: impl Into<String>, peak_compute: T, mem_bandwidth: T, utilization: T) -> Result<Self> {
        let name = name.into();
        check_positive(&format!("{name}.peak_compute"), peak_compute)?;
        check_positive(&format!("{name}.mem_bandwidth"), mem_bandwidth)?;
        check_positive(&format!("{name}.utilization"), utilization)?;
        if utilization > T::one() {
            return Err(ConfigError::invalid(&format!("{name}.utilization"), "must be ≤ 1"));
        }
        Ok(DeviceProfile {
            name,
            peak_compute,
            mem_bandwidth,
            utilization,
        })
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "peak_compute": self.peak_compute.as_f64(),
            "mem_bandwidth": self.mem_bandwidth.as_f64(),
            "utilization": self.utilization.as_f64(),
        })
    }
}

/// Inter-device transmission link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkProfile<T> {
    /// bytes/s.
    pub bandwidth: T,
    /// Additive per-transfer latency in seconds.
    pub fixed_latency: T,
}

impl<T: Scalar> LinkProfile<T> {
    pub fn new(bandwidth: T, fixed_latency: T) -> Result<Self> {
        check_positive("link.bandwidth", bandwidth)?;
        check_non_negative("link.fixed_latency", fixed_latency)?;
        Ok(LinkProfile {
            bandwidth,
            fixed_latency,
        })
    }

    pub fn to_json(&self) -> Value {
        json!({
            "bandwidth": self.bandwidth.as_f64(),
            "fixed_latency": self.fixed_latency.as_f64(),
        })
    }
}

/// Per-layer costs under each fusion strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile<T> {
    pub index: usize,
    pub flops: StrategyTable<T>,
    /// Weights plus input read plus output write, each counted once.
    pub bytes: StrategyTable<T>,
    /// Bytes sent over the link when the model is cut right after this layer.
    pub output_activation_bytes: T,
    pub fusible: bool,
}

impl<T: Scalar> LayerProfile<T> {
    /// A layer whose cost does not depend on the fusion strategy.
    pub fn plain(index: usize, flops: T, bytes: T, output_activation_bytes: T) -> Self {
        LayerProfile {
            index,
            flops: StrategyTable::uniform(flops),
            bytes: StrategyTable::uniform(bytes),
            output_activation_bytes,
            fusible: false,
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        for (s, v) in self.flops.iter() {
            check_positive(&format!("{key}.flops.{s}"), v)?;
        }
        for (s, v) in self.bytes.iter() {
            check_positive(&format!("{key}.bytes.{s}"), v)?;
        }
        check_non_negative(&format!("{key}.output_activation_bytes"), self.output_activation_bytes)?;
        if self.fusible {
            use FusionStrategy::*;
            for (lo, hi) in [(S3, S3Ss), (S3Ss, S3SsS1), (S3, S3S1), (S3S1, S3SsS1)] {
                if self.flops[lo] > self.flops[hi] {
                    return Err(ConfigError::invalid(
                        &format!("{key}.flops.{lo}"),
                        format!("exceeds flops of superset strategy {hi}"),
                    ));
                }
            }
        } else if self.flops.iter().any(|(_, v)| v != self.flops[FusionStrategy::S3])
            || self.bytes.iter().any(|(_, v)| v != self.bytes[FusionStrategy::S3])
        {
            return Err(ConfigError::invalid(key, "non-fusible layer must cost the same under every strategy"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "index": self.index,
            "flops": table_to_json(&self.flops),
            "bytes": table_to_json(&self.bytes),
            "output_activation_bytes": self.output_activation_bytes.as_f64(),
            "fusible": self.fusible,
        })
    }
}

/// Sum of FLOPs and bytes over a run of layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Load<T> {
    pub flops: T,
    pub bytes: T,
}

/// Ordered layer records of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile<T> {
    pub name: String,
    pub layers: Vec<LayerProfile<T>>,
}

impl<T: Scalar> ModelProfile<T> {
    pub fn new(name: impl Into<String>, layers: Vec<LayerProfile<T>>) -> Result<Self> {
        let model = ModelProfile {
            name: name.into(),
            layers,
        };
        model.validate("model")?;
        Ok(model)
    }

    fn validate(&self, key: &str) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(ConfigError::invalid(&format!("{key}.layers"), "at least 2 layers are required"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(&format!("{key}.layers[{i}]"))?;
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Interior cut points: boundary `k` puts layers `[0, k)` on the first device.
    pub fn interior_cuts(&self) -> Range<usize> {
        1..self.layers.len()
    }

    /// Sums layer costs over `range` in layer order.
    ///
    /// Segments are always summed directly rather than as a difference of
    /// prefix sums so that two segments with the same layers produce
    /// bit-identical totals.
    pub fn segment_load(&self, range: Range<usize>, strategy: FusionStrategy) -> Load<T> {
        let mut flops = T::zero();
        let mut bytes = T::zero();
        for layer in &self.layers[range] {
            flops = flops + layer.flops[strategy];
            bytes = bytes + layer.bytes[strategy];
        }
        Load { flops, bytes }
    }

    /// Embedding size transmitted when cutting at boundary `cut`.
    pub fn cut_activation_bytes(&self, cut: usize) -> T {
        self.layers[cut - 1].output_activation_bytes
    }

    /// Cumulative FLOP fraction of every boundary `0..=n` under the full
    /// three-branch structure. Entry 0 is 0 and entry `n` is 1.
    pub fn boundary_fractions(&self) -> Vec<T> {
        let total = total_load(self, FusionStrategy::S3SsS1).flops;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = T::zero();
        out.push(acc);
        for layer in &self.layers {
            acc = acc + layer.flops[FusionStrategy::S3SsS1];
            out.push(acc / total);
        }
        out
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "layers": self.layers.iter().map(LayerProfile::to_json).collect::<Vec<_>>(),
        })
    }
}

/// Total FLOPs and bytes of the whole model under a single strategy.
pub fn total_load<T: Scalar>(model: &ModelProfile<T>, strategy: FusionStrategy) -> Load<T> {
    model.segment_load(0..model.layers.len(), strategy)
}

/// Accuracy-point penalty of each strategy, per sub-model.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyPenaltyTable<T> {
    pub sub_model_1: StrategyTable<T>,
    pub sub_model_2: StrategyTable<T>,
}

impl<T: Scalar> AccuracyPenaltyTable<T> {
    pub fn new(sub_model_1: StrategyTable<T>, sub_model_2: StrategyTable<T>) -> Result<Self> {
        let table = AccuracyPenaltyTable {
            sub_model_1,
            sub_model_2,
        };
        table.validate()?;
        Ok(table)
    }

    /// All-zero table, i.e. fusion never costs accuracy.
    pub fn zero() -> Self {
        AccuracyPenaltyTable {
            sub_model_1: StrategyTable::uniform(T::zero()),
            sub_model_2: StrategyTable::uniform(T::zero()),
        }
    }

    /// Penalty of `strategy` on sub-model 1 or 2.
    pub fn penalty(&self, sub_model: SubModel, strategy: FusionStrategy) -> T {
        match sub_model {
            SubModel::First => self.sub_model_1[strategy],
            SubModel::Second => self.sub_model_2[strategy],
        }
    }

    fn validate(&self) -> Result<()> {
        use FusionStrategy::*;
        for (key, table) in [("penalties.sub_model_1", &self.sub_model_1), ("penalties.sub_model_2", &self.sub_model_2)] {
            for (s, v) in table.iter() {
                check_non_negative(&format!("{key}.{s}"), v)?;
            }
            if table[S3SsS1] != T::zero() {
                return Err(ConfigError::invalid(&format!("{key}.{S3SsS1}"), "full structure must have zero penalty"));
            }
            for two in [S3Ss, S3S1] {
                if table[S3] < table[two] {
                    return Err(ConfigError::invalid(
                        &format!("{key}.{S3}"),
                        format!("must be ≥ penalty of {two}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "sub_model_1": table_to_json(&self.sub_model_1),
            "sub_model_2": table_to_json(&self.sub_model_2),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubModel {
    First,
    Second,
}

/// Everything a planning run needs, as read from one configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct Config<T> {
    pub devices: Vec<DeviceProfile<T>>,
    pub link: LinkProfile<T>,
    pub model: ModelProfile<T>,
    /// Additional models reported by the roofline matrix only.
    pub models: Vec<ModelProfile<T>>,
    pub penalties: AccuracyPenaltyTable<T>,
    /// Lagrange weight on the accuracy term, seconds per accuracy point.
    pub lambda1: T,
}

impl<T: Scalar> Config<T> {
    pub fn device(&self, name: &str) -> Option<&DeviceProfile<T>> {
        self.devices.iter().find(|d| d.name == name)
    }

    pub fn to_json(&self) -> Value {
        let mut doc = json!({
            "devices": self.devices.iter().map(DeviceProfile::to_json).collect::<Vec<_>>(),
            "link": self.link.to_json(),
            "model": self.model.to_json(),
            "penalties": self.penalties.to_json(),
            "lambda1": self.lambda1.as_f64(),
        });
        if !self.models.is_empty() {
            doc["models"] = Value::Array(self.models.iter().map(ModelProfile::to_json).collect());
        }
        doc
    }
}

fn table_to_json<T: Scalar>(table: &StrategyTable<T>) -> Value {
    let mut map = Map::new();
    for (s, v) in table.iter() {
        map.insert(s.name().to_string(), json!(v.as_f64()));
    }
    Value::Object(map)
}

fn check_positive<T: Scalar>(key: &str, v: T) -> Result<()> {
    if v.is_finite() && v > T::zero() {
        Ok(())
    } else {
        Err(ConfigError::NonPositiveQuantity(key.to_string()))
    }
}

fn check_non_negative<T: Scalar>(key: &str, v: T) -> Result<()> {
    if v.is_finite() && v >= T::zero() {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be a finite value ≥ 0"))
    }
}

// ---------------------------------------------------------------------------
// Loading

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Reads a full planning configuration.
pub fn load_config<T: Scalar>(path: impl AsRef<Path>) -> Result<Config<T>> {
    parse_config(&read_text(path.as_ref())?)
}

pub fn parse_config<T: Scalar>(text: &str) -> Result<Config<T>> {
    config_from_value(&parse_json(text)?)
}

/// Reads a file holding a single device object.
pub fn load_device<T: Scalar>(path: impl AsRef<Path>) -> Result<DeviceProfile<T>> {
    device_from_value(&parse_json(&read_text(path.as_ref())?)?, "device")
}

/// Reads a file holding a single model object.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelProfile<T>> {
    model_from_value(&parse_json(&read_text(path.as_ref())?)?, "model")
}

pub fn config_from_value<T: Scalar>(doc: &Value) -> Result<Config<T>> {
    let root = as_object(doc, "<root>")?;
    let devices = as_array(field(root, "devices", "")?, "devices")?
        .iter()
        .enumerate()
        .map(|(i, d)| device_from_value(d, &format!("devices[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    if devices.is_empty() {
        return Err(ConfigError::invalid("devices", "at least one device is required"));
    }
    let link = link_from_value(field(root, "link", "")?)?;
    let model = model_from_value(field(root, "model", "")?, "model")?;
    let models = match root.get("models") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => as_array(v, "models")?
            .iter()
            .enumerate()
            .map(|(i, m)| model_from_value(m, &format!("models[{i}]")))
            .collect::<Result<Vec<_>>>()?,
    };
    let penalties = penalties_from_value(field(root, "penalties", "")?)?;
    let lambda1: T = number(root, "lambda1", "")?;
    check_non_negative("lambda1", lambda1)?;
    Ok(Config {
        devices,
        link,
        model,
        models,
        penalties,
        lambda1,
    })
}

fn device_from_value<T: Scalar>(v: &Value, key: &str) -> Result<DeviceProfile<T>> {
    let obj = as_object(v, key)?;
    let name = match field(obj, "name", key)? {
        Value::String(s) => s.clone(),
        _ => return Err(ConfigError::invalid(&join(key, "name"), "expected a string")),
    };
    let peak_compute = number(obj, "peak_compute", key)?;
    let mem_bandwidth = number(obj, "mem_bandwidth", key)?;
    let utilization = optional_number(obj, "utilization", key)?.unwrap_or_else(T::one);
    check_positive(&join(key, "peak_compute"), peak_compute)?;
    check_positive(&join(key, "mem_bandwidth"), mem_bandwidth)?;
    check_positive(&join(key, "utilization"), utilization)?;
    if utilization > T::one() {
        return Err(ConfigError::invalid(&join(key, "utilization"), "must be ≤ 1"));
    }
    Ok(DeviceProfile {
        name,
        peak_compute,
        mem_bandwidth,
        utilization,
    })
}

fn link_from_value<T: Scalar>(v: &Value) -> Result<LinkProfile<T>> {
    let obj = as_object(v, "link")?;
    let bandwidth = number(obj, "bandwidth", "link")?;
    let fixed_latency = optional_number(obj, "fixed_latency", "link")?.unwrap_or_else(T::zero);
    LinkProfile::new(bandwidth, fixed_latency)
}

fn model_from_value<T: Scalar>(v: &Value, key: &str) -> Result<ModelProfile<T>> {
    let obj = as_object(v, key)?;
    let name = match field(obj, "name", key)? {
        Value::String(s) => s.clone(),
        _ => return Err(ConfigError::invalid(&join(key, "name"), "expected a string")),
    };
    let layers_key = join(key, "layers");
    let layers = as_array(field(obj, "layers", key)?, &layers_key)?
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_value(l, i, &format!("{layers_key}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let model = ModelProfile { name, layers };
    model.validate(key)?;
    Ok(model)
}

fn layer_from_value<T: Scalar>(v: &Value, position: usize, key: &str) -> Result<LayerProfile<T>> {
    let obj = as_object(v, key)?;
    if let Some(index) = obj.get("index") {
        if index.as_u64() != Some(position as u64) {
            return Err(ConfigError::invalid(&join(key, "index"), format!("expected {position}")));
        }
    }
    let flops = strategy_values(field(obj, "flops", key)?, &join(key, "flops"))?;
    let bytes = strategy_values(field(obj, "bytes", key)?, &join(key, "bytes"))?;
    let output_activation_bytes = number(obj, "output_activation_bytes", key)?;
    let fusible = match obj.get("fusible") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(ConfigError::invalid(&join(key, "fusible"), "expected a boolean")),
    };
    Ok(LayerProfile {
        index: position,
        flops,
        bytes,
        output_activation_bytes,
        fusible,
    })
}

/// A per-strategy quantity: either one number for all strategies or an
/// object keyed by every strategy name.
fn strategy_values<T: Scalar>(v: &Value, key: &str) -> Result<StrategyTable<T>> {
    match v {
        Value::Number(_) => Ok(StrategyTable::uniform(value_number(v, key)?)),
        Value::Object(map) => strategy_map(map, key),
        _ => Err(ConfigError::invalid(key, "expected a number or a strategy map")),
    }
}

fn strategy_map<T: Scalar>(map: &Map<String, Value>, key: &str) -> Result<StrategyTable<T>> {
    let mut seen: [Option<T>; 4] = [None; 4];
    for (name, value) in map {
        let strategy: FusionStrategy = name
            .parse()
            .map_err(|_| ConfigError::UnknownStrategyName(join(key, name)))?;
        seen[strategy.ordinal()] = Some(value_number(value, &join(key, name))?);
    }
    let mut out = [T::zero(); 4];
    for s in FusionStrategy::ALL {
        out[s.ordinal()] = seen[s.ordinal()].ok_or_else(|| ConfigError::MissingField(join(key, s.name())))?;
    }
    Ok(StrategyTable(out))
}

fn penalties_from_value<T: Scalar>(v: &Value) -> Result<AccuracyPenaltyTable<T>> {
    let obj = as_object(v, "penalties")?;
    let sub1 = as_object(field(obj, "sub_model_1", "penalties")?, "penalties.sub_model_1")?;
    let sub2 = as_object(field(obj, "sub_model_2", "penalties")?, "penalties.sub_model_2")?;
    AccuracyPenaltyTable::new(
        strategy_map(sub1, "penalties.sub_model_1")?,
        strategy_map(sub2, "penalties.sub_model_2")?,
    )
}

fn join(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

fn as_object<'a>(v: &'a Value, key: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| ConfigError::invalid(key, "expected an object"))
}

fn as_array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| ConfigError::invalid(key, "expected an array"))
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, parent: &str) -> Result<&'a Value> {
    match obj.get(name) {
        None | Some(Value::Null) => Err(ConfigError::MissingField(join(parent, name))),
        Some(v) => Ok(v),
    }
}

fn value_number<T: Scalar>(v: &Value, key: &str) -> Result<T> {
    v.as_f64()
        .map(T::of)
        .ok_or_else(|| ConfigError::invalid(key, "expected a number"))
}

fn number<T: Scalar>(obj: &Map<String, Value>, name: &str, parent: &str) -> Result<T> {
    value_number(field(obj, name, parent)?, &join(parent, name))
}

fn optional_number<T: Scalar>(obj: &Map<String, Value>, name: &str, parent: &str) -> Result<Option<T>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => value_number(v, &join(parent, name)).map(Some),
    }
}
