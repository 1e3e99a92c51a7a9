//! Experiment configuration: a JSON document with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::masking::Granularity;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fiarse,
    Heterofl,
    Fedrolex,
    PruningGreedy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fiarse => "fiarse",
            Method::Heterofl => "heterofl",
            Method::Fedrolex => "fedrolex",
            Method::PruningGreedy => "pruning_greedy",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Modelwise,
    Layerwise,
    Shardwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityTier {
    pub gamma: f64,
    pub clients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub alpha: f64,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Load samples from `label,f_0,...` CSV instead of generating them.
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub participants: usize,
    #[serde(default)]
    pub local_steps: Option<usize>,
    #[serde(default)]
    pub local_epochs: Option<usize>,
    /// Omit for full-batch local steps.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub eta_local: f64,
    #[serde(default = "default_eta_global")]
    pub eta_global: f64,
    pub capacities: Vec<CapacityTier>,
    #[serde(default)]
    pub strategy: Strategy,
    /// `[start, end)` layer ranges for the shard-wise strategy.
    #[serde(default)]
    pub shards: Vec<[usize; 2]>,
    pub method: Method,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default = "default_true")]
    pub mask_biases: bool,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Extra capacities evaluated on the final model (unparticipated clients).
    #[serde(default)]
    pub sweep: Vec<f64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_spread() -> f64 {
    3.0
}

fn default_eta_global() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_eval_every() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn granularity(&self) -> Granularity {
        match self.strategy {
            Strategy::Modelwise => Granularity::ModelWise,
            Strategy::Layerwise => Granularity::LayerWise,
            Strategy::Shardwise => {
                Granularity::ShardWise(self.shards.iter().map(|[a, b]| *a..*b).collect())
            }
        }
    }

    /// Capacity of every client, in client-id order.
    pub fn client_gammas(&self) -> Vec<f64> {
        self.capacities
            .iter()
            .flat_map(|t| std::iter::repeat_n(t.gamma, t.clients))
            .collect()
    }

    /// Layer widths of the classifier.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.data.dim];
        w.extend(&self.model.hidden);
        w.push(self.data.classes);
        w
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::config(path, msg));
        if self.clients == 0 {
            return fail("clients", "need at least one client".into());
        }
        if self.participants == 0 || self.participants > self.clients {
            return fail(
                "participants",
                format!(
                    "must be in 1..={} but is {}",
                    self.clients, self.participants
                ),
            );
        }
        if self.rounds == 0 {
            return fail("rounds", "must be at least 1".into());
        }
        match (self.local_steps, self.local_epochs) {
            (Some(0), _) => return fail("local_steps", "must be at least 1".into()),
            (_, Some(0)) => return fail("local_epochs", "must be at least 1".into()),
            (Some(_), Some(_)) => {
                return fail(
                    "local_steps",
                    "give either local_steps or local_epochs, not both".into(),
                )
            }
            (None, None) => {
                return fail(
                    "local_steps",
                    "one of local_steps or local_epochs is required".into(),
                )
            }
            _ => {}
        }
        if self.batch_size == Some(0) {
            return fail("batch_size", "must be positive".into());
        }
        if !(self.eta_local > 0.0 && self.eta_local.is_finite()) {
            return fail(
                "eta_local",
                format!("must be positive, got {}", self.eta_local),
            );
        }
        if !(self.eta_global > 0.0 && self.eta_global.is_finite()) {
            return fail(
                "eta_global",
                format!("must be positive, got {}", self.eta_global),
            );
        }
        if self.capacities.is_empty() {
            return fail(
                "capacities",
                "at least one capacity tier is required".into(),
            );
        }
        for (i, t) in self.capacities.iter().enumerate() {
            if !(t.gamma > 0.0 && t.gamma <= 1.0) {
                return fail(
                    &format!("capacities[{i}].gamma"),
                    format!("{} outside (0, 1]", t.gamma),
                );
            }
        }
        let assigned: usize = self.capacities.iter().map(|t| t.clients).sum();
        if assigned != self.clients {
            return fail(
                "capacities",
                format!(
                    "client counts sum to {assigned} but clients is {}",
                    self.clients
                ),
            );
        }
        let layers = self.model.hidden.len() + 1;
        if self.strategy == Strategy::Shardwise {
            let mut next = 0;
            for (i, [a, b]) in self.shards.iter().enumerate() {
                if *a != next || b <= a {
                    return fail(
                        &format!("shards[{i}]"),
                        "shards must be contiguous and non-empty".into(),
                    );
                }
                next = *b;
            }
            if next != layers {
                return fail("shards", format!("shards cover {next} of {layers} layers"));
            }
        } else if !self.shards.is_empty() {
            return fail("shards", "only used by the shardwise strategy".into());
        }
        if self.model.hidden.contains(&0) {
            return fail("model.hidden", "hidden widths must be positive".into());
        }
        let d = &self.data;
        if d.classes < 2 {
            return fail("data.classes", "need at least two classes".into());
        }
        if d.dim == 0 {
            return fail("data.dim", "must be positive".into());
        }
        if d.csv.is_none() {
            if d.dim < d.classes {
                return fail("data.dim", "synthetic data needs dim >= classes".into());
            }
            if d.samples < self.clients.max(d.classes) {
                return fail("data.samples", "too few samples for the clients".into());
            }
        }
        if !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return fail("data.alpha", format!("must be positive, got {}", d.alpha));
        }
        if !(d.spread >= 0.0 && d.spread.is_finite()) {
            return fail("data.spread", format!("must be >= 0, got {}", d.spread));
        }
        if self.eval_every == 0 {
            return fail("eval_every", "must be at least 1".into());
        }
        if let Some(i) = self.sweep.iter().position(|g| !(*g > 0.0 && *g <= 1.0)) {
            return fail(
                &format!("sweep[{i}]"),
                "capacities must be in (0, 1]".into(),
            );
        }
        Ok(())
    }
}

/// Sets `key` (dot-separated path) in a JSON document. The value is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::config(key, "empty override key"))
}

/// Reads, overrides and validates a config file.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| Error::config("<root>", e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    ExperimentConfig::from_value(doc)
}
