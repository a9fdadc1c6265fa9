//! Run configuration: JSON file, then `--override key=value`, then the
//! dedicated flags, on top of the built-in defaults.

use std::path::{Path, PathBuf};

use predprop::data::{
    gen_gaussian_clusters, gen_two_factor, gen_xor, load_csv, Dataset, NormalizationMode,
};
use predprop::network::{PriorSpec, SublayerSpec};
use predprop::oracle::{EquivalenceConfig, GradCheckConfig, RandomNetConfig};
use predprop::{Activation, Error, Mode, NetworkSpec, Orientation, PrecisionMode, Result, TrainingConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_CAUSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Empty: derived from the data (`[d, 256, c]`, or `[d, 256, 10]` unsupervised).
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Explicit sublayer chains; replaces the layered shorthand.
    pub predictor_specs: Option<Vec<Vec<SublayerSpec>>>,
    pub precision_mode: PrecisionMode,
    /// Defaults to a standard normal prior on the top layer.
    pub prior: Option<PriorSpec>,
    pub bias: bool,
    pub orientation: Orientation,
    /// Start from this checkpoint instead of a fresh initialisation.
    pub checkpoint: Option<PathBuf>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            layer_dims: vec![],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Linear,
            predictor_specs: None,
            precision_mode: PrecisionMode::Full,
            prior: None,
            bias: false,
            orientation: Orientation::Generative,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Xor {
        n: usize,
        #[serde(default)]
        noise: f64,
    },
    GaussianClusters {
        k: usize,
        d: usize,
        n_per_cluster: usize,
        separation: f64,
        sigma: f64,
    },
    TwoFactor {
        n: usize,
    },
}

impl GeneratorSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match *self {
            Self::Xor { n, noise } => gen_xor(n, noise, seed),
            Self::GaussianClusters {
                k,
                d,
                n_per_cluster,
                separation,
                sigma,
            } => gen_gaussian_clusters(k, d, n_per_cluster, separation, sigma, seed),
            Self::TwoFactor { n } => gen_two_factor(n, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV file; exclusive with `generator`. With neither, `xor` with n = 4.
    pub path: Option<PathBuf>,
    pub generator: Option<GeneratorSpec>,
    pub normalize: NormalizationMode,
    /// Fraction of rows held out for testing (seeded split).
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            generator: None,
            normalize: NormalizationMode::None,
            test_fraction: 0.0,
        }
    }
}

impl DataSection {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match (&self.path, &self.generator) {
            (Some(path), None) => load_csv(path),
            (None, Some(g)) => g.generate(seed),
            (Some(_), Some(_)) => Err(Error::Config("data.path and data.generator are exclusive".into())),
            (None, None) => Err(Error::Config("no data source: set data.path or data.generator".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub checkpoint: String,
    pub metrics: String,
    pub report: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            checkpoint: "checkpoint.json".into(),
            metrics: "metrics.csv".into(),
            report: "report.json".into(),
        }
    }
}

impl OutputSection {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    /// Number of random networks for the gradient oracle.
    pub gradient_nets: usize,
    pub h: f64,
    pub tolerance: f64,
    pub kink_radius: f64,
    /// Hidden activations of the random gradient-check nets.
    pub activations: Vec<Activation>,
    pub equivalence: bool,
    /// Seeds per family (linear, relu, single gap) for the backprop comparison.
    pub equivalence_nets: usize,
    pub linear_threshold: f64,
    pub relu_threshold: f64,
    pub output_error: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        let grad = GradCheckConfig::default();
        Self {
            gradient_nets: 100,
            h: grad.h,
            tolerance: grad.tolerance,
            kink_radius: grad.kink_radius,
            activations: RandomNetConfig::default().activations,
            equivalence: true,
            equivalence_nets: 100,
            linear_threshold: 0.99,
            relu_threshold: 0.95,
            output_error: 1e-3,
        }
    }
}

impl CheckSection {
    pub fn grad_config(&self) -> GradCheckConfig {
        GradCheckConfig {
            h: self.h,
            tolerance: self.tolerance,
            kink_radius: self.kink_radius,
            fault: None,
        }
    }

    pub fn net_config(&self) -> RandomNetConfig {
        RandomNetConfig {
            activations: self.activations.clone(),
            ..RandomNetConfig::default()
        }
    }

    pub fn equivalence_config(&self) -> EquivalenceConfig {
        EquivalenceConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds network initialisation, data generation, shuffling and noise;
    /// copied into `training.seed` on resolution.
    pub seed: u64,
    pub network: NetworkSection,
    pub data: DataSection,
    pub training: TrainingConfig,
    pub output: OutputSection,
    pub check: CheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkSection::default(),
            data: DataSection::default(),
            training: TrainingConfig::default(),
            output: OutputSection::default(),
            check: CheckSection::default(),
        }
    }
}

impl RunConfig {
    /// Network spec for data with `data_dim` features and `label_dim` label
    /// columns (0 when unlabelled).
    pub fn network_spec(&self, data_dim: usize, label_dim: usize) -> Result<NetworkSpec> {
        let n = &self.network;
        let supervised = self.training.mode == Mode::Supervised;
        let dims = if !n.layer_dims.is_empty() {
            n.layer_dims.clone()
        } else {
            match (n.orientation, supervised) {
                (Orientation::Generative, true) => vec![data_dim, DEFAULT_HIDDEN, label_dim],
                (Orientation::Generative, false) => vec![data_dim, DEFAULT_HIDDEN, DEFAULT_CAUSES],
                (Orientation::Discriminative, true) => vec![label_dim, DEFAULT_HIDDEN, data_dim],
                (Orientation::Discriminative, false) => {
                    return Err(Error::Config(
                        "discriminative orientation needs supervised mode or explicit layer_dims".into(),
                    ))
                }
            }
        };
        let mut spec = NetworkSpec::layered(&dims, n.hidden_activation, n.output_activation)
            .with_precision_mode(n.precision_mode)
            .with_bias(n.bias)
            .with_orientation(n.orientation)
            .with_seed(self.seed);
        if let Some(chains) = &n.predictor_specs {
            spec.predictor_specs = chains.clone();
        }
        if let Some(prior) = &n.prior {
            spec.prior = prior.clone();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "data.test_fraction must be in [0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if let Some(path) = &self.data.path {
            if !path.exists() {
                return Err(Error::Config(format!("data file {} does not exist", path.display())));
            }
        }
        if let Some(path) = &self.network.checkpoint {
            if !path.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key {key:?} has an empty segment")));
        }
        let obj = match slot {
            Value::Object(m) => m,
            Value::Null => {
                *slot = Value::Object(Default::default());
                slot.as_object_mut().expect("just created")
            }
            _ => return Err(Error::Config(format!("override key {key:?}: {part:?} is not inside an object"))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        slot = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Flags that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<String>,
}

/// Resolves defaults < file < `--override` < flags. A report JSON written by
/// an earlier run is accepted as a config file (its `resolved_config` is used).
pub fn resolve(path: Option<&Path>, flags: &FlagOverrides) -> Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if let Some(inner) = file.get_mut("resolved_config") {
            file = inner.take();
        }
        merge(&mut root, file);
    }
    // Default generator goes in before overrides so `data.generator.n=..`
    // can adjust it; a later `data.path` override replaces it.
    let default_source = root["data"]["path"].is_null() && root["data"]["generator"].is_null();
    if default_source {
        root["data"]["generator"] = serde_json::to_value(GeneratorSpec::Xor { n: 4, noise: 0.0 })
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    for o in &flags.overrides {
        apply_override(&mut root, o)?;
    }
    if default_source && !root["data"]["path"].is_null() {
        root["data"]["generator"] = Value::Null;
    }
    if let Some(seed) = flags.seed {
        root["seed"] = Value::from(seed);
    }
    if let Some(out) = &flags.out {
        root["output"]["dir"] = Value::from(out.to_string_lossy().into_owned());
    }
    let mut config: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    config.training.seed = config.seed;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_values() {
        let flags = FlagOverrides {
            overrides: vec![
                "training.alpha_m=0.5".into(),
                "data.generator.name=xor".into(),
                "data.generator.n=8".into(),
            ],
            seed: Some(4),
            ..FlagOverrides::default()
        };
        let c = resolve(None, &flags).unwrap();
        assert_eq!(c.training.alpha_m, 0.5);
        assert_eq!(c.data.generator, Some(GeneratorSpec::Xor { n: 8, noise: 0.0 }));
        assert_eq!(c.seed, 4);
        assert_eq!(c.training.seed, 4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let flags = FlagOverrides {
            overrides: vec!["training.alpha_q=1".into()],
            ..FlagOverrides::default()
        };
        assert!(matches!(resolve(None, &flags), Err(Error::Config(_))));
    }

    #[test]
    fn negative_rate_is_rejected() {
        let flags = FlagOverrides {
            overrides: vec!["training.alpha_m=-1".into()],
            ..FlagOverrides::default()
        };
        assert!(resolve(None, &flags).is_err());
    }

    #[test]
    fn default_dims_follow_mode() {
        let c = RunConfig::default();
        assert_eq!(c.network_spec(2, 2).unwrap().layer_dims, vec![2, 256, 2]);
        let mut u = RunConfig::default();
        u.training.mode = Mode::Unsupervised;
        assert_eq!(u.network_spec(8, 0).unwrap().layer_dims, vec![8, 256, 10]);
    }
}
