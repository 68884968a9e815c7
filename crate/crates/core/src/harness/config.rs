use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::noise::{MixOrder, NoiseKind, Phase};

/// A σ grid: `log:lo:hi:count`, `lin:lo:hi:count`, or `list:a,b,c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GridSpec {
    Log { lo: f64, hi: f64, count: usize },
    Linear { lo: f64, hi: f64, count: usize },
    List(Vec<f64>),
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            GridSpec::Log { lo, hi, count } => spaced(lo.log10(), hi.log10(), count)
                .into_iter()
                .map(|e| 10f64.powf(e))
                .collect(),
            GridSpec::Linear { lo, hi, count } => spaced(lo, hi, count),
            GridSpec::List(ref v) => v.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("grid {self}: {m}")));
        match *self {
            GridSpec::Log { lo, hi, count } | GridSpec::Linear { lo, hi, count } => {
                if count == 0 {
                    return bad("empty".into());
                }
                if matches!(self, GridSpec::Log { .. }) && !(lo > 0.0) {
                    return bad("log grids need lo > 0".into());
                }
                if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                    return bad("need 0 <= lo <= hi".into());
                }
            }
            GridSpec::List(ref v) => {
                if v.is_empty() {
                    return bad("empty".into());
                }
                if v.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return bad("values must be finite and >= 0".into());
                }
            }
        }
        Ok(())
    }
}

fn spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Log { lo, hi, count } => write!(f, "log:{lo:e}:{hi:e}:{count}"),
            GridSpec::Linear { lo, hi, count } => write!(f, "lin:{lo}:{hi}:{count}"),
            GridSpec::List(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "list:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse grid {s:?} (expected log:lo:hi:n, lin:lo:hi:n or list:a,b,...)"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let grid = match kind {
            "log" | "lin" | "linear" => {
                let parts: Vec<&str> = rest.split(':').collect();
                let [lo, hi, n] = parts[..] else {
                    return Err(bad());
                };
                let lo: f64 = lo.parse().map_err(|_| bad())?;
                let hi: f64 = hi.parse().map_err(|_| bad())?;
                let count: usize = n.parse().map_err(|_| bad())?;
                if kind == "log" {
                    GridSpec::Log { lo, hi, count }
                } else {
                    GridSpec::Linear { lo, hi, count }
                }
            }
            "list" => GridSpec::List(
                rest.split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
            ),
            _ => return Err(bad()),
        };
        grid.validate()?;
        Ok(grid)
    }
}

impl TryFrom<String> for GridSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GridSpec> for String {
    fn from(g: GridSpec) -> String {
        g.to_string()
    }
}

/// Default grids per noise kind.
pub fn default_grid(kind: NoiseKind) -> GridSpec {
    match kind {
        NoiseKind::Additive => GridSpec::Log {
            lo: 1e-2,
            hi: 1e2,
            count: 25,
        },
        NoiseKind::Multiplicative => GridSpec::Log {
            lo: 1e-2,
            hi: 1e10,
            count: 31,
        },
        NoiseKind::Mixed => GridSpec::Log {
            lo: 1e-2,
            hi: 1e6,
            count: 9,
        },
    }
}

/// Everything that defines a sweep. Read from TOML; fields left out take
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// `mlp`, `mlp-bn`, `lenet5`, `lenet5-bn`.
    pub model: String,
    /// `mnist`, `fashion`, `cifar10`, `blobs`.
    pub dataset: String,
    /// Class-balanced subset of the training split.
    pub subset: Option<usize>,
    /// Class-balanced subset of the test split.
    pub test_subset: Option<usize>,
    /// Seed of the train/validation split and subsets.
    pub data_seed: u64,
    pub noise: NoiseKind,
    pub phase: Phase,
    pub sigma_grid: GridSpec,
    /// Adds σ = 0 (the noiseless baseline) to the grid.
    pub include_zero: bool,
    /// Walking sweeps: injection points to visit (all when empty).
    pub layers: Vec<usize>,
    /// Mixed grids: σ_add and σ_mul axes, orders, and the injection point.
    pub add_grid: GridSpec,
    pub mul_grid: GridSpec,
    pub orders: Vec<MixOrder>,
    pub mixed_point: Option<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Noisy evaluation passes per cell.
    pub eval_repeats: usize,
    pub save_checkpoints: bool,
    /// Not part of the config hash.
    pub output: PathBuf,
    /// Not part of the config hash; 0 means one per CPU.
    pub workers: usize,
    /// Not part of the config hash.
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            model: "mlp".into(),
            dataset: "mnist".into(),
            subset: None,
            test_subset: None,
            data_seed: 0,
            noise: NoiseKind::Additive,
            phase: Phase::TrainAndInference,
            sigma_grid: default_grid(NoiseKind::Additive),
            include_zero: true,
            layers: Vec::new(),
            add_grid: default_grid(NoiseKind::Mixed),
            mul_grid: default_grid(NoiseKind::Mixed),
            orders: vec![MixOrder::MultiplicativeFirst, MixOrder::AdditiveFirst],
            mixed_point: None,
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            eval_repeats: 1,
            save_checkpoints: false,
            output: PathBuf::from("results"),
            workers: 0,
            data_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("config needs at least one seed".into()));
        }
        if self.eval_repeats == 0 {
            return Err(Error::InvalidArgument("eval_repeats must be >= 1".into()));
        }
        self.sigma_grid.validate()?;
        self.add_grid.validate()?;
        self.mul_grid.validate()?;
        if self.orders.is_empty() {
            return Err(Error::InvalidArgument("mixed grids need at least one order".into()));
        }
        self.train.validate()
    }

    /// σ values of the 1-D sweep, ascending, with 0 when requested.
    pub fn sigmas(&self) -> Vec<f64> {
        let mut v = self.sigma_grid.values();
        if self.include_zero {
            v.push(0.0);
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// SHA-256 of the canonical JSON form (object keys sorted) without the
    /// fields that do not affect results.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            for k in ["output", "workers", "data_dir"] {
                map.remove(k);
            }
        }
        let canonical = canonical_json(&value);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
