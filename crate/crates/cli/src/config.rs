//! Experiment configuration: one JSON document describing the dataset, the
//! architecture, the optimizer and an optional sweep.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use kanbench::accounting::FlopsConvention;
use kanbench::bench::{OptimConfig, TrialConfig};
use kanbench::data::{
    gen_formula_dataset, load_csv, load_idx, stratified_subsample, FormulaSpec, Split, Standardizer, TaskKind,
};
use kanbench::layers::ArchSpec;
use kanbench::nn::Rng;

pub const DATA_DIR_ENV: &str = "KANBENCH_DATA_DIR";

/// Stream of the master seed reserved for dataset sampling.
const DATA_STREAM: u64 = 0xDA7A;

fn default_true() -> bool {
    true
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_task() -> TaskKind {
    TaskKind::Classify
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Formula(FormulaSpec),
    Csv(CsvConfig),
    Idx(IdxConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub train: PathBuf,
    /// Held-out file; without it a seeded `test_fraction` of `train` is used.
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub label_column: String,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    /// Directory holding the four files; defaults to the data root.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Stratified subsample sizes.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualConfig {
    pub groups: Vec<Vec<usize>>,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        ContinualConfig {
            groups: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8, 9]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    pub arch: ArchSpec,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub continual: Option<ContinualConfig>,
    #[serde(default)]
    pub flops: FlopsConvention,
    /// Default output path; `--out` wins.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn trial(&self, seed: u64) -> TrialConfig {
        TrialConfig {
            arch: self.arch.clone(),
            optim: self.optimizer.clone(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trial(self.seed).validate()?;
        self.flops.validate()?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<&DatasetConfig> {
        self.dataset.as_ref().context("config has no \"dataset\" block")
    }
}

/// Configurations expanded from a document, plus the pieces shared by all.
#[derive(Debug)]
pub struct LoadedConfig {
    pub base: ExperimentConfig,
    pub trials: Vec<ExperimentConfig>,
    pub has_sweep: bool,
}

pub fn read_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let doc: Value = serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
    parse_config(doc).with_context(|| format!("invalid config {}", path.display()))
}

pub fn parse_config(mut doc: Value) -> Result<LoadedConfig> {
    let obj = doc.as_object_mut().context("config must be a JSON object")?;
    let sweep = obj.remove("sweep");
    let base: ExperimentConfig = serde_json::from_value(Value::Object(obj.clone()))?;
    base.validate()?;
    let Some(sweep) = sweep else {
        return Ok(LoadedConfig {
            trials: vec![base.clone()],
            base,
            has_sweep: false,
        });
    };
    let mut trials = Vec::new();
    for assignment in expand_sweep(&sweep)? {
        let mut v = doc.clone();
        for (path, value) in assignment {
            set_path(&mut v, &path, value)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(v).with_context(|| format!("sweep point {} is invalid", trials.len()))?;
        cfg.validate()
            .with_context(|| format!("sweep point {} is invalid", trials.len()))?;
        trials.push(cfg);
    }
    if trials.is_empty() {
        bail!("sweep expands to no trials");
    }
    Ok(LoadedConfig {
        base,
        trials,
        has_sweep: true,
    })
}

/// Every assignment of the sweep block. An object is a cartesian product of
/// its keys in sorted order, the last key varying fastest; a list of objects
/// is the concatenation of their products.
pub fn expand_sweep(sweep: &Value) -> Result<Vec<Vec<(String, Value)>>> {
    match sweep {
        Value::Object(map) => expand_product(map),
        Value::Array(items) => {
            let mut all = Vec::new();
            for item in items {
                let map = item.as_object().context("sweep list entries must be objects")?;
                all.extend(expand_product(map)?);
            }
            Ok(all)
        }
        _ => bail!("\"sweep\" must be an object or a list of objects"),
    }
}

fn expand_product(map: &Map<String, Value>) -> Result<Vec<Vec<(String, Value)>>> {
    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (path, values) in map {
        let root = path.split('.').next().unwrap_or_default();
        if root != "arch" && root != "optimizer" {
            bail!("sweep key {path:?}: only \"arch.*\" and \"optimizer.*\" fields can be swept");
        }
        let values = values
            .as_array()
            .with_context(|| format!("sweep key {path:?} must map to a list of values"))?;
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((path.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    Ok(combos)
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("sweep key {path:?} has an empty segment");
        }
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Map::new());
            } else {
                bail!("sweep key {path:?}: {:?} is not an object", parts[..i].join("."));
            }
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Resolves a dataset path against the data root (`KANBENCH_DATA_DIR` when
/// set); absolute paths are used as is.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        return Ok(path);
    }
    // IDX files are commonly distributed gzipped.
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    if gz.exists() {
        return Ok(gz);
    }
    bail!("dataset file {} not found", path.display())
}

impl IdxConfig {
    fn file(&self, explicit: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let name = explicit.clone().unwrap_or_else(|| PathBuf::from(default));
        let joined = match &self.dir {
            Some(dir) if !name.is_absolute() => dir.join(name),
            _ => name,
        };
        existing(resolve_data_path(&joined))
    }
}

pub fn load_dataset(cfg: &DatasetConfig, master_seed: u64) -> Result<Split> {
    let rng = Rng::new(master_seed).fork(DATA_STREAM);
    match cfg {
        DatasetConfig::Formula(spec) => Ok(gen_formula_dataset(spec, &rng)?),
        DatasetConfig::Csv(c) => {
            let train_path = existing(resolve_data_path(&c.train))?;
            let full = load_csv(&train_path, &c.label_column, c.task)?;
            let (train, test) = match &c.test {
                Some(t) => (
                    full,
                    load_csv(&existing(resolve_data_path(t))?, &c.label_column, c.task)?,
                ),
                None => {
                    if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
                        bail!("test_fraction must be in (0, 1), got {}", c.test_fraction);
                    }
                    let mut idx: Vec<usize> = (0..full.len()).collect();
                    rng.fork(0).shuffle(&mut idx);
                    let n_test = ((full.len() as f64 * c.test_fraction).round() as usize).clamp(1, full.len() - 1);
                    let (test_idx, train_idx) = idx.split_at(n_test);
                    (full.select(train_idx), full.select(test_idx))
                }
            };
            if train.dim() != test.dim() {
                bail!("train and test CSV files have different feature counts");
            }
            if c.standardize {
                let st = Standardizer::fit(train.features());
                Ok(Split {
                    train: st.apply_dataset(&train)?,
                    test: st.apply_dataset(&test)?,
                })
            } else {
                Ok(Split { train, test })
            }
        }
        DatasetConfig::Idx(c) => {
            let train = load_idx(
                &c.file(&c.train_images, "train-images-idx3-ubyte")?,
                &c.file(&c.train_labels, "train-labels-idx1-ubyte")?,
            )?;
            let test = load_idx(
                &c.file(&c.test_images, "t10k-images-idx3-ubyte")?,
                &c.file(&c.test_labels, "t10k-labels-idx1-ubyte")?,
            )?;
            let train = match c.train_limit {
                Some(n) => stratified_subsample(&train, n, &mut rng.fork(1))?,
                None => train,
            };
            let test = match c.test_limit {
                Some(n) => stratified_subsample(&test, n, &mut rng.fork(2))?,
                None => test,
            };
            Ok(Split { train, test })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "seed": 3,
            "dataset": {"kind": "formula", "formula": "PRODUCT", "n_train": 20, "n_test": 10},
            "arch": {"kind": "mlp", "widths": [2, 4, 1]},
            "optimizer": {"lr": 0.01, "epochs": 2}
        })
    }

    #[test]
    fn plain_config_is_one_trial() {
        let cfg = parse_config(base()).unwrap();
        assert!(!cfg.has_sweep);
        assert_eq!(cfg.trials.len(), 1);
        assert_eq!(cfg.base.optimizer.batch_size, 128);
        assert!(matches!(cfg.base.dataset, Some(DatasetConfig::Formula(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut doc = base();
        doc["colour"] = json!("red");
        assert!(parse_config(doc).is_err());
        let mut doc = base();
        doc["optimizer"]["momentum"] = json!(0.9);
        assert!(parse_config(doc).is_err());
        let mut doc = base();
        doc["dataset"]["noise"] = json!(0.1);
        assert!(parse_config(doc).is_err());
    }

    #[test]
    fn sweep_is_a_cartesian_product() {
        let mut doc = base();
        doc["sweep"] = json!({"arch.widths": [[2, 4, 1], [2, 8, 1]], "optimizer.lr": [0.01, 0.001]});
        let cfg = parse_config(doc).unwrap();
        assert_eq!(cfg.trials.len(), 4);
        let pairs: Vec<(usize, f64)> = cfg.trials.iter().map(|t| (t.arch.widths[1], t.optimizer.lr)).collect();
        assert_eq!(pairs, vec![(4, 0.01), (4, 0.001), (8, 0.01), (8, 0.001)]);
    }

    #[test]
    fn sweep_lists_concatenate_and_nest() {
        let mut doc = base();
        doc["sweep"] = json!([
            {"arch.widths": [[2, 3, 1]]},
            {"arch.kind": ["kan"], "arch.spline": [{"grid": 3, "order": 2, "range": [-1, 1]}], "arch.spline.grid": [3, 5]}
        ]);
        let cfg = parse_config(doc).unwrap();
        assert_eq!(cfg.trials.len(), 3);
        assert_eq!(cfg.trials[2].arch.spline.unwrap().grid, 5);
    }

    #[test]
    fn bad_sweeps_fail() {
        let mut doc = base();
        doc["sweep"] = json!({"optimizer.lr": []});
        assert!(parse_config(doc).is_err());
        let mut doc = base();
        doc["sweep"] = json!({"seed": [1, 2]});
        assert!(parse_config(doc).is_err());
        let mut doc = base();
        doc["sweep"] = json!({"arch.widths": [[2]]});
        assert!(parse_config(doc).is_err());
        let mut doc = base();
        doc["sweep"] = json!(7);
        assert!(parse_config(doc).is_err());
    }

    #[test]
    fn formula_datasets_follow_the_master_seed() {
        let cfg = parse_config(base()).unwrap().base;
        let a = load_dataset(cfg.dataset().unwrap(), 3).unwrap();
        let b = load_dataset(cfg.dataset().unwrap(), 3).unwrap();
        let c = load_dataset(cfg.dataset().unwrap(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_without_test_file_is_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut body = String::from("a,b,y\n");
        for i in 0..50 {
            body.push_str(&format!(
                "{},{},{}\n",
                i,
                i * 2,
                if i % 2 == 0 { "even" } else { "odd" }
            ));
        }
        std::fs::write(&p, body).unwrap();
        let cfg = DatasetConfig::Csv(CsvConfig {
            train: p,
            test: None,
            label_column: "y".into(),
            task: TaskKind::Classify,
            test_fraction: 0.2,
            standardize: true,
        });
        let split = load_dataset(&cfg, 0).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (40, 10));
        let mean: f64 = (0..40).map(|r| split.train.features().get(r, 0)).sum::<f64>() / 40.0;
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn missing_dataset_file_names_the_path() {
        let cfg = DatasetConfig::Idx(IdxConfig {
            dir: Some(PathBuf::from("/nonexistent/dir")),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
        });
        let err = load_dataset(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/dir/train-images-idx3-ubyte"), "{err}");
    }
}
