//! Datasets: synthetic formula regression, CSV tables, IDX images.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use evalexpr::{build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node, Value};
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    Regress,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Matrix,
    targets: Targets,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Matrix, targets: Targets) -> Result<Self> {
        let name = name.into();
        if features.rows() == 0 {
            return Err(Error::Input(format!("dataset {name} is empty")));
        }
        if targets.len() != features.rows() {
            return Err(Error::shape("Dataset::new", features.rows(), targets.len()));
        }
        if !features.is_finite() {
            return Err(Error::Input(format!("dataset {name} has non-finite features")));
        }
        match &targets {
            Targets::Classes { labels, num_classes } => {
                if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::Input(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
            }
            Targets::Values(v) => {
                if v.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Input(format!("dataset {name} has non-finite targets")));
                }
            }
        }
        Ok(Dataset {
            name,
            features,
            targets,
            class_names: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.targets {
            Targets::Classes { .. } => TaskKind::Classify,
            Targets::Values(_) => TaskKind::Regress,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match &self.targets {
            Targets::Values(v) => Some(v),
            Targets::Classes { .. } => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { num_classes, .. } => Some(num_classes),
            Targets::Values(_) => None,
        }
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Rows `idx`, in that order. Panics on an out-of-range index.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_rows(idx),
            targets: self.targets.select(idx),
            class_names: self.class_names.clone(),
        }
    }

    fn with_features(&self, features: Matrix) -> Dataset {
        Dataset {
            features,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FormulaId {
    Product,
    ExpSinSq,
    SumSin,
    Composed,
    Rational,
    HighFreq,
}

impl FormulaId {
    pub const ALL: [FormulaId; 6] = [
        FormulaId::Product,
        FormulaId::ExpSinSq,
        FormulaId::SumSin,
        FormulaId::Composed,
        FormulaId::Rational,
        FormulaId::HighFreq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FormulaId::Product => "PRODUCT",
            FormulaId::ExpSinSq => "EXP_SIN_SQ",
            FormulaId::SumSin => "SUM_SIN",
            FormulaId::Composed => "COMPOSED",
            FormulaId::Rational => "RATIONAL",
            FormulaId::HighFreq => "HIGHFREQ",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            FormulaId::Composed => 4,
            _ => 2,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            FormulaId::Product => x[0] * x[1],
            FormulaId::ExpSinSq => ((PI * x[0]).sin() + x[1] * x[1]).exp(),
            FormulaId::SumSin => (PI * x[0]).sin() + (PI * x[1]).sin(),
            FormulaId::Composed => {
                let a = (PI * (x[0] * x[0] + x[1] * x[1])).sin();
                let b = (PI * (x[2] * x[2] + x[3] * x[3])).sin();
                (0.5 * (a + b)).exp()
            }
            FormulaId::Rational => x[0] / (1.0 + x[1] * x[1]),
            FormulaId::HighFreq => (5.0 * PI * x[0]).sin() * x[1],
        }
    }
}

impl fmt::Display for FormulaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormulaId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FormulaId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let known: Vec<_> = FormulaId::ALL.iter().map(|id| id.name()).collect();
                Error::Config(format!("unknown formula {s:?}; known: {}", known.join(", ")))
            })
    }
}

/// A user expression over `x0, x1, …` (and the constant `pi`), e.g.
/// `math::exp(math::sin(pi * x0) + x1^2)`.
#[derive(Clone, Debug)]
pub struct CustomFormula {
    source: String,
    tree: Node<DefaultNumericTypes>,
    dim: usize,
}

impl CustomFormula {
    pub fn parse(source: &str) -> Result<Self> {
        let tree = build_operator_tree::<DefaultNumericTypes>(source)
            .map_err(|e| Error::Config(format!("cannot parse formula {source:?}: {e}")))?;
        let mut dim = 0;
        for ident in tree.iter_variable_identifiers() {
            if ident == "pi" {
                continue;
            }
            let idx = ident
                .strip_prefix('x')
                .and_then(|d| d.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("formula variable {ident:?} is not of the form x<N>")))?;
            dim = dim.max(idx + 1);
        }
        if dim == 0 {
            return Err(Error::Config(format!("formula {source:?} uses no input variables")));
        }
        Ok(CustomFormula {
            source: source.to_string(),
            tree,
            dim,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        let set = |ctx: &mut HashMapContext<DefaultNumericTypes>, k: String, v: f64| {
            ctx.set_value(k, Value::Float(v))
                .map_err(|e| Error::Numeric(e.to_string()))
        };
        set(&mut ctx, "pi".into(), std::f64::consts::PI)?;
        for (i, &v) in x.iter().enumerate().take(self.dim) {
            set(&mut ctx, format!("x{i}"), v)?;
        }
        self.tree
            .eval_number_with_context(&ctx)
            .map_err(|e| Error::Numeric(format!("evaluating {:?}: {e}", self.source)))
    }
}

#[derive(Clone, Debug)]
pub enum Formula {
    Builtin(FormulaId),
    Custom(CustomFormula),
}

impl Formula {
    pub fn dim(&self) -> usize {
        match self {
            Formula::Builtin(id) => id.dim(),
            Formula::Custom(c) => c.dim(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Formula::Builtin(id) => id.name().to_string(),
            Formula::Custom(c) => c.source().to_string(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            Formula::Builtin(id) => Ok(id.eval(x)),
            Formula::Custom(c) => c.eval(x),
        }
    }
}

fn default_n_train() -> usize {
    3000
}

fn default_n_test() -> usize {
    1000
}

/// Synthetic regression task: a registered formula name, or `"custom"`
/// together with `expression`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaSpec {
    pub formula: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    /// Per-coordinate `[lo, hi]`; defaults to `[-1, 1]` on every input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

impl FormulaSpec {
    pub fn builtin(id: FormulaId) -> Self {
        FormulaSpec {
            formula: id.name().to_string(),
            expression: None,
            domain: None,
            n_train: default_n_train(),
            n_test: default_n_test(),
        }
    }

    pub fn resolve(&self) -> Result<Formula> {
        if self.formula.eq_ignore_ascii_case("custom") {
            let src = self
                .expression
                .as_deref()
                .ok_or_else(|| Error::Config("formula \"custom\" needs an \"expression\"".into()))?;
            return CustomFormula::parse(src).map(Formula::Custom);
        }
        if self.expression.is_some() {
            return Err(Error::Config(
                "\"expression\" is only valid with formula \"custom\"".into(),
            ));
        }
        self.formula.parse().map(Formula::Builtin)
    }

    pub fn domain_for(&self, dim: usize) -> Result<Vec<(f64, f64)>> {
        let domain: Vec<(f64, f64)> = match &self.domain {
            None => vec![(-1.0, 1.0); dim],
            Some(d) if d.len() == dim => d.iter().map(|&[lo, hi]| (lo, hi)).collect(),
            Some(d) => {
                return Err(Error::Config(format!(
                    "formula takes {dim} inputs but the domain has {}",
                    d.len()
                )));
            }
        };
        for &(lo, hi) in &domain {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("invalid domain interval [{lo}, {hi}]")));
            }
        }
        Ok(domain)
    }
}

fn sample_formula(formula: &Formula, domain: &[(f64, f64)], n: usize, name: &str, rng: &mut Rng) -> Result<Dataset> {
    let d = domain.len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let start = x.len();
        for &(lo, hi) in domain {
            x.push(rng.uniform(lo, hi));
        }
        y.push(formula.eval(&x[start..])?);
    }
    Dataset::new(name, Matrix::from_vec(n, d, x)?, Targets::Values(y))
}

/// Uniform samples over the domain with exact targets. Train and test come
/// from independent streams of `rng`.
pub fn gen_formula_dataset(spec: &FormulaSpec, rng: &Rng) -> Result<Split> {
    let formula = spec.resolve()?;
    let domain = spec.domain_for(formula.dim())?;
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Config("formula datasets need n_train and n_test >= 1".into()));
    }
    let name = formula.name();
    Ok(Split {
        train: sample_formula(&formula, &domain, spec.n_train, &name, &mut rng.fork(0))?,
        test: sample_formula(&formula, &domain, spec.n_test, &name, &mut rng.fork(1))?,
    })
}

/// Reads a headed CSV. Every column except `label_column` must be numeric.
/// Class labels are numbered in order of first appearance.
pub fn load_csv(path: &Path, label_column: &str, kind: TaskKind) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let headers = reader.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(Error::Input(format!("{} is empty", path.display())));
    }
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Config(format!("label column {label_column:?} not found in {}", path.display())))?;
    let d = headers.len() - 1;

    let mut features = Vec::new();
    let mut rows = 0;
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| fmt_err(format!("row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(fmt_err(format!(
                "row {row}: expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == label_idx {
                match kind {
                    TaskKind::Classify => {
                        let next = class_index.len();
                        let id = *class_index.entry(cell.to_string()).or_insert_with(|| {
                            class_names.push(cell.to_string());
                            next
                        });
                        labels.push(id);
                    }
                    TaskKind::Regress => {
                        let v = cell
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| fmt_err(format!("row {row}: target {cell:?} is not a finite number")))?;
                        values.push(v);
                    }
                }
            } else {
                let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    fmt_err(format!(
                        "row {row}, column {:?}: {cell:?} is not a finite number",
                        &headers[c]
                    ))
                })?;
                features.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Input(format!("{} has no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let features = Matrix::from_vec(rows, d, features)?;
    match kind {
        TaskKind::Classify => {
            let num_classes = class_names.len();
            Ok(Dataset::new(name, features, Targets::Classes { labels, num_classes })?.with_class_names(class_names))
        }
        TaskKind::Regress => Dataset::new(name, features, Targets::Values(values)),
    }
}

/// Writes features as `x0..x{d-1}` followed by `label_column`. Class labels
/// are written by name when the dataset carries names.
pub fn write_csv(ds: &Dataset, path: &Path, label_column: &str) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("x{i}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(match &ds.targets {
            Targets::Classes { labels, .. } => match &ds.class_names {
                Some(names) => names[labels[r]].clone(),
                None => labels[r].to_string(),
            },
            Targets::Values(v) => v[r].to_string(),
        });
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// File contents, transparently gunzipped when the gzip magic is present.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX image/label pair (optionally gzipped). Pixels are scaled
/// to `[0, 1]` and each image is flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    let fmt_err = |path: &Path, msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };

    let magic = be_u32(&images, 0).ok_or_else(|| fmt_err(images_path, "truncated header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt_err(
            images_path,
            format!("bad magic {magic} (expected {IDX_IMAGES_MAGIC})"),
        ));
    }
    let (n, rows, cols) = match (be_u32(&images, 4), be_u32(&images, 8), be_u32(&images, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err(fmt_err(images_path, "truncated header".into())),
    };
    let d = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != n * d {
        return Err(fmt_err(
            images_path,
            format!("expected {} pixel bytes, found {}", n * d, pixels.len()),
        ));
    }

    let magic = be_u32(&labels, 0).ok_or_else(|| fmt_err(labels_path, "truncated header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt_err(
            labels_path,
            format!("bad magic {magic} (expected {IDX_LABELS_MAGIC})"),
        ));
    }
    let n_labels = be_u32(&labels, 4).ok_or_else(|| fmt_err(labels_path, "truncated header".into()))? as usize;
    if n_labels != n {
        return Err(fmt_err(labels_path, format!("{n_labels} labels for {n} images")));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(fmt_err(
            labels_path,
            format!("expected {n} label bytes, found {}", label_bytes.len()),
        ));
    }

    let features = Matrix::from_vec(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, features, Targets::Classes { labels, num_classes })
}

/// Serializes a classification dataset as an IDX pair. Features are mapped
/// back to bytes by `round(255·x)` after clamping to `[0, 1]`.
pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Input("IDX output needs class labels".into()))?;
    if rows * cols != ds.dim() {
        return Err(Error::shape("write_idx", ds.dim(), format!("{rows}x{cols}")));
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.features.as_slice().len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        ds.features
            .as_slice()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in labels {
        lab.push(u8::try_from(l).map_err(|_| Error::Input(format!("label {l} does not fit in a byte")))?);
    }
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Per-feature statistics for `(x − μ) / σ`. Features with σ = 0 pass
/// through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(x: &Matrix) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("Standardizer::apply", self.mean.len(), x.cols()));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                if *s > 0.0 {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(out)
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(ds.with_features(self.apply(&ds.features)?))
    }
}

/// Fits on `ds` and returns the standardized copy with its statistics.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardizer)> {
    let st = Standardizer::fit(&ds.features);
    Ok((st.apply_dataset(ds)?, st))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub data: Dataset,
}

/// Tasks over one shared label space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

pub fn validate_groups(groups: &[Vec<usize>]) -> Result<()> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Config("class groups must be non-empty".into()));
    }
    let mut seen = BTreeSet::new();
    for g in groups {
        for &c in g {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class {c} appears in more than one group")));
            }
        }
    }
    Ok(())
}

/// Task `t` holds exactly the rows whose label is in `groups[t]`; labels
/// keep their global indices.
pub fn split_class_incremental(ds: &Dataset, groups: &[Vec<usize>]) -> Result<TaskSequence> {
    validate_groups(groups)?;
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Config("class-incremental split needs a classification dataset".into()))?;
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let mut tasks = Vec::with_capacity(groups.len());
    for g in groups {
        if let Some(missing) = g.iter().find(|c| !present.contains(c)) {
            return Err(Error::Config(format!("class {missing} does not occur in {}", ds.name)));
        }
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| g.contains(&labels[i])).collect();
        tasks.push(Task {
            classes: g.clone(),
            data: ds.select(&idx),
        });
    }
    Ok(TaskSequence { tasks })
}

/// Shuffled row indices cut into batches; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One epoch of shuffled mini-batches.
pub fn batch_iter<'a>(ds: &'a Dataset, batch_size: usize, rng: &mut Rng) -> Result<impl Iterator<Item = Dataset> + 'a> {
    let batches = batch_indices(ds.len(), batch_size, rng)?;
    Ok(batches.into_iter().map(move |b| ds.select(&b)))
}

/// `n` rows drawn without replacement, with per-class counts proportional to
/// the class frequencies (largest remainder). Rows keep their original order.
pub fn stratified_subsample(ds: &Dataset, n: usize, rng: &mut Rng) -> Result<Dataset> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Config("stratified sampling needs class labels".into()))?;
    if n >= ds.len() {
        return Ok(ds.clone());
    }
    let k = ds.num_classes().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let total = ds.len() as f64;
    let exact: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * n as f64 / total).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut short = n - take.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if short == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            short -= 1;
        }
    }
    let mut chosen = Vec::with_capacity(n);
    for (rows, &t) in by_class.iter_mut().zip(&take) {
        rng.shuffle(rows);
        chosen.extend_from_slice(&rows[..t]);
    }
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}
