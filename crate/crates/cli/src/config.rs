use std::fs;
use std::path::{Path, PathBuf};

use hypstruct_core::dataset::{read_csv, LabeledDataset};
use hypstruct_core::diagnostics::{CpccDistance, DeltaMode};
use hypstruct_core::hierarchy::{builtin_cifar10_tree, parse_tree};
use hypstruct_core::objective::ObjectiveConfig;
use hypstruct_core::training::{
    generate_hierarchical_gaussians, generate_ood_cluster, EmbedBudget, EncoderKind, SyntheticSpec,
    TrainConfig,
};
use hypstruct_core::LabelTree;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = concat!("hypstruct ", env!("CARGO_PKG_VERSION"));

/// Name of the built-in ten-class hierarchy; any other value is a file path.
pub const BUILTIN_TREE: &str = "cifar10";

/// Read a JSON config, or the defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_tree(spec: &str) -> CliResult<LabelTree> {
    if spec == BUILTIN_TREE {
        return Ok(builtin_cifar10_tree());
    }
    let text = fs::read_to_string(spec).map_err(|e| CliError::io(spec, e))?;
    Ok(parse_tree(&text)?)
}

fn read_dataset(path: &Path, tree: &LabelTree) -> CliResult<LabeledDataset> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_csv(file, tree)?)
}

/// Unlabeled feature rows. A leading `label` column is ignored.
pub fn read_features(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let skip = reader
        .headers()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        .get(0)
        == Some("label");
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .skip(usize::from(skip))
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    CliError::Invalid(format!("{}: line {}: bad number {f:?}", path.display(), i + 2))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Square matrix as headerless CSV rows.
pub fn read_matrix(path: &Path) -> CliResult<nalgebra::DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        rows.push(
            record
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?,
        );
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Invalid(format!("{}: matrix must be square", path.display())));
    }
    Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Hierarchical Gaussians, split per class into train and test.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

fn default_train_per_class() -> usize {
    50
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec {
                n_per_leaf: 100,
                ..Default::default()
            },
            train_per_class: default_train_per_class(),
        }
    }
}

impl DataSource {
    pub fn reseed(&mut self, seed: u64) {
        if let DataSource::Synthetic { spec, .. } = self {
            spec.seed = seed;
        }
    }

    /// Generator warnings worth echoing to standard error.
    pub fn warnings(&self) -> Vec<String> {
        match self {
            DataSource::Synthetic { spec, .. } => spec.warnings(),
            DataSource::Csv { .. } => Vec::new(),
        }
    }

    /// Train and (when available) test splits.
    pub fn load(&self, tree: &LabelTree) -> CliResult<(LabeledDataset, Option<LabeledDataset>)> {
        match self {
            DataSource::Synthetic {
                spec,
                train_per_class,
            } => {
                let data = generate_hierarchical_gaussians(tree, spec)?;
                let (train, test) = data.split_per_class(*train_per_class);
                if train.is_empty() {
                    return Err(CliError::Invalid("train_per_class must be positive".into()));
                }
                Ok((train, (!test.is_empty()).then_some(test)))
            }
            DataSource::Csv { train, test } => {
                let a = read_dataset(train, tree)?;
                let b = test.as_deref().map(|p| read_dataset(p, tree)).transpose()?;
                Ok((a, b))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedTreeCmd {
    pub seed: u64,
    pub tree: String,
    pub dim: usize,
    pub c: f64,
    pub budget: EmbedBudget,
}

impl Default for EmbedTreeCmd {
    fn default() -> Self {
        EmbedTreeCmd {
            seed: 0,
            tree: BUILTIN_TREE.to_string(),
            dim: 2,
            c: 1.0,
            budget: EmbedBudget::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Flat,
    L2Cpcc,
    Hypstructure,
}

impl Method {
    pub fn preset(self) -> ObjectiveConfig {
        match self {
            Method::Flat => ObjectiveConfig::flat(),
            Method::L2Cpcc => ObjectiveConfig::l2_cpcc(),
            Method::Hypstructure => ObjectiveConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderChoice {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for EncoderChoice {
    fn default() -> Self {
        EncoderChoice {
            kind: EncoderKind::Mlp1Hidden,
            hidden_dim: 32,
            output_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmd {
    pub seed: u64,
    pub tree: String,
    pub data: DataSource,
    pub method: Method,
    /// Overrides applied on top of the method preset; the echo holds the
    /// fully resolved objective.
    pub objective: serde_json::Value,
    pub encoder: EncoderChoice,
    pub train: TrainConfig,
}

impl Default for TrainCmd {
    fn default() -> Self {
        TrainCmd {
            seed: 0,
            tree: BUILTIN_TREE.to_string(),
            data: DataSource::default(),
            method: Method::Hypstructure,
            objective: serde_json::Value::Object(Default::default()),
            encoder: EncoderChoice::default(),
            train: TrainConfig::default(),
        }
    }
}

impl TrainCmd {
    /// Merge the objective overrides onto the method preset and write the
    /// result back so the echoed config is complete.
    pub fn resolve_objective(&mut self) -> CliResult<ObjectiveConfig> {
        let mut merged = serde_json::to_value(self.method.preset()).expect("objective serializes");
        match &self.objective {
            serde_json::Value::Object(over) => {
                let target = merged.as_object_mut().expect("object");
                for (k, v) in over {
                    target.insert(k.clone(), v.clone());
                }
            }
            serde_json::Value::Null => {}
            other => {
                return Err(CliError::Invalid(format!("objective must be an object, got {other}")));
            }
        }
        let obj: ObjectiveConfig = serde_json::from_value(merged).map_err(|e| CliError::Config {
            path: "objective".into(),
            message: e.to_string(),
        })?;
        obj.validate()?;
        self.objective = serde_json::to_value(&obj).expect("objective serializes");
        Ok(obj)
    }
}

/// δ estimator choice: exact up to `exact_max_points`, sampled above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaChoice {
    pub exact_max_points: usize,
    pub samples: u64,
}

impl Default for DeltaChoice {
    fn default() -> Self {
        DeltaChoice {
            exact_max_points: hypstruct_core::diagnostics::EXACT_DELTA_MAX_POINTS,
            samples: 2_000_000,
        }
    }
}

impl DeltaChoice {
    pub fn mode(&self, n: usize, seed: u64) -> DeltaMode {
        if n <= self.exact_max_points {
            DeltaMode::Exact
        } else {
            DeltaMode::Sampled {
                k: self.samples,
                seed,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCmd {
    pub seed: u64,
    pub tree: String,
    pub checkpoint: PathBuf,
    /// Features are taken from the test split, or the train split when
    /// there is none.
    pub data: DataSource,
    pub cpcc_distance: CpccDistance,
    pub delta: DeltaChoice,
    pub knn_k: usize,
    /// Also write the sorted Gram matrix of the evaluation features.
    pub gram: bool,
}

impl Default for EvalCmd {
    fn default() -> Self {
        EvalCmd {
            seed: 0,
            tree: BUILTIN_TREE.to_string(),
            checkpoint: PathBuf::from("checkpoint.json"),
            data: DataSource::default(),
            cpcc_distance: CpccDistance::L2,
            delta: DeltaChoice::default(),
            knn_k: 50,
            gram: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectraInput {
    /// Balanced tree from root-first level counts.
    Balanced { level_counts: Vec<usize>, r: Vec<f64> },
    /// Any hierarchy file with one correlation per height.
    Tree { tree: String, r: Vec<f64> },
    /// Labeled feature CSV; its sorted Gram matrix is analysed.
    Features { path: PathBuf, tree: String },
    /// Headerless square matrix CSV.
    Matrix { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraCmd {
    pub seed: u64,
    pub input: SpectraInput,
    /// Eigenvalues scanned for gaps.
    pub top_k: usize,
    /// Gaps reported, largest first.
    pub transitions: usize,
}

impl Default for SpectraCmd {
    fn default() -> Self {
        SpectraCmd {
            seed: 0,
            input: SpectraInput::Balanced {
                level_counts: vec![1, 2, 4],
                r: vec![0.8, 0.2],
            },
            top_k: 100,
            transitions: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSource {
    /// Gaussian cluster `distance` from the origin in input space.
    Synthetic {
        n: usize,
        distance: f64,
        sigma: f64,
    },
    Csv {
        path: PathBuf,
    },
    /// The in-distribution evaluation split itself.
    IdEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedOod {
    pub name: String,
    pub source: OodSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCheckpoint {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodsimCmd {
    pub seed: u64,
    pub tree: String,
    pub checkpoints: Vec<NamedCheckpoint>,
    pub data: DataSource,
    pub ood: Vec<NamedOod>,
    /// Center and unit-normalize features before fitting.
    pub normalize: bool,
    pub ridge_scale: f64,
    pub histogram_bins: usize,
}

impl Default for OodsimCmd {
    fn default() -> Self {
        OodsimCmd {
            seed: 0,
            tree: BUILTIN_TREE.to_string(),
            checkpoints: vec![NamedCheckpoint {
                name: "model".into(),
                path: PathBuf::from("checkpoint.json"),
            }],
            data: DataSource::default(),
            ood: vec![NamedOod {
                name: "far_cluster".into(),
                source: OodSource::Synthetic {
                    n: 500,
                    distance: 4.0,
                    sigma: 1.0,
                },
            }],
            normalize: true,
            ridge_scale: hypstruct_core::diagnostics::DEFAULT_RIDGE_SCALE,
            histogram_bins: 20,
        }
    }
}

impl OodSource {
    pub fn load(&self, dim: usize, seed: u64, id_eval: &[Vec<f64>]) -> CliResult<Vec<Vec<f64>>> {
        match self {
            OodSource::Synthetic { n, distance, sigma } => {
                Ok(generate_ood_cluster(dim, *n, *distance, *sigma, seed))
            }
            OodSource::Csv { path } => read_features(path),
            OodSource::IdEval => Ok(id_eval.to_vec()),
        }
    }
}
