use std::fs;
use std::path::Path;

use hypstruct_core::diagnostics::{
    delta_hyperbolicity, knn_classify, test_cpcc, DistanceMatrix, KnnLevel, MetricReport,
};
use hypstruct_core::spectral::gram_matrix;
use hypstruct_core::training::{Checkpoint, Model};
use serde_json::json;

use super::{csv_text, num, Output};
use crate::config::{load, load_tree, EvalCmd};
use crate::error::{CliError, CliResult};

pub fn load_model(path: &Path) -> CliResult<Model> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(Model::from_checkpoint(&ck)?)
}

pub fn run(config: Option<&Path>, seed: Option<u64>, out: &Output) -> CliResult<()> {
    let mut cfg: EvalCmd = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.data.reseed(cfg.seed);
    let tree = load_tree(&cfg.tree)?;
    let model = load_model(&cfg.checkpoint)?;
    let (train_set, test_set) = cfg.data.load(&tree)?;
    let eval_set = test_set.as_ref().unwrap_or(&train_set);
    let train_feats = model.embed(&train_set.features)?;
    let feats = model.embed(&eval_set.features)?;

    let delta_mode = cfg.delta.mode(feats.len(), cfg.seed);
    let delta = delta_hyperbolicity(&DistanceMatrix::from_l2(&feats), delta_mode)?;
    let cpcc = test_cpcc(&feats, &eval_set.labels, &tree, cfg.cpcc_distance)?;
    let k = cfg.knn_k.clamp(1, train_feats.len());
    let knn = |level| {
        knn_classify(&train_feats, &train_set.labels, &feats, Some(&eval_set.labels), k, level, &tree)
            .map(|o| o.accuracy.unwrap_or(f64::NAN))
    };
    let fine = knn(KnnLevel::Fine)?;
    let coarse = knn(KnnLevel::Coarse)?;

    if cfg.gram {
        let (gram, order) = gram_matrix(&feats, &eval_set.labels, &tree)?;
        let rows = (0..gram.nrows()).map(|i| {
            let vals: Vec<String> = (0..gram.ncols()).map(|j| gram[(i, j)].to_string()).collect();
            format!("{},{}", eval_set.labels[order[i]], vals.join(","))
        });
        out.write("gram.csv", csv_text("label,row", rows))?;
    }

    out.echo(&cfg)?;
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    let reports: Vec<MetricReport> = [
        ("delta_rel", delta.delta_rel),
        ("test_cpcc", cpcc),
        ("knn_fine_accuracy", fine),
        ("knn_coarse_accuracy", coarse),
    ]
    .into_iter()
    .map(|(metric, value)| MetricReport {
        metric: metric.to_string(),
        value,
        config_echo: echo.clone(),
        seed: cfg.seed,
    })
    .collect();
    out.report(
        "eval.json",
        &cfg,
        json!({
            "seed": cfg.seed,
            "knn_k": k,
            "delta_mode": delta_mode,
            "delta": num(delta.delta),
            "delta_rel": num(delta.delta_rel),
            "test_cpcc": num(cpcc),
            "knn_fine_accuracy": num(fine),
            "knn_coarse_accuracy": num(coarse),
            "reports": reports,
        }),
    )
}
