use std::collections::BTreeMap;
use std::path::Path;

use hypstruct_core::diagnostics::{
    auroc, borda_count, fit_gaussian_with_ridge, mahalanobis_score, FeatureNormalizer,
};
use serde_json::json;

use super::eval::load_model;
use super::{csv_text, num, Output};
use crate::config::{load, load_tree, OodsimCmd};
use crate::error::{CliError, CliResult};

/// Equal-width bins spanning both score sets.
fn histogram(scores: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &s in scores {
        let b = if width > 0.0 { ((s - lo) / width) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

pub fn run(config: Option<&Path>, seed: Option<u64>, out: &Output) -> CliResult<()> {
    let mut cfg: OodsimCmd = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.data.reseed(cfg.seed);
    if cfg.checkpoints.is_empty() || cfg.ood.is_empty() {
        return Err(CliError::Invalid("need at least one checkpoint and one OOD set".into()));
    }
    if cfg.histogram_bins == 0 {
        return Err(CliError::Invalid("histogram_bins must be positive".into()));
    }
    let tree = load_tree(&cfg.tree)?;
    let (train_set, test_set) = cfg.data.load(&tree)?;
    let id_eval = test_set.as_ref().unwrap_or(&train_set);
    let dim = train_set.dim();
    let mut ood_inputs = Vec::new();
    for (k, set) in cfg.ood.iter().enumerate() {
        let rows = set.source.load(dim, cfg.seed.wrapping_add(1000 + k as u64), &id_eval.features)?;
        if rows.is_empty() {
            return Err(CliError::Invalid(format!("OOD set {:?} is empty", set.name)));
        }
        ood_inputs.push(rows);
    }

    let mut table: Vec<Vec<Option<f64>>> = Vec::new();
    let mut results = Vec::new();
    let mut score_rows = Vec::new();
    let mut hist_rows = Vec::new();
    for ck in &cfg.checkpoints {
        let model = load_model(&ck.path)?;
        let prep = |rows: &[Vec<f64>], norm: Option<&FeatureNormalizer>| -> CliResult<Vec<Vec<f64>>> {
            let f = model.embed(rows)?;
            Ok(match norm {
                Some(n) => n.apply(&f),
                None => f,
            })
        };
        let raw_train = model.embed(&train_set.features)?;
        let norm = if cfg.normalize {
            Some(FeatureNormalizer::fit(&raw_train)?)
        } else {
            None
        };
        let train_feats = prep(&train_set.features, norm.as_ref())?;
        let fit = fit_gaussian_with_ridge(&train_feats, cfg.ridge_scale)?;
        let score = |rows: &[Vec<f64>]| -> CliResult<Vec<f64>> {
            prep(rows, norm.as_ref())?
                .iter()
                .map(|x| mahalanobis_score(x, &fit).map_err(CliError::from))
                .collect()
        };
        let id_scores = score(&id_eval.features)?;
        let mut row = Vec::new();
        let mut per_set = BTreeMap::new();
        for (set, inputs) in cfg.ood.iter().zip(&ood_inputs) {
            let ood_scores = score(inputs)?;
            let a = auroc(&id_scores, &ood_scores)?;
            row.push(Some(a));
            per_set.insert(set.name.clone(), num(a));
            let lo = id_scores.iter().chain(&ood_scores).copied().fold(f64::INFINITY, f64::min);
            let hi = id_scores.iter().chain(&ood_scores).copied().fold(f64::NEG_INFINITY, f64::max);
            let width = (hi - lo) / cfg.histogram_bins as f64;
            for (group, scores) in [("id", &id_scores), ("ood", &ood_scores)] {
                for (b, count) in histogram(scores, lo, hi, cfg.histogram_bins).into_iter().enumerate() {
                    hist_rows.push(format!(
                        "{},{},{group},{},{},{count}",
                        ck.name,
                        set.name,
                        lo + b as f64 * width,
                        lo + (b + 1) as f64 * width
                    ));
                }
            }
            score_rows.extend(ood_scores.iter().map(|s| format!("{},{},ood,{s}", ck.name, set.name)));
        }
        score_rows.extend(id_scores.iter().map(|s| format!("{},id_eval,id,{s}", ck.name)));
        table.push(row);
        results.push(json!({ "name": ck.name, "auroc": per_set }));
    }
    let borda = borda_count(&table)?;

    out.echo(&cfg)?;
    out.write("scores.csv", csv_text("method,set,group,score", score_rows))?;
    out.write("histograms.csv", csv_text("method,set,group,bin_lo,bin_hi,count", hist_rows))?;
    let borda_json: BTreeMap<String, serde_json::Value> = cfg
        .checkpoints
        .iter()
        .zip(&borda)
        .map(|(c, &b)| (c.name.clone(), num(b)))
        .collect();
    out.report(
        "oodsim.json",
        &cfg,
        json!({
            "seed": cfg.seed,
            "methods": results,
            "borda": borda_json,
        }),
    )
}
