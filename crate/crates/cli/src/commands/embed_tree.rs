use std::path::Path;

use hypstruct_core::geometry::{kernel, Curvature};
use hypstruct_core::hierarchy::tree_metric;
use hypstruct_core::objective::DistanceKind;
use hypstruct_core::training::{embed_tree_direct, TreeEmbedding};
use hypstruct_core::LabelTree;
use serde_json::json;

use super::{num, Output};
use crate::config::{load, load_tree, EmbedTreeCmd};
use crate::error::{CliError, CliResult};
use crate::svg;

fn pair_rows(tree: &LabelTree, emb: &TreeEmbedding, mode: DistanceKind, c: f64) -> CliResult<(Vec<u8>, Vec<(f64, f64)>)> {
    let metric = tree_metric(tree);
    let mut w = csv::Writer::from_writer(Vec::new());
    let invalid = |e: csv::Error| CliError::Invalid(e.to_string());
    w.write_record(["i", "j", "name_i", "name_j", "d_tree", "d_embed"]).map_err(invalid)?;
    let mut points = Vec::new();
    for i in 0..tree.len() {
        for j in i + 1..tree.len() {
            let (a, b) = (&emb.coords[i], &emb.coords[j]);
            let d = match mode {
                DistanceKind::L2 => kernel::l2_distance(a, b),
                DistanceKind::Poincare => kernel::poincare_distance(a, b, c),
            };
            points.push((metric.get(i, j), d));
            w.write_record([
                i.to_string(),
                j.to_string(),
                tree.name(i).to_string(),
                tree.name(j).to_string(),
                metric.get(i, j).to_string(),
                d.to_string(),
            ])
            .map_err(invalid)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok((bytes, points))
}

pub fn run(config: Option<&Path>, seed: Option<u64>, out: &Output) -> CliResult<()> {
    let mut cfg: EmbedTreeCmd = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.budget.seed = cfg.seed;
    let tree = load_tree(&cfg.tree)?;
    let c = Curvature::new(cfg.c)?;
    let hyp = embed_tree_direct(&tree, cfg.dim, DistanceKind::Poincare, c, &cfg.budget)?;
    let l2 = embed_tree_direct(&tree, cfg.dim, DistanceKind::L2, c, &cfg.budget)?;
    out.echo(&cfg)?;

    for (tag, emb, mode) in [("poincare", &hyp, DistanceKind::Poincare), ("l2", &l2, DistanceKind::L2)] {
        let (csv, points) = pair_rows(&tree, emb, mode, c.value())?;
        out.write(&format!("pairs_{tag}.csv"), csv)?;
        let y_label = match mode {
            DistanceKind::L2 => "ℓ2 distance",
            DistanceKind::Poincare => "Poincaré distance",
        };
        let title = format!("{tag} embedding, CPCC {}", svg::sig6(emb.cpcc));
        out.write(&format!("scatter_{tag}.svg"), svg::scatter(&points, &title, "tree distance", y_label))?;
    }
    if cfg.dim == 2 {
        let names: Vec<&str> = (0..tree.len()).map(|v| tree.name(v)).collect();
        let edges: Vec<(usize, usize)> = (0..tree.len())
            .filter_map(|v| tree.parent(v).map(|p| (p, v)))
            .collect();
        let title = format!("Poincaré disk, CPCC {}", svg::sig6(hyp.cpcc));
        out.write("disk_poincare.svg", svg::disk(&hyp.coords, &names, &edges, c.radius(), &title))?;
    }

    let coords = |e: &TreeEmbedding| -> serde_json::Value {
        (0..tree.len())
            .map(|v| (tree.name(v).to_string(), json!(e.coords[v])))
            .collect::<serde_json::Map<_, _>>()
            .into()
    };
    out.report(
        "embed_tree.json",
        &cfg,
        json!({
            "seed": cfg.seed,
            "cpcc": { "poincare": num(hyp.cpcc), "l2": num(l2.cpcc) },
            "restart_cpcc": {
                "poincare": hyp.restart_cpcc.iter().map(|&x| num(x)).collect::<Vec<_>>(),
                "l2": l2.restart_cpcc.iter().map(|&x| num(x)).collect::<Vec<_>>(),
            },
            "coordinates": { "poincare": coords(&hyp), "l2": coords(&l2) },
        }),
    )
}
