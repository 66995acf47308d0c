use std::path::Path;

use hypstruct_core::objective::FlatLoss;
use hypstruct_core::training::{train, EncoderSpec, HistoryRow};
use serde_json::json;

use super::{num, Output};
use crate::config::{load, load_tree, DataSource, TrainCmd, VERSION};
use crate::error::CliResult;

fn row_json(r: &HistoryRow) -> serde_json::Value {
    json!({
        "epoch": r.epoch,
        "flat": num(r.flat),
        "cpcc": num(r.cpcc),
        "center": num(r.center),
        "lr": num(r.lr),
    })
}

pub fn run(config: Option<&Path>, seed: Option<u64>, out: &Output) -> CliResult<()> {
    let mut cfg: TrainCmd = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.data.reseed(cfg.seed);
    cfg.train.seed = cfg.seed;
    let obj = cfg.resolve_objective()?;
    if obj.flat_loss == FlatLoss::Supcon {
        if let DataSource::Synthetic { spec, .. } = &mut cfg.data {
            spec.two_views = true;
        }
    }
    for w in cfg.data.warnings() {
        eprintln!("warning: {w}");
    }
    let tree = load_tree(&cfg.tree)?;
    let (train_set, _) = cfg.data.load(&tree)?;
    let encoder = EncoderSpec {
        kind: cfg.encoder.kind,
        input_dim: train_set.dim(),
        hidden_dim: cfg.encoder.hidden_dim,
        output_dim: cfg.encoder.output_dim,
        seed: cfg.seed,
    };
    let (model, history) = train(&train_set, &tree, &encoder, &obj, &cfg.train)?;

    out.echo(&cfg)?;
    let checkpoint = model.to_checkpoint(json!({ "version": VERSION, "config": &cfg }));
    let mut text = serde_json::to_string_pretty(&checkpoint).expect("checkpoint serializes");
    text.push('\n');
    out.write("checkpoint.json", text)?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    out.write("history.csv", csv)?;

    let first = history.rows.first().expect("history has the initial row");
    let last = history.rows.last().expect("history has the initial row");
    out.report(
        "train_summary.json",
        &cfg,
        json!({
            "seed": cfg.seed,
            "num_params": model.num_params(),
            "initial": row_json(first),
            "final": row_json(last),
            "final_train_cpcc": num(last.cpcc),
            "skipped_cpcc_steps": history.skipped_cpcc_steps,
            "nonsmooth_steps": history.nonsmooth_steps,
        }),
    )
}
