use std::fs;
use std::path::Path;

use hypstruct_core::dataset::read_csv;
use hypstruct_core::spectral::{
    balanced_eigenvalues_closed_form, build_block_matrix, gram_matrix, hierarchical_spectrum,
    numerical_eigenvalues, phase_transition_detect, write_spectrum_csv, BlockCorrelationSpec,
    EigenSpectrum,
};
use serde_json::json;

use super::{num, Output};
use crate::config::{load, load_tree, read_matrix, SpectraCmd, SpectraInput};
use crate::error::{CliError, CliResult};

fn spectrum_csv(s: &EigenSpectrum) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_spectrum_csv(&mut buf, s)?;
    Ok(buf)
}

fn warn(spec: &BlockCorrelationSpec) {
    for w in spec.precondition_warnings() {
        eprintln!("warning: {w}");
    }
}

pub fn run(config: Option<&Path>, seed: Option<u64>, out: &Output) -> CliResult<()> {
    let mut cfg: SpectraCmd = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (closed, numerical) = match &cfg.input {
        SpectraInput::Balanced { level_counts, r } => {
            let spec = BlockCorrelationSpec::balanced(level_counts, r.clone())?;
            warn(&spec);
            let closed = balanced_eigenvalues_closed_form(level_counts, r)?;
            (Some(closed), numerical_eigenvalues(&build_block_matrix(&spec))?)
        }
        SpectraInput::Tree { tree, r } => {
            let spec = BlockCorrelationSpec::new(load_tree(tree)?, r.clone())?;
            warn(&spec);
            let closed = hierarchical_spectrum(&spec)?;
            (Some(closed), numerical_eigenvalues(&build_block_matrix(&spec))?)
        }
        SpectraInput::Features { path, tree } => {
            let tree = load_tree(tree)?;
            let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
            let data = read_csv(file, &tree)?;
            let (k, _) = gram_matrix(&data.features, &data.labels, &tree)?;
            (None, numerical_eigenvalues(&k)?)
        }
        SpectraInput::Matrix { path } => (None, numerical_eigenvalues(&read_matrix(path)?)?),
    };
    let discrepancy = closed.as_ref().map(|c| c.max_abs_difference(&numerical)).transpose()?;
    let transitions: Vec<_> = phase_transition_detect(&numerical, cfg.top_k)
        .into_iter()
        .take(cfg.transitions)
        .collect();

    out.echo(&cfg)?;
    out.write("spectrum_numerical.csv", spectrum_csv(&numerical)?)?;
    if let Some(c) = &closed {
        out.write("spectrum_closed_form.csv", spectrum_csv(c)?)?;
    }
    out.report(
        "spectra.json",
        &cfg,
        json!({
            "seed": cfg.seed,
            "order": numerical.order(),
            "trace": num(numerical.trace()),
            "max_abs_discrepancy": discrepancy.map(num),
            "dominant_gap": transitions.first().map(|t| t.position),
            "transitions": transitions
                .iter()
                .map(|t| json!({ "position": t.position, "relative_drop": num(t.relative_drop) }))
                .collect::<Vec<_>>(),
        }),
    )
}
