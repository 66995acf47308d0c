//! Labeled feature datasets and the `label,f0,f1,...` CSV format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::hierarchy::LabelTree;

/// Feature rows with fine-class labels (indices into the tree's leaves).
///
/// `second_view` optionally carries an independently perturbed copy of
/// every row, used as the paired view for contrastive losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub second_view: Option<Vec<Vec<f64>>>,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::LengthMismatch(features.len(), labels.len()));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if let Some(bad) = features.iter().find(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: bad.len(),
                });
            }
        }
        Ok(LabeledDataset {
            features,
            labels,
            second_view: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |r| r.len())
    }

    /// Rows selected by index, keeping the second view if present.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            second_view: self
                .second_view
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    /// Split per class: the first `train_per_class` rows of each class go
    /// to the first set, the rest to the second. Row order is preserved.
    pub fn split_per_class(&self, train_per_class: usize) -> (LabeledDataset, LabeledDataset) {
        let mut seen = std::collections::HashMap::new();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            let k = seen.entry(l).or_insert(0usize);
            if *k < train_per_class {
                a.push(i);
            } else {
                b.push(i);
            }
            *k += 1;
        }
        (self.subset(&a), self.subset(&b))
    }

    pub fn validate_labels(&self, tree: &LabelTree) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= tree.num_classes()) {
            Some(&l) => Err(Error::UnknownLabel(format!("class index {l}"))),
            None => Ok(()),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            line: p.line() as usize,
            column: 0,
            message: e.to_string(),
        },
        None => Error::Io(e.to_string()),
    }
}

/// Read a dataset whose label column names leaves of `tree`.
pub fn read_csv<R: Read>(reader: R, tree: &LabelTree) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "first column must be named `label`".into(),
        });
    }
    for (k, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{k}") {
            return Err(Error::Parse {
                line: 1,
                column: k + 2,
                message: format!("expected header f{k}, found {h:?}"),
            });
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let name = rec.get(0).unwrap_or_default();
        let class = tree
            .class_by_name(name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))?;
        let row = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(k, s)| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    column: k + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        features.push(row);
        labels.push(class);
    }
    LabeledDataset::new(features, labels)
}

pub fn write_csv<W: Write>(writer: W, data: &LabeledDataset, tree: &LabelTree) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string()];
    header.extend((0..data.dim()).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (row, &l) in data.features.iter().zip(&data.labels) {
        let mut rec = vec![tree.name(tree.leaves()[l]).to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::builtin_cifar10_tree;

    #[test]
    fn csv_round_trip() {
        let tree = builtin_cifar10_tree();
        let data =
            LabeledDataset::new(vec![vec![0.5, -1.25], vec![3.0, 1e-9]], vec![0, 9]).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &data, &tree).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,f0,f1\nairplane,0.5,-1.25\n"));
        assert_eq!(read_csv(buf.as_slice(), &tree).unwrap(), data);
    }

    #[test]
    fn csv_rejects_unknown_label_and_bad_header() {
        let tree = builtin_cifar10_tree();
        let bad = "label,f0\nunicorn,1\n";
        assert!(matches!(read_csv(bad.as_bytes(), &tree), Err(Error::UnknownLabel(_))));
        let bad = "class,f0\ncat,1\n";
        assert!(matches!(read_csv(bad.as_bytes(), &tree), Err(Error::Parse { .. })));
        let bad = "label,f0\ncat,abc\n";
        assert!(matches!(read_csv(bad.as_bytes(), &tree), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn split_is_stratified() {
        let data = LabeledDataset::new(
            (0..6).map(|i| vec![i as f64]).collect(),
            vec![0, 1, 0, 1, 0, 1],
        )
        .unwrap();
        let (a, b) = data.split_per_class(2);
        assert_eq!(a.labels, vec![0, 1, 0, 1]);
        assert_eq!(b.features, vec![vec![4.0], vec![5.0]]);
    }
}
