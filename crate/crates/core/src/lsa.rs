//! Latent semantic analysis of class–token count matrices.
//!
//! Matrices are stored classes × tokens: entry (i, j) counts occurrences of
//! token j in examples of class i.
//!
//! # Count table format
//!
//! UTF-8 comma-separated values, RFC 4180 quoting allowed:
//!
//! ```text
//! class,evid_1,evid_2,neutral
//! class_1,2,0,0
//! class_2,0,1,0
//! ```
//!
//! The first cell of the header is a free label; the remaining header cells
//! are token names. Each following row is a class name then one nonnegative
//! integer per token. Class and token names must be unique.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::synth_data::{Label, LabeledDataset};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    pub class_names: Vec<String>,
    pub token_names: Vec<String>,
    /// `counts[class][token]`.
    pub counts: Vec<Vec<u64>>,
}

impl CountMatrix {
    pub fn new(class_names: Vec<String>, token_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let m = CountMatrix {
            class_names,
            token_names,
            counts,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.len() != self.class_names.len() {
            return Err(Error::Shape(format!(
                "{} class names for {} rows",
                self.class_names.len(),
                self.counts.len()
            )));
        }
        if let Some(i) = self.counts.iter().position(|r| r.len() != self.token_names.len()) {
            return Err(Error::Shape(format!(
                "row {i} has {} entries, expected {}",
                self.counts[i].len(),
                self.token_names.len()
            )));
        }
        if let Some(d) = first_duplicate(&self.class_names) {
            return Err(Error::Parameter(format!("duplicate class name '{d}'")));
        }
        if let Some(d) = first_duplicate(&self.token_names) {
            return Err(Error::Parameter(format!("duplicate token name '{d}'")));
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.class_names.len(), self.token_names.len(), |i, j| self.counts[i][j] as f64)
    }
}

fn first_duplicate(names: &[String]) -> Option<&str> {
    let mut seen = HashSet::new();
    names.iter().find(|n| !seen.insert(n.as_str())).map(|s| s.as_str())
}

/// Token counts per class. A multilabel phrase counts toward every label it
/// carries.
pub fn build_count_matrix(dataset: &LabeledDataset) -> Result<CountMatrix> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("count matrix of an empty dataset".into()));
    }
    let classes = dataset.grammar.class_names();
    let v = dataset.vocabulary.len();
    let mut counts = vec![vec![0u64; v]; classes.len()];
    for p in &dataset.phrases {
        let rows: Vec<usize> = match &p.label {
            Label::Class(c) => vec![*c],
            Label::Multi(bits) => (0..bits.len()).filter(|&i| bits[i]).collect(),
        };
        for r in rows {
            let row = counts
                .get_mut(r)
                .ok_or_else(|| Error::Parameter(format!("label {r} out of range")))?;
            for &t in &p.tokens {
                *row.get_mut(t).ok_or_else(|| Error::Parameter(format!("token {t} out of range")))? += 1;
            }
        }
    }
    CountMatrix::new(classes, dataset.vocabulary.tokens.clone(), counts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Divide each class row by its total count.
    PerClassTotal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsaReport {
    pub centered: bool,
    pub normalization: Normalization,
    pub class_names: Vec<String>,
    pub token_names: Vec<String>,
    pub singular_values: Vec<f64>,
    /// `s_a² / Σ s²`.
    pub variance_fractions: Vec<f64>,
    /// `class_projections[i][a] = U_ia·s_a`.
    pub class_projections: Vec<Vec<f64>>,
    /// `token_loadings[j][a] = V_ja` (unit right singular vectors), so that
    /// the processed matrix equals Σ_a class_projections[·][a]·token_loadings[·][a].
    pub token_loadings: Vec<Vec<f64>>,
}

impl LsaReport {
    /// Cumulative variance fraction of the first `k` modes.
    pub fn top_fraction(&self, k: usize) -> f64 {
        self.variance_fractions.iter().take(k).sum()
    }
}

/// The matrix actually decomposed: optionally row-normalized, then
/// optionally column-centered across classes.
pub fn preprocess(m: &CountMatrix, center: bool, normalize: Normalization) -> Matrix {
    let mut x = m.to_matrix();
    if normalize == Normalization::PerClassTotal {
        for i in 0..x.rows() {
            let total: f64 = x.row(i).iter().sum();
            if total > 0.0 {
                x.row_mut(i).iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    if center && x.rows() > 0 {
        for j in 0..x.cols() {
            let mean = (0..x.rows()).map(|i| x[(i, j)]).sum::<f64>() / x.rows() as f64;
            for i in 0..x.rows() {
                x[(i, j)] -= mean;
            }
        }
    }
    x
}

pub fn lsa_analyze(m: &CountMatrix, center: bool, normalize: Normalization) -> Result<LsaReport> {
    m.validate()?;
    if m.counts.iter().flatten().all(|&c| c == 0) {
        return Err(Error::Undefined("LSA of an all-zero count matrix".into()));
    }
    let x = preprocess(m, center, normalize);
    let s = svd(&x)?;
    let total: f64 = s.singular_values.iter().map(|v| v * v).sum();
    let k = s.singular_values.len();
    let variance_fractions = s
        .singular_values
        .iter()
        .map(|v| if total > 0.0 { v * v / total } else { 0.0 })
        .collect();
    let class_projections = (0..x.rows())
        .map(|i| (0..k).map(|a| s.u[(i, a)] * s.singular_values[a]).collect())
        .collect();
    let token_loadings = (0..x.cols()).map(|j| (0..k).map(|a| s.v[(j, a)]).collect()).collect();
    Ok(LsaReport {
        centered: center,
        normalization: normalize,
        class_names: m.class_names.clone(),
        token_names: m.token_names.clone(),
        singular_values: s.singular_values,
        variance_fractions,
        class_projections,
        token_loadings,
    })
}

pub fn write_count_csv<W: Write>(m: &CountMatrix, out: W) -> Result<()> {
    m.validate()?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(std::iter::once("class").chain(m.token_names.iter().map(String::as_str)))
        .map_err(csv_err)?;
    for (name, row) in m.class_names.iter().zip(&m.counts) {
        let mut record = vec![name.clone()];
        record.extend(row.iter().map(u64::to_string));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a count table. Errors carry 1-based line and column numbers.
pub fn ingest_count_csv<R: Read>(input: R) -> Result<CountMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let parse = |line: usize, column: usize, message: String| Error::Parse { line, column, message };
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse(1, 0, e.to_string()))?,
        None => return Err(parse(1, 0, "empty input".into())),
    };
    if header.len() < 2 {
        return Err(parse(1, header.len() + 1, "header needs a label cell and at least one token".into()));
    }
    let token_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashSet::new();
    for (j, t) in token_names.iter().enumerate() {
        if !seen.insert(t.as_str()) {
            return Err(parse(1, j + 2, format!("duplicate token name '{t}'")));
        }
    }
    let mut class_names = Vec::new();
    let mut counts = Vec::new();
    let mut seen_classes = HashSet::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(class_names.len() + 2, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse(
                line,
                record.len().min(header.len()) + 1,
                format!("row has {} cells, header has {}", record.len(), header.len()),
            ));
        }
        let name = record[0].to_string();
        if !seen_classes.insert(name.clone()) {
            return Err(parse(line, 1, format!("duplicate class name '{name}'")));
        }
        let row = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, cell)| {
                cell.trim()
                    .parse::<u64>()
                    .map_err(|_| parse(line, j + 2, format!("'{cell}' is not a nonnegative integer")))
            })
            .collect::<Result<Vec<u64>>>()?;
        class_names.push(name);
        counts.push(row);
    }
    CountMatrix::new(class_names, token_names, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{Grammar, Phrase, SamplingMode, Vocabulary};

    fn tiny() -> CountMatrix {
        CountMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            vec![vec![3, 0], vec![1, 7]],
        )
        .unwrap()
    }

    #[test]
    fn counts_two_phrases() {
        let grammar = Grammar::Categorical { classes: 2 };
        let vocabulary: Vocabulary = grammar.vocabulary();
        let phrase = |tokens: Vec<usize>, c| Phrase {
            score: vocabulary.score_of(&tokens),
            tokens,
            label: Label::Class(c),
        };
        let ds = LabeledDataset {
            grammar: grammar.clone(),
            mode: SamplingMode::UniformOverScores,
            vocabulary: vocabulary.clone(),
            phrases: vec![phrase(vec![0, 0], 0), phrase(vec![1], 1)],
        };
        let m = build_count_matrix(&ds).unwrap();
        assert_eq!(m.counts, vec![vec![2, 0, 0], vec![0, 1, 0]]);
        assert_eq!(m.token_names, vec!["evid_1", "evid_2", "neutral"]);
    }

    #[test]
    fn csv_round_trip() {
        let m = tiny();
        let mut buf = Vec::new();
        write_count_csv(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "class,x,y\na,3,0\nb,1,7\n");
        assert_eq!(ingest_count_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn csv_errors_carry_locations() {
        match ingest_count_csv("class,x,x\na,1,2\n".as_bytes()) {
            Err(Error::Parse { line: 1, column: 3, message }) => assert!(message.contains("'x'")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ingest_count_csv("class,x,y\na,1\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ingest_count_csv("class,x,y\na,1,2\nb,3,-4\n".as_bytes()),
            Err(Error::Parse { line: 3, column: 3, .. })
        ));
        assert!(matches!(
            ingest_count_csv("class,x\na,1\na,2\n".as_bytes()),
            Err(Error::Parse { line: 3, column: 1, .. })
        ));
    }

    #[test]
    fn identical_rows_center_to_zero() {
        let m = CountMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into()],
            vec![vec![4, 9]; 3],
        )
        .unwrap();
        let r = lsa_analyze(&m, true, Normalization::None).unwrap();
        assert!(r.singular_values.iter().all(|s| *s < 1e-10));
    }

    #[test]
    fn all_zero_is_an_error() {
        let m = CountMatrix::new(vec!["a".into()], vec!["x".into()], vec![vec![0]]).unwrap();
        assert!(lsa_analyze(&m, true, Normalization::None).is_err());
    }

    #[test]
    fn projections_reconstruct_processed_matrix() {
        let m = tiny();
        for (center, norm) in [(true, Normalization::None), (false, Normalization::PerClassTotal)] {
            let r = lsa_analyze(&m, center, norm).unwrap();
            let x = preprocess(&m, center, norm);
            for i in 0..2 {
                for j in 0..2 {
                    let v: f64 = (0..r.singular_values.len())
                        .map(|a| r.class_projections[i][a] * r.token_loadings[j][a])
                        .sum();
                    assert!((v - x[(i, j)]).abs() < 1e-12);
                }
            }
            assert!((r.variance_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
