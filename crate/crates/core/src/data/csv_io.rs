use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delimiter {
    Char(u8),
    /// Any run of spaces or tabs.
    Whitespace,
}

impl Default for Delimiter {
    fn default() -> Self {
        Delimiter::Char(b',')
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "space" | " " => Ok(Delimiter::Whitespace),
            "tab" | "\\t" | "\t" => Ok(Delimiter::Char(b'\t')),
            _ if s.len() == 1 => Ok(Delimiter::Char(s.as_bytes()[0])),
            _ => Err(Error::Argument(format!("unsupported delimiter {s:?}"))),
        }
    }
}

/// A column addressed by zero-based position or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

impl std::fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "{i}"),
            ColumnRef::Name(n) => f.write_str(n),
        }
    }
}

/// How raw label cells become outlier flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelRule {
    /// Cells are `0`/`1` (or `false`/`true`); 1 marks an outlier.
    Numeric,
    /// Listed labels are outliers, everything else is an inlier.
    Outliers(Vec<String>),
    /// Listed labels are inliers, everything else is an outlier.
    Inliers(Vec<String>),
    /// The least frequent label is the outlier class (ties broken by the
    /// lexicographically smallest label).
    LeastFrequent,
    /// Only rows carrying one of the listed labels are kept.
    Explicit {
        inliers: Vec<String>,
        outliers: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub delimiter: Delimiter,
    pub has_header: bool,
    pub label_column: Option<ColumnRef>,
    pub label_rule: LabelRule,
    /// Cells equal to this token are read as 0.
    pub missing_token: Option<String>,
    /// Drop rows containing the missing token instead of zero-filling.
    pub drop_missing_rows: bool,
    pub drop_columns: Vec<ColumnRef>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: Delimiter::default(),
            has_header: true,
            label_column: None,
            label_rule: LabelRule::Numeric,
            missing_token: None,
            drop_missing_rows: false,
            drop_columns: Vec::new(),
        }
    }
}

/// Unparsed cells of a delimited file, with the 1-based source line of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub source: String,
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<usize>,
}

pub fn read_table(reader: impl Read, source: &str, delimiter: Delimiter, has_header: bool) -> Result<RawTable> {
    let mut text = String::new();
    BufReader::new(reader)
        .read_to_string(&mut text)
        .map_err(|e| Error::io(source, e))?;
    let (text, byte) = match delimiter {
        Delimiter::Char(b) => (text, b),
        Delimiter::Whitespace => {
            let joined = text
                .lines()
                .map(|l| l.split_whitespace().collect::<Vec<_>>().join(","))
                .collect::<Vec<_>>()
                .join("\n");
            (joined, b',')
        }
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(byte)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut header = None;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut width = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            source_name: source.to_string(),
            row: e.position().map_or(0, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let cells: Vec<String> = rec.iter().map(str::to_string).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    source_name: source.to_string(),
                    row: line,
                    column: cells.len().min(w) + 1,
                    message: format!("ragged row: expected {w} fields, found {}", cells.len()),
                });
            }
            _ => {}
        }
        if has_header && header.is_none() {
            header = Some(cells);
        } else {
            rows.push(cells);
            lines.push(line);
        }
    }
    Ok(RawTable {
        source: source.to_string(),
        header,
        rows,
        lines,
    })
}

fn labels_match(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

impl RawTable {
    pub fn width(&self) -> usize {
        self.header
            .as_ref()
            .map(Vec::len)
            .or_else(|| self.rows.first().map(Vec::len))
            .unwrap_or(0)
    }

    pub fn resolve(&self, col: &ColumnRef) -> Result<usize> {
        match col {
            ColumnRef::Index(i) if *i < self.width() => Ok(*i),
            ColumnRef::Index(i) => Err(Error::Argument(format!(
                "column {i} out of range for {} ({} columns)",
                self.source,
                self.width()
            ))),
            ColumnRef::Name(n) => self
                .header
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == n))
                .ok_or_else(|| Error::Argument(format!("no column named {n:?} in {}", self.source))),
        }
    }

    pub fn drop_columns(&mut self, cols: &[ColumnRef]) -> Result<()> {
        let mut idx = cols.iter().map(|c| self.resolve(c)).collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        for &i in idx.iter().rev() {
            if let Some(h) = self.header.as_mut() {
                h.remove(i);
            }
            for r in &mut self.rows {
                r.remove(i);
            }
        }
        Ok(())
    }

    /// Appends the rows of `other`; widths must agree.
    pub fn concat_rows(&mut self, other: RawTable) -> Result<()> {
        if !self.rows.is_empty() && !other.rows.is_empty() && self.width() != other.width() {
            return Err(Error::Data(format!(
                "cannot stack {} ({} columns) under {} ({} columns)",
                other.source,
                other.width(),
                self.source,
                self.width()
            )));
        }
        if self.header.is_none() {
            self.header = other.header;
        }
        self.rows.extend(other.rows);
        self.lines.extend(other.lines);
        Ok(())
    }

    /// Places the columns of `other` to the right; row counts must agree.
    pub fn concat_columns(&mut self, other: RawTable) -> Result<()> {
        if self.rows.len() != other.rows.len() {
            return Err(Error::Data(format!(
                "cannot join {} ({} rows) beside {} ({} rows)",
                other.source,
                other.rows.len(),
                self.source,
                self.rows.len()
            )));
        }
        match (&mut self.header, other.header) {
            (Some(h), Some(o)) => h.extend(o),
            (None, None) => {}
            _ => return Err(Error::Data("cannot join a headed table with a headerless one".into())),
        }
        for (r, o) in self.rows.iter_mut().zip(other.rows) {
            r.extend(o);
        }
        Ok(())
    }

    /// Parses cells into features and labels.
    pub fn into_batch(mut self, opts: &CsvOptions) -> Result<EmbeddingBatch> {
        self.drop_columns(&opts.drop_columns)?;
        let label_idx = opts.label_column.as_ref().map(|c| self.resolve(c)).transpose()?;
        let missing = opts.missing_token.as_deref();

        if opts.drop_missing_rows {
            if let Some(tok) = missing {
                let keep: Vec<bool> = self.rows.iter().map(|r| !r.iter().any(|c| c == tok)).collect();
                let mut k = keep.iter();
                self.rows.retain(|_| *k.next().unwrap());
                let mut k = keep.iter();
                self.lines.retain(|_| *k.next().unwrap());
            }
        }

        if let (Some(li), LabelRule::Explicit { inliers, outliers }) = (label_idx, &opts.label_rule) {
            let keep: Vec<bool> = self
                .rows
                .iter()
                .map(|r| inliers.iter().chain(outliers).any(|l| labels_match(&r[li], l)))
                .collect();
            let mut k = keep.iter();
            self.rows.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            self.lines.retain(|_| *k.next().unwrap());
        }

        let width = self.width();
        let d = width - usize::from(label_idx.is_some());
        let mut data = Vec::with_capacity(self.rows.len() * d);
        for (r, line) in self.rows.iter().zip(&self.lines) {
            for (c, cell) in r.iter().enumerate() {
                if Some(c) == label_idx {
                    continue;
                }
                let v = if Some(cell.as_str()) == missing {
                    0.0
                } else {
                    match cell.parse::<f64>() {
                        Ok(v) if v.is_finite() => v,
                        _ => {
                            return Err(Error::Parse {
                                source_name: self.source.clone(),
                                row: *line,
                                column: c + 1,
                                message: format!("non-numeric cell {cell:?}"),
                            })
                        }
                    }
                };
                data.push(v);
            }
        }
        let features = Matrix::new(self.rows.len(), d, data)?;

        let labels = match label_idx {
            None => None,
            Some(li) => Some(self.labels(li, &opts.label_rule)?),
        };
        let columns = self.header.map(|h| {
            h.into_iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != label_idx)
                .map(|(_, n)| n)
                .collect()
        });
        EmbeddingBatch::new(features, labels, columns)
    }

    fn labels(&self, li: usize, rule: &LabelRule) -> Result<Vec<bool>> {
        let cells = self.rows.iter().map(|r| r[li].as_str());
        Ok(match rule {
            LabelRule::Numeric => {
                let mut out = Vec::with_capacity(self.rows.len());
                for (cell, line) in cells.zip(&self.lines) {
                    out.push(match cell {
                        "true" => true,
                        "false" => false,
                        _ => match cell.parse::<f64>() {
                            Ok(v) if v == 1.0 => true,
                            Ok(v) if v == 0.0 => false,
                            _ => {
                                return Err(Error::Parse {
                                    source_name: self.source.clone(),
                                    row: *line,
                                    column: li + 1,
                                    message: format!("label {cell:?} is not 0/1; name the positive label explicitly"),
                                })
                            }
                        },
                    });
                }
                out
            }
            LabelRule::Outliers(list) => cells.map(|c| list.iter().any(|l| labels_match(c, l))).collect(),
            LabelRule::Inliers(list) => cells.map(|c| !list.iter().any(|l| labels_match(c, l))).collect(),
            LabelRule::Explicit { outliers, .. } => cells.map(|c| outliers.iter().any(|l| labels_match(c, l))).collect(),
            LabelRule::LeastFrequent => {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for c in cells.clone() {
                    *counts.entry(c).or_default() += 1;
                }
                let rare = counts
                    .iter()
                    .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
                    .map(|(k, _)| *k)
                    .ok_or_else(|| Error::Data("no rows to derive labels from".into()))?;
                cells.map(|c| c == rare).collect()
            }
        })
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<EmbeddingBatch> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file, &path.display().to_string(), opts.delimiter, opts.has_header)?.into_batch(opts)
}

/// Writes a comma-separated table with a header row. Values use the
/// shortest decimal form that parses back to the same `f64`.
pub fn write_csv(batch: &EmbeddingBatch, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    let mut header: Vec<String> = match &batch.columns {
        Some(c) => c.clone(),
        None => (0..batch.dim()).map(|i| format!("x{i}")).collect(),
    };
    if batch.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(wrap)?;
    let mut record = Vec::with_capacity(header.len());
    for (i, row) in batch.features.iter_rows().enumerate() {
        record.clear();
        record.extend(row.iter().map(|v| v.to_string()));
        if let Some(l) = &batch.labels {
            record.push(if l[i] { "1" } else { "0" }.to_string());
        }
        w.write_record(&record).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))
}

pub fn save_csv(batch: &EmbeddingBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(batch, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str, opts: &CsvOptions) -> Result<EmbeddingBatch> {
        read_table(text.as_bytes(), "mem", opts.delimiter, opts.has_header)?.into_batch(opts)
    }

    fn headerless() -> CsvOptions {
        CsvOptions {
            has_header: false,
            ..CsvOptions::default()
        }
    }

    #[test]
    fn plain_table() {
        let b = parse("1,2\n3,4\n", &headerless()).unwrap();
        assert_eq!(b.features, Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        assert!(b.labels.is_none());
    }

    #[test]
    fn missing_token_becomes_zero() {
        let opts = CsvOptions {
            missing_token: Some("?".into()),
            ..headerless()
        };
        let b = parse("1,?\n3,4\n", &opts).unwrap();
        assert_eq!(b.features.get(0, 1), 0.0);
    }

    #[test]
    fn missing_rows_can_be_dropped() {
        let opts = CsvOptions {
            missing_token: Some("?".into()),
            drop_missing_rows: true,
            ..headerless()
        };
        let b = parse("1,?\n3,4\n", &opts).unwrap();
        assert_eq!(b.features.data(), &[3.0, 4.0]);
    }

    #[test]
    fn named_label_column_with_positive_value() {
        let opts = CsvOptions {
            label_column: Some(ColumnRef::Name("diag".into())),
            label_rule: LabelRule::Outliers(vec!["B".into()]),
            ..CsvOptions::default()
        };
        let b = parse("a,diag,b\n1,B,2\n3,M,4\n5,B,6\n", &opts).unwrap();
        assert_eq!(b.labels, Some(vec![true, false, true]));
        assert_eq!(b.features.row(1), &[3.0, 4.0]);
        assert_eq!(b.columns, Some(vec!["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn label_rules() {
        let text = "1,a\n2,b\n3,b\n4,c\n5,c\n6,c\n";
        let with = |rule| CsvOptions {
            label_column: Some(ColumnRef::Index(1)),
            label_rule: rule,
            ..headerless()
        };
        let lf = parse(text, &with(LabelRule::LeastFrequent)).unwrap();
        assert_eq!(lf.labels.unwrap(), vec![true, false, false, false, false, false]);
        let inl = parse(text, &with(LabelRule::Inliers(vec!["c".into()]))).unwrap();
        assert_eq!(inl.labels.unwrap(), vec![true, true, true, false, false, false]);
        let ex = parse(
            text,
            &with(LabelRule::Explicit {
                inliers: vec!["c".into()],
                outliers: vec!["a".into()],
            }),
        )
        .unwrap();
        assert_eq!(ex.len(), 4);
        assert_eq!(ex.labels.unwrap(), vec![true, false, false, false]);
    }

    #[test]
    fn numeric_labels_compare_by_value() {
        let opts = CsvOptions {
            label_column: Some(ColumnRef::Index(1)),
            label_rule: LabelRule::Outliers(vec!["3".into()]),
            ..headerless()
        };
        let b = parse("1,3.\n2,4.\n", &opts).unwrap();
        assert_eq!(b.labels.unwrap(), vec![true, false]);
    }

    #[test]
    fn parse_errors_carry_position() {
        match parse("1,2\n3,x\n", &headerless()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("1,2\n3\n", &headerless()), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(parse("1,nan\n", &headerless()), Err(Error::Parse { .. })));
    }

    #[test]
    fn whitespace_delimiter() {
        let opts = CsvOptions {
            delimiter: Delimiter::Whitespace,
            ..headerless()
        };
        let b = parse("1   2\t3\n 4 5 6\n", &opts).unwrap();
        assert_eq!(b.features.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn write_then_read_is_exact(
            rows in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3), 1..20),
            labels in prop::collection::vec(any::<bool>(), 20),
        ) {
            let n = rows.len();
            let batch = EmbeddingBatch::new(Matrix::from_rows(&rows).unwrap(), Some(labels[..n].to_vec()), None).unwrap();
            let mut buf = Vec::new();
            write_csv(&batch, &mut buf).unwrap();
            let opts = CsvOptions { label_column: Some(ColumnRef::Name("label".into())), ..CsvOptions::default() };
            let back = read_table(buf.as_slice(), "mem", Delimiter::Char(b','), true).unwrap().into_batch(&opts).unwrap();
            prop_assert_eq!(back.features, batch.features);
            prop_assert_eq!(back.labels, batch.labels);
        }
    }
}
