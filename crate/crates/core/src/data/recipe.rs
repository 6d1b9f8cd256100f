//! Declarative preparation recipes for multi-file benchmark tables.
//!
//! A recipe is a `key = value` text file (`#` starts a comment):
//!
//! ```text
//! name = wdbc
//! sources = wdbc.data            # comma-separated, relative to the data dir
//! join = rows                    # rows | columns
//! delimiter = ,                  # single char, `tab`, or `whitespace`
//! header = false
//! missing = ?                    # token read as 0
//! drop_missing_rows = false
//! drop_columns = 0               # indices or header names, after joining
//! label_column = 1
//! row_block_labels = 200         # synthesise a label from row blocks
//! outlier_labels = B             # and/or inlier_labels, or least_frequent = true
//! invert_labels = false
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::csv_io::{read_table, ColumnRef, CsvOptions, Delimiter, LabelRule, RawTable};
use super::EmbeddingBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JoinMode {
    Rows,
    Columns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub sources: Vec<String>,
    pub join: JoinMode,
    pub delimiter: Delimiter,
    pub header: bool,
    pub missing: Option<String>,
    pub drop_missing_rows: bool,
    pub drop_columns: Vec<ColumnRef>,
    pub label_column: Option<ColumnRef>,
    pub row_block_labels: Option<usize>,
    pub label_rule: LabelRule,
    pub invert_labels: bool,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Argument(format!("recipe key {key}: expected true/false, got {v:?}"))),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

impl Recipe {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: "recipe".into(),
                row: i + 1,
                column: 1,
                message: format!("expected `key = value`, got {raw:?}"),
            })?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Argument(format!("recipe key {:?} given twice", k.trim())));
            }
        }
        let mut take = |k: &str| kv.remove(k);

        let name = take("name").unwrap_or_default();
        let sources = take("sources").map(|v| list(&v)).unwrap_or_default();
        if sources.is_empty() {
            return Err(Error::Argument("recipe must name at least one source file".into()));
        }
        let join = match take("join").as_deref() {
            None | Some("rows") => JoinMode::Rows,
            Some("columns") => JoinMode::Columns,
            Some(other) => return Err(Error::Argument(format!("unknown join mode {other:?}"))),
        };
        let delimiter = take("delimiter").map_or(Ok(Delimiter::Char(b',')), |v| v.parse())?;
        let header = take("header").map_or(Ok(false), |v| parse_bool("header", &v))?;
        let missing = take("missing");
        let drop_missing_rows = take("drop_missing_rows").map_or(Ok(false), |v| parse_bool("drop_missing_rows", &v))?;
        let drop_columns = take("drop_columns")
            .map(|v| list(&v).iter().map(|c| c.parse().expect("infallible")).collect())
            .unwrap_or_default();
        let label_column = take("label_column").map(|v| v.parse().expect("infallible"));
        let row_block_labels = take("row_block_labels")
            .map(|v| {
                v.parse::<usize>()
                    .ok()
                    .filter(|n| *n > 0)
                    .ok_or_else(|| Error::Argument(format!("row_block_labels must be a positive integer, got {v:?}")))
            })
            .transpose()?;
        let outliers = take("outlier_labels").map(|v| list(&v));
        let inliers = take("inlier_labels").map(|v| list(&v));
        let least = take("least_frequent").map_or(Ok(false), |v| parse_bool("least_frequent", &v))?;
        let invert_labels = take("invert_labels").map_or(Ok(false), |v| parse_bool("invert_labels", &v))?;

        let label_rule = match (outliers, inliers, least) {
            (Some(o), Some(i), false) => LabelRule::Explicit { inliers: i, outliers: o },
            (Some(o), None, false) => LabelRule::Outliers(o),
            (None, Some(i), false) => LabelRule::Inliers(i),
            (None, None, true) => LabelRule::LeastFrequent,
            (None, None, false) => LabelRule::Numeric,
            _ => {
                return Err(Error::Argument(
                    "least_frequent cannot be combined with explicit label lists".into(),
                ))
            }
        };
        if label_column.is_some() && row_block_labels.is_some() {
            return Err(Error::Argument("give either label_column or row_block_labels, not both".into()));
        }
        if let Some(unknown) = kv.keys().next() {
            return Err(Error::Argument(format!("unknown recipe key {unknown:?}")));
        }
        Ok(Self {
            name,
            sources,
            join,
            delimiter,
            header,
            missing,
            drop_missing_rows,
            drop_columns,
            label_column,
            row_block_labels,
            label_rule,
            invert_labels,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Reads and joins the source files under `data_dir` and derives labels.
    /// Features are returned unscaled.
    pub fn apply(&self, data_dir: impl AsRef<Path>) -> Result<EmbeddingBatch> {
        let dir = data_dir.as_ref();
        let mut table: Option<RawTable> = None;
        for src in &self.sources {
            let path = dir.join(src);
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let t = read_table(file, &path.display().to_string(), self.delimiter, self.header)?;
            table = Some(match table {
                None => t,
                Some(mut acc) => {
                    match self.join {
                        JoinMode::Rows => acc.concat_rows(t)?,
                        JoinMode::Columns => acc.concat_columns(t)?,
                    }
                    acc
                }
            });
        }
        let mut table = table.expect("recipe has at least one source");

        let mut label_column = self.label_column.clone();
        if let Some(block) = self.row_block_labels {
            for (i, r) in table.rows.iter_mut().enumerate() {
                r.push((i / block).to_string());
            }
            if let Some(h) = table.header.as_mut() {
                h.push("block_label".into());
            }
            label_column = Some(ColumnRef::Index(table.width() - 1));
        }

        // label columns are addressed before any drops shift indices
        if let Some(ColumnRef::Index(li)) = label_column {
            let shift = self
                .drop_columns
                .iter()
                .map(|c| table.resolve(c))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|&d| d < li)
                .count();
            if self.drop_columns.iter().any(|c| table.resolve(c).ok() == Some(li)) {
                return Err(Error::Argument("the label column cannot also be dropped".into()));
            }
            label_column = Some(ColumnRef::Index(li - shift));
        }

        let opts = CsvOptions {
            delimiter: self.delimiter,
            has_header: self.header,
            label_column,
            label_rule: self.label_rule.clone(),
            missing_token: self.missing.clone(),
            drop_missing_rows: self.drop_missing_rows,
            drop_columns: self.drop_columns.clone(),
        };
        let mut batch = table.into_batch(&opts)?;
        if self.invert_labels {
            if let Some(l) = batch.labels.as_mut() {
                l.iter_mut().for_each(|v| *v = !*v);
            }
        }
        Ok(batch)
    }
}
