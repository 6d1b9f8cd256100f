//! Oddity scores from the norm of the predicted covariance diagonal.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingBatch;
use crate::dum::VarianceNet;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Rows scored per forward pass.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    L2,
    L1,
    Max,
}

impl NormKind {
    pub fn apply(self, v: &[f64]) -> f64 {
        match self {
            NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
            NormKind::Max => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(NormKind::L2),
            "l1" => Ok(NormKind::L1),
            "max" | "linf" => Ok(NormKind::Max),
            _ => Err(Error::Argument(format!("unknown norm {s:?}; expected l2, l1 or max"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDataset {
    pub scores: Vec<f64>,
    pub labels: Option<Vec<bool>>,
}

/// Norm of the variance vector for every row of `x`.
pub fn score_matrix(net: &VarianceNet, x: &Matrix, norm: NormKind) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(x.rows());
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(CHUNK) {
        let part = x.select_rows(chunk);
        let var = net.forward(&part)?.variance();
        scores.extend(var.iter_rows().map(|r| norm.apply(r)));
    }
    Ok(scores)
}

pub fn score(net: &VarianceNet, data: &EmbeddingBatch, norm: NormKind) -> Result<ScoredDataset> {
    Ok(ScoredDataset {
        scores: score_matrix(net, &data.features, norm)?,
        labels: data.labels.clone(),
    })
}

impl ScoredDataset {
    /// CSV with columns `index,score` and `label` (0/1) when labels exist.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("<scores>", e);
        let header = if self.labels.is_some() { "index,score,label" } else { "index,score" };
        writeln!(w, "{header}").map_err(io)?;
        for (i, s) in self.scores.iter().enumerate() {
            match &self.labels {
                Some(l) => writeln!(w, "{i},{s},{}", u8::from(l[i])),
                None => writeln!(w, "{i},{s}"),
            }
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a file produced by [`ScoredDataset::write_csv`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |c: &str| cols.iter().position(|h| *h == c);
        let si = find("score").ok_or_else(|| Error::Data(format!("{name}: no `score` column")))?;
        let li = find("label");
        let mut scores = Vec::new();
        let mut labels = li.map(|_| Vec::new());
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |column: usize, message: String| Error::Parse {
                source_name: name.clone(),
                row: row + 2,
                column: column + 1,
                message,
            };
            let field = |c: usize| fields.get(c).copied().ok_or_else(|| bad(c, "missing field".into()));
            let s = field(si)?;
            scores.push(s.parse::<f64>().map_err(|_| bad(si, format!("not a number: {s:?}")))?);
            if let (Some(li), Some(l)) = (li, labels.as_mut()) {
                l.push(match field(li)? {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    other => return Err(bad(li, format!("label must be 0 or 1, got {other:?}"))),
                });
            }
        }
        Ok(Self { scores, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norms() {
        let v = [3.0, -4.0];
        assert_eq!(NormKind::L2.apply(&v), 5.0);
        assert_eq!(NormKind::L1.apply(&v), 7.0);
        assert_eq!(NormKind::Max.apply(&v), 4.0);
        assert_eq!("linf".parse::<NormKind>().unwrap(), NormKind::Max);
        assert!("l3".parse::<NormKind>().is_err());
    }

    #[test]
    fn fresh_net_scores_sqrt_d() {
        let net = VarianceNet::new(4, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Matrix::from_fn(2500, 4, |i, j| (i * j) as f64 * 0.01);
        let s = score_matrix(&net, &x, NormKind::L2).unwrap();
        assert_eq!(s.len(), 2500);
        assert!(s.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let wrong = Matrix::zeros(3, 5);
        assert!(matches!(score_matrix(&net, &wrong, NormKind::L2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let s = ScoredDataset {
            scores: vec![0.1, 2.5e-7, 3.0],
            labels: Some(vec![false, true, false]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        s.save(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("index,score,label\n0,0.1,0\n"));
        assert_eq!(ScoredDataset::load(&p).unwrap(), s);
    }
}
