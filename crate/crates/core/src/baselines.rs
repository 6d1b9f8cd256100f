//! Classical distance and isolation detectors scored on the same inputs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum BaselineConfig {
    Knn { k: usize },
    Lesinn { s: usize, e: usize, seed: u64 },
    Iforest { t: usize, psi: Option<usize>, seed: u64 },
}

impl BaselineConfig {
    pub fn knn() -> Self {
        BaselineConfig::Knn { k: 5 }
    }

    pub fn lesinn(seed: u64) -> Self {
        BaselineConfig::Lesinn { s: 8, e: 50, seed }
    }

    /// `psi = None` resolves to `min(256, n)`.
    pub fn iforest(seed: u64) -> Self {
        BaselineConfig::Iforest { t: 100, psi: None, seed }
    }

    pub fn score(&self, data: &Matrix) -> Result<Vec<f64>> {
        match *self {
            BaselineConfig::Knn { k } => knn_score(data, k),
            BaselineConfig::Lesinn { s, e, seed } => lesinn_score(data, s, e, seed),
            BaselineConfig::Iforest { t, psi, seed } => iforest_score(data, t, psi.unwrap_or(256.min(data.rows())), seed),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(data: &Matrix) -> Result<()> {
    if data.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("baseline input contains NaN or infinite values".into()))
    }
}

/// Euclidean distance to the `k`-th nearest other row.
pub fn knn_score(data: &Matrix, k: usize) -> Result<Vec<f64>> {
    let n = data.rows();
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::Argument(format!("knn needs more than k = {k} rows, got {n}")));
    }
    check_finite(data)?;
    let mut dist = vec![0.0; n - 1];
    Ok((0..n)
        .map(|i| {
            let xi = data.row(i);
            let mut w = 0;
            for j in (0..n).filter(|&j| j != i) {
                dist[w] = sq_dist(xi, data.row(j));
                w += 1;
            }
            let (_, kth, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect())
}

/// Mean over `e` random subsamples of size `s` of the distance to the
/// nearest subsample member. Member `i` draws a random ordering prefix of
/// length `min(s + 1, n)`; each point uses the first `s` entries that are not
/// itself, so a point is never its own neighbour.
pub fn lesinn_score(data: &Matrix, s: usize, e: usize, seed: u64) -> Result<Vec<f64>> {
    let n = data.rows();
    if s == 0 || e == 0 {
        return Err(Error::Argument("lesinn needs s >= 1 and e >= 1".into()));
    }
    if n <= s {
        return Err(Error::Argument(format!("lesinn needs more than s = {s} rows, got {n}")));
    }
    check_finite(data)?;
    let members: Vec<Vec<usize>> = (0..e)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample(&mut rng, n, (s + 1).min(n)).into_vec()
        })
        .collect();
    Ok((0..n)
        .map(|x| {
            let xi = data.row(x);
            let total: f64 = members
                .iter()
                .map(|m| {
                    m.iter()
                        .filter(|&&j| j != x)
                        .take(s)
                        .map(|&j| sq_dist(xi, data.row(j)))
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .sum();
            total / e as f64
        })
        .collect())
}

/// Average unsuccessful-search path length in a binary search tree of `n`
/// nodes.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = (n - 1) as f64;
            2.0 * (m.ln() + 0.577_215_664_901_532_9) - 2.0 * m / n as f64
        }
    }
}

enum Node {
    Leaf { size: usize },
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

fn build(data: &Matrix, idx: &mut [usize], depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> Node {
    if depth >= limit || idx.len() <= 1 {
        return Node::Leaf { size: idx.len() };
    }
    let ranges: Vec<(usize, f64, f64)> = (0..data.cols())
        .filter_map(|f| {
            let (lo, hi) = idx
                .iter()
                .map(|&i| data.get(i, f))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            (hi > lo).then_some((f, lo, hi))
        })
        .collect();
    if ranges.is_empty() {
        return Node::Leaf { size: idx.len() };
    }
    let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
    let mut threshold = rng.random_range(lo..hi);
    if threshold <= lo {
        threshold = lo + (hi - lo) * 0.5;
    }
    let mut split = 0;
    for i in 0..idx.len() {
        if data.get(idx[i], feature) < threshold {
            idx.swap(i, split);
            split += 1;
        }
    }
    let (l, r) = idx.split_at_mut(split);
    Node::Split {
        feature,
        threshold,
        left: Box::new(build(data, l, depth + 1, limit, rng)),
        right: Box::new(build(data, r, depth + 1, limit, rng)),
    }
}

fn path_length(node: &Node, x: &[f64], depth: usize) -> f64 {
    match node {
        Node::Leaf { size } => depth as f64 + c_factor(*size),
        Node::Split { feature, threshold, left, right } => {
            let next = if x[*feature] < *threshold { left } else { right };
            path_length(next, x, depth + 1)
        }
    }
}

/// Isolation forest: `t` trees on subsamples of size `psi`, height limit
/// `ceil(log2 psi)`, score `2^(-E[h(x)] / c(psi))`. Only features that vary
/// within a node are eligible for splits.
pub fn iforest_score(data: &Matrix, t: usize, psi: usize, seed: u64) -> Result<Vec<f64>> {
    let n = data.rows();
    if n < 2 {
        return Err(Error::Argument(format!("isolation forest needs at least 2 rows, got {n}")));
    }
    if t == 0 || psi < 2 || psi > n {
        return Err(Error::Argument(format!("isolation forest needs t >= 1 and 2 <= psi <= n, got t = {t}, psi = {psi}")));
    }
    check_finite(data)?;
    let limit = (psi as f64).log2().ceil() as usize;
    let trees: Vec<Node> = (0..t)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut idx = sample(&mut rng, n, psi).into_vec();
            build(data, &mut idx, 0, limit, &mut rng)
        })
        .collect();
    let norm = c_factor(psi);
    Ok((0..n)
        .map(|i| {
            let x = data.row(i);
            let mean = trees.iter().map(|tr| path_length(tr, x, 0)).sum::<f64>() / t as f64;
            2f64.powf(-mean / norm)
        })
        .collect())
}
