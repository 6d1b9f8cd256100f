//! Rank AUROC, Welch's t-test and the special functions behind its p-value.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// p-values below this are reported as exactly zero with an underflow flag.
pub const P_UNDERFLOW: f64 = 1e-300;

/// Mann-Whitney U / (n₊ n₋) with mid-ranks for ties; `true` labels are the
/// positive class and higher scores rank as more positive.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auroc labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc score is NaN".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Argument("auroc needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok((u / (p * q)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Positive when the mean of the second sample exceeds the first.
    pub t: f64,
    pub dof: f64,
    /// Two-sided.
    pub p: f64,
    pub p_underflow: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test of `mean(b) − mean(a)`.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument(format!(
            "welch t-test needs at least two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test sample contains NaN or infinite values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::DegenerateVariance(format!(
            "both samples are constant (means {ma} and {mb}); compare them for exact equality instead"
        )));
    }
    let t = (mb - ma) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let p = student_t_two_sided(t, dof);
    Ok(if p < P_UNDERFLOW {
        TTest { t, dof, p: 0.0, p_underflow: true }
    } else {
        TTest { t, dof, p, p_underflow: false }
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = dof / (dof + t * t);
    reg_inc_beta(dof / 2.0, 0.5, x).clamp(0.0, 1.0)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularised incomplete beta `I_x(a, b)` for `a, b > 0`, `x ∈ [0, 1]`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    // the continued fraction converges fast only below the mean
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, evaluated with modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl GroupSummary {
    pub fn of(x: &[f64]) -> Self {
        let (mean, var) = if x.len() > 1 { mean_var(x) } else { (x.iter().sum::<f64>() / x.len().max(1) as f64, 0.0) };
        Self {
            n: x.len(),
            mean,
            sd: var.sqrt(),
        }
    }
}

/// Separation statistics between a reference (negative) and a candidate
/// (positive) score sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub t_statistic: f64,
    pub dof: f64,
    pub p_value: f64,
    pub p_underflow: bool,
    pub negative: GroupSummary,
    pub positive: GroupSummary,
}

impl MetricsReport {
    pub fn from_groups(negative: &[f64], positive: &[f64]) -> Result<Self> {
        let scores: Vec<f64> = negative.iter().chain(positive).copied().collect();
        let labels: Vec<bool> = std::iter::repeat_n(false, negative.len())
            .chain(std::iter::repeat_n(true, positive.len()))
            .collect();
        let auroc = auroc(&scores, &labels)?;
        let tt = welch_ttest(negative, positive)?;
        Ok(Self {
            auroc,
            t_statistic: tt.t,
            dof: tt.dof,
            p_value: tt.p,
            p_underflow: tt.p_underflow,
            negative: GroupSummary::of(negative),
            positive: GroupSummary::of(positive),
        })
    }

    pub fn from_labels(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim("metrics labels", scores.len(), labels.len()));
        }
        let (pos, neg): (Vec<(f64, bool)>, Vec<(f64, bool)>) = scores.iter().copied().zip(labels.iter().copied()).partition(|(_, l)| *l);
        let strip = |v: Vec<(f64, bool)>| v.into_iter().map(|(s, _)| s).collect::<Vec<_>>();
        Self::from_groups(&strip(neg), &strip(pos))
    }

    /// `key: value` lines followed by a single `record: {json}` line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}: {v}").expect("writing to String");
        kv("auroc", format!("{:.6}", self.auroc));
        kv("t_statistic", format!("{:.6}", self.t_statistic));
        kv("dof", format!("{:.3}", self.dof));
        kv("p_value", format!("{:e}", self.p_value));
        kv("p_underflow", self.p_underflow.to_string());
        kv("n_negative", self.negative.n.to_string());
        kv("mean_negative", format!("{:.6e}", self.negative.mean));
        kv("sd_negative", format!("{:.6e}", self.negative.sd));
        kv("n_positive", self.positive.n.to_string());
        kv("mean_positive", format!("{:.6e}", self.positive.mean));
        kv("sd_positive", format!("{:.6e}", self.positive.sd));
        let record = serde_json::to_string(self).expect("report serialises");
        writeln!(s, "record: {record}").expect("writing to String");
        s
    }
}
