//! Balanced accuracy, silhouette, paired t-test and feature dumps.

mod stats;

pub use stats::{ln_gamma, regularized_incomplete_beta, student_t_cdf};

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {0} has no samples in the scored labels")]
    EmptyClass(usize),
    #[error("empty class subset")]
    EmptySubset,
    #[error("{0} predictions for {1} labels")]
    Length(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("feature dimension {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("malformed feature dump line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Mean recall over `subset`. A prediction outside the subset still counts
/// against the true class.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], subset: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Length(predictions.len(), labels.len()));
    }
    if subset.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    let mut total = 0.0;
    for &c in subset {
        let (mut hit, mut n) = (0usize, 0usize);
        for (&p, &y) in predictions.iter().zip(labels) {
            if y == c {
                n += 1;
                hit += (p == c) as usize;
            }
        }
        if n == 0 {
            return Err(EvalError::EmptyClass(c));
        }
        total += hit as f64 / n as f64;
    }
    Ok(total / subset.len() as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-point silhouette values; points in singleton classes score 0.
pub fn silhouette_samples(features: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>, EvalError> {
    let n = features.len();
    if labels.len() != n {
        return Err(EvalError::Length(n, labels.len()));
    }
    if n < 2 {
        return Err(EvalError::TooFew { needed: 2, got: n });
    }
    let n_cls = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_cls];
    for &y in labels {
        sizes[y] += 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut sums = vec![0.0; n_cls];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += euclidean(&features[i], &features[j]);
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            out.push(0.0);
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..n_cls)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            out.push(0.0);
            continue;
        }
        let m = a.max(b);
        out.push(if m > 0.0 { (b - a) / m } else { 0.0 });
    }
    Ok(out)
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(features: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    let s = silhouette_samples(features, labels)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub dof: usize,
    pub reject: bool,
    /// Differences had zero variance; `t` is ±∞ or 0.
    pub zero_variance: bool,
}

pub const ALPHA: f64 = 0.05;

/// Paired two-tailed Student t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    let k = a.len();
    if k < 2 {
        return Err(EvalError::TooFew { needed: 2, got: k });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let dof = k - 1;
    // Differences equal up to rounding count as zero variance.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var <= (1e-12 * scale).powi(2) {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        };
        return Ok(TTest {
            t,
            p_value: p,
            dof,
            reject: p < ALPHA,
            zero_variance: true,
        });
    }
    let t = mean / (var.sqrt() / (k as f64).sqrt());
    let p = (2.0 * student_t_cdf(-t.abs(), dof as f64)).min(1.0);
    Ok(TTest {
        t,
        p_value: p,
        dof,
        reject: p < ALPHA,
        zero_variance: false,
    })
}

/// One dump row: clip id, label name and the penultimate-layer feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub clip_id: String,
    pub label: String,
    pub features: Vec<f32>,
}

/// `clip_id,label,f_0,...` CSV with 9 significant digits (exact for f32).
pub fn write_features_csv(path: &Path, rows: &[FeatureRow]) -> Result<(), EvalError> {
    let d = rows.first().map_or(0, |r| r.features.len());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..d).map(|i| format!("f_{i}")).collect();
    writeln!(f, "clip_id,label,{}", header.join(","))?;
    for r in rows {
        if r.features.len() != d {
            return Err(EvalError::Dimension {
                expected: d,
                found: r.features.len(),
            });
        }
        write!(f, "{},{}", r.clip_id, r.label)?;
        for v in &r.features {
            write!(f, ",{v:.8e}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>, EvalError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    let mut d = 0;
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let mut cols = line.split(',');
        if i == 0 {
            d = cols.count().saturating_sub(2);
            continue;
        }
        let malformed = |reason: &str| EvalError::Malformed {
            line: i + 1,
            reason: reason.into(),
        };
        let clip_id = cols.next().ok_or_else(|| malformed("missing clip id"))?.to_string();
        let label = cols.next().ok_or_else(|| malformed("missing label"))?.to_string();
        let features = cols
            .map(|c| c.parse::<f32>().map_err(|e| malformed(&e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if features.len() != d {
            return Err(EvalError::Dimension {
                expected: d,
                found: features.len(),
            });
        }
        rows.push(FeatureRow { clip_id, label, features });
    }
    Ok(rows)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
