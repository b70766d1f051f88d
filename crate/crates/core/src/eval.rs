//! Rank metrics and the per-query evaluation report.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::ged::LabelSet;
use crate::head::DistanceMatrix;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("sequence lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("rank correlation needs at least two values".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("NaN in ranked sequence".into()));
    }
    Ok(())
}

/// Average ranks, 1-based; tied values share the mean of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of the fractional ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (ra, rb) = (fractional_ranks(a), fractional_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numerical("Spearman correlation of a constant sequence".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Counts inversions while merge-sorting `v`.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Tau-b with tie correction, in `O(n log n)`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as u64;
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let n0 = n * (n - 1) / 2;
    let ties_a = tied_pairs(pairs.iter().map(|p| p.0));
    let mut joint = 0u64;
    let mut run = 0u64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            joint += run * (run + 1) / 2;
            run = 0;
        }
    }
    joint += run * (run + 1) / 2;

    let mut bs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(bs.len());
    let swaps = merge_count(&mut bs, &mut buf);
    let ties_b = tied_pairs(bs.iter().copied());

    if ties_a == n0 || ties_b == n0 {
        return Err(Error::Numerical("Kendall correlation of a constant sequence".into()));
    }
    let s = n0 as i64 - ties_a as i64 - ties_b as i64 + joint as i64 - 2 * swaps as i64;
    let denom = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    Ok((s as f64 / denom).clamp(-1.0, 1.0))
}

/// Indices of the `k` smallest scores, ties broken by index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Overlap of the `k` nearest by prediction and by truth, divided by `k`.
pub fn precision_at_k(pred: &[f64], truth: &[f64], k: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "sequence lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if k == 0 || k > pred.len() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", pred.len())));
    }
    let mut p = top_k(pred, k);
    let t = top_k(truth, k);
    p.sort_unstable();
    let hits = t.iter().filter(|i| p.binary_search(i).is_ok()).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub rho: f64,
    pub tau: f64,
    pub precision_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub rho: f64,
    pub tau: f64,
    pub precision_at_k: f64,
    pub queries: Vec<QueryMetrics>,
    /// Queries whose true distances to every other graph are equal, so no
    /// ranking exists to compare against.
    pub skipped: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Ground-truth matrix over `ids`; every off-diagonal pair must be labelled.
pub fn truth_matrix(ids: &[String], labels: &LabelSet) -> Result<DistanceMatrix> {
    let m = ids.len();
    let mut values = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let v = labels
                .get(&ids[i], &ids[j])
                .ok_or_else(|| Error::InvalidData(format!("no label for ({}, {})", ids[i], ids[j])))?;
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    DistanceMatrix::new(ids.to_vec(), values)
}

/// Each query is ranked against every other graph in the matrix; metrics
/// are averaged over queries. `k` is lowered to the list length if needed.
pub fn evaluate(pred: &DistanceMatrix, truth: &DistanceMatrix, queries: &[String], k: usize) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no test queries to evaluate".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let truth = truth.aligned_to(pred.ids())?;
    let m = pred.len();
    let k_eff = k.min(m.saturating_sub(1));
    let mut report = EvalReport {
        k: k_eff,
        rho: 0.0,
        tau: 0.0,
        precision_at_k: 0.0,
        queries: Vec::new(),
        skipped: Vec::new(),
    };
    for id in queries {
        let q = pred
            .index_of(id)
            .ok_or_else(|| Error::InvalidData(format!("query {id} not in the distance matrix")))?;
        let others = (0..m).filter(|&j| j != q);
        let p: Vec<f64> = others.clone().map(|j| pred.get(q, j)).collect();
        let t: Vec<f64> = others.map(|j| truth.get(q, j)).collect();
        if t.windows(2).all(|w| w[0] == w[1]) {
            report.skipped.push(id.clone());
            continue;
        }
        report.queries.push(QueryMetrics {
            id: id.clone(),
            rho: spearman_rho(&p, &t)?,
            tau: kendall_tau(&p, &t)?,
            precision_at_k: precision_at_k(&p, &t, k_eff)?,
        });
    }
    let n = report.queries.len();
    if n == 0 {
        return Err(Error::InvalidData("every query has constant ground truth".into()));
    }
    report.rho = report.queries.iter().map(|q| q.rho).sum::<f64>() / n as f64;
    report.tau = report.queries.iter().map(|q| q.tau).sum::<f64>() / n as f64;
    report.precision_at_k = report.queries.iter().map(|q| q.precision_at_k).sum::<f64>() / n as f64;
    Ok(report)
}

/// `ids` ordered by increasing distance from `query`, query excluded.
pub fn nearest(d: &DistanceMatrix, query: &str, top: usize) -> Result<Vec<(String, f64)>> {
    let q = d
        .index_of(query)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown graph id {query}")))?;
    let mut others: Vec<usize> = (0..d.len()).filter(|&j| j != q).collect();
    others.sort_by(|&a, &b| match d.get(q, a).total_cmp(&d.get(q, b)) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    Ok(others
        .into_iter()
        .take(top)
        .map(|j| (d.ids()[j].clone(), d.get(q, j)))
        .collect())
}
