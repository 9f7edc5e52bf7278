//! Clustering and embedding-quality metrics.
//!
//! Neighborhoods and closeness ranks come from [`crate::geometry`], so all
//! rank-based metrics share its smaller-index tie rule. `N^{k}_i` denotes the
//! k nearest neighbors of point i, equivalently `{j : r(i, j) <= k}`.

use serde::{Deserialize, Serialize};

use crate::error::{DcrlError, Result};
use crate::geometry::{self, RankMatrix};
use crate::tensor::Matrix;

pub const DEFAULT_K1: usize = 1;
pub const DEFAULT_K2: usize = 10;

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(DcrlError::dim("labels", format!("{} true vs {} predicted labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(DcrlError::Metric("empty label vectors".into()));
    }
    Ok(())
}

/// Contingency counts `table[true][pred]`.
pub fn contingency(true_labels: &[usize], pred_labels: &[usize]) -> Vec<Vec<usize>> {
    let rows = true_labels.iter().max().map_or(0, |m| m + 1);
    let cols = pred_labels.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; cols]; rows];
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        table[t][p] += 1;
    }
    table
}

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// method with potentials). Returns `assignment[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[r - 1][col - 1] - u[r] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        if owner[col] > 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    assignment
}

/// Best one-to-one cluster→class matching accuracy.
pub fn acc(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    check_lengths(true_labels, pred_labels)?;
    let table = contingency(true_labels, pred_labels);
    let size = table.len().max(table.first().map_or(0, Vec::len));
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|pred| {
            (0..size)
                .map(|t| -(table.get(t).and_then(|r| r.get(pred)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let mapping = hungarian(&cost);
    let matched: f64 = mapping.iter().enumerate().map(|(pred, &t)| -cost[pred][t]).sum();
    Ok(matched / true_labels.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(l; s) / max(H(l), H(s))` with natural logarithms; 0 when both
/// labelings are constant.
pub fn nmi(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    check_lengths(true_labels, pred_labels)?;
    let n = true_labels.len() as f64;
    let table = contingency(true_labels, pred_labels);
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols = table.first().map_or(0, Vec::len);
    let col_sums: Vec<usize> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let h_true = entropy(row_sums.iter().copied(), n);
    let h_pred = entropy(col_sums.iter().copied(), n);
    let denom = h_true.max(h_pred);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (t, row) in table.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            mi += pij * (pij * n * n / (row_sums[t] as f64 * col_sums[p] as f64)).ln();
        }
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Distances, ranks and neighbor prefixes of both spaces.
struct PairedSpaces {
    n: usize,
    rank_x: RankMatrix,
    rank_z: RankMatrix,
    dist_x: Matrix,
    dist_z: Matrix,
}

impl PairedSpaces {
    fn new(x: &Matrix, z: &Matrix) -> Result<Self> {
        if x.rows() != z.rows() {
            return Err(DcrlError::dim("metrics", format!("{} input rows vs {} latent rows", x.rows(), z.rows())));
        }
        let dist_x = geometry::pairwise_dist(x);
        let dist_z = geometry::pairwise_dist(z);
        Ok(PairedSpaces {
            n: x.rows(),
            rank_x: geometry::ranks(&dist_x),
            rank_z: geometry::ranks(&dist_z),
            dist_x,
            dist_z,
        })
    }

    /// Neighbors of `i` with rank at most `k` in the given table, in rank
    /// order.
    fn neighbors(ranks: &RankMatrix, i: usize, k: usize) -> Vec<usize> {
        let mut list: Vec<(usize, usize)> = ranks
            .row(i)
            .iter()
            .enumerate()
            .filter(|&(j, &r)| j != i && (r as usize) <= k)
            .map(|(j, &r)| (r as usize, j))
            .collect();
        list.sort_unstable();
        list.into_iter().map(|(_, j)| j).collect()
    }
}

fn check_bounds(k1: usize, k2: usize, n: usize) -> Result<()> {
    if k1 == 0 || k1 > k2 || k2 + 1 > n {
        return Err(DcrlError::Argument(format!(
            "neighborhood bounds must satisfy 1 <= k1 <= k2 <= N-1, got k1={k1}, k2={k2}, N={n}"
        )));
    }
    Ok(())
}

fn check_trust_bounds(k1: usize, k2: usize, n: usize) -> Result<()> {
    check_bounds(k1, k2, n)?;
    if 2 * n <= 3 * k2 + 1 {
        return Err(DcrlError::Argument(format!("k2={k2} too large for N={n}: need 2N - 3k - 1 > 0")));
    }
    Ok(())
}

fn rre_from(s: &PairedSpaces, k1: usize, k2: usize) -> f64 {
    let n = s.n;
    let nf = n as f64;
    let mut total = 0.0;
    for k in k1..=k2 {
        let h: f64 = nf * (1..=k).map(|l| (nf - 2.0 * l as f64).abs() / l as f64).sum::<f64>();
        let mut x_to_z = 0.0;
        let mut z_to_x = 0.0;
        for i in 0..n {
            for j in PairedSpaces::neighbors(&s.rank_z, i, k) {
                let (rx, rz) = (s.rank_x.get(i, j) as f64, s.rank_z.get(i, j) as f64);
                x_to_z += (rx - rz).abs() / rz;
            }
            for j in PairedSpaces::neighbors(&s.rank_x, i, k) {
                let (rx, rz) = (s.rank_x.get(i, j) as f64, s.rank_z.get(i, j) as f64);
                z_to_x += (rx - rz).abs() / rx;
            }
        }
        if h > 0.0 {
            total += (x_to_z + z_to_x) / h;
        }
    }
    total / (k2 - k1 + 1) as f64
}

/// Mean relative rank change between input and latent neighborhoods over
/// `k ∈ [k1, k2]`.
pub fn rre(x: &Matrix, z: &Matrix, k1: usize, k2: usize) -> Result<f64> {
    check_bounds(k1, k2, x.rows())?;
    Ok(rre_from(&PairedSpaces::new(x, z)?, k1, k2))
}

/// Shared body of trustworthiness and continuity: penalizes members of
/// `primary`'s k-neighborhood missing from `other`'s, by their rank in
/// `other` beyond k.
fn neighborhood_preservation(primary: &RankMatrix, other: &RankMatrix, n: usize, k1: usize, k2: usize) -> f64 {
    let nf = n as f64;
    let mut total = 0.0;
    for k in k1..=k2 {
        let mut penalty = 0.0;
        for i in 0..n {
            for j in PairedSpaces::neighbors(primary, i, k) {
                let r = other.get(i, j);
                if r > k {
                    penalty += (r - k) as f64;
                }
            }
        }
        let kf = k as f64;
        total += 1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty;
    }
    total / (k2 - k1 + 1) as f64
}

/// Trustworthiness: latent neighbors that are not input neighbors are
/// penalized by `r_X(i, j) − k`.
pub fn trust(x: &Matrix, z: &Matrix, k1: usize, k2: usize) -> Result<f64> {
    check_trust_bounds(k1, k2, x.rows())?;
    let s = PairedSpaces::new(x, z)?;
    Ok(neighborhood_preservation(&s.rank_z, &s.rank_x, s.n, k1, k2))
}

/// Continuity: input neighbors that are not latent neighbors are penalized
/// by `r_Z(i, j) − k`.
pub fn cont(x: &Matrix, z: &Matrix, k1: usize, k2: usize) -> Result<f64> {
    check_trust_bounds(k1, k2, x.rows())?;
    let s = PairedSpaces::new(x, z)?;
    Ok(neighborhood_preservation(&s.rank_x, &s.rank_z, s.n, k1, k2))
}

fn d_rmse_from(s: &PairedSpaces) -> f64 {
    let n = s.n as f64;
    let sq: f64 = s
        .dist_x
        .data()
        .iter()
        .zip(s.dist_z.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (sq / (n * n)).sqrt()
}

/// `sqrt((1/N²) Σ_ij (d_X(i,j) − d_Z(i,j))²)`.
pub fn d_rmse(x: &Matrix, z: &Matrix) -> Result<f64> {
    Ok(d_rmse_from(&PairedSpaces::new(x, z)?))
}

fn lgd_from(s: &PairedSpaces, k1: usize, k2: usize) -> f64 {
    let span = (k2 - k1 + 1) as f64;
    let nf = s.n as f64;
    let mut total = 0.0;
    for k in k1..=k2 {
        let mut sq = 0.0;
        for i in 0..s.n {
            for j in PairedSpaces::neighbors(&s.rank_x, i, k) {
                let d = s.dist_x.get(i, j) - s.dist_z.get(i, j);
                sq += d * d;
            }
        }
        total += (sq / (span * span * nf * k as f64)).sqrt();
    }
    total
}

/// Local geometric distortion over input-space neighborhoods:
/// `Σ_k sqrt(Σ_i Σ_{j∈N^{k,X}_i} (d_X − d_Z)² / ((k2−k1+1)² · N · k))`.
pub fn lgd(x: &Matrix, z: &Matrix, k1: usize, k2: usize) -> Result<f64> {
    check_bounds(k1, k2, x.rows())?;
    Ok(lgd_from(&PairedSpaces::new(x, z)?, k1, k2))
}

/// Fraction of ordered cluster-center pairs whose closeness rank agrees in
/// both spaces; diagonal pairs count as agreeing.
pub fn cra(x: &Matrix, z: &Matrix, assignments: &[usize], clusters: usize) -> Result<f64> {
    if clusters < 2 {
        return Err(DcrlError::Argument(format!("CRA needs at least 2 clusters, got {clusters}")));
    }
    if x.rows() != z.rows() {
        return Err(DcrlError::dim("cra", format!("{} vs {} rows", x.rows(), z.rows())));
    }
    let vx = geometry::manifold_centers(x, assignments, clusters)?;
    let vz = geometry::manifold_centers(z, assignments, clusters)?;
    if let Some(&j) = vx.empty_clusters().first() {
        return Err(DcrlError::Metric(format!("cluster {j} has no members; its center is undefined")));
    }
    let rx = geometry::ranks(&geometry::pairwise_dist(&vx.centers));
    let rz = geometry::ranks(&geometry::pairwise_dist(&vz.centers));
    let mut agree = 0usize;
    for i in 0..clusters {
        for j in 0..clusters {
            if rx.get(i, j) == rz.get(i, j) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (clusters * clusters) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub rre: f64,
    pub trust: f64,
    pub cont: f64,
    pub d_rmse: f64,
    pub lgd: f64,
    pub cra: f64,
    pub k1: usize,
    pub k2: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "acc,nmi,rre,trust,cont,d_rmse,lgd,cra,k1,k2";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.acc, self.nmi, self.rre, self.trust, self.cont, self.d_rmse, self.lgd, self.cra, self.k1, self.k2
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.to_csv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Largest usable `(k1, k2)` not exceeding the requested ones: `k2` is
/// clamped below `N/2` so trustworthiness and continuity stay normalized.
pub fn clamp_bounds(k1: usize, k2: usize, n: usize) -> Result<(usize, usize)> {
    if n < 3 {
        return Err(DcrlError::Argument(format!("rank metrics need N >= 3, got {n}")));
    }
    let limit = ((n - 1) / 2).max(1);
    let k2 = k2.min(limit);
    let k1 = k1.clamp(1, k2);
    Ok((k1, k2))
}

/// All eight metrics. CRA is computed over the ground-truth classes.
pub fn evaluate_all(x: &Matrix, z: &Matrix, true_labels: &[usize], pred_labels: &[usize], k1: usize, k2: usize) -> Result<MetricsReport> {
    check_lengths(true_labels, pred_labels)?;
    if true_labels.len() != x.rows() {
        return Err(DcrlError::dim("evaluate_all", format!("{} labels for {} rows", true_labels.len(), x.rows())));
    }
    let n = x.rows();
    check_bounds(k1, k2, n)?;
    check_trust_bounds(k1, k2, n)?;
    let s = PairedSpaces::new(x, z)?;
    let classes = true_labels.iter().max().map_or(0, |m| m + 1);
    Ok(MetricsReport {
        acc: acc(true_labels, pred_labels)?,
        nmi: nmi(true_labels, pred_labels)?,
        rre: rre_from(&s, k1, k2),
        trust: neighborhood_preservation(&s.rank_z, &s.rank_x, n, k1, k2),
        cont: neighborhood_preservation(&s.rank_x, &s.rank_z, n, k1, k2),
        d_rmse: d_rmse_from(&s),
        lgd: lgd_from(&s, k1, k2),
        cra: cra(x, z, true_labels, classes)?,
        k1,
        k2,
    })
}
