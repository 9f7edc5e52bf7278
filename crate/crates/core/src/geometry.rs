//! Pairwise distances, kNN graphs, closeness ranks and per-cluster means.
//!
//! Every ordering in this module breaks distance ties by the smaller index,
//! which keeps kNN lists, rank tables and the metrics built on them
//! mutually consistent.

use std::cmp::Ordering;

use crate::error::{DcrlError, Result};
use crate::tensor::{self, Matrix};

/// Symmetric N×N Euclidean distance matrix with an exact zero diagonal.
///
/// Uses the `‖a‖² + ‖b‖² − 2a·b` expansion, clamped at 0 before the square
/// root.
pub fn pairwise_dist(x: &Matrix) -> Matrix {
    let n = x.rows();
    let norms: Vec<f64> = (0..n).map(|i| tensor::dot(x.row(i), x.row(i))).collect();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq = (norms[i] + norms[j] - 2.0 * tensor::dot(x.row(i), x.row(j))).max(0.0);
            let v = sq.sqrt();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

fn by_distance_then_index(row: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b))
}

/// Other points of row `i` in ascending (distance, index) order.
fn sorted_others(row: &[f64], i: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    order.sort_by(by_distance_then_index(row));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i]
    }

    /// Directed edges `(i, j)` for every `j` in the list of `i`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |&j| (i, j)))
    }
}

/// k nearest neighbors per row of a distance matrix.
pub fn knn(d: &Matrix, k: usize) -> Result<NeighborGraph> {
    let n = d.rows();
    if d.cols() != n {
        return Err(DcrlError::dim("knn", format!("distance matrix {}x{}", n, d.cols())));
    }
    check_k(k, n)?;
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    for i in 0..n {
        let row = d.row(i);
        let list = select_k(row, i, k);
        distances.push(list.iter().map(|&j| row[j]).collect());
        indices.push(list);
    }
    Ok(NeighborGraph { k, indices, distances })
}

/// Same graph as `knn(&pairwise_dist(x), k)` but with O(N) working memory.
pub fn knn_points(x: &Matrix, k: usize) -> Result<NeighborGraph> {
    let n = x.rows();
    check_k(k, n)?;
    let norms: Vec<f64> = (0..n).map(|i| tensor::dot(x.row(i), x.row(i))).collect();
    let mut row = vec![0.0; n];
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    for i in 0..n {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if i == j {
                0.0
            } else {
                // Same operand order as pairwise_dist so both agree bitwise.
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                (norms[a] + norms[b] - 2.0 * tensor::dot(x.row(a), x.row(b))).max(0.0).sqrt()
            };
        }
        let list = select_k(&row, i, k);
        distances.push(list.iter().map(|&j| row[j]).collect());
        indices.push(list);
    }
    Ok(NeighborGraph { k, indices, distances })
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(DcrlError::Argument(format!("k must satisfy 1 <= k <= N-1, got k={k} with N={n}")));
    }
    Ok(())
}

fn select_k(row: &[f64], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    let cmp = by_distance_then_index(row);
    if k < others.len() {
        others.select_nth_unstable_by(k - 1, &cmp);
        others.truncate(k);
    }
    others.sort_by(cmp);
    others
}

/// Closeness ranks `r(i, j) ∈ 1..N−1` for `j ≠ i`; the diagonal holds 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RankMatrix {
    n: usize,
    ranks: Vec<u32>,
}

impl RankMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.ranks[i * self.n + j] as usize
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ranks[i * self.n..(i + 1) * self.n]
    }
}

pub fn ranks(d: &Matrix) -> RankMatrix {
    let n = d.rows();
    let mut ranks = vec![0u32; n * n];
    for i in 0..n {
        for (pos, j) in sorted_others(d.row(i), i).into_iter().enumerate() {
            ranks[i * n + j] = (pos + 1) as u32;
        }
    }
    RankMatrix { n, ranks }
}

/// Per-cluster means in one space; clusters without members are invalid and
/// their row is left at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldCenters {
    pub centers: Matrix,
    pub counts: Vec<usize>,
}

impl ManifoldCenters {
    pub fn is_valid(&self, j: usize) -> bool {
        self.counts[j] > 0
    }

    pub fn all_valid(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }

    pub fn num_clusters(&self) -> usize {
        self.counts.len()
    }

    pub fn empty_clusters(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&j| self.counts[j] == 0).collect()
    }
}

pub fn manifold_centers(x: &Matrix, assignments: &[usize], clusters: usize) -> Result<ManifoldCenters> {
    if assignments.len() != x.rows() {
        return Err(DcrlError::dim(
            "manifold_centers",
            format!("{} assignments for {} rows", assignments.len(), x.rows()),
        ));
    }
    let mut centers = Matrix::zeros(clusters, x.cols());
    let mut counts = vec![0usize; clusters];
    for (i, &s) in assignments.iter().enumerate() {
        if s >= clusters {
            return Err(DcrlError::Argument(format!("assignment {s} outside [0, {clusters})")));
        }
        counts[s] += 1;
        for (c, &v) in centers.row_mut(s).iter_mut().zip(x.row(i)) {
            *c += v;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            for c in centers.row_mut(j) {
                *c /= n as f64;
            }
        }
    }
    Ok(ManifoldCenters { centers, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dist_basics() {
        assert_eq!(pairwise_dist(&Matrix::from_rows(&[[1.0, 2.0]])), Matrix::zeros(1, 1));
        let d = pairwise_dist(&Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]));
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
    }

    #[test]
    fn dist_matches_loop_oracle() {
        let x = random(12, 4, 1);
        let d = pairwise_dist(&x);
        for i in 0..12 {
            for j in 0..12 {
                let mut s = 0.0;
                for c in 0..4 {
                    s += (x.get(i, c) - x.get(j, c)).powi(2);
                }
                assert!((d.get(i, j) - s.sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn knn_collinear_and_ties() {
        let d = pairwise_dist(&Matrix::from_rows(&[[0.0], [1.0], [3.0]]));
        let g = knn(&d, 1).unwrap();
        assert_eq!(g.neighbors(1), &[0]);
        // Point 0 is equidistant from 1 and 2.
        let d = pairwise_dist(&Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]));
        assert_eq!(knn(&d, 1).unwrap().neighbors(0), &[1]);
        // Square corners: 0's two nearest are tied at distance 1.
        let d = pairwise_dist(&Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]));
        assert_eq!(knn(&d, 2).unwrap().neighbors(0), &[1, 3]);
        assert!(knn(&d, 4).is_err());
        assert!(knn(&d, 0).is_err());
    }

    #[test]
    fn knn_matches_full_sort_and_point_variant() {
        let x = random(30, 3, 2);
        let d = pairwise_dist(&x);
        let g = knn(&d, 6).unwrap();
        for i in 0..30 {
            let mut all: Vec<(f64, usize)> = (0..30).filter(|&j| j != i).map(|j| (d.get(i, j), j)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all.iter().take(6).map(|p| p.1).collect();
            assert_eq!(g.neighbors(i), &expect[..]);
            assert!(g.distances[i].windows(2).all(|w| w[0] <= w[1]));
            assert!(!g.neighbors(i).contains(&i));
        }
        assert_eq!(knn_points(&x, 6).unwrap(), g);
    }

    #[test]
    fn ranks_basics() {
        let r = ranks(&pairwise_dist(&Matrix::from_rows(&[[0.0], [1.0]])));
        assert_eq!((r.get(0, 1), r.get(1, 0)), (1, 1));

        let x = random(15, 2, 3);
        let d = pairwise_dist(&x);
        let r = ranks(&d);
        for i in 0..15 {
            let mut row: Vec<u32> = (0..15).filter(|&j| j != i).map(|j| r.get(i, j) as u32).collect();
            row.sort_unstable();
            assert_eq!(row, (1..15).collect::<Vec<u32>>());
            // argsort oracle
            let mut order: Vec<usize> = (0..15).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| d.get(i, a).partial_cmp(&d.get(i, b)).unwrap());
            for (pos, &j) in order.iter().enumerate() {
                assert_eq!(r.get(i, j), pos + 1);
            }
        }
    }

    #[test]
    fn centers_cases() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [10.0, 10.0]]);
        let c = manifold_centers(&x, &[0, 0, 1], 2).unwrap();
        assert_eq!(c.centers, Matrix::from_rows(&[[1.0, 0.0], [10.0, 10.0]]));
        let c = manifold_centers(&x, &[2, 1, 0], 3).unwrap();
        assert_eq!(c.centers, Matrix::from_rows(&[[10.0, 10.0], [2.0, 0.0], [0.0, 0.0]]));
        let c = manifold_centers(&x, &[0, 0, 0], 2).unwrap();
        assert!(!c.is_valid(1));
        assert_eq!(c.empty_clusters(), vec![1]);
        assert!(manifold_centers(&x, &[0, 0, 5], 2).is_err());
    }

    #[test]
    fn centers_match_loop_oracle() {
        let x = random(40, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
        let c = manifold_centers(&x, &s, 4).unwrap();
        for j in 0..4 {
            let members: Vec<usize> = (0..40).filter(|&i| s[i] == j).collect();
            for col in 0..3 {
                let m = members.iter().map(|&i| x.get(i, col)).sum::<f64>() / members.len() as f64;
                assert!((c.centers.get(j, col) - m).abs() < 1e-12);
            }
        }
    }
}
