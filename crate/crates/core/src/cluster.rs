//! Clustering head: Student-t soft assignment, sharpened target
//! distribution, KL clustering loss and its center gradient, plus Lloyd's
//! k-means for center initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DcrlError, Result};
use crate::tensor::{self, Matrix};

/// Centers, soft assignments, targets and hard assignments for one snapshot
/// of the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub centers: Matrix,
    pub q: Matrix,
    pub p: Matrix,
    pub assignments: Vec<usize>,
}

impl ClusterState {
    /// Evaluates Q, P and argmax-P assignments of `z` against `centers`.
    pub fn from_centers(z: &Matrix, centers: Matrix) -> Result<Self> {
        let q = soft_assign(z, &centers)?;
        let p = target_distribution(&q);
        let assignments = argmax_rows(&p);
        Ok(ClusterState {
            centers,
            q,
            p,
            assignments,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }
}

/// `q_ij = (1 + ‖z_i − μ_j‖²)⁻¹ / Σ_j' (1 + ‖z_i − μ_j'‖²)⁻¹`.
pub fn soft_assign(z: &Matrix, centers: &Matrix) -> Result<Matrix> {
    if z.cols() != centers.cols() {
        return Err(DcrlError::dim(
            "soft_assign",
            format!("embedding has {} columns, centers have {}", z.cols(), centers.cols()),
        ));
    }
    let c = centers.rows();
    let mut q = Matrix::zeros(z.rows(), c);
    for i in 0..z.rows() {
        let row = q.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = 1.0 / (1.0 + tensor::sq_euclidean(z.row(i), centers.row(j)));
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(q)
}

/// `p_ij = (q_ij² / f_j) / Σ_j' (q_ij'² / f_j')` with `f_j = Σ_i q_ij`.
pub fn target_distribution(q: &Matrix) -> Matrix {
    let f = q.col_sums();
    let mut p = Matrix::zeros(q.rows(), q.cols());
    for i in 0..q.rows() {
        let row = p.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let qij = q.get(i, j);
            *slot = qij * qij / f.data()[j];
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    p
}

/// Row-wise argmax; ties go to the smallest column.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let mut best = 0;
            for (j, &v) in m.row(i).iter().enumerate() {
                if v > m.get(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `KL(P ‖ Q) = Σ_ij p_ij ln(p_ij / q_ij)`, with `0·ln(0/q) = 0`.
pub fn kl_cluster_loss(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(DcrlError::dim(
            "kl_cluster_loss",
            format!("P {:?} vs Q {:?}", p.shape(), q.shape()),
        ));
    }
    Ok(p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&pij, &qij)| if pij > 0.0 { pij * (pij / qij).ln() } else { 0.0 })
        .sum())
}

/// Gradient of `KL(P ‖ Q(z, μ))` with respect to the centers, P held fixed:
/// `∂L/∂μ_j = −2 Σ_i (1 + ‖z_i − μ_j‖²)⁻¹ (p_ij − q_ij)(z_i − μ_j)`.
pub fn grad_centers_cluster(z: &Matrix, centers: &Matrix, p: &Matrix, q: &Matrix) -> Result<Matrix> {
    let (n, c) = (z.rows(), centers.rows());
    if z.cols() != centers.cols() || p.shape() != (n, c) || q.shape() != (n, c) {
        return Err(DcrlError::dim(
            "grad_centers_cluster",
            format!(
                "z {:?}, centers {:?}, P {:?}, Q {:?}",
                z.shape(),
                centers.shape(),
                p.shape(),
                q.shape()
            ),
        ));
    }
    let m = z.cols();
    let mut grad = Matrix::zeros(c, m);
    for j in 0..c {
        let mu = centers.row(j);
        let mut acc = vec![0.0; m];
        for i in 0..n {
            let zi = z.row(i);
            let kernel = 1.0 / (1.0 + tensor::sq_euclidean(zi, mu));
            let coef = kernel * (p.get(i, j) - q.get(i, j));
            for ((a, &zv), &mv) in acc.iter_mut().zip(zi).zip(mu) {
                *a += coef * (zv - mv);
            }
        }
        for (g, a) in grad.row_mut(j).iter_mut().zip(acc) {
            *g = -2.0 * a;
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Objective (sum of squared distances) after every Lloyd iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn nearest_center(row: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.rows() {
        let d = tensor::sq_euclidean(row, centers.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(x: &Matrix, clusters: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(clusters);
    chosen.push(rng.random_range(0..n));
    let mut dist: Vec<f64> = (0..n).map(|i| tensor::sq_euclidean(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < clusters {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = slot.min(tensor::sq_euclidean(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

/// Lloyd's algorithm from a k-means++ seeding.
///
/// Stops after `max_iters` or when no assignment changes. A cluster that
/// empties is re-seeded once with the point farthest from its center; a
/// second empty cluster is an initialization error.
pub fn kmeans(x: &Matrix, clusters: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = x.rows();
    if clusters == 0 || n < clusters {
        return Err(DcrlError::Initialization(format!(
            "k-means needs 1 <= C <= N, got C={clusters}, N={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(x, clusters, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut objective_history = Vec::new();
    let mut reseeded = false;
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (j, d) = nearest_center(x.row(i), &centers);
            dists[i] = d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }

        let mut counts = vec![0usize; clusters];
        for &a in &assignments {
            counts[a] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            if reseeded {
                return Err(DcrlError::Initialization(format!(
                    "cluster {empty} stayed empty after re-seeding"
                )));
            }
            reseeded = true;
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .ok_or_else(|| DcrlError::Initialization("no point available to re-seed an empty cluster".into()))?;
            counts[assignments[far]] -= 1;
            assignments[far] = empty;
            counts[empty] = 1;
            dists[far] = 0.0;
            changed = true;
        }

        let mut next = Matrix::zeros(clusters, x.cols());
        for (i, &a) in assignments.iter().enumerate() {
            for (c, &v) in next.row_mut(a).iter_mut().zip(x.row(i)) {
                *c += v;
            }
        }
        for (j, &cnt) in counts.iter().enumerate() {
            for c in next.row_mut(j) {
                *c /= cnt as f64;
            }
        }
        centers = next;
        let objective: f64 = (0..n)
            .map(|i| tensor::sq_euclidean(x.row(i), centers.row(assignments[i])))
            .sum();
        objective_history.push(objective);
        if !changed {
            break;
        }
    }

    Ok(KMeansResult {
        centers,
        assignments,
        objective_history,
        iterations,
    })
}

/// Best of `restarts` k-means runs by final objective. Seeds are
/// `seed, seed+1, ...`.
pub fn kmeans_restarts(x: &Matrix, clusters: usize, max_iters: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(x, clusters, max_iters, seed.wrapping_add(r as u64))?;
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub const INIT_RESTARTS: usize = 10;
pub const INIT_MAX_ITERS: usize = 300;

/// Runs k-means on the latent rows and evaluates Q, P and assignments from
/// the resulting centers.
pub fn init_centers(z: &Matrix, clusters: usize, seed: u64) -> Result<ClusterState> {
    if clusters < 2 {
        return Err(DcrlError::Initialization(format!("need at least 2 clusters, got {clusters}")));
    }
    let km = kmeans_restarts(z, clusters, INIT_MAX_ITERS, seed, INIT_RESTARTS)?;
    ClusterState::from_centers(z, km.centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn soft_assign_cases() {
        let z = Matrix::from_rows(&[[0.3, -0.2], [1.0, 2.0]]);
        let q = soft_assign(&z, &Matrix::from_rows(&[[5.0, 5.0]])).unwrap();
        assert_eq!(q, Matrix::filled(2, 1, 1.0));

        let q = soft_assign(&Matrix::from_rows(&[[0.0, 0.0]]), &Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]])).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5]);

        let q = soft_assign(&Matrix::from_rows(&[[0.0]]), &Matrix::from_rows(&[[0.0], [1.0]])).unwrap();
        assert!((q.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        assert!(soft_assign(&z, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn target_distribution_cases() {
        let q = Matrix::filled(2, 2, 0.5);
        assert_eq!(target_distribution(&q), q);

        let q = Matrix::from_rows(&[[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]]);
        let p = target_distribution(&q);
        let expect = Matrix::from_rows(&[[0.8, 0.2], [0.2, 0.8]]);
        assert!(p.max_abs_diff(&expect) < 1e-12);

        let q = Matrix::from_rows(&[[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]]);
        let p = target_distribution(&q);
        for i in 0..3 {
            let mq = q.row(i).iter().cloned().fold(0.0, f64::max);
            let mp = p.row(i).iter().cloned().fold(0.0, f64::max);
            assert!(mp >= mq);
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_cases() {
        let q = Matrix::from_rows(&[[0.3, 0.7]]);
        assert_eq!(kl_cluster_loss(&q, &q).unwrap(), 0.0);
        let v = kl_cluster_loss(&Matrix::from_rows(&[[1.0, 0.0]]), &Matrix::from_rows(&[[0.5, 0.5]])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn center_gradient_vanishes_when_targets_match() {
        let z = random(5, 3, 1);
        let mu = random(2, 3, 2);
        let q = soft_assign(&z, &mu).unwrap();
        assert_eq!(grad_centers_cluster(&z, &mu, &q, &q).unwrap(), Matrix::zeros(2, 3));
        let mu1 = random(1, 3, 3);
        let q1 = soft_assign(&z, &mu1).unwrap();
        assert_eq!(grad_centers_cluster(&z, &mu1, &q1, &q1).unwrap(), Matrix::zeros(1, 3));
    }

    #[test]
    fn argmax_tie_break() {
        let m = Matrix::from_rows(&[[0.5, 0.5], [0.2, 0.8]]);
        assert_eq!(argmax_rows(&m), vec![0, 1]);
    }

    /// Sum of squared distances of the best 2-partition, by enumeration.
    fn best_two_partition(x: &Matrix) -> f64 {
        let n = x.rows();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut total = 0.0;
            for side in [true, false] {
                let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
                let mean: Vec<f64> = (0..x.cols())
                    .map(|c| members.iter().map(|&i| x.get(i, c)).sum::<f64>() / members.len() as f64)
                    .collect();
                total += members.iter().map(|&i| tensor::sq_euclidean(x.row(i), &mean)).sum::<f64>();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn kmeans_small_cases() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [4.0, 1.0]]);
        let r = kmeans(&x, 2, 10, 0).unwrap();
        assert_eq!(r.objective(), 0.0);
        assert_ne!(r.assignments[0], r.assignments[1]);

        let x = Matrix::from_rows(&[[0.0, 0.1], [0.3, -0.2], [-0.1, 0.0], [3.0, 3.1], [3.2, 2.9], [2.8, 3.0]]);
        let r = kmeans_restarts(&x, 2, 50, 1, 5).unwrap();
        assert!((r.objective() - best_two_partition(&x)).abs() < 1e-12);
        assert!(kmeans(&x, 7, 10, 0).is_err());
    }

    #[test]
    fn kmeans_objective_is_monotone() {
        let x = random(200, 3, 9);
        let r = kmeans(&x, 5, 100, 4).unwrap();
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert_eq!(kmeans(&x, 5, 100, 4).unwrap(), r);
    }

    #[test]
    fn init_with_one_point_per_cluster() {
        let z = Matrix::from_rows(&[[0.0, 0.0], [1.0, 5.0], [-3.0, 2.0]]);
        let st = init_centers(&z, 3, 0).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|j| st.centers.row(j).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect: Vec<Vec<f64>> = (0..3).map(|i| z.row(i).to_vec()).collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, expect);
    }
}
