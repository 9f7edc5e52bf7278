//! Structure-preserving losses and their center gradients.
//!
//! Clusters flagged invalid in a [`ManifoldCenters`] (no members this epoch)
//! are skipped by the rank and alignment terms.
//!
//! Subgradient convention: `d|t|/dt = 0` at `t = 0` and `d‖u‖/du = 0` at
//! `u = 0`.

use crate::autodiff::{Tape, Var};
use crate::error::{DcrlError, Result};
use crate::geometry::{ManifoldCenters, NeighborGraph};
use crate::tensor::{self, Matrix};

/// One same-cluster neighbor edge with its fixed input-space length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsometryPair {
    pub i: usize,
    pub j: usize,
    pub input_dist: f64,
}

/// Edges of the latent kNN graph whose endpoints share an assignment.
pub fn isometry_pairs(x: &Matrix, graph: &NeighborGraph, assignments: &[usize]) -> Result<Vec<IsometryPair>> {
    if graph.len() != x.rows() || assignments.len() != x.rows() {
        return Err(DcrlError::dim(
            "isometry_pairs",
            format!(
                "{} rows, {} graph nodes, {} assignments",
                x.rows(),
                graph.len(),
                assignments.len()
            ),
        ));
    }
    Ok(graph
        .edges()
        .filter(|&(i, j)| assignments[i] == assignments[j])
        .map(|(i, j)| IsometryPair {
            i,
            j,
            input_dist: tensor::euclidean(x.row(i), x.row(j)),
        })
        .collect())
}

/// `Σ_i Σ_{j∈N(i)} |d_X(x_i, x_j) − d_Z(z_i, z_j)| · [s_i = s_j]`.
pub fn lis_loss(x: &Matrix, z: &Matrix, graph: &NeighborGraph, assignments: &[usize]) -> Result<f64> {
    if z.rows() != x.rows() {
        return Err(DcrlError::dim("lis_loss", format!("{} vs {} rows", x.rows(), z.rows())));
    }
    Ok(isometry_pairs(x, graph, assignments)?
        .iter()
        .map(|p| (p.input_dist - tensor::euclidean(z.row(p.i), z.row(p.j))).abs())
        .sum())
}

/// Records the isometry loss over `pairs` on the tape, differentiable with
/// respect to `z`.
pub fn lis_on_tape(tape: &mut Tape, z: Var, pairs: &[IsometryPair]) -> Result<Var> {
    let index: Vec<(usize, usize)> = pairs.iter().map(|p| (p.i, p.j)).collect();
    let targets = Matrix::from_vec(pairs.len(), 1, pairs.iter().map(|p| p.input_dist).collect())?;
    let dz = tape.pair_dist(z, index)?;
    let dx = tape.constant(targets);
    let diff = tape.sub(dx, dz)?;
    let abs = tape.abs(diff);
    Ok(tape.sum(abs))
}

fn check_centers(op: &'static str, centers: &Matrix, reference: &ManifoldCenters) -> Result<()> {
    if centers.rows() != reference.num_clusters() {
        return Err(DcrlError::dim(
            op,
            format!("{} learnable centers, {} reference centers", centers.rows(), reference.num_clusters()),
        ));
    }
    Ok(())
}

/// `Σ_i Σ_j |d_Z(μ_i, μ_j) − κ·d_X(v_i, v_j)|` over ordered pairs.
pub fn rank_loss(centers: &Matrix, input_centers: &ManifoldCenters, kappa: f64) -> Result<f64> {
    check_centers("rank_loss", centers, input_centers)?;
    let c = centers.rows();
    let v = &input_centers.centers;
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j || !input_centers.is_valid(i) || !input_centers.is_valid(j) {
                continue;
            }
            let dz = tensor::euclidean(centers.row(i), centers.row(j));
            let dx = tensor::euclidean(v.row(i), v.row(j));
            total += (dz - kappa * dx).abs();
        }
    }
    Ok(total)
}

/// `∂L_rank/∂μ_j = 2 Σ_i (μ_j − μ_i)/d_Z(μ_j, μ_i) · sign(d_Z(μ_j, μ_i) − κ·d_X(v_i, v_j))`.
pub fn grad_centers_rank(centers: &Matrix, input_centers: &ManifoldCenters, kappa: f64) -> Result<Matrix> {
    check_centers("grad_centers_rank", centers, input_centers)?;
    let (c, m) = centers.shape();
    let v = &input_centers.centers;
    let mut grad = Matrix::zeros(c, m);
    for j in 0..c {
        if !input_centers.is_valid(j) {
            continue;
        }
        for i in 0..c {
            if i == j || !input_centers.is_valid(i) {
                continue;
            }
            let dz = tensor::euclidean(centers.row(j), centers.row(i));
            if dz == 0.0 {
                continue;
            }
            let gap = dz - kappa * tensor::euclidean(v.row(i), v.row(j));
            if gap == 0.0 {
                continue;
            }
            let coef = 2.0 * gap.signum() / dz;
            for k in 0..m {
                let delta = centers.get(j, k) - centers.get(i, k);
                grad.row_mut(j)[k] += coef * delta;
            }
        }
    }
    Ok(grad)
}

/// `Σ_j ‖μ_j − v_j‖` over valid clusters.
pub fn align_loss(centers: &Matrix, latent_centers: &ManifoldCenters) -> Result<f64> {
    check_centers("align_loss", centers, latent_centers)?;
    if centers.cols() != latent_centers.centers.cols() {
        return Err(DcrlError::dim("align_loss", "center dimensionality differs"));
    }
    Ok((0..centers.rows())
        .filter(|&j| latent_centers.is_valid(j))
        .map(|j| tensor::euclidean(centers.row(j), latent_centers.centers.row(j)))
        .sum())
}

/// Row j is `(μ_j − v_j)/‖μ_j − v_j‖`, or zero where the two coincide or the
/// cluster is invalid.
pub fn grad_centers_align(centers: &Matrix, latent_centers: &ManifoldCenters) -> Result<Matrix> {
    check_centers("grad_centers_align", centers, latent_centers)?;
    let (c, m) = centers.shape();
    let mut grad = Matrix::zeros(c, m);
    for j in 0..c {
        if !latent_centers.is_valid(j) {
            continue;
        }
        let norm = tensor::euclidean(centers.row(j), latent_centers.centers.row(j));
        if norm == 0.0 {
            continue;
        }
        for k in 0..m {
            grad.row_mut(j)[k] = (centers.get(j, k) - latent_centers.centers.get(j, k)) / norm;
        }
    }
    Ok(grad)
}

/// Point-level push-away baseline: `−Σ_i Σ_j d_Z(z_i, z_j)·[s_i ≠ s_j]`.
pub fn sep_loss(z: &Matrix, assignments: &[usize]) -> Result<f64> {
    if assignments.len() != z.rows() {
        return Err(DcrlError::dim("sep_loss", format!("{} assignments for {} rows", assignments.len(), z.rows())));
    }
    let mut total = 0.0;
    for i in 0..z.rows() {
        for j in 0..z.rows() {
            if assignments[i] != assignments[j] {
                total += tensor::euclidean(z.row(i), z.row(j));
            }
        }
    }
    Ok(-total)
}

/// Separation loss on the tape; returns `None` when every point shares one
/// assignment.
pub fn sep_on_tape(tape: &mut Tape, z: Var, assignments: &[usize]) -> Result<Option<Var>> {
    let n = assignments.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| assignments[i] != assignments[j])
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let d = tape.pair_dist(z, pairs)?;
    let s = tape.sum(d);
    Ok(Some(tape.scale(s, -1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn_points, manifold_centers};

    fn centers(rows: &[[f64; 2]]) -> ManifoldCenters {
        ManifoldCenters {
            centers: Matrix::from_rows(rows),
            counts: vec![1; rows.len()],
        }
    }

    #[test]
    fn lis_cases() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]);
        let g = knn_points(&x, 1).unwrap();
        assert_eq!(lis_loss(&x, &x, &g, &[0, 0]).unwrap(), 0.0);
        let z = Matrix::from_rows(&[[0.0], [1.5]]);
        assert_eq!(lis_loss(&x, &z, &g, &[0, 0]).unwrap(), 1.0);
        assert_eq!(lis_loss(&x, &z, &g, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn lis_tape_matches_direct() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.2], [0.4, 1.1], [2.0, 2.0], [2.5, 1.7]]);
        let z = Matrix::from_rows(&[[0.1], [0.9], [0.5], [2.2], [3.0]]);
        let g = knn_points(&z, 2).unwrap();
        let s = [0, 0, 0, 1, 1];
        let pairs = isometry_pairs(&x, &g, &s).unwrap();
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let l = lis_on_tape(&mut tape, zv, &pairs).unwrap();
        assert!((tape.value(l).item() - lis_loss(&x, &z, &g, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rank_cases() {
        let vx = centers(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]);
        let mu = vx.centers.scale(3.0);
        assert!(rank_loss(&mu, &vx, 3.0).unwrap() < 1e-12);
        assert_eq!(grad_centers_rank(&mu, &vx, 3.0).unwrap(), Matrix::zeros(3, 2));

        // d_Z = 5, κ·d_X = 3, counted for both orderings.
        let vx = centers(&[[0.0, 0.0], [1.0, 0.0]]);
        let mu = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]);
        assert!((rank_loss(&mu, &vx, 3.0).unwrap() - 4.0).abs() < 1e-12);
        // κ = 6 → |5 − 6| twice.
        assert!((rank_loss(&mu, &vx, 6.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_gradient_collinear_direction() {
        let vx = centers(&[[0.0, 0.0], [1.0, 0.0]]);
        let mu = Matrix::from_rows(&[[1.0, 1.0], [4.0, 5.0]]);
        let g = grad_centers_rank(&mu, &vx, 3.0).unwrap();
        // Too far apart: center 0 is pulled toward center 1 and vice versa.
        assert!((g.get(0, 0) - (-2.0 * 0.6)).abs() < 1e-12);
        assert!((g.get(0, 1) - (-2.0 * 0.8)).abs() < 1e-12);
        assert!((g.get(1, 0) - 2.0 * 0.6).abs() < 1e-12);
        assert!((g.get(1, 1) - 2.0 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn align_cases() {
        let mu = Matrix::from_rows(&[[3.0, 4.0]]);
        let vz = centers(&[[0.0, 0.0]]);
        assert_eq!(align_loss(&mu, &vz).unwrap(), 5.0);
        assert_eq!(grad_centers_align(&mu, &vz).unwrap().data(), &[0.6, 0.8]);
        let same = centers(&[[3.0, 4.0]]);
        assert_eq!(align_loss(&mu, &same).unwrap(), 0.0);
        assert_eq!(grad_centers_align(&mu, &same).unwrap(), Matrix::zeros(1, 2));
    }

    #[test]
    fn align_translation_invariance() {
        let mu = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]);
        let vz = centers(&[[1.0, 1.0], [-0.5, 0.25]]);
        let shift = Matrix::from_rows(&[[7.0, -3.0]]);
        let mu2 = mu.add_row_vector(&shift).unwrap();
        let vz2 = ManifoldCenters {
            centers: vz.centers.add_row_vector(&shift).unwrap(),
            counts: vz.counts.clone(),
        };
        let a = align_loss(&mu, &vz).unwrap();
        assert!((a - align_loss(&mu2, &vz2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sep_cases() {
        let z = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(sep_loss(&z, &[0, 0]).unwrap(), 0.0);
        assert_eq!(sep_loss(&z, &[0, 1]).unwrap(), -4.0);

        let z = Matrix::from_rows(&[[0.0], [0.5], [3.0], [3.5]]);
        let s = [0, 0, 1, 1];
        let apart = Matrix::from_rows(&[[0.0], [0.5], [5.0], [5.5]]);
        assert!(sep_loss(&apart, &s).unwrap() < sep_loss(&z, &s).unwrap());

        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let l = sep_on_tape(&mut tape, zv, &s).unwrap().unwrap();
        assert_eq!(tape.value(l).item(), sep_loss(&z, &s).unwrap());
    }

    #[test]
    fn invalid_clusters_are_skipped() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        let vx = manifold_centers(&x, &[0, 0], 2).unwrap();
        let mu = Matrix::from_rows(&[[0.0, 0.0], [9.0, 9.0]]);
        assert_eq!(rank_loss(&mu, &vx, 3.0).unwrap(), 0.0);
        assert_eq!(grad_centers_rank(&mu, &vx, 3.0).unwrap(), Matrix::zeros(2, 2));
        assert!((align_loss(&mu, &vx).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(grad_centers_align(&mu, &vx).unwrap().row(1), &[0.0, 0.0]);
    }
}
