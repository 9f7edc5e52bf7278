//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Operations are recorded on a [`Tape`] in evaluation order while their
//! forward values are computed eagerly. [`Tape::backward`] then walks the
//! tape in reverse and accumulates adjoints into every node that depends on
//! a parameter leaf. A tape supports exactly one backward pass.
//!
//! ```
//! use dcrl::autodiff::Tape;
//! use dcrl::tensor::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::from_rows(&[[1.0, 2.0]]));
//! let loss = tape.sum(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[1.0, 1.0]);
//! ```

use crate::error::{DcrlError, Result};
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Recip(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowNormalize(Var),
    SqDist(Var, Var),
    PairDist(Var, Vec<(usize, usize)>),
    Mse(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through any parameter path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    /// `x + b` with the 1×cols bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = self.value(x).add_row_vector(self.value(b))?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias(x, b), value, ng))
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), value, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 / v);
        let ng = self.needs(a);
        self.push(Op::Recip(a), value, ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(Op::Ln(a), value, ng)
    }

    /// Elementwise `|a|`; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), value, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let ng = self.needs(a);
        self.push(Op::Square(a), value, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), value, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(Op::Mean(a), value, ng)
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let s: f64 = src.row(r).iter().sum();
            for v in value.row_mut(r) {
                *v /= s;
            }
        }
        let ng = self.needs(a);
        self.push(Op::RowNormalize(a), value, ng)
    }

    /// N×C matrix of squared distances between rows of `a` (N×m) and rows
    /// of `b` (C×m).
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(DcrlError::dim(
                "sq_dist",
                format!("{} vs {} columns", av.cols(), bv.cols()),
            ));
        }
        let mut value = Matrix::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                value.set(i, j, crate::tensor::sq_euclidean(av.row(i), bv.row(j)));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::SqDist(a, b), value, ng))
    }

    /// P×1 Euclidean distances `‖a_i − a_j‖` for the listed row pairs.
    /// The gradient of a zero-length pair is defined as 0.
    pub fn pair_dist(&mut self, a: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= av.rows() || j >= av.rows()) {
            return Err(DcrlError::dim(
                "pair_dist",
                format!("pair ({i}, {j}) out of range for {} rows", av.rows()),
            ));
        }
        let data = pairs
            .iter()
            .map(|&(i, j)| crate::tensor::euclidean(av.row(i), av.row(j)))
            .collect();
        let value = Matrix::from_vec(pairs.len(), 1, data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::PairDist(a, pairs), value, ng))
    }

    /// Mean squared error between two equally shaped nodes, as a 1×1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Matrix::scalar(crate::tensor::mse(self.value(a), self.value(b))?);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse(a, b), value, ng))
    }

    /// Propagates d(loss)/d(node) to every node that depends on a parameter.
    ///
    /// The loss must be 1×1, and a tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(DcrlError::Contract(
                "backward already ran on this tape".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(DcrlError::Contract(format!(
                "backward requires a 1x1 loss, got {r}x{c}"
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut contributions: Vec<(Var, Matrix)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        contributions.push((*a, g.matmul_t(self.value(*b))?));
                    }
                    if self.needs(*b) {
                        contributions.push((*b, self.value(*a).t_matmul(&g)?));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        contributions.push((*b, g.col_sums()));
                    }
                    if self.needs(*x) {
                        contributions.push((*x, g));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        contributions.push((*a, g.clone()));
                    }
                    if self.needs(*b) {
                        contributions.push((*b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        contributions.push((*b, g.scale(-1.0)));
                    }
                    if self.needs(*a) {
                        contributions.push((*a, g));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        contributions.push((*a, g.hadamard(self.value(*b))?));
                    }
                    if self.needs(*b) {
                        contributions.push((*b, g.hadamard(self.value(*a))?));
                    }
                }
                Op::Scale(a, s) => contributions.push((*a, g.scale(*s))),
                Op::AddScalar(a) => contributions.push((*a, g)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = g.zip_map(x, "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    contributions.push((*a, d));
                }
                Op::Recip(a) => {
                    let y = &node.value;
                    let d = g.zip_map(y, "recip_backward", |g, y| -g * y * y)?;
                    contributions.push((*a, d));
                }
                Op::Ln(a) => {
                    let x = self.value(*a);
                    contributions.push((*a, g.zip_map(x, "ln_backward", |g, x| g / x)?));
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let d = g.zip_map(x, "abs_backward", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    contributions.push((*a, d));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    contributions.push((*a, g.zip_map(x, "square_backward", |g, x| 2.0 * g * x)?));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    contributions.push((*a, Matrix::filled(r, c, g.item())));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let n = (r * c).max(1) as f64;
                    contributions.push((*a, Matrix::filled(r, c, g.item() / n)));
                }
                Op::RowNormalize(a) => {
                    // y = x / s with s = Σ x; dx_k = (g_k − Σ_l g_l y_l) / s
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let s: f64 = x.row(r).iter().sum();
                        let gy: f64 = crate::tensor::dot(g.row(r), y.row(r));
                        for ((o, &gk), _) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gk - gy) / s;
                        }
                    }
                    contributions.push((*a, d));
                }
                Op::SqDist(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let m = av.cols();
                    let mut da = Matrix::zeros(av.rows(), m);
                    let mut db = Matrix::zeros(bv.rows(), m);
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                let diff = 2.0 * gij * (av.get(i, c) - bv.get(j, c));
                                da.row_mut(i)[c] += diff;
                                db.row_mut(j)[c] -= diff;
                            }
                        }
                    }
                    if self.needs(*a) {
                        contributions.push((*a, da));
                    }
                    if self.needs(*b) {
                        contributions.push((*b, db));
                    }
                }
                Op::PairDist(a, pairs) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let dist = node.value.get(p, 0);
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = g.get(p, 0) / dist;
                        for c in 0..av.cols() {
                            let diff = coef * (av.get(i, c) - av.get(j, c));
                            da.row_mut(i)[c] += diff;
                            da.row_mut(j)[c] -= diff;
                        }
                    }
                    contributions.push((*a, da));
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.len().max(1) as f64;
                    let coef = 2.0 * g.item() / n;
                    let da = av.zip_map(bv, "mse_backward", |x, y| coef * (x - y))?;
                    if self.needs(*b) {
                        contributions.push((*b, da.scale(-1.0)));
                    }
                    if self.needs(*a) {
                        contributions.push((*a, da));
                    }
                }
            }
            for (v, d) in contributions {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d)?,
                    slot @ None => *slot = Some(d),
                }
            }
        }

        // Only leaves keep their adjoints; intermediate slots were consumed.
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            g.data_mut()[k] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let num = a.sub(b).unwrap().frobenius_norm();
        let den = a.frobenius_norm().max(b.frobenius_norm()).max(1e-12);
        num / den
    }

    /// Runs `build` on a fresh tape with `x` as the sole parameter.
    fn eval(x: &Matrix, build: &dyn Fn(&mut Tape, Var) -> Var) -> (f64, Matrix) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = build(&mut tape, v);
        let value = tape.value(loss).item();
        let g = tape.backward(loss).unwrap().wrt(v);
        (value, g)
    }

    fn check(x: &Matrix, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let (_, analytic) = eval(x, build);
        let numeric = numeric_grad(x, &|m| eval(m, build).0);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-6, "relative error {e}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (_, g) = eval(&Matrix::from_rows(&[[1.0, -2.0], [3.0, 4.0]]), &|t, v| t.sum(v));
        assert_eq!(g, Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn mse_with_itself_has_zero_gradient() {
        let (value, g) = eval(&Matrix::from_rows(&[[1.0, -2.0]]), &|t, v| t.mse(v, v).unwrap());
        assert_eq!(value, 0.0);
        assert_eq!(g, Matrix::zeros(1, 2));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[[-1.0, 2.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let neg = tape.constant(Matrix::filled(2, 3, -0.5));
        let z = tape.relu(neg);
        assert_eq!(tape.value(z), &Matrix::zeros(2, 3));
    }

    #[test]
    fn relu_gradient_away_from_zero() {
        let x = Matrix::from_rows(&[[-0.7, 0.3, 1.2], [0.5, -0.2, -1.5]]);
        check(&x, &|t, v| {
            let r = t.relu(v);
            let s = t.square(r);
            t.sum(s)
        });
    }

    #[test]
    fn affine_hand_evaluation() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[[1.0, 2.0]]));
        let w = tape.constant(Matrix::from_rows(&[[1.0], [1.0]]));
        let b = tape.param(Matrix::scalar(1.0));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).item(), 4.0);

        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let w = tape.constant(Matrix::identity(2));
        let b = tape.param(Matrix::zeros(1, 2));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn every_smooth_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random(4, 3, &mut rng);
        let w = random(3, 5, &mut rng);
        let b = random(1, 5, &mut rng);
        let other = random(4, 3, &mut rng);
        let centers = random(2, 3, &mut rng);

        check(&x, &|t, v| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.affine(v, wv, bv).unwrap();
            let y = t.square(y);
            t.sum(y)
        });
        check(&w, &|t, v| {
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, v).unwrap();
            let y = t.relu(y);
            t.mean(y)
        });
        check(&x, &|t, v| {
            let o = t.constant(other.clone());
            let p = t.mul(v, o).unwrap();
            let q = t.add(p, v).unwrap();
            let r = t.sub(q, o).unwrap();
            let r = t.scale(r, 0.7);
            let r = t.square(r);
            t.sum(r)
        });
        check(&x, &|t, v| {
            let c = t.constant(centers.clone());
            let d = t.sq_dist(v, c).unwrap();
            let d = t.add_scalar(d, 1.0);
            let k = t.recip(d);
            let q = t.row_normalize(k);
            let l = t.ln(q);
            let o = t.constant(Matrix::from_rows(&[[0.3, 0.7], [0.6, 0.4], [0.1, 0.9], [0.5, 0.5]]));
            let m = t.mul(l, o).unwrap();
            t.sum(m)
        });
        check(&centers, &|t, v| {
            let xv = t.constant(x.clone());
            let d = t.sq_dist(xv, v).unwrap();
            let d = t.add_scalar(d, 1.0);
            let k = t.recip(d);
            let q = t.row_normalize(k);
            let q = t.square(q);
            t.sum(q)
        });
        check(&x, &|t, v| {
            let d = t.pair_dist(v, vec![(0, 1), (1, 2), (3, 0), (2, 3)]).unwrap();
            let c = t.constant(Matrix::from_rows(&[[0.1], [5.0], [0.2], [4.0]]));
            let e = t.sub(d, c).unwrap();
            let e = t.abs(e);
            t.sum(e)
        });
        check(&x, &|t, v| {
            let o = t.constant(other.clone());
            t.mse(v, o).unwrap()
        });
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(DcrlError::Contract(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(DcrlError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(1, 2, 1.0));
        let c = tape.constant(Matrix::filled(1, 2, 3.0));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[3.0, 3.0]);
    }

    #[test]
    fn abs_and_pair_dist_subgradients_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]));
        let d = tape.pair_dist(x, vec![(0, 1)]).unwrap();
        let a = tape.abs(d);
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Matrix::zeros(2, 2));
    }
}
