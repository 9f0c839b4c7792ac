//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every forward operation as a node holding its value.
//! [`Tape::backward`] walks the nodes in reverse from a `1 x 1` root and
//! returns adjoints for every node that depends on a tracked leaf. Each
//! operation carries its own hand-derived backward rule; the loss nodes
//! (cross-entropy, the two contrastive objectives, symmetric KL) operate
//! directly on probability rows so their rules stay short.

use crate::matrix::{self, dot, norm, Matrix};
use crate::{Error, Result, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Detach,
    Add(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    NormalizeRows(Var),
    ConcatCols(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    RowSoftmax { s: Var, temperature: T },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    DiagonalNll(Var),
    MultiClassNce { probs: Var, labels: Vec<usize> },
    SymmetricKl(Var, Var),
    WeightedSum(Vec<(Var, T)>),
    SumSquares(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    tracked: bool,
    label: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `var`; zeros when the root does
    /// not depend on it.
    pub fn wrt(&self, var: Var) -> Matrix<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads[var.0].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Attaches a name used in diagnostics about this node.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn label(&self, v: Var) -> String {
        self.nodes[v.0]
            .label
            .clone()
            .unwrap_or_else(|| format!("node #{}", v.0))
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Same value as `x`, but gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = matrix::affine(self.value(x), self.value(w), self.value(b))?;
        let tracked = self.any_tracked(&[x, w, b]);
        Ok(self.push(value, Op::Affine { x, w, b }, tracked))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Tanh(x), tracked)
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let value = matrix::l2_normalize_rows(self.value(x));
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::NormalizeRows(x), tracked)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), tracked))
    }

    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_transposed(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), tracked))
    }

    /// Cosine similarity of every row of `a` against every row of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).cols() == 0 || self.value(a).cols() != self.value(b).cols() {
            return Err(Error::shape(
                "cosine_similarity_matrix",
                format!(
                    "row dimensions {} and {}",
                    self.value(a).cols(),
                    self.value(b).cols()
                ),
            ));
        }
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        self.matmul_transposed(na, nb)
    }

    pub fn row_softmax(&mut self, s: Var, temperature: T) -> Result<Var> {
        let value = matrix::row_softmax(self.value(s), temperature)?;
        let tracked = self.any_tracked(&[s]);
        Ok(self.push(value, Op::RowSoftmax { s, temperature }, tracked))
    }

    /// Mean over rows of `-ln max(p[i, label_i], ε)`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        check_labels(p, labels, "cross_entropy")?;
        let n = T::from_count(labels.len().max(1));
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &k)| -p[(i, k)].floored().ln())
            .sum();
        let tracked = self.any_tracked(&[probs]);
        Ok(self.push(
            Matrix::scalar(total / n),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean over rows of `-ln max(p[i, i], ε)` for a square probability
    /// matrix: instance-level contrastive loss.
    pub fn diagonal_nll(&mut self, probs: Var) -> Result<Var> {
        let p = self.value(probs);
        if p.rows() != p.cols() {
            return Err(Error::shape(
                "info_nce",
                format!("probability matrix {}x{} is not square", p.rows(), p.cols()),
            ));
        }
        let n = T::from_count(p.rows().max(1));
        let total: T = (0..p.rows()).map(|i| -p[(i, i)].floored().ln()).sum();
        let tracked = self.any_tracked(&[probs]);
        Ok(self.push(Matrix::scalar(total / n), Op::DiagonalNll(probs), tracked))
    }

    /// Multi-class NCE on a square probability matrix whose row `i` is the
    /// anchor-`i` softmax over candidates. Candidates sharing the anchor's
    /// label are positives, the rest negatives; each group is averaged on
    /// its own and an empty negative group contributes nothing.
    pub fn multiclass_nce(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        if p.rows() != p.cols() || p.rows() != labels.len() {
            return Err(Error::shape(
                "multiclass_nce",
                format!(
                    "probability matrix {}x{} with {} labels",
                    p.rows(),
                    p.cols(),
                    labels.len()
                ),
            ));
        }
        let b = labels.len();
        let mut total = T::zero();
        for i in 0..b {
            let (n_pos, n_neg) = class_counts(labels, labels[i]);
            let mut pos = T::zero();
            let mut neg = T::zero();
            for j in 0..b {
                let pij = p[(i, j)];
                if labels[j] == labels[i] {
                    pos -= pij.floored().ln();
                } else {
                    neg -= complement(p.row(i), j).floored().ln();
                }
            }
            total += pos / T::from_count(n_pos);
            if n_neg > 0 {
                total += neg / T::from_count(n_neg);
            }
        }
        let tracked = self.any_tracked(&[probs]);
        Ok(self.push(
            Matrix::scalar(total / T::from_count(b.max(1))),
            Op::MultiClassNce {
                probs,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean over rows of `(KL(P‖Q) + KL(Q‖P)) / 2` with ε-floored logs.
    pub fn symmetric_kl(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pm, qm) = (self.value(p), self.value(q));
        pm.expect_same_shape("jsd", qm)?;
        let half = T::lit(0.5);
        let mut total = T::zero();
        for (&a, &b) in pm.data().iter().zip(qm.data()) {
            total += (a - b) * (a.floored().ln() - b.floored().ln());
        }
        let n = T::from_count(pm.rows().max(1));
        let tracked = self.any_tracked(&[p, q]);
        Ok(self.push(
            Matrix::scalar(half * total / n),
            Op::SymmetricKl(p, q),
            tracked,
        ))
    }

    /// `Σ wᵢ·xᵢ` over `1 x 1` nodes. An empty list gives the constant 0.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let x = self.value(v);
            if x.shape() != (1, 1) {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term {} is {}x{}", self.label(v), x.rows(), x.cols()),
                ));
            }
            total += w * x.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let tracked = self.any_tracked(&vars);
        Ok(self.push(
            Matrix::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            tracked,
        ))
    }

    /// `Σ x²` over every entry.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::SumSquares(x), tracked)
    }

    /// Adjoints of `root` with respect to every tracked node.
    ///
    /// Fails if `root` is not `1 x 1` or its value is not finite; in the
    /// latter case the error names the earliest labelled non-finite term
    /// feeding the root, falling back to the root itself.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root is {}x{}, expected a scalar", rv.rows(), rv.cols()),
            ));
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite {
                term: self.first_non_finite_term(root),
            });
        }

        let n = root.0 + 1;
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| if node.tracked { g } else { None })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn first_non_finite_term(&self, root: Var) -> String {
        (0..=root.0)
            .find(|&i| self.nodes[i].label.is_some() && !self.nodes[i].value.is_finite())
            .map(|i| self.label(Var(i)))
            .unwrap_or_else(|| self.label(root))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
        if !self.nodes[v.0].tracked {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(T::one(), &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let eps = T::eps_floor();
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Affine { x, w, b } => {
                if self.is_tracked(*x) {
                    let dx = g.matmul_transposed(self.value(*w))?;
                    self.accumulate(grads, *x, dx)?;
                }
                if self.is_tracked(*w) {
                    let dw = self.value(*x).transposed_matmul(g)?;
                    self.accumulate(grads, *w, dw)?;
                }
                self.accumulate(grads, *b, g.column_sums())?;
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(&node.value, |gy, y| gy * (T::one() - y * y))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::NormalizeRows(x) => {
                let input = self.value(*x);
                let y = &node.value;
                let mut dx = Matrix::zeros(input.rows(), input.cols());
                for r in 0..input.rows() {
                    let n = norm(input.row(r));
                    if n < eps {
                        continue;
                    }
                    let proj = dot(y.row(r), g.row(r));
                    for ((d, &gy), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = (gy - yv * proj) / n;
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatCols(a, b) => {
                let (ga, gb) = g.split_cols(self.value(*a).cols());
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::MatMulT(a, b) => {
                if self.is_tracked(*a) {
                    let da = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.is_tracked(*b) {
                    let db = g.transposed_matmul(self.value(*a))?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::RowSoftmax { s, temperature } => {
                let y = &node.value;
                let mut ds = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(g.row(r), y.row(r));
                    for ((d, &gy), &yv) in ds.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yv * (gy - inner) / *temperature;
                    }
                }
                self.accumulate(grads, *s, ds)?;
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let scale = g.data()[0] / T::from_count(labels.len().max(1));
                let mut dp = Matrix::zeros(p.rows(), p.cols());
                for (i, &k) in labels.iter().enumerate() {
                    let pk = p[(i, k)];
                    if pk > eps {
                        dp[(i, k)] = -scale / pk;
                    }
                }
                self.accumulate(grads, *probs, dp)?;
            }
            Op::DiagonalNll(probs) => {
                let p = self.value(*probs);
                let scale = g.data()[0] / T::from_count(p.rows().max(1));
                let mut dp = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let pii = p[(i, i)];
                    if pii > eps {
                        dp[(i, i)] = -scale / pii;
                    }
                }
                self.accumulate(grads, *probs, dp)?;
            }
            Op::MultiClassNce { probs, labels } => {
                let p = self.value(*probs);
                let b = labels.len();
                let scale = g.data()[0] / T::from_count(b.max(1));
                let mut dp = Matrix::zeros(b, b);
                for i in 0..b {
                    let (n_pos, n_neg) = class_counts(labels, labels[i]);
                    for j in 0..b {
                        let pij = p[(i, j)];
                        if labels[j] == labels[i] {
                            if pij > eps {
                                dp[(i, j)] = -scale / (T::from_count(n_pos) * pij);
                            }
                        } else {
                            let q = complement(p.row(i), j);
                            if q > eps {
                                dp[(i, j)] = scale / (T::from_count(n_neg) * q);
                            }
                        }
                    }
                }
                self.accumulate(grads, *probs, dp)?;
            }
            Op::SymmetricKl(p, q) => {
                let (pm, qm) = (self.value(*p), self.value(*q));
                let scale = T::lit(0.5) * g.data()[0] / T::from_count(pm.rows().max(1));
                let inv = |v: T| if v > eps { T::one() / v } else { T::zero() };
                let mut dp = Matrix::zeros(pm.rows(), pm.cols());
                let mut dq = Matrix::zeros(pm.rows(), pm.cols());
                for (k, (&a, &b)) in pm.data().iter().zip(qm.data()).enumerate() {
                    let log_ratio = a.floored().ln() - b.floored().ln();
                    dp.data_mut()[k] = scale * (log_ratio + (a - b) * inv(a));
                    dq.data_mut()[k] = scale * (-log_ratio + (b - a) * inv(b));
                }
                self.accumulate(grads, *p, dp)?;
                self.accumulate(grads, *q, dq)?;
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Matrix::scalar(w * g.data()[0]))?;
                }
            }
            Op::SumSquares(x) => {
                let two_g = T::lit(2.0) * g.data()[0];
                let dx = self.value(*x).scale(two_g);
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

/// `1 - row[j]` summed from the other entries, which stays accurate when
/// `row[j]` is close to 1.
fn complement<T: Scalar>(row: &[T], j: usize) -> T {
    row.iter()
        .enumerate()
        .filter(|&(k, _)| k != j)
        .map(|(_, &v)| v)
        .sum()
}

fn class_counts(labels: &[usize], class: usize) -> (usize, usize) {
    let n_pos = labels.iter().filter(|&&l| l == class).count();
    (n_pos, labels.len() - n_pos)
}

fn check_labels<T: Scalar>(p: &Matrix<T>, labels: &[usize], op: &'static str) -> Result<()> {
    if p.rows() != labels.len() {
        return Err(Error::Shape {
            op,
            detail: format!("{} probability rows for {} labels", p.rows(), labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= p.cols()) {
        return Err(Error::LabelRange {
            label,
            num_classes: p.cols(),
            context: op.to_string(),
        });
    }
    Ok(())
}
