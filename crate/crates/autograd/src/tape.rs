//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends one node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and `backward` is a single reverse sweep.

use crate::error::{invalid, AutogradError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Denominator floor for distance and normalization backward rules.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    ScaleBy(Var, Var),
    Dot(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    AddRowBroadcast(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    ScaleRows(Var, Vec<S>),
    WeightedRowSum(Var, Vec<S>),
    Softmax(Var),
    SoftmaxRows(Var),
    SelectColumn(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Distance(Var, Var),
    Normalize {
        x: Var,
        denom: S,
        clamped: bool,
    },
    Ln {
        x: Var,
        lo: S,
        hi: S,
    },
    Sum(Var),
    Mean(Var),
    MatMulNt(Var, Var),
    HConcat(Vec<Var>),
    GroupSum(Var, usize),
    RepeatRows(Var, usize),
    RowSum(Var),
    MulRows(Var, Var),
    SoftmaxGroups(Var, usize),
    RowNorms(Var),
    NormalizeRows {
        x: Var,
        denoms: Vec<S>,
        clamped: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Not shared across threads.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bindings: Vec<Option<Var>>,
    grads: Vec<Option<Vec<S>>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(AutogradError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it participated.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameters bound on this tape with their nodes.
    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op<S>,
        value: Tensor<S>,
        rg: bool,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutogradError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input. Receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("constant", Op::Leaf, value, false)
    }

    pub fn constant_vec(&mut self, data: Vec<S>) -> Result<Var> {
        self.constant(Tensor::vector(data))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<Var> {
        self.constant(Tensor::zeros(shape))
    }

    /// A differentiable leaf that is not owned by a parameter store.
    pub fn variable(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("variable", Op::Leaf, value, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bindings.get(id.0) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let var = Var(self.nodes.len() - 1);
        if self.bindings.len() <= id.0 {
            self.bindings.resize(id.0 + 1, None);
        }
        self.bindings[id.0] = Some(var);
        var
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("affine", Op::Affine(x, scale), value, rg)
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.affine(x, factor, S::zero())
    }

    /// `s * v` where `s` is a single-element node.
    pub fn scale_by(&mut self, v: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(invalid(
                "scale_by",
                format!("factor has shape {:?}", self.shape(s)),
            ));
        }
        let k = self.scalar(s);
        let data = self.data(v).iter().map(|&x| k * x).collect();
        let value = Tensor::new(self.shape(v).to_vec(), data)?;
        let rg = self.rg(&[v, s]);
        self.push("scale_by", Op::ScaleBy(v, s), value, rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(AutogradError::ShapeMismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s: S = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .sum();
        let rg = self.rg(&[a, b]);
        self.push("dot", Op::Dot(a, b), Tensor::scalar(s), rg)
    }

    /// `(m x k) . (k x n) -> (m x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", Op::MatMul(a, b), value, rg)
    }

    /// `(m x k) . k -> m`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.value(w).dims2("matvec")?;
        if self.value(x).len() != k {
            return Err(AutogradError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let (wd, xd) = (self.data(w), self.data(x));
        let out = (0..m)
            .map(|i| {
                wd[i * k..(i + 1) * k]
                    .iter()
                    .zip(xd)
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(&[w, x]);
        self.push("matvec", Op::MatVec(w, x), Tensor::vector(out), rg)
    }

    /// Adds vector `b` to every row of matrix `x`.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_row_broadcast")?;
        if self.value(b).len() != n {
            return Err(AutogradError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bd = self.data(b);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[x, b]);
        self.push("add_row_broadcast", Op::AddRowBroadcast(x, b), value, rg)
    }

    /// Flattens and concatenates `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let total = parts.iter().map(|p| self.value(*p).len()).sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(self.data(*p));
        }
        let rg = self.rg(parts);
        self.push(
            "concat",
            Op::Concat(parts.to_vec()),
            Tensor::vector(out),
            rg,
        )
    }

    /// Stacks equal-length vectors into an `n x d` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let d = rows
            .first()
            .map(|r| self.value(*r).len())
            .ok_or_else(|| invalid("stack", "no rows"))?;
        if let Some(bad) = rows.iter().find(|r| self.value(**r).len() != d) {
            return Err(AutogradError::ShapeMismatch {
                op: "stack",
                lhs: vec![d],
                rhs: self.shape(*bad).to_vec(),
            });
        }
        let flat = self.concat(rows)?;
        self.reshape(flat, vec![rows.len(), d])
    }

    /// Contiguous range of the flattened input, as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.value(x).len();
        if start + len > total {
            return Err(invalid("slice", format!("{start}+{len} exceeds {total}")));
        }
        let out = self.data(x)[start..start + len].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice", Op::Slice(x, start), Tensor::vector(out), rg)
    }

    /// Row `i` of a matrix.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let (rows, cols) = self.value(m).dims2("row")?;
        if i >= rows {
            return Err(invalid("row", format!("row {i} out of {rows}")));
        }
        self.slice(m, i * cols, cols)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(AutogradError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", Op::Reshape(x), value, rg)
    }

    /// Embedding lookup: rows of `table` in the order given. Backward scatter-adds.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2("gather")?;
        let td = self.data(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(invalid("gather", format!("row {i} out of {r}")));
            }
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(rows.len(), c, out)?;
        let rg = self.rg(&[table]);
        self.push("gather", Op::Gather(table, rows.to_vec()), value, rg)
    }

    fn check_row_weights(&self, op: &'static str, m: Var, weights: &[S]) -> Result<(usize, usize)> {
        let (n, d) = self.value(m).dims2(op)?;
        if weights.len() != n {
            return Err(AutogradError::ShapeMismatch {
                op,
                lhs: self.shape(m).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        Ok((n, d))
    }

    /// Row `i` multiplied by the constant `weights[i]`.
    pub fn scale_rows(&mut self, m: Var, weights: &[S]) -> Result<Var> {
        let (n, d) = self.check_row_weights("scale_rows", m, weights)?;
        let out = self
            .data(m)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * weights[i / d])
            .collect();
        let value = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[m]);
        self.push("scale_rows", Op::ScaleRows(m, weights.to_vec()), value, rg)
    }

    /// `sum_i weights[i] * row_i`. Zero weights act as a mask; all-zero gives the zero vector.
    pub fn weighted_row_sum(&mut self, m: Var, weights: &[S]) -> Result<Var> {
        let (_, d) = self.check_row_weights("weighted_row_sum", m, weights)?;
        let mut out = vec![S::zero(); d];
        for (i, row) in self.data(m).chunks(d.max(1)).enumerate() {
            let w = weights[i];
            if w == S::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        let rg = self.rg(&[m]);
        self.push(
            "weighted_row_sum",
            Op::WeightedRowSum(m, weights.to_vec()),
            Tensor::vector(out),
            rg,
        )
    }

    /// Masked rows contribute nothing; the result is the zero vector if all are masked.
    pub fn sum_pool(&mut self, m: Var, mask: &[bool]) -> Result<Var> {
        let w: Vec<S> = mask
            .iter()
            .map(|&keep| if keep { S::one() } else { S::zero() })
            .collect();
        self.weighted_row_sum(m, &w)
    }

    /// Softmax over all entries; `mask[i] == false` entries are excluded and output 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xd = self.data(x);
        let n = xd.len();
        if let Some(mask) = mask {
            if mask.len() != n {
                return Err(AutogradError::ShapeMismatch {
                    op: "softmax",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let max = (0..n)
            .filter(|&i| keep(i))
            .map(|i| xd[i])
            .fold(None, |acc: Option<S>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or_else(|| invalid("softmax", "every entry is masked"))?;
        let mut out: Vec<S> = (0..n)
            .map(|i| {
                if keep(i) {
                    (xd[i] - max).exp()
                } else {
                    S::zero()
                }
            })
            .collect();
        let total: S = out.iter().copied().sum();
        out.iter_mut().for_each(|v| *v /= total);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", Op::Softmax(x), value, rg)
    }

    /// Independent softmax over each row of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("softmax_rows")?;
        if n == 0 {
            return Err(invalid("softmax_rows", "empty rows"));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let total: S = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[x]);
        self.push("softmax_rows", Op::SoftmaxRows(x), value, rg)
    }

    /// Column `j` of a matrix, as a vector.
    pub fn select_column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("select_column")?;
        if j >= n {
            return Err(invalid("select_column", format!("column {j} out of {n}")));
        }
        let xd = self.data(x);
        let out = (0..m).map(|i| xd[i * n + j]).collect();
        let rg = self.rg(&[x]);
        self.push(
            "select_column",
            Op::SelectColumn(x, j),
            Tensor::vector(out),
            rg,
        )
    }

    fn map_unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(name, op, value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary("tanh", x, S::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, |v| v.max(S::zero()), Op::Relu(x))
    }

    /// Natural log of `x` clamped to `[lo, hi]`; no gradient where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        self.map_unary(
            "ln_clamped",
            x,
            |v| v.max(lo).min(hi).ln(),
            Op::Ln { x, lo, hi },
        )
    }

    /// Euclidean distance between two equal-length tensors.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(AutogradError::ShapeMismatch {
                op: "distance",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let d = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            .sqrt();
        let rg = self.rg(&[a, b]);
        self.push("distance", Op::Distance(a, b), Tensor::scalar(d), rg)
    }

    /// `x / max(|x|, NORM_FLOOR)`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let norm = self.data(x).iter().map(|&v| v * v).sum::<S>().sqrt();
        let floor = S::lit(NORM_FLOOR);
        let clamped = norm <= floor;
        let denom = if clamped { floor } else { norm };
        self.map_unary(
            "normalize",
            x,
            |v| v / denom,
            Op::Normalize { x, denom, clamped },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(invalid("mean", "empty input"));
        }
        let s: S = self.data(x).iter().copied().sum::<S>() / S::from_usize(n).unwrap();
        let rg = self.rg(&[x]);
        self.push("mean", Op::Mean(x), Tensor::scalar(s), rg)
    }

    /// `(m x k) . (n x k)^T -> (m x n)`, for weights stored output-major.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        rows_dot_rows(self.data(a), self.data(b), k, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Op::MatMulNt(a, b), value, rg)
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("hconcat", "no inputs"))?;
        let (m, _) = self.value(first).dims2("hconcat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2("hconcat")?;
            if r != m {
                return Err(AutogradError::ShapeMismatch {
                    op: "hconcat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::matrix(m, total, out)?;
        let rg = self.rg(parts);
        self.push("hconcat", Op::HConcat(parts.to_vec()), value, rg)
    }

    /// Sums each run of `k` consecutive rows: `(g*k) x d -> g x d`.
    pub fn group_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2("group_sum")?;
        if k == 0 || n % k != 0 {
            return Err(invalid(
                "group_sum",
                format!("{n} rows not divisible into groups of {k}"),
            ));
        }
        let xd = self.data(x);
        let mut out = vec![S::zero(); (n / k) * d];
        for (r, row) in xd.chunks(d.max(1)).enumerate().take(n) {
            let dst = &mut out[(r / k) * d..(r / k + 1) * d];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::matrix(n / k, d, out)?;
        let rg = self.rg(&[x]);
        self.push("group_sum", Op::GroupSum(x, k), value, rg)
    }

    /// Repeats every row `k` times in place: `g x d -> (g*k) x d`.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2("repeat_rows")?;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * k * d);
        for r in 0..n {
            for _ in 0..k {
                out.extend_from_slice(&xd[r * d..(r + 1) * d]);
            }
        }
        let value = Tensor::matrix(n * k, d, out)?;
        let rg = self.rg(&[x]);
        self.push("repeat_rows", Op::RepeatRows(x, k), value, rg)
    }

    /// Per-row sum of a matrix, as a vector.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2("row_sum")?;
        let out = self
            .data(x)
            .chunks(d.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        let rg = self.rg(&[x]);
        self.push("row_sum", Op::RowSum(x), Tensor::vector(out), rg)
    }

    /// Row-wise dot products of two equal-shape matrices.
    pub fn row_dots(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.row_sum(p)
    }

    /// Row `i` of `m` multiplied by `w[i]`, differentiable in both.
    pub fn mul_rows(&mut self, m: Var, w: Var) -> Result<Var> {
        let (n, d) = self.value(m).dims2("mul_rows")?;
        if self.value(w).len() != n {
            return Err(AutogradError::ShapeMismatch {
                op: "mul_rows",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let wd = self.data(w);
        let out = self
            .data(m)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wd[i / d])
            .collect();
        let value = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[m, w]);
        self.push("mul_rows", Op::MulRows(m, w), value, rg)
    }

    /// Softmax within each run of `k` consecutive entries of a vector.
    /// Masked entries output 0; a fully masked run outputs all zeros.
    pub fn softmax_groups(&mut self, x: Var, k: usize, mask: &[bool]) -> Result<Var> {
        let xd = self.data(x);
        let n = xd.len();
        if k == 0 || n % k != 0 || mask.len() != n {
            return Err(AutogradError::ShapeMismatch {
                op: "softmax_groups",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len(), k],
            });
        }
        let mut out = vec![S::zero(); n];
        for start in (0..n).step_by(k) {
            let idx = start..start + k;
            let Some(max) = idx
                .clone()
                .filter(|&i| mask[i])
                .map(|i| xd[i])
                .fold(None, |acc: Option<S>, v| Some(acc.map_or(v, |a| a.max(v))))
            else {
                continue;
            };
            let mut total = S::zero();
            for i in idx.clone().filter(|&i| mask[i]) {
                out[i] = (xd[i] - max).exp();
                total += out[i];
            }
            for i in idx {
                out[i] /= total;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax_groups", Op::SoftmaxGroups(x, k), value, rg)
    }

    /// Euclidean norm of each row. The backward denominator is floored at [`NORM_FLOOR`].
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2("row_norms")?;
        let out = self
            .data(x)
            .chunks(d.max(1))
            .map(|r| r.iter().map(|&v| v * v).sum::<S>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        self.push("row_norms", Op::RowNorms(x), Tensor::vector(out), rg)
    }

    /// Each row divided by `max(|row|, NORM_FLOOR)`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("normalize_rows")?;
        let floor = S::lit(NORM_FLOOR);
        let mut denoms = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in self.data(x).chunks(d.max(1)) {
            let norm = r.iter().map(|&v| v * v).sum::<S>().sqrt();
            let c = norm <= floor;
            let den = if c { floor } else { norm };
            out.extend(r.iter().map(|&v| v / den));
            denoms.push(den);
            clamped.push(c);
        }
        let value = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[x]);
        self.push(
            "normalize_rows",
            Op::NormalizeRows { x, denoms, clamped },
            value,
            rg,
        )
    }

    /// Reverse sweep from a single-element `loss`. Replaces any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutogradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// `out[i * n + j] = <a_i, b_j>` for rows of width `k`, where `n` is the row count of `b`.
/// Four rows of `b` are handled together so the inner loop keeps four independent sums.
fn rows_dot_rows<S: Scalar>(a: &[S], b: &[S], k: usize, out: &mut [S]) {
    if k == 0 {
        return;
    }
    let n = b.len() / k;
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n.max(1))) {
        let mut j = 0;
        while j + 4 <= n {
            let (b0, b1, b2, b3) = (
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            );
            let mut acc = [S::zero(); 4];
            for p in 0..k {
                let x = arow[p];
                acc[0] += x * b0[p];
                acc[1] += x * b1[p];
                acc[2] += x * b2[p];
                acc[3] += x * b3[p];
            }
            orow[j..j + 4].copy_from_slice(&acc);
            j += 4;
        }
        for (jj, o) in orow.iter_mut().enumerate().skip(j) {
            let brow = &b[jj * k..(jj + 1) * k];
            *o = arow
                .iter()
                .zip(brow)
                .fold(S::zero(), |s, (&x, &y)| s + x * y);
        }
    }
}

/// Lazily allocated gradient buffer of `v`, or `None` if `v` needs no gradient.
fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
}

fn accumulate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], v: Var, g: &[S], k: S) {
    if let Some(dst) = slot(nodes, grads, v) {
        for (d, &x) in dst.iter_mut().zip(g) {
            *d += k * x;
        }
    }
}

fn propagate<S: Scalar>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let y = nodes[i].value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g, S::one());
            accumulate(nodes, grads, *b, g, S::one());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g, S::one());
            accumulate(nodes, grads, *b, g, -S::one());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(dst) = slot(nodes, grads, *a) {
                for ((d, &gi), &bi) in dst.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(dst) = slot(nodes, grads, *b) {
                for ((d, &gi), &ai) in dst.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::Affine(x, scale) => accumulate(nodes, grads, *x, g, *scale),
        Op::ScaleBy(v, s) => {
            let k = val(*s)[0];
            accumulate(nodes, grads, *v, g, k);
            if let Some(dst) = slot(nodes, grads, *s) {
                dst[0] += g.iter().zip(val(*v)).map(|(&gi, &vi)| gi * vi).sum::<S>();
            }
        }
        Op::Dot(a, b) => {
            accumulate(nodes, grads, *a, val(*b), g[0]);
            accumulate(nodes, grads, *b, val(*a), g[0]);
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(dst) = slot(nodes, grads, *a) {
                let mut prod = vec![S::zero(); m * k];
                rows_dot_rows(g, bv, n, &mut prod);
                for (d, p) in dst.iter_mut().zip(prod) {
                    *d += p;
                }
            }
            if let Some(dst) = slot(nodes, grads, *b) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let arp = av[r * k + p];
                        if arp == S::zero() {
                            continue;
                        }
                        for (d, &gv) in dst[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += arp * gv;
                        }
                    }
                }
            }
        }
        Op::MatVec(w, x) => {
            let k = nodes[w.0].value.shape()[1];
            let (wv, xv) = (val(*w), val(*x));
            if let Some(dst) = slot(nodes, grads, *w) {
                for (r, &gr) in g.iter().enumerate() {
                    for (d, &xj) in dst[r * k..(r + 1) * k].iter_mut().zip(xv) {
                        *d += gr * xj;
                    }
                }
            }
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, &gr) in g.iter().enumerate() {
                    for (d, &wij) in dst.iter_mut().zip(&wv[r * k..(r + 1) * k]) {
                        *d += gr * wij;
                    }
                }
            }
        }
        Op::AddRowBroadcast(x, b) => {
            accumulate(nodes, grads, *x, g, S::one());
            if let Some(dst) = slot(nodes, grads, *b) {
                let n = dst.len();
                for (idx, &gv) in g.iter().enumerate() {
                    dst[idx % n] += gv;
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                accumulate(nodes, grads, *p, &g[offset..offset + len], S::one());
                offset += len;
            }
        }
        Op::Slice(x, start) => {
            if let Some(dst) = slot(nodes, grads, *x) {
                for (d, &gv) in dst[*start..*start + g.len()].iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g, S::one()),
        Op::Gather(table, rows) => {
            let c = nodes[table.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *table) {
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &gv) in dst[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                    {
                        *d += gv;
                    }
                }
            }
        }
        Op::ScaleRows(m, w) => {
            let d = nodes[m.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *m) {
                for (idx, (dv, &gv)) in dst.iter_mut().zip(g).enumerate() {
                    *dv += w[idx / d] * gv;
                }
            }
        }
        Op::WeightedRowSum(m, w) => {
            let d = nodes[m.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *m) {
                for (r, &wr) in w.iter().enumerate() {
                    if wr == S::zero() {
                        continue;
                    }
                    for (dv, &gv) in dst[r * d..(r + 1) * d].iter_mut().zip(g) {
                        *dv += wr * gv;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let inner: S = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
                    *d += yi * (gi - inner);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let n = nodes[x.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((drow, yrow), grow) in dst.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let inner: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += yi * (gi - inner);
                    }
                }
            }
        }
        Op::SelectColumn(x, j) => {
            let n = nodes[x.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, &gv) in g.iter().enumerate() {
                    dst[r * n + j] += gv;
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
                    *d += gi * yi * (S::one() - yi);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
                    *d += gi * (S::one() - yi * yi);
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((d, &xi), &gi) in dst.iter_mut().zip(xv).zip(g) {
                    if xi > S::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::Ln { x, lo, hi } => {
            let xv = val(*x);
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((d, &xi), &gi) in dst.iter_mut().zip(xv).zip(g) {
                    if xi > *lo && xi < *hi {
                        *d += gi / xi;
                    }
                }
            }
        }
        Op::Distance(a, b) => {
            let denom = y[0].max(S::lit(NORM_FLOOR));
            let k = g[0] / denom;
            let diff: Vec<S> = val(*a).iter().zip(val(*b)).map(|(&p, &q)| p - q).collect();
            accumulate(nodes, grads, *a, &diff, k);
            accumulate(nodes, grads, *b, &diff, -k);
        }
        Op::Normalize { x, denom, clamped } => {
            if let Some(dst) = slot(nodes, grads, *x) {
                if *clamped {
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d += gi / *denom;
                    }
                } else {
                    let inner: S = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
                        *d += (gi - yi * inner) / *denom;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dst) = slot(nodes, grads, *x) {
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dst) = slot(nodes, grads, *x) {
                let k = g[0] / S::from_usize(dst.len()).unwrap();
                dst.iter_mut().for_each(|d| *d += k);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[0];
            let (av, bv) = (val(*a), val(*b));
            if let Some(dst) = slot(nodes, grads, *a) {
                for r in 0..m {
                    for j in 0..n {
                        let gv = g[r * n + j];
                        if gv == S::zero() {
                            continue;
                        }
                        for (d, &bj) in dst[r * k..(r + 1) * k]
                            .iter_mut()
                            .zip(&bv[j * k..(j + 1) * k])
                        {
                            *d += gv * bj;
                        }
                    }
                }
            }
            if let Some(dst) = slot(nodes, grads, *b) {
                for r in 0..m {
                    let arow = &av[r * k..(r + 1) * k];
                    for j in 0..n {
                        let gv = g[r * n + j];
                        if gv == S::zero() {
                            continue;
                        }
                        for (d, &ai) in dst[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *d += gv * ai;
                        }
                    }
                }
            }
        }
        Op::HConcat(parts) => {
            let total = nodes[i].value.shape()[1];
            let mut offset = 0;
            for p in parts {
                let c = nodes[p.0].value.shape()[1];
                if let Some(dst) = slot(nodes, grads, *p) {
                    for (r, drow) in dst.chunks_mut(c.max(1)).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + c];
                        for (d, &gv) in drow.iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
                offset += c;
            }
        }
        Op::GroupSum(x, k) => {
            let d = nodes[x.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, drow) in dst.chunks_mut(d.max(1)).enumerate() {
                    let src = &g[(r / k) * d..(r / k + 1) * d];
                    for (dv, &gv) in drow.iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::RepeatRows(x, k) => {
            let d = nodes[x.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, grow) in g.chunks(d.max(1)).enumerate() {
                    for (dv, &gv) in dst[(r / k) * d..(r / k + 1) * d].iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::RowSum(x) => {
            let d = nodes[x.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *x) {
                for (idx, dv) in dst.iter_mut().enumerate() {
                    *dv += g[idx / d];
                }
            }
        }
        Op::MulRows(m, w) => {
            let d = nodes[m.0].value.shape()[1];
            let (mv, wv) = (val(*m), val(*w));
            if let Some(dst) = slot(nodes, grads, *m) {
                for (idx, (dv, &gv)) in dst.iter_mut().zip(g).enumerate() {
                    *dv += gv * wv[idx / d];
                }
            }
            if let Some(dst) = slot(nodes, grads, *w) {
                for (r, dv) in dst.iter_mut().enumerate() {
                    *dv += g[r * d..(r + 1) * d]
                        .iter()
                        .zip(&mv[r * d..(r + 1) * d])
                        .map(|(&a, &b)| a * b)
                        .sum::<S>();
                }
            }
        }
        Op::SoftmaxGroups(x, k) => {
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((drow, yrow), grow) in dst.chunks_mut(*k).zip(y.chunks(*k)).zip(g.chunks(*k)) {
                    let inner: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += yi * (gi - inner);
                    }
                }
            }
        }
        Op::RowNorms(x) => {
            let d = nodes[x.0].value.shape()[1];
            let xv = val(*x);
            if let Some(dst) = slot(nodes, grads, *x) {
                let floor = S::lit(NORM_FLOOR);
                for (r, (&yr, &gr)) in y.iter().zip(g).enumerate() {
                    let k = gr / yr.max(floor);
                    for (dv, &xi) in dst[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&xv[r * d..(r + 1) * d])
                    {
                        *dv += k * xi;
                    }
                }
            }
        }
        Op::NormalizeRows { x, denoms, clamped } => {
            let d = nodes[x.0].value.shape()[1];
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, drow) in dst.chunks_mut(d.max(1)).enumerate() {
                    let (yrow, grow) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let inner: S = if clamped[r] {
                        S::zero()
                    } else {
                        yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum()
                    };
                    for ((dv, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv += (gi - yi * inner) / denoms[r];
                    }
                }
            }
        }
    }
}
