use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{order_free_sum, rows_cols, Gradients, ParamId, ParamStore, Tensor};
use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user supplied elementwise primitive:
/// `(input, output, output_grad) -> input_grad`.
pub type CustomBackward = Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>>;

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    Row(Var, usize),
    Slice(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    SegmentSoftmax(Var, Vec<usize>),
    RepeatSegments(Var, Vec<usize>),
    Mean(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    GatherSum(Var, Vec<usize>),
    Embedding(Var, usize),
    Dropout(Var, Vec<f64>),
    AddN(Vec<Var>),
    Attend(Var, Var),
    Custom(Var, CustomBackward),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Records one forward pass. Parameters are borrowed from a [`ParamStore`]
/// and never copied onto the tape.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Tape<'p> {
    /// Inference tape: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            rng: None,
        }
    }

    /// Training tape: dropout draws its keep mask from `rng`.
    pub fn with_dropout_rng(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).tensor.data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape node shapes are valid")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if cfg!(debug_assertions) && !value.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let value = t.into_data();
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Const,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.constant(Tensor::vector(data))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copies the value of `x` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.tensor(x);
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `w · x` for a matrix `w` of shape `[m, n]` and vector `x` of length `n`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(self.shape_err("matvec", w, x));
        }
        let (m, n) = (sw[0], sw[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let out = (0..m)
            .map(|i| wv[i * n..(i + 1) * n].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push("matvec", vec![m], out, Op::MatVec(w, x))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(self.shape_err("add_row", m, v));
        }
        let n = sm[1];
        let vv = self.value(v);
        let out = self.value(m).iter().enumerate().map(|(k, x)| x + vv[k % n]).collect();
        let shape = sm.to_vec();
        self.push("add_row", shape, out, Op::AddRow(m, v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar(x))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(self.shape_err("concat", parts[0], p));
            }
            out.extend_from_slice(self.value(p));
        }
        let len = out.len();
        self.push("concat", vec![len], out, Op::Concat(parts.to_vec()))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(TensorError::Contract("stack_rows of zero tensors".into()));
        }
        let n = self.shape(rows[0]).to_vec();
        let mut out = Vec::with_capacity(rows.len() * n[0]);
        for &r in rows {
            if self.shape(r) != n.as_slice() || n.len() != 1 {
                return Err(self.shape_err("stack_rows", rows[0], r));
            }
            out.extend_from_slice(self.value(r));
        }
        self.push("stack_rows", vec![rows.len(), n[0]], out, Op::StackRows(rows.to_vec()))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let (m, ca, cb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push("concat_cols", vec![m, ca + cb], out, Op::ConcatCols(a, b))
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let sm = self.shape(m);
        if sm.len() != 2 {
            return Err(TensorError::Shape {
                op: "row",
                lhs: sm.to_vec(),
                rhs: vec![i],
            });
        }
        if i >= sm[0] {
            return Err(TensorError::Index {
                op: "row",
                index: i,
                len: sm[0],
            });
        }
        let n = sm[1];
        let out = self.value(m)[i * n..(i + 1) * n].to_vec();
        self.push("row", vec![n], out, Op::Row(m, i))
    }

    /// Contiguous sub-vector `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 1 || start + len > sx[0] || len == 0 {
            return Err(TensorError::Shape {
                op: "slice",
                lhs: sx.to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.value(x)[start..start + len].to_vec();
        self.push("slice", vec![len], out, Op::Slice(x, start))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// Softmax along the last axis (per row for matrices), max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            softmax_into(&xv[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    /// Row-wise softmax of a square score matrix over the off-diagonal
    /// entries, i.e. each item attends to every other item of its set.
    /// A 1×1 input has an empty attention set and yields a zero row.
    pub fn softmax_excluding_self(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != sx[1] {
            return Err(TensorError::Shape {
                op: "softmax_excluding_self",
                lhs: sx.to_vec(),
                rhs: vec![],
            });
        }
        let n = sx[0];
        let xv = self.value(x);
        let mut out = vec![0.0; n * n];
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * n..(i + 1) * n];
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            terms.clear();
            for (j, v) in row.iter().enumerate() {
                if j != i {
                    let e = (v - max).exp();
                    out[i * n + j] = e;
                    terms.push(e);
                }
            }
            let z = order_free_sum(&mut terms);
            out[i * n..(i + 1) * n].iter_mut().for_each(|e| *e /= z);
        }
        self.push("softmax_excluding_self", vec![n, n], out, Op::MaskedSoftmax(x))
    }

    /// Independent softmax over consecutive segments of a vector.
    pub fn segment_softmax(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 1 || lens.iter().sum::<usize>() != sx[0] || lens.contains(&0) {
            return Err(TensorError::Shape {
                op: "segment_softmax",
                lhs: sx.to_vec(),
                rhs: lens.to_vec(),
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut start = 0;
        for &len in lens {
            softmax_into(&xv[start..start + len], &mut out[start..start + len]);
            start += len;
        }
        let shape = sx.to_vec();
        self.push("segment_softmax", shape, out, Op::SegmentSoftmax(x, lens.to_vec()))
    }

    /// Repeats `x[i]` `lens[i]` times.
    pub fn repeat_segments(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 1 || sx[0] != lens.len() {
            return Err(TensorError::Shape {
                op: "repeat_segments",
                lhs: sx.to_vec(),
                rhs: lens.to_vec(),
            });
        }
        let xv = self.value(x);
        let out: Vec<f64> = xv
            .iter()
            .zip(lens)
            .flat_map(|(v, &n)| std::iter::repeat_n(*v, n))
            .collect();
        let len = out.len();
        self.push("repeat_segments", vec![len], out, Op::RepeatSegments(x, lens.to_vec()))
    }

    /// Mean of a matrix over `axis` (0: average rows, 1: average columns).
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || axis > 1 {
            return Err(TensorError::Shape {
                op: "mean_over_axis",
                lhs: sx.to_vec(),
                rhs: vec![axis],
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let xv = self.value(x);
        let out: Vec<f64> = if axis == 0 {
            (0..n).map(|j| (0..m).map(|i| xv[i * n + j]).sum::<f64>() / m as f64).collect()
        } else {
            (0..m).map(|i| xv[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect()
        };
        let len = out.len();
        self.push("mean_over_axis", vec![len], out, Op::Mean(x, axis))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("dot", a, b));
        }
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push("dot", vec![1], vec![s], Op::Dot(a, b))
    }

    /// Scalar `Σ_k x[indices[k]]`; an empty index list gives 0.
    pub fn gather_sum(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(TensorError::Index {
                op: "gather_sum",
                index: bad,
                len: xv.len(),
            });
        }
        let s = indices.iter().map(|&i| xv[i]).sum();
        self.push("gather_sum", vec![1], vec![s], Op::GatherSum(x, indices.to_vec()))
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        self.gather_sum(x, &[index])
    }

    /// Row `index` of an embedding matrix.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(TensorError::Shape {
                op: "embedding_lookup",
                lhs: st.to_vec(),
                rhs: vec![index],
            });
        }
        if index >= st[0] {
            return Err(TensorError::Index {
                op: "embedding_lookup",
                index,
                len: st[0],
            });
        }
        let n = st[1];
        let out = self.value(table)[index * n..(index + 1) * n].to_vec();
        self.push("embedding_lookup", vec![n], out, Op::Embedding(table, index))
    }

    /// Inverted dropout: zeroes each coordinate with probability `p` and
    /// rescales survivors by `1 / (1 - p)`. Identity on inference tapes.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].shape.iter().product();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout(x, mask))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TensorError::Contract("add_n of zero tensors".into()));
        };
        let mut out = self.value(first).to_vec();
        for &x in &xs[1..] {
            if self.shape(x) != self.shape(first) {
                return Err(self.shape_err("add_n", first, x));
            }
            out.iter_mut().zip(self.value(x)).for_each(|(o, v)| *o += v);
        }
        let shape = self.shape(first).to_vec();
        self.push("add_n", shape, out, Op::AddN(xs.to_vec()))
    }

    /// Attention read-out `weights · values`: `weights` is `[n]` or `[m, n]`,
    /// `values` is `[n, h]`. Each output coordinate is summed order-free so
    /// that permuting the attended set permutes nothing in the result.
    pub fn attend(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(weights).to_vec(), self.shape(values));
        let (m, n) = rows_cols(&sw);
        if sw.len() > 2 || sv.len() != 2 || sv[0] != n {
            return Err(self.shape_err("attend", weights, values));
        }
        let h = sv[1];
        let (wv, vv) = (self.value(weights), self.value(values));
        let mut out = vec![0.0; m * h];
        let mut terms = Vec::with_capacity(n);
        for i in 0..m {
            for k in 0..h {
                terms.clear();
                terms.extend((0..n).map(|j| wv[i * n + j] * vv[j * h + k]));
                out[i * h + k] = order_free_sum(&mut terms);
            }
        }
        let shape = if sw.len() == 1 { vec![h] } else { vec![m, h] };
        self.push("attend", shape, out, Op::Attend(weights, values))
    }

    /// Elementwise primitive with a caller-supplied forward map and
    /// vector-Jacobian product.
    pub fn custom_unary(&mut self, x: Var, forward: impl Fn(f64) -> f64, backward: CustomBackward) -> Result<Var> {
        let out = self.value(x).iter().map(|v| forward(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("custom", shape, out, Op::Custom(x, backward))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// parameter of the borrowed store (zeros where `loss` does not depend
    /// on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    out.get_mut(*id).iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let (av, bv) = (self.value(*a), self.value(*b));
                    {
                        let da = acc(&mut grads, *a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] += dy[i * n..(i + 1) * n].iter().zip(brow).map(|(d, b)| d * b).sum::<f64>();
                            }
                        }
                    }
                    let db = acc(&mut grads, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (g, d) in db[p * n..(p + 1) * n].iter_mut().zip(&dy[i * n..(i + 1) * n]) {
                                *g += x * d;
                            }
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    {
                        let dw = acc(&mut grads, *w, m * n);
                        for i in 0..m {
                            if dy[i] == 0.0 {
                                continue;
                            }
                            for (g, xj) in dw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                                *g += dy[i] * xj;
                            }
                        }
                    }
                    let dx = acc(&mut grads, *x, n);
                    for i in 0..m {
                        if dy[i] == 0.0 {
                            continue;
                        }
                        for (g, wij) in dx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *g += dy[i] * wij;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let da = acc(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += dy[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0);
                    add_into(acc(&mut grads, *b, dy.len()), &dy, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0);
                    add_into(acc(&mut grads, *b, dy.len()), &dy, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = acc(&mut grads, *a, dy.len());
                    da.iter_mut().zip(&dy).zip(bv).for_each(|((g, d), b)| *g += d * b);
                    let db = acc(&mut grads, *b, dy.len());
                    db.iter_mut().zip(&dy).zip(av).for_each(|((g, d), a)| *g += d * a);
                }
                Op::AddRow(m, v) => {
                    add_into(acc(&mut grads, *m, dy.len()), &dy, 1.0);
                    let n = self.shape(*v)[0];
                    let dv = acc(&mut grads, *v, n);
                    for (k, d) in dy.iter().enumerate() {
                        dv[k % n] += d;
                    }
                }
                Op::Scale(x, c) => add_into(acc(&mut grads, *x, dy.len()), &dy, *c),
                Op::AddScalar(x) => add_into(acc(&mut grads, *x, dy.len()), &dy, 1.0),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p)[0];
                        add_into(acc(&mut grads, *p, n), &dy[start..start + n], 1.0);
                        start += n;
                    }
                }
                Op::StackRows(rows) => {
                    let n = node.shape[1];
                    for (i, r) in rows.iter().enumerate() {
                        add_into(acc(&mut grads, *r, n), &dy[i * n..(i + 1) * n], 1.0);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let cb = self.shape(*b)[1];
                    {
                        let da = acc(&mut grads, *a, m * ca);
                        for i in 0..m {
                            add_into(&mut da[i * ca..(i + 1) * ca], &dy[i * (ca + cb)..i * (ca + cb) + ca], 1.0);
                        }
                    }
                    let db = acc(&mut grads, *b, m * cb);
                    for i in 0..m {
                        add_into(&mut db[i * cb..(i + 1) * cb], &dy[i * (ca + cb) + ca..(i + 1) * (ca + cb)], 1.0);
                    }
                }
                Op::Row(m, i) => {
                    let n = node.shape[0];
                    let len = self.shape(*m).iter().product();
                    let dm = acc(&mut grads, *m, len);
                    add_into(&mut dm[i * n..(i + 1) * n], &dy, 1.0);
                }
                Op::Slice(x, start) => {
                    let len = self.shape(*x)[0];
                    let dx = acc(&mut grads, *x, len);
                    add_into(&mut dx[*start..*start + dy.len()], &dy, 1.0);
                }
                Op::Tanh(x) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    dx.iter_mut().zip(&dy).zip(y).for_each(|((g, d), t)| *g += d * (1.0 - t * t));
                }
                Op::Sigmoid(x) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    dx.iter_mut().zip(&dy).zip(y).for_each(|((g, d), s)| *g += d * s * (1.0 - s));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = acc(&mut grads, *x, dy.len());
                    dx.iter_mut()
                        .zip(&dy)
                        .zip(xv)
                        .for_each(|((g, d), v)| *g += if *v > 0.0 { *d } else { 0.0 });
                }
                Op::Exp(x) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    dx.iter_mut().zip(&dy).zip(y).for_each(|((g, d), e)| *g += d * e);
                }
                Op::Log(x) => {
                    let xv = self.value(*x);
                    let dx = acc(&mut grads, *x, dy.len());
                    dx.iter_mut().zip(&dy).zip(xv).for_each(|((g, d), v)| *g += d / v);
                }
                Op::Softmax(x) => {
                    let (rows, cols) = rows_cols(&node.shape);
                    let dx = acc(&mut grads, *x, dy.len());
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        softmax_backward(&y[s.clone()], &dy[s.clone()], &mut dx[s]);
                    }
                }
                Op::MaskedSoftmax(x) => {
                    let n = node.shape[0];
                    let dx = acc(&mut grads, *x, dy.len());
                    for r in 0..n {
                        let s = r * n..(r + 1) * n;
                        softmax_backward(&y[s.clone()], &dy[s.clone()], &mut dx[s]);
                    }
                }
                Op::SegmentSoftmax(x, lens) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    let mut start = 0;
                    for &len in lens {
                        let s = start..start + len;
                        softmax_backward(&y[s.clone()], &dy[s.clone()], &mut dx[s]);
                        start += len;
                    }
                }
                Op::RepeatSegments(x, lens) => {
                    let dx = acc(&mut grads, *x, lens.len());
                    let mut start = 0;
                    for (g, &len) in dx.iter_mut().zip(lens) {
                        *g += dy[start..start + len].iter().sum::<f64>();
                        start += len;
                    }
                }
                Op::Mean(x, axis) => {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let dx = acc(&mut grads, *x, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += if *axis == 0 { dy[j] / m as f64 } else { dy[i] / n as f64 };
                        }
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    acc(&mut grads, *x, len).iter_mut().for_each(|g| *g += dy[0]);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    add_into(acc(&mut grads, *a, bv.len()), bv, dy[0]);
                    add_into(acc(&mut grads, *b, av.len()), av, dy[0]);
                }
                Op::GatherSum(x, indices) => {
                    let len = self.value(*x).len();
                    let dx = acc(&mut grads, *x, len);
                    for &i in indices {
                        dx[i] += dy[0];
                    }
                }
                Op::Embedding(table, index) => {
                    let len = self.shape(*table).iter().product();
                    let n = node.shape[0];
                    let dt = acc(&mut grads, *table, len);
                    add_into(&mut dt[index * n..(index + 1) * n], &dy, 1.0);
                }
                Op::Dropout(x, mask) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    dx.iter_mut().zip(&dy).zip(mask).for_each(|((g, d), m)| *g += d * m);
                }
                Op::AddN(xs) => {
                    for x in xs {
                        add_into(acc(&mut grads, *x, dy.len()), &dy, 1.0);
                    }
                }
                Op::Attend(w, v) => {
                    let (m, n) = rows_cols(self.shape(*w));
                    let h = self.shape(*v)[1];
                    let (wv, vv) = (self.value(*w), self.value(*v));
                    {
                        let dw = acc(&mut grads, *w, m * n);
                        for i in 0..m {
                            for j in 0..n {
                                dw[i * n + j] += dy[i * h..(i + 1) * h]
                                    .iter()
                                    .zip(&vv[j * h..(j + 1) * h])
                                    .map(|(d, v)| d * v)
                                    .sum::<f64>();
                            }
                        }
                    }
                    let dv = acc(&mut grads, *v, n * h);
                    for i in 0..m {
                        for j in 0..n {
                            let a = wv[i * n + j];
                            for k in 0..h {
                                dv[j * h + k] += a * dy[i * h + k];
                            }
                        }
                    }
                }
                Op::Custom(x, vjp) => {
                    let dxv = vjp(self.value(*x), y, &dy);
                    add_into(acc(&mut grads, *x, dy.len()), &dxv, 1.0);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let inner: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((g, yi), di) in dx.iter_mut().zip(y).zip(dy) {
        *g += yi * (di - inner);
    }
}
