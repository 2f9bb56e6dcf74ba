//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A `Graph` records every operation in execution order; since parents always
//! precede children on the tape, a single reverse sweep propagates adjoints.
//! Ops are an enum rather than closures so the backward pass is one `match`
//! and every derivative is explicit and auditable. All shapes are matrices
//! (rank-1 tensors act as single rows).

use super::tensor::{mat_mul, mat_mul_nt, mat_mul_tn, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Positive/negative candidate columns for one subject row of a
/// subset-contrastive loss. Subjects with an empty positive set are skipped.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    DivElem(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// Add a constant tensor (no gradient to it); used for masks and targets.
    AddConst(Var),
    AddRowBroadcast(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    SubsetNce { logits: Var, sets: Vec<PairSet> },
    SmoothL1 { x: Var, beta: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    NarrowCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow { x: Var, row: usize },
    NarrowRows { x: Var, start: usize, len: usize },
    SliceFlat { x: Var, offset: usize, shape: Vec<usize> },
    Pick { x: Var, index: usize },
    L2NormalizeRows(Var),
}

struct Node {
    value: Tensor,
    aux: Option<Tensor>, // op-specific saved constant (mask, target, ...)
    op: Op,
}

/// Gradients keyed by tape id, produced by `Graph::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().expect("no gradient recorded for var")
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, aux: None, op });
        Var(self.nodes.len() - 1)
    }

    fn push_aux(&mut self, value: Tensor, aux: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, aux: Some(aux), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar_value on tensor of shape {:?}", t.shape);
        t.data[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.rows_cols()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { trainable: false })
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf; the tensor is copied onto the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf { trainable: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "sub shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "mul_elem shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::MulElem(a, b))
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "div_elem shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::DivElem(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| -x).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x + c).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::AddScalar(a, c))
    }

    /// `a + mask` where `mask` is a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, mask: &Tensor) -> Var {
        assert_eq!(self.dims(a), mask.rows_cols(), "add_const shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(mask);
        self.push(v, Op::AddConst(a))
    }

    /// `x[n,d] + bias[1,d]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let (n, d) = self.dims(x);
        let (br, bd) = self.dims(bias);
        assert!(br == 1 && bd == d, "bias shape mismatch: {:?}", self.value(bias).shape);
        let bdata = self.value(bias).data.clone();
        let mut v = self.value(x).clone();
        for r in 0..n {
            for c in 0..d {
                v.data[r * d + c] += bdata[c];
            }
        }
        self.push(v, Op::AddRowBroadcast(x, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = mat_mul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = mat_mul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| sigmoid_fwd(*x)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Ln(a))
    }

    /// Elementwise min; ties route the gradient to the first argument.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "minimum shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Minimum(a, b))
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "maximum shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| if x >= y { *x } else { *y })
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Maximum(a, b))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll(a))
    }

    /// Column means: [n,d] -> [1,d].
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, d) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += av.data[r * d + c];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(Tensor::new(vec![1, d], out), Op::MeanRows(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, d) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &av.data[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (row[c] - m).exp();
                out[r * d + c] = e;
                z += e;
            }
            for c in 0..d {
                out[r * d + c] /= z;
            }
        }
        self.push(Tensor::new(vec![n, d], out), Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned gain/bias (shape [1,d]).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (n, d) = self.dims(x);
        assert_eq!(self.dims(gain), (1, d), "layer_norm gain shape");
        assert_eq!(self.dims(bias), (1, d), "layer_norm bias shape");
        let xv = self.value(x);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv.data[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mu) * inv * g[c] + b[c];
            }
        }
        self.push(Tensor::new(vec![n, d], out), Op::LayerNorm { x, gain, bias, eps })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, d) = self.dims(logits);
        assert_eq!(n, targets.len(), "one target per logit row");
        assert!(!targets.is_empty(), "cross_entropy_rows on empty targets");
        let lv = self.value(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < d, "target {t} out of vocab {d}");
            let row = &lv.data[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / n as f64;
        self.push(Tensor::scalar(loss), Op::CrossEntropyRows { logits, targets: targets.to_vec() })
    }

    /// Subset contrastive objective over a logit matrix: for each subject row
    /// `i` with positives P and negatives N, averages
    /// `log( exp(z_ij) / (exp(z_ij) + sum_{k in N} exp(z_ik)) )` over `j in P`
    /// and returns the negated mean over subjects with non-empty P.
    pub fn subset_nce(&mut self, logits: Var, sets: &[PairSet]) -> Var {
        let (n, _d) = self.dims(logits);
        assert_eq!(n, sets.len(), "one pair set per logit row");
        let lv = self.value(logits);
        let subjects = sets.iter().filter(|s| !s.positives.is_empty()).count();
        assert!(subjects > 0, "subset_nce with no trained subjects");
        let mut total = 0.0;
        for (i, set) in sets.iter().enumerate() {
            if set.positives.is_empty() {
                continue;
            }
            let row = |c: usize| lv.at(i, c);
            let mut subject_sum = 0.0;
            for &j in &set.positives {
                let mut m = row(j);
                for &k in &set.negatives {
                    m = m.max(row(k));
                }
                let mut denom = (row(j) - m).exp();
                for &k in &set.negatives {
                    denom += (row(k) - m).exp();
                }
                subject_sum += row(j) - (m + denom.ln());
            }
            total += subject_sum / set.positives.len() as f64;
        }
        let loss = -total / subjects as f64;
        self.push(Tensor::scalar(loss), Op::SubsetNce { logits, sets: sets.to_vec() })
    }

    /// Summed smooth-L1 distance between `x` and a constant target.
    pub fn smooth_l1(&mut self, x: Var, target: &Tensor, beta: f64) -> Var {
        assert_eq!(self.dims(x), target.rows_cols(), "smooth_l1 shape mismatch");
        assert!(beta > 0.0, "smooth_l1 beta must be positive");
        let xv = self.value(x);
        let mut total = 0.0;
        for (a, t) in xv.data.iter().zip(&target.data) {
            let d = (a - t).abs();
            total += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        }
        self.push_aux(Tensor::scalar(total), target.clone(), Op::SmoothL1 { x, beta })
    }

    /// Row gather: out[p] = table[ids[p]].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.dims(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id {id} out of table {v}");
            out.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        self.push(Tensor::new(vec![ids.len(), d], out), Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.dims(x);
        assert!(start + len <= d, "narrow_cols out of range");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.data[r * d + start..r * d + start + len]);
        }
        self.push(Tensor::new(vec![n, len], out), Op::NarrowCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                let (pn, pd) = self.dims(*p);
                assert_eq!(pn, n, "concat_cols row mismatch");
                out.extend_from_slice(&self.value(*p).data[r * pd..(r + 1) * pd]);
            }
        }
        self.push(Tensor::new(vec![n, total], out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.dims(parts[0]).1;
        let total: usize = parts.iter().map(|p| self.dims(*p).0).sum();
        let mut out = Vec::with_capacity(total * d);
        for p in parts {
            let (_, pd) = self.dims(*p);
            assert_eq!(pd, d, "concat_rows col mismatch");
            out.extend_from_slice(&self.value(*p).data);
        }
        self.push(Tensor::new(vec![total, d], out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let (n, d) = self.dims(x);
        assert!(row < n, "select_row out of range");
        let data = self.value(x).data[row * d..(row + 1) * d].to_vec();
        self.push(Tensor::new(vec![1, d], data), Op::SelectRow { x, row })
    }

    /// Contiguous row slice: rows [start, start+len).
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.dims(x);
        assert!(start + len <= n, "narrow_rows out of range");
        let data = self.value(x).data[start * d..(start + len) * d].to_vec();
        self.push(Tensor::new(vec![len, d], data), Op::NarrowRows { x, start, len })
    }

    /// Reinterpret a contiguous span of a flat tensor as `shape`.
    pub fn slice_flat(&mut self, x: Var, offset: usize, shape: &[usize]) -> Var {
        let len: usize = shape.iter().product();
        let xv = self.value(x);
        assert!(offset + len <= xv.numel(), "slice_flat out of range");
        let data = xv.data[offset..offset + len].to_vec();
        self.push(
            Tensor::new(shape.to_vec(), data),
            Op::SliceFlat { x, offset, shape: shape.to_vec() },
        )
    }

    /// Extract one element (by flat index) as a scalar node.
    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let xv = self.value(x);
        assert!(index < xv.numel(), "pick out of range");
        let v = xv.data[index];
        self.push(Tensor::scalar(v), Op::Pick { x, index })
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv.data[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
        }
        self.push(Tensor::new(vec![n, d], out), Op::L2NormalizeRows(x))
    }

    /// Reverse sweep from a scalar root; returns adjoints for every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                let mut n = g.clone();
                n.scale_assign(-1.0);
                acc(grads, *b, n);
            }
            Op::MulElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::DivElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&bv.data).map(|(x, y)| x / y).collect(),
                );
                let db = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(av.data.iter().zip(&bv.data))
                        .map(|(gx, (x, y))| -gx * x / (y * y))
                        .collect(),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Neg(a) => {
                let mut n = g.clone();
                n.scale_assign(-1.0);
                acc(grads, *a, n);
            }
            Op::Scale(a, c) => {
                let mut n = g.clone();
                n.scale_assign(*c);
                acc(grads, *a, n);
            }
            Op::AddScalar(a, _) | Op::AddConst(a) => {
                acc(grads, *a, g.clone());
            }
            Op::AddRowBroadcast(x, bias) => {
                acc(grads, *x, g.clone());
                let (n, d) = g.rows_cols();
                let mut db = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        db[c] += g.data[r * d + c];
                    }
                }
                acc(grads, *bias, Tensor::new(vec![1, d], db));
            }
            Op::MatMul(a, b) => {
                // c = a*b: da = g*b^T, db = a^T*g
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(grads, *a, mat_mul_nt(g, bv));
                acc(grads, *b, mat_mul_tn(av, g));
            }
            Op::MatMulNT(a, b) => {
                // c = a*b^T: da = g*b, db = g^T*a
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(grads, *a, mat_mul(g, bv));
                acc(grads, *b, mat_mul_tn(g, av));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&av.data)
                        .map(|(gx, x)| if *x > 0.0 { *gx } else { 0.0 })
                        .collect(),
                );
                acc(grads, *a, da);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&av.data).map(|(gx, x)| gx * gelu_grad(*x)).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Tanh(a) => {
                let yv = &node.value;
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&yv.data).map(|(gx, y)| gx * (1.0 - y * y)).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&yv.data).map(|(gx, y)| gx * y * (1.0 - y)).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Exp(a) => {
                let yv = &node.value;
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&yv.data).map(|(gx, y)| gx * y).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&av.data).map(|(gx, x)| gx / x).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Minimum(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = Tensor::zeros(&g.shape);
                let mut db = Tensor::zeros(&g.shape);
                for i in 0..g.data.len() {
                    if av.data[i] <= bv.data[i] {
                        da.data[i] = g.data[i];
                    } else {
                        db.data[i] = g.data[i];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Maximum(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = Tensor::zeros(&g.shape);
                let mut db = Tensor::zeros(&g.shape);
                for i in 0..g.data.len() {
                    if av.data[i] >= bv.data[i] {
                        da.data[i] = g.data[i];
                    } else {
                        db.data[i] = g.data[i];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape.clone();
                acc(grads, *a, Tensor::full(&shape, g.data[0]));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                acc(grads, *a, Tensor::full(&av.shape, g.data[0] / av.numel() as f64));
            }
            Op::MeanRows(a) => {
                let (n, d) = self.dims(*a);
                let mut da = Tensor::zeros(&self.value(*a).shape);
                for r in 0..n {
                    for c in 0..d {
                        da.data[r * d + c] = g.data[c] / n as f64;
                    }
                }
                acc(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (n, d) = y.rows_cols();
                let mut da = Tensor::zeros(&y.shape);
                for r in 0..n {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..d {
                        da.data[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (n, d) = xv.rows_cols();
                let mut dx = Tensor::zeros(&xv.shape);
                let mut dgain = Tensor::zeros(&[1, d]);
                let mut dbias = Tensor::zeros(&[1, d]);
                for r in 0..n {
                    let row = &xv.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let dxhat: Vec<f64> =
                        gr.iter().zip(&gv.data).map(|(g, gamma)| g * gamma).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx.data[r * d + c] =
                            (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) * inv;
                        dgain.data[c] += gr[c] * xhat[c];
                        dbias.data[c] += gr[c];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = self.value(*logits);
                let (n, d) = lv.rows_cols();
                let scale = g.data[0] / n as f64;
                let mut dl = Tensor::zeros(&lv.shape);
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv.data[r * d..(r + 1) * d];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for c in 0..d {
                        let p = (row[c] - m).exp() / z;
                        dl.data[r * d + c] = scale * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                acc(grads, *logits, dl);
            }
            Op::SubsetNce { logits, sets } => {
                let lv = self.value(*logits);
                let (_n, d) = lv.rows_cols();
                let subjects = sets.iter().filter(|s| !s.positives.is_empty()).count() as f64;
                let mut dl = Tensor::zeros(&lv.shape);
                for (i, set) in sets.iter().enumerate() {
                    if set.positives.is_empty() {
                        continue;
                    }
                    let w = g.data[0] / (subjects * set.positives.len() as f64);
                    for &j in &set.positives {
                        let mut m = lv.at(i, j);
                        for &k in &set.negatives {
                            m = m.max(lv.at(i, k));
                        }
                        let ej = (lv.at(i, j) - m).exp();
                        let mut denom = ej;
                        for &k in &set.negatives {
                            denom += (lv.at(i, k) - m).exp();
                        }
                        // loss = -w_total * (z_ij - log denom)
                        dl.data[i * d + j] += -w * (1.0 - ej / denom);
                        for &k in &set.negatives {
                            let ek = (lv.at(i, k) - m).exp();
                            dl.data[i * d + k] += w * ek / denom;
                        }
                    }
                }
                acc(grads, *logits, dl);
            }
            Op::SmoothL1 { x, beta } => {
                let xv = self.value(*x);
                let target = node.aux.as_ref().expect("smooth_l1 target");
                let mut dx = Tensor::zeros(&xv.shape);
                for i in 0..xv.data.len() {
                    let diff = xv.data[i] - target.data[i];
                    dx.data[i] = g.data[0] * (diff / beta).clamp(-1.0, 1.0);
                }
                acc(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.dims(*table);
                let mut dt = Tensor::zeros(&[v, d]);
                for (p, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt.data[id * d + c] += g.data[p * d + c];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::NarrowCols { x, start, len } => {
                let (n, d) = self.dims(*x);
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    for c in 0..*len {
                        dx.data[r * d + start + c] = g.data[r * len + c];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (n, _) = g.rows_cols();
                let mut col = 0;
                let total = g.rows_cols().1;
                for p in parts {
                    let (_, pd) = self.dims(*p);
                    let mut dp = Tensor::zeros(&self.value(*p).shape);
                    for r in 0..n {
                        for c in 0..pd {
                            dp.data[r * pd + c] = g.data[r * total + col + c];
                        }
                    }
                    col += pd;
                    acc(grads, *p, dp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                let (_, d) = g.rows_cols();
                for p in parts {
                    let (pn, _) = self.dims(*p);
                    let dp = Tensor::new(
                        self.value(*p).shape.clone(),
                        g.data[row * d..(row + pn) * d].to_vec(),
                    );
                    row += pn;
                    acc(grads, *p, dp);
                }
            }
            Op::SelectRow { x, row } => {
                let (n, d) = self.dims(*x);
                let mut dx = Tensor::zeros(&[n, d]);
                dx.data[row * d..(row + 1) * d].copy_from_slice(&g.data);
                acc(grads, *x, dx);
            }
            Op::NarrowRows { x, start, len } => {
                let (n, d) = self.dims(*x);
                let mut dx = Tensor::zeros(&[n, d]);
                dx.data[start * d..(start + len) * d].copy_from_slice(&g.data);
                acc(grads, *x, dx);
            }
            Op::SliceFlat { x, offset, shape } => {
                let len: usize = shape.iter().product();
                let mut dx = Tensor::zeros(&self.value(*x).shape);
                dx.data[*offset..offset + len].copy_from_slice(&g.data);
                acc(grads, *x, dx);
            }
            Op::Pick { x, index } => {
                let mut dx = Tensor::zeros(&self.value(*x).shape);
                dx.data[*index] = g.data[0];
                acc(grads, *x, dx);
            }
            Op::L2NormalizeRows(a) => {
                let xv = self.value(*a);
                let y = &node.value;
                let (n, d) = xv.rows_cols();
                let mut dx = Tensor::zeros(&xv.shape);
                for r in 0..n {
                    let row = &xv.data[r * d..(r + 1) * d];
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dx.data[r * d + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                acc(grads, *a, dx);
            }
        }
    }
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar function, probed coordinate-wise with step `1e-4 * (1+|t_i|)`.
///
/// `f` must build the same computation whenever it is called; it receives a
/// fresh graph whose first var holds the (possibly perturbed) input.
pub fn grad_check<F>(theta: &Tensor, f: F) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let v = g.param(theta);
    let out = f(&mut g, v);
    let base = g.scalar_value(out);
    assert!(base.is_finite(), "grad_check: non-finite objective");
    let grads = g.backward(out);
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&theta.shape));

    let eval = |t: &Tensor| -> f64 {
        let mut g = Graph::new();
        let v = g.param(t);
        let out = f(&mut g, v);
        g.scalar_value(out)
    };

    let mut worst: f64 = 0.0;
    for i in 0..theta.numel() {
        let h = 1e-4 * (1.0 + theta.data[i].abs());
        let mut plus = theta.clone();
        plus.data[i] += h;
        let mut minus = theta.clone();
        minus.data[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let ad = analytic.data[i];
        let err = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Concatenate tensors into one flat vector; use with `Graph::slice_flat`
/// to run whole-model gradient checks through a single parameter.
pub fn pack_tensors(parts: &[&Tensor]) -> (Tensor, Vec<Vec<usize>>) {
    let shapes: Vec<Vec<usize>> = parts.iter().map(|t| t.shape.clone()).collect();
    let mut data = Vec::new();
    for t in parts {
        data.extend_from_slice(&t.data);
    }
    let n = data.len();
    (Tensor::new(vec![n], data), shapes)
}

/// Split a flat packed var back into views with the given shapes.
pub fn split_flat(g: &mut Graph, flat: Var, shapes: &[Vec<usize>]) -> Vec<Var> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for s in shapes {
        out.push(g.slice_flat(flat, offset, s));
        offset += s.iter().product::<usize>();
    }
    out
}
