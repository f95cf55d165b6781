//! Reverse-mode autodiff on an append-only tape.
//!
//! A [`Graph`] owns a vector of nodes; every operation appends one node and
//! returns a [`Var`] handle. `backward` runs once per tape (calling it again
//! without `reset` is a contract error); `reset` truncates the tape back to
//! its leading run of leaves so parameter bindings survive across steps.
//!
//! Reductions along the points axis (softmax normalizers, weighted row
//! averages, per-row statistics) sum their terms in a value-canonical order:
//! terms are sorted with `f64::total_cmp` before accumulation. Floating-point
//! addition is not associative, so this is what makes permuting the input
//! rows permute the outputs *bit-exactly* rather than approximately.
//! Reductions along the feature axis keep natural order — feature order never
//! changes under a point permutation. Backward passes accumulate in natural
//! order; gradients carry tolerance-level guarantees, not bitwise ones.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Handle to a node in a [`Graph`]. Cheap to copy. A `Var` is only valid for
/// the graph (and, unless it points at a persistent leaf, the reset
/// generation) that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    gen: u32,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const ENTROPY_EPS: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    SubRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    SumAll(usize),
    RowSums(usize),
    SoftmaxRows(usize),
    MaskedSoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, shift: usize },
    RowStats { x: usize, argmax: Vec<usize> },
    ScaleRows { x: usize, w: usize },
    RowNorm(usize),
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatCols(Vec<usize>),
    EdgeMax { f: usize, argmax: Vec<usize> },
    Reshape(usize),
    Attend { w: usize, x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only reverse-mode tape over [`Tensor`] values.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_ran: bool,
    /// Length of the leading run of leaf nodes; `reset` truncates to here.
    persistent: usize,
    ops_started: bool,
    gen: u32,
}

/// Sums `terms` in ascending value order (total order over f64), making the
/// result invariant to the original ordering of the terms.
pub(crate) fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_ran: false,
            persistent: 0,
            ops_started: false,
            gen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize> {
        let valid_gen = v.gen == self.gen || v.index < self.persistent;
        if !valid_gen || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "stale or foreign Var passed to {op} (graph was reset or the Var belongs to another graph)"
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            self.ops_started = true;
        } else if !self.ops_started {
            self.persistent = self.nodes.len() + 1;
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            gen: self.gen,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Value of a node as computed during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Binds a tensor as a leaf. Leaves added before any operation persist
    /// across [`Graph::reset`]; later ones are ephemeral.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let rg = t.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    /// Binds a tensor as a constant (never receives a gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.requires_grad = false;
        value.grad = None;
        self.push(value, Op::Leaf, false)
    }

    /// Drops every node after the leading run of leaves, clearing gradients.
    /// Vars into the truncated region become invalid.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
        self.grads.clear();
        self.backward_ran = false;
        self.ops_started = false;
        self.gen = self.gen.wrapping_add(1);
    }

    // ---- binary elementwise -------------------------------------------------

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "add")?, self.check(b, "add")?);
        self.same_shape(ia, ib, "add")?;
        let values: Vec<f64> = self.nodes[ia]
            .value
            .values()
            .iter()
            .zip(self.nodes[ib].value.values())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(t, Op::Add(ia, ib), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "sub")?, self.check(b, "sub")?);
        self.same_shape(ia, ib, "sub")?;
        let values: Vec<f64> = self.nodes[ia]
            .value
            .values()
            .iter()
            .zip(self.nodes[ib].value.values())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(t, Op::Sub(ia, ib), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "mul")?, self.check(b, "mul")?);
        self.same_shape(ia, ib, "mul")?;
        let values: Vec<f64> = self.nodes[ia]
            .value
            .values()
            .iter()
            .zip(self.nodes[ib].value.values())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(t, Op::Mul(ia, ib), ng))
    }

    /// Broadcast add of a `[1, d]` row to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "add_row")?, self.check(row, "add_row")?);
        self.row_broadcast_check(ia, ib, "add_row")?;
        let d = self.nodes[ia].value.cols();
        let rv = self.nodes[ib].value.values().to_vec();
        let values: Vec<f64> = self.nodes[ia]
            .value
            .values()
            .iter()
            .enumerate()
            .map(|(k, x)| x + rv[k % d])
            .collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(t, Op::AddRow(ia, ib), ng))
    }

    /// Broadcast subtract of a `[1, d]` row from every row of an `[n, d]` matrix.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "sub_row")?, self.check(row, "sub_row")?);
        self.row_broadcast_check(ia, ib, "sub_row")?;
        let d = self.nodes[ia].value.cols();
        let rv = self.nodes[ib].value.values().to_vec();
        let values: Vec<f64> = self.nodes[ia]
            .value
            .values()
            .iter()
            .enumerate()
            .map(|(k, x)| x - rv[k % d])
            .collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(t, Op::SubRow(ia, ib), ng))
    }

    fn row_broadcast_check(&self, a: usize, b: usize, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let ok = sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sa[1] == sb[1];
        if !ok {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- unary elementwise --------------------------------------------------

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a, "scale")?;
        let values: Vec<f64> = self.nodes[ia].value.values().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::Scale(ia, c), ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a, "add_scalar")?;
        let values: Vec<f64> = self.nodes[ia].value.values().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::AddScalar(ia), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "relu")?;
        let values: Vec<f64> = self.nodes[ia]
            .value
            .values()
            .iter()
            .map(|x| x.max(0.0))
            .collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::Relu(ia), ng))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "abs")?;
        let values: Vec<f64> = self.nodes[ia].value.values().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.nodes[ia].value.shape().to_vec(), values).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::Abs(ia), ng))
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "matmul")?, self.check(b, "matmul")?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[ia].value.values();
        let bv = self.nodes[ib].value.values();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aik = av[i * k + p];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        let t = Tensor::matrix(n, m, out).unwrap();
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(t, Op::Matmul(ia, ib), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "transpose")?;
        let s = self.nodes[ia].value.shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (n, m) = (s[0], s[1]);
        let av = self.nodes[ia].value.values();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        let t = Tensor::matrix(m, n, out).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::Transpose(ia), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a, "reshape")?;
        let n: usize = shape.iter().product();
        if n != self.nodes[ia].value.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.nodes[ia].value.shape().to_vec(),
                rhs: shape,
            });
        }
        let t = Tensor::new(shape, self.nodes[ia].value.values().to_vec()).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::Reshape(ia), ng))
    }

    // ---- reductions ----------------------------------------------------------

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "sum_all")?;
        let s: f64 = self.nodes[ia].value.values().iter().sum();
        let ng = self.needs(ia);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(ia), ng))
    }

    /// Per-row sums along the feature axis: `[n, d] -> [n, 1]`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "row_sums")?;
        let v = &self.nodes[ia].value;
        if v.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "row_sums",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(v.values()[i * d..(i + 1) * d].iter().sum());
        }
        let t = Tensor::matrix(n, 1, out).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::RowSums(ia), ng))
    }

    /// Per-row Euclidean norms: `[n, d] -> [n, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "row_norm")?;
        let v = &self.nodes[ia].value;
        if v.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "row_norm",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &v.values()[i * d..(i + 1) * d];
            out.push(row.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        let t = Tensor::matrix(n, 1, out).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::RowNorm(ia), ng))
    }

    // ---- softmax family -------------------------------------------------------

    /// Row-wise stabilized softmax. Normalizers are summed in canonical
    /// (ascending-value) order so column permutations commute bit-exactly.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "softmax_rows")?;
        let v = &self.nodes[ia].value;
        if v.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, m) = (v.rows(), v.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &v.values()[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut terms: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let orow = &mut out[i * m..(i + 1) * m];
            orow.copy_from_slice(&terms);
            let z = canonical_sum(&mut terms);
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let t = Tensor::matrix(n, m, out).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::SoftmaxRows(ia), ng))
    }

    /// Row-wise softmax restricted to an allowed column set per row; entries
    /// outside the set are exactly zero. A row with empty support is a
    /// domain error.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &[Vec<usize>]) -> Result<Var> {
        let ia = self.check(a, "masked_softmax_rows")?;
        let v = &self.nodes[ia].value;
        if v.shape().len() != 2 || allowed.len() != v.rows() {
            return Err(Error::Dimension {
                op: "masked_softmax_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let (n, m) = (v.rows(), v.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            if allowed[i].is_empty() {
                return Err(Error::domain(
                    "masked_softmax_rows",
                    format!("row {i} has empty support"),
                ));
            }
            let row = &v.values()[i * m..(i + 1) * m];
            let mut mx = f64::NEG_INFINITY;
            for &j in &allowed[i] {
                if j >= m {
                    return Err(Error::domain(
                        "masked_softmax_rows",
                        format!("row {i} allows column {j} out of {m}"),
                    ));
                }
                mx = mx.max(row[j]);
            }
            let mut terms: Vec<f64> = Vec::with_capacity(allowed[i].len());
            for &j in &allowed[i] {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                terms.push(e);
            }
            let z = canonical_sum(&mut terms);
            for &j in &allowed[i] {
                out[i * m + j] /= z;
            }
        }
        let t = Tensor::matrix(n, m, out).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::MaskedSoftmaxRows(ia), ng))
    }

    // ---- normalization and statistics ------------------------------------------

    /// Per-row layer normalization with learned gain and shift (`[1, d]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let ix = self.check(x, "layer_norm")?;
        let ig = self.check(gain, "layer_norm")?;
        let ib = self.check(shift, "layer_norm")?;
        self.row_broadcast_check(ix, ig, "layer_norm")?;
        self.row_broadcast_check(ix, ib, "layer_norm")?;
        let v = &self.nodes[ix].value;
        let (n, d) = (v.rows(), v.cols());
        let gv = self.nodes[ig].value.values().to_vec();
        let bv = self.nodes[ib].value.values().to_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.nodes[ix].value.values()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let s = (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) / s * gv[j] + bv[j];
            }
        }
        let t = Tensor::matrix(n, d, out).unwrap();
        let ng = self.needs(ix) || self.needs(ig) || self.needs(ib);
        Ok(self.push(t, Op::LayerNorm {
            x: ix,
            gain: ig,
            shift: ib,
        }, ng))
    }

    /// Per-row summary statistics `[entropy, max, mean]`: `[n, m] -> [n, 3]`.
    /// Entropy uses `-sum(p * ln(p + 1e-12))`; sums are value-canonical.
    pub fn row_stats(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "row_stats")?;
        let v = &self.nodes[ia].value;
        if v.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "row_stats",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, m) = (v.rows(), v.cols());
        let mut out = vec![0.0; n * 3];
        let mut argmax = vec![0usize; n];
        for i in 0..n {
            let row = &v.values()[i * m..(i + 1) * m];
            let mut ent_terms: Vec<f64> = row.iter().map(|p| p * (p + ENTROPY_EPS).ln()).collect();
            let entropy = -canonical_sum(&mut ent_terms);
            let (mut best, mut best_j) = (f64::NEG_INFINITY, 0);
            for (j, &p) in row.iter().enumerate() {
                if p > best {
                    best = p;
                    best_j = j;
                }
            }
            let mut mean_terms: Vec<f64> = row.to_vec();
            let mean = canonical_sum(&mut mean_terms) / m as f64;
            out[i * 3] = entropy;
            out[i * 3 + 1] = best;
            out[i * 3 + 2] = mean;
            argmax[i] = best_j;
        }
        let t = Tensor::matrix(n, 3, out).unwrap();
        let ng = self.needs(ia);
        Ok(self.push(t, Op::RowStats { x: ia, argmax }, ng))
    }

    /// Scales row `i` of `x` by `w[i]`: `([n, d], [n, 1]) -> [n, d]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.check(x, "scale_rows")?, self.check(w, "scale_rows")?);
        let (sx, sw) = (self.nodes[ix].value.shape(), self.nodes[iw].value.shape());
        let ok = sx.len() == 2 && sw.len() == 2 && sw[0] == sx[0] && sw[1] == 1;
        if !ok {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let wv = self.nodes[iw].value.values().to_vec();
        let xv = self.nodes[ix].value.values();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xv[i * d + j] * wv[i];
            }
        }
        let t = Tensor::matrix(n, d, out).unwrap();
        let ng = self.needs(ix) || self.needs(iw);
        Ok(self.push(t, Op::ScaleRows { x: ix, w: iw }, ng))
    }

    // ---- structural ops ----------------------------------------------------------

    /// Selects rows by index (indices may repeat): `[n, d] -> [k, d]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.check(x, "gather_rows")?;
        let v = &self.nodes[ix].value;
        let (n, d) = (v.rows(), v.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::domain(
                "gather_rows",
                format!("row index {bad} out of {n}"),
            ));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&v.values()[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(idx.len(), d, out).unwrap();
        let ng = self.needs(ix);
        Ok(self.push(t, Op::GatherRows {
            x: ix,
            idx: idx.to_vec(),
        }, ng))
    }

    /// Concatenates matrices along the feature axis; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p, "concat_cols"))
            .collect::<Result<_>>()?;
        let n = self.nodes[idxs[0]].value.rows();
        for &i in &idxs {
            if self.nodes[i].value.shape().len() != 2 || self.nodes[i].value.rows() != n {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.nodes[idxs[0]].value.shape().to_vec(),
                    rhs: self.nodes[i].value.shape().to_vec(),
                });
            }
        }
        let total: usize = idxs.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &i in &idxs {
                let d = self.nodes[i].value.cols();
                out.extend_from_slice(&self.nodes[i].value.values()[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::matrix(n, total, out).unwrap();
        let ng = idxs.iter().any(|&i| self.needs(i));
        Ok(self.push(t, Op::ConcatCols(idxs), ng))
    }

    /// Edge-graph aggregation: for each point `i`, concatenates its feature
    /// row with the per-dimension max of `f[neighbor] - f[i]` over `i`'s
    /// neighbor list: `[n, c] -> [n, 2c]`. Max is an exact reduction, so the
    /// output commutes with point permutations bit-exactly.
    pub fn edge_max_aggregate(&mut self, f: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
        let ifx = self.check(f, "edge_max_aggregate")?;
        let v = &self.nodes[ifx].value;
        let (n, c) = (v.rows(), v.cols());
        if neighbors.len() != n {
            return Err(Error::Dimension {
                op: "edge_max_aggregate",
                lhs: vec![n, c],
                rhs: vec![neighbors.len()],
            });
        }
        let mut out = vec![0.0; n * 2 * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            if neighbors[i].is_empty() {
                return Err(Error::domain(
                    "edge_max_aggregate",
                    format!("point {i} has no neighbors"),
                ));
            }
            let fi = &v.values()[i * c..(i + 1) * c];
            out[i * 2 * c..i * 2 * c + c].copy_from_slice(fi);
            for d in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_nbr = neighbors[i][0];
                for &nb in &neighbors[i] {
                    if nb >= n {
                        return Err(Error::domain(
                            "edge_max_aggregate",
                            format!("neighbor index {nb} out of {n}"),
                        ));
                    }
                    let diff = v.values()[nb * c + d] - fi[d];
                    if diff > best {
                        best = diff;
                        best_nbr = nb;
                    }
                }
                out[i * 2 * c + c + d] = best;
                argmax[i * c + d] = best_nbr;
            }
        }
        let t = Tensor::matrix(n, 2 * c, out).unwrap();
        let ng = self.needs(ifx);
        Ok(self.push(t, Op::EdgeMax { f: ifx, argmax }, ng))
    }

    /// Weighted average of the rows of `x` under a row-stochastic weight
    /// matrix: `([n, m], [m, d]) -> [n, d]`. Each output row is accumulated
    /// in an order sorted by (weight value, then value-row lexicographic), so
    /// permuting the rows of `x` together with the columns of `w` reproduces
    /// the result bit-exactly.
    pub fn attend(&mut self, w: Var, x: Var) -> Result<Var> {
        let (iw, ix) = (self.check(w, "attend")?, self.check(x, "attend")?);
        let (sw, sx) = (self.nodes[iw].value.shape(), self.nodes[ix].value.shape());
        if sw.len() != 2 || sx.len() != 2 || sw[1] != sx[0] {
            return Err(Error::Dimension {
                op: "attend",
                lhs: sw.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let (n, m, d) = (sw[0], sw[1], sx[1]);
        let wv = self.nodes[iw].value.values();
        let xv = self.nodes[ix].value.values();
        let mut out = vec![0.0; n * d];
        let mut order: Vec<usize> = Vec::with_capacity(m);
        for i in 0..n {
            order.clear();
            order.extend(0..m);
            let wrow = &wv[i * m..(i + 1) * m];
            order.sort_unstable_by(|&a, &b| {
                wrow[a]
                    .total_cmp(&wrow[b])
                    .then_with(|| cmp_rows(&xv[a * d..(a + 1) * d], &xv[b * d..(b + 1) * d]))
            });
            let orow = &mut out[i * d..(i + 1) * d];
            for &k in &order {
                let wk = wrow[k];
                let xrow = &xv[k * d..(k + 1) * d];
                for (o, xkj) in orow.iter_mut().zip(xrow) {
                    *o += wk * xkj;
                }
            }
        }
        let t = Tensor::matrix(n, d, out).unwrap();
        let ng = self.needs(iw) || self.needs(ix);
        Ok(self.push(t, Op::Attend { w: iw, x: ix }, ng))
    }

    // ---- backward ------------------------------------------------------------

    /// Runs reverse-mode accumulation from a scalar loss. May be called once
    /// per tape; call [`Graph::reset`] before reusing the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss, "backward")?;
        if self.backward_ran {
            return Err(Error::Contract(
                "backward called twice without reset".into(),
            ));
        }
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        self.backward_ran = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[il] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, i: usize) -> &mut Vec<f64> {
        if self.grads[i].is_none() {
            self.grads[i] = Some(vec![0.0; self.nodes[i].value.len()]);
        }
        self.grads[i].as_mut().unwrap()
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are matched by value to keep the borrow checker happy: parent
        // indices are extracted first, then buffers are touched one at a time.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                let d = self.nodes[a].value.cols();
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for (k, gi) in g.iter().enumerate() {
                        buf[k % d] += gi;
                    }
                }
            }
            &Op::SubRow(a, b) => {
                let d = self.nodes[a].value.cols();
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for (k, gi) in g.iter().enumerate() {
                        buf[k % d] -= gi;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.nodes[b].value.values().to_vec();
                    let buf = self.grad_buf(a);
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(&bv) {
                        *o += gi * bi;
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a].value.values().to_vec();
                    let buf = self.grad_buf(b);
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(&av) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            &Op::AddScalar(a) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let av = self.nodes[a].value.values().to_vec();
                    let buf = self.grad_buf(a);
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(&av) {
                        if *ai > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Abs(a) => {
                if self.needs(a) {
                    let av = self.nodes[a].value.values().to_vec();
                    let buf = self.grad_buf(a);
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(&av) {
                        *o += gi * ai.signum();
                    }
                }
            }
            &Op::Matmul(a, b) => {
                let (n, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let m = self.nodes[b].value.cols();
                if self.needs(a) {
                    // dA = dC * B^T
                    let bv = self.nodes[b].value.values().to_vec();
                    let buf = self.grad_buf(a);
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * bv[p * m + j];
                            }
                            buf[i * k + p] += acc;
                        }
                    }
                }
                if self.needs(b) {
                    // dB = A^T * dC
                    let av = self.nodes[a].value.values().to_vec();
                    let buf = self.grad_buf(b);
                    for p in 0..k {
                        for i in 0..n {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                buf[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                if self.needs(a) {
                    let (n, m) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let buf = self.grad_buf(a);
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            &Op::SumAll(a) => {
                if self.needs(a) {
                    let gv = g[0];
                    let buf = self.grad_buf(a);
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                }
            }
            &Op::RowSums(a) => {
                if self.needs(a) {
                    let d = self.nodes[a].value.cols();
                    let buf = self.grad_buf(a);
                    for (k, o) in buf.iter_mut().enumerate() {
                        *o += g[k / d];
                    }
                }
            }
            &Op::RowNorm(a) => {
                if self.needs(a) {
                    let (n, d) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let av = self.nodes[a].value.values().to_vec();
                    let norms = self.nodes[i].value.values().to_vec();
                    let buf = self.grad_buf(a);
                    for r in 0..n {
                        let scale = g[r] / norms[r].max(NORM_FLOOR);
                        for j in 0..d {
                            buf[r * d + j] += scale * av[r * d + j];
                        }
                    }
                }
            }
            &Op::SoftmaxRows(a) | &Op::MaskedSoftmaxRows(a) => {
                // y = softmax(x): dx = y .* (g - sum(g .* y)) per row. Entries
                // outside a mask have y = 0 and receive zero gradient.
                if self.needs(a) {
                    let (n, m) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    let yv = self.nodes[i].value.values().to_vec();
                    let buf = self.grad_buf(a);
                    for r in 0..n {
                        let y = &yv[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let s: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..m {
                            buf[r * m + j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, shift } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let (n, d) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let xv = self.nodes[x].value.values().to_vec();
                let gv = self.nodes[gain].value.values().to_vec();
                // Recompute per-row mean/std and normalized values.
                let mut xhat = vec![0.0; n * d];
                let mut inv_s = vec![0.0; n];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let s = (var + LAYER_NORM_EPS).sqrt();
                    inv_s[r] = 1.0 / s;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) / s;
                    }
                }
                if self.needs(shift) {
                    let buf = self.grad_buf(shift);
                    for r in 0..n {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                }
                if self.needs(gain) {
                    let buf = self.grad_buf(gain);
                    for r in 0..n {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.needs(x) {
                    let buf = self.grad_buf(x);
                    for r in 0..n {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            buf[r * d + j] +=
                                inv_s[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::RowStats { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                if self.needs(x) {
                    let (n, m) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    let xv = self.nodes[x].value.values().to_vec();
                    let buf = self.grad_buf(x);
                    for r in 0..n {
                        let g_ent = g[r * 3];
                        let g_max = g[r * 3 + 1];
                        let g_mean = g[r * 3 + 2];
                        for j in 0..m {
                            let p = xv[r * m + j];
                            // d(-p ln(p+eps))/dp = -(ln(p+eps) + p/(p+eps))
                            let dent = -((p + ENTROPY_EPS).ln() + p / (p + ENTROPY_EPS));
                            buf[r * m + j] += g_ent * dent + g_mean / m as f64;
                        }
                        buf[r * m + argmax[r]] += g_max;
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let (x, w) = (*x, *w);
                let (n, d) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                if self.needs(x) {
                    let wv = self.nodes[w].value.values().to_vec();
                    let buf = self.grad_buf(x);
                    for r in 0..n {
                        for j in 0..d {
                            buf[r * d + j] += g[r * d + j] * wv[r];
                        }
                    }
                }
                if self.needs(w) {
                    let xv = self.nodes[x].value.values().to_vec();
                    let buf = self.grad_buf(w);
                    for r in 0..n {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += g[r * d + j] * xv[r * d + j];
                        }
                        buf[r] += acc;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                if self.needs(x) {
                    let d = self.nodes[x].value.cols();
                    let buf = self.grad_buf(x);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[src * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = self.nodes[i].value.rows();
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
                let total: usize = widths.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let offset: usize = widths[..pi].iter().sum();
                    let d = widths[pi];
                    let buf = self.grad_buf(p);
                    for r in 0..n {
                        for j in 0..d {
                            buf[r * d + j] += g[r * total + offset + j];
                        }
                    }
                }
            }
            Op::EdgeMax { f, argmax } => {
                let f = *f;
                let argmax = argmax.clone();
                if self.needs(f) {
                    let (n, c) = (self.nodes[f].value.rows(), self.nodes[f].value.cols());
                    let buf = self.grad_buf(f);
                    for r in 0..n {
                        for d in 0..c {
                            // identity half
                            buf[r * c + d] += g[r * 2 * c + d];
                            // max(f[nbr] - f[r]) half
                            let ge = g[r * 2 * c + c + d];
                            buf[argmax[r * c + d] * c + d] += ge;
                            buf[r * c + d] -= ge;
                        }
                    }
                }
            }
            Op::Attend { w, x } => {
                let (w, x) = (*w, *x);
                let (n, m) = (self.nodes[w].value.rows(), self.nodes[w].value.cols());
                let d = self.nodes[x].value.cols();
                if self.needs(w) {
                    // dW = g * X^T
                    let xv = self.nodes[x].value.values().to_vec();
                    let buf = self.grad_buf(w);
                    for r in 0..n {
                        for k in 0..m {
                            let mut acc = 0.0;
                            for j in 0..d {
                                acc += g[r * d + j] * xv[k * d + j];
                            }
                            buf[r * m + k] += acc;
                        }
                    }
                }
                if self.needs(x) {
                    // dX = W^T * g
                    let wv = self.nodes[w].value.values().to_vec();
                    let buf = self.grad_buf(x);
                    for k in 0..m {
                        for r in 0..n {
                            let wrk = wv[r * m + k];
                            if wrk == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                buf[k * d + j] += wrk * g[r * d + j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`. Zeros are
    /// returned for requires-grad leaves the loss never touched.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>> {
        let idx = self.check(v, "grad")?;
        if !self.backward_ran {
            return Err(Error::Contract("grad requested before backward".into()));
        }
        match &self.grads[idx] {
            Some(g) => Ok(g.clone()),
            None => Ok(vec![0.0; self.nodes[idx].value.len()]),
        }
    }
}
