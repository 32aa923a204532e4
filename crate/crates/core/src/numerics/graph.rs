//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` is a tape of nodes built during the forward pass; `backward`
//! walks it in reverse and produces exact analytic gradients for every
//! primitive. One graph per forward/backward pair; parameters are bound as
//! leaves each time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::tensor::{same_shape, Real, Tensor};

const NLL_EPS: f64 = 1e-12;

/// Handle to a node in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    AddRowBroadcast(usize, usize),
    AddScalarBroadcast(usize, usize),
    Scale(usize, F),
    Mul(usize, usize),
    ScaleByScalar(usize, usize),
    RowScale(usize, usize),
    Matmul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Clamp(usize, F, F),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: F,
    },
    MaxPoolColumns(usize),
    ConcatVec(Vec<usize>),
    SliceVec {
        x: usize,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatColsVecMat {
        v: usize,
        m: usize,
    },
    RowVec {
        m: usize,
        row: usize,
    },
    StackRows(Vec<usize>),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ScatterAddVec {
        src: usize,
        ids: Vec<usize>,
    },
    Detach,
    Mse(usize, usize),
    Nll {
        probs: usize,
        index: usize,
    },
    Bce {
        prob: usize,
        label: bool,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !same_shape(ta, tb) {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    /// Add a vector to every row of a matrix.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if !tm.is_matrix() || !tv.is_vector() || tm.shape[1] != tv.shape[0] {
            return Err(shape_err("add_row_broadcast", tm, tv));
        }
        let cols = tm.shape[1];
        let data = tm
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tv.data[i % cols])
            .collect();
        let t = Tensor {
            shape: tm.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::AddRowBroadcast(m.0, v.0)))
    }

    /// Add a scalar-valued node to every element.
    pub fn add_scalar_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if !ts.is_scalar() {
            return Err(shape_err("add_scalar_broadcast", &self.nodes[x.0].value, ts));
        }
        let sv = ts.scalar_value();
        let tx = &self.nodes[x.0].value;
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v + sv).collect(),
        };
        Ok(self.push(t, Op::AddScalarBroadcast(x.0, s.0)))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let tx = &self.nodes[x.0].value;
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v * k).collect(),
        };
        self.push(t, Op::Scale(x.0, k))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !same_shape(ta, tb) {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    /// Multiply every element by a scalar-valued node.
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if !ts.is_scalar() {
            return Err(shape_err("scale_by_scalar", &self.nodes[x.0].value, ts));
        }
        let sv = ts.scalar_value();
        let tx = &self.nodes[x.0].value;
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v * sv).collect(),
        };
        Ok(self.push(t, Op::ScaleByScalar(x.0, s.0)))
    }

    /// Scale row r of a matrix by gates[r].
    pub fn row_scale(&mut self, m: Var, gates: Var) -> Result<Var> {
        let (tm, tg) = (&self.nodes[m.0].value, &self.nodes[gates.0].value);
        if !tm.is_matrix() || !tg.is_vector() || tm.shape[0] != tg.shape[0] {
            return Err(shape_err("row_scale", tm, tg));
        }
        let cols = tm.shape[1];
        let data = tm
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tg.data[i / cols])
            .collect();
        let t = Tensor {
            shape: tm.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::RowScale(m.0, gates.0)))
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product with vector promotion:
    /// `[r,k]x[k,c] -> [r,c]`, `[k]x[k,c] -> [c]`, `[r,k]x[k] -> [r]`, `[k]x[k] -> scalar`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, ka) = promote_lhs(ta).ok_or_else(|| shape_err("matmul", ta, tb))?;
        let (kb, cb) = promote_rhs(tb).ok_or_else(|| shape_err("matmul", ta, tb))?;
        if ka != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let data = mm(&ta.data, ra, ka, &tb.data, cb);
        let shape = match (ta.is_vector(), tb.is_vector()) {
            (true, true) => vec![],
            (true, false) => vec![cb],
            (false, true) => vec![ra],
            (false, false) => vec![ra, cb],
        };
        Ok(self.push(Tensor { shape, data }, Op::Matmul(a.0, b.0)))
    }

    // ---- nonlinearities ----------------------------------------------

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let one = F::one();
        let data = tx.data.iter().map(|&v| one / (one + (-v).exp())).collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.push(t, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| v.tanh()).collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.push(t, Op::Tanh(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let z = F::zero();
        let data = tx.data.iter().map(|&v| if v > z { v } else { z }).collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.push(t, Op::Relu(x.0))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx
            .data
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.push(t, Op::Clamp(x.0, lo, hi))
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if !tx.is_vector() || tx.data.is_empty() {
            return Err(shape_err("softmax", tx, tx));
        }
        let t = Tensor::vector(softmax_raw(&tx.data));
        Ok(self.push(t, Op::Softmax(x.0)))
    }

    /// Layer normalization of a vector with affine parameters.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        if !tx.is_vector() || !same_shape(tx, tg) || !same_shape(tx, tb) {
            return Err(shape_err("layernorm", tx, tg));
        }
        let (xhat, _, _) = layernorm_raw(&tx.data, eps);
        let data = xhat
            .iter()
            .zip(tg.data.iter().zip(&tb.data))
            .map(|(&xh, (&g, &b))| xh * g + b)
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    /// Column-wise max of a matrix. Backward routes to the first argmax row.
    pub fn maxpool_columns(&mut self, m: Var) -> Result<Var> {
        let tm = &self.nodes[m.0].value;
        if !tm.is_matrix() || tm.shape[0] == 0 {
            return Err(shape_err("maxpool_columns", tm, tm));
        }
        let (rows, cols) = (tm.shape[0], tm.shape[1]);
        let mut out = vec![F::neg_infinity(); cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = tm.data[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxPoolColumns(m.0)))
    }

    // ---- structure ----------------------------------------------------

    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                primitive: "concat",
                detail: "no parts".into(),
            });
        }
        let mut data = Vec::new();
        for p in parts {
            let tp = &self.nodes[p.0].value;
            if !tp.is_vector() {
                return Err(shape_err("concat", tp, tp));
            }
            data.extend_from_slice(&tp.data);
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::ConcatVec(parts.iter().map(|p| p.0).collect()),
        ))
    }

    pub fn slice_vec(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if !tx.is_vector() || start + len > tx.shape[0] {
            return Err(Error::Shape {
                primitive: "slice",
                detail: format!("[{start}, {}) of len {}", start + len, tx.numel()),
            });
        }
        let t = Tensor::vector(tx.data[start..start + len].to_vec());
        Ok(self.push(t, Op::SliceVec { x: x.0, start, len }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if !tx.is_matrix() || start + len > tx.shape[1] {
            return Err(Error::Shape {
                primitive: "slice_cols",
                detail: format!("[{start}, {}) of {:?}", start + len, tx.shape),
            });
        }
        let (rows, cols) = (tx.shape[0], tx.shape[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor {
            shape: vec![rows, len],
            data,
        };
        Ok(self.push(t, Op::SliceCols { x: x.0, start, len }))
    }

    /// Row i of the result is `[v ; m_i]` — the same vector prepended to each row.
    pub fn concat_cols_vec_mat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (tv, tm) = (&self.nodes[v.0].value, &self.nodes[m.0].value);
        if !tv.is_vector() || !tm.is_matrix() {
            return Err(shape_err("concat_cols_vec_mat", tv, tm));
        }
        let (rows, cols, p) = (tm.shape[0], tm.shape[1], tv.shape[0]);
        let mut data = Vec::with_capacity(rows * (p + cols));
        for r in 0..rows {
            data.extend_from_slice(&tv.data);
            data.extend_from_slice(&tm.data[r * cols..(r + 1) * cols]);
        }
        let t = Tensor {
            shape: vec![rows, p + cols],
            data,
        };
        Ok(self.push(t, Op::ConcatColsVecMat { v: v.0, m: m.0 }))
    }

    /// Extract row `row` of a matrix as a vector.
    pub fn row_vec(&mut self, m: Var, row: usize) -> Result<Var> {
        let tm = &self.nodes[m.0].value;
        if !tm.is_matrix() || row >= tm.shape[0] {
            return Err(Error::Shape {
                primitive: "row_vec",
                detail: format!("row {row} of {:?}", tm.shape),
            });
        }
        let cols = tm.shape[1];
        let t = Tensor::vector(tm.data[row * cols..(row + 1) * cols].to_vec());
        Ok(self.push(t, Op::RowVec { m: m.0, row }))
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Shape {
                primitive: "stack_rows",
                detail: "no rows".into(),
            });
        }
        let cols = self.nodes[rows[0].0].value.numel();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let tr = &self.nodes[r.0].value;
            if !tr.is_vector() || tr.numel() != cols {
                return Err(shape_err("stack_rows", &self.nodes[rows[0].0].value, tr));
            }
            data.extend_from_slice(&tr.data);
        }
        let t = Tensor {
            shape: vec![rows.len(), cols],
            data,
        };
        Ok(self.push(t, Op::StackRows(rows.iter().map(|r| r.0).collect())))
    }

    /// Select rows of a table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if !tt.is_matrix() {
            return Err(shape_err("gather_rows", tt, tt));
        }
        let (rows, cols) = (tt.shape[0], tt.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "gather_rows id {bad} out of {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&tt.data[i * cols..(i + 1) * cols]);
        }
        let t = Tensor {
            shape: vec![ids.len(), cols],
            data,
        };
        Ok(self.push(
            t,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `out[ids[i]] += src[i]` into a fresh zero vector of length `out_len`.
    pub fn scatter_add_vec(&mut self, src: Var, ids: &[usize], out_len: usize) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if !ts.is_vector() || ts.shape[0] != ids.len() {
            return Err(shape_err("scatter_add", ts, ts));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= out_len) {
            return Err(Error::Index(format!(
                "scatter_add id {bad} out of {out_len}"
            )));
        }
        let mut data = vec![F::zero(); out_len];
        for (i, &id) in ids.iter().enumerate() {
            data[id] += ts.data[i];
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::ScatterAddVec {
                src: src.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Copy a value into the graph as a gradient barrier.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        let _ = x;
        self.push(t, Op::Detach)
    }

    // ---- losses --------------------------------------------------------

    /// Mean squared error between two same-shape tensors (scalar output).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !same_shape(ta, tb) || ta.data.is_empty() {
            return Err(shape_err("mse", ta, tb));
        }
        let n = F::lit(ta.numel() as f64);
        let mut acc = F::zero();
        for (&x, &y) in ta.data.iter().zip(&tb.data) {
            let d = x - y;
            acc += d * d;
        }
        Ok(self.push(Tensor::scalar(acc / n), Op::Mse(a.0, b.0)))
    }

    /// Negative log likelihood of `probs[index]` with a small epsilon floor.
    pub fn nll(&mut self, probs: Var, index: usize) -> Result<Var> {
        let tp = &self.nodes[probs.0].value;
        if !tp.is_vector() {
            return Err(shape_err("nll", tp, tp));
        }
        if index >= tp.shape[0] {
            return Err(Error::Index(format!(
                "nll index {index} out of {}",
                tp.shape[0]
            )));
        }
        let v = -(tp.data[index] + F::lit(NLL_EPS)).ln();
        Ok(self.push(Tensor::scalar(v), Op::Nll { probs: probs.0, index }))
    }

    /// Binary cross-entropy of a probability against a fixed label.
    /// The probability must already lie strictly inside (0, 1).
    pub fn bce(&mut self, prob: Var, label: bool) -> Result<Var> {
        let tp = &self.nodes[prob.0].value;
        if !tp.is_scalar() {
            return Err(shape_err("bce", tp, tp));
        }
        let p = tp.scalar_value();
        let v = if label { -p.ln() } else { -(F::one() - p).ln() };
        Ok(self.push(Tensor::scalar(v), Op::Bce { prob: prob.0, label }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar node. Gradients accumulate additively
    /// across all uses of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::Shape {
                primitive: "backward",
                detail: format!("loss must be scalar, got {:?}", lt.shape),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![F::one()],
        });

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, &self.nodes[*a].value.shape, &g.data);
                accumulate(grads, *b, &self.nodes[*b].value.shape, &g.data);
            }
            Op::AddRowBroadcast(m, v) => {
                let cols = self.nodes[*v].value.numel();
                accumulate(grads, *m, &self.nodes[*m].value.shape, &g.data);
                let mut dv = vec![F::zero(); cols];
                for (i, &gv) in g.data.iter().enumerate() {
                    dv[i % cols] += gv;
                }
                accumulate(grads, *v, &self.nodes[*v].value.shape, &dv);
            }
            Op::AddScalarBroadcast(x, s) => {
                accumulate(grads, *x, &self.nodes[*x].value.shape, &g.data);
                let mut ds = F::zero();
                for &gv in &g.data {
                    ds += gv;
                }
                accumulate(grads, *s, &self.nodes[*s].value.shape, &[ds]);
            }
            Op::Scale(x, k) => {
                let dx: Vec<F> = g.data.iter().map(|&gv| gv * *k).collect();
                accumulate(grads, *x, &self.nodes[*x].value.shape, &dx);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da: Vec<F> = g.data.iter().zip(&tb.data).map(|(&gv, &y)| gv * y).collect();
                let db: Vec<F> = g.data.iter().zip(&ta.data).map(|(&gv, &x)| gv * x).collect();
                accumulate(grads, *a, &ta.shape, &da);
                accumulate(grads, *b, &tb.shape, &db);
            }
            Op::ScaleByScalar(x, s) => {
                let tx = &self.nodes[*x].value;
                let sv = self.nodes[*s].value.scalar_value();
                let dx: Vec<F> = g.data.iter().map(|&gv| gv * sv).collect();
                let mut ds = F::zero();
                for (&gv, &xv) in g.data.iter().zip(&tx.data) {
                    ds += gv * xv;
                }
                accumulate(grads, *x, &tx.shape, &dx);
                accumulate(grads, *s, &self.nodes[*s].value.shape, &[ds]);
            }
            Op::RowScale(m, gates) => {
                let (tm, tg) = (&self.nodes[*m].value, &self.nodes[*gates].value);
                let cols = tm.shape[1];
                let dm: Vec<F> = g
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * tg.data[i / cols])
                    .collect();
                let mut dg = vec![F::zero(); tg.numel()];
                for (i, &gv) in g.data.iter().enumerate() {
                    dg[i / cols] += gv * tm.data[i];
                }
                accumulate(grads, *m, &tm.shape, &dm);
                accumulate(grads, *gates, &tg.shape, &dg);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (ra, ka) = promote_lhs(ta).unwrap();
                let (_, cb) = promote_rhs(tb).unwrap();
                // dA = G * B^T ; dB = A^T * G
                let da = mm_bt(&g.data, ra, cb, &tb.data, ka);
                let db = mm_at(&ta.data, ra, ka, &g.data, cb);
                accumulate(grads, *a, &ta.shape, &da);
                accumulate(grads, *b, &tb.shape, &db);
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                let one = F::one();
                let dx: Vec<F> = g
                    .data
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (one - yv))
                    .collect();
                accumulate(grads, *x, &self.nodes[*x].value.shape, &dx);
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                let one = F::one();
                let dx: Vec<F> = g
                    .data
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (one - yv * yv))
                    .collect();
                accumulate(grads, *x, &self.nodes[*x].value.shape, &dx);
            }
            Op::Relu(x) => {
                let tx = &self.nodes[*x].value;
                let z = F::zero();
                let dx: Vec<F> = g
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(&gv, &xv)| if xv > z { gv } else { z })
                    .collect();
                accumulate(grads, *x, &tx.shape, &dx);
            }
            Op::Clamp(x, lo, hi) => {
                let tx = &self.nodes[*x].value;
                let z = F::zero();
                let dx: Vec<F> = g
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { z })
                    .collect();
                accumulate(grads, *x, &tx.shape, &dx);
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let mut dot = F::zero();
                for (&gv, &yv) in g.data.iter().zip(y) {
                    dot += gv * yv;
                }
                let dx: Vec<F> = g
                    .data
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| yv * (gv - dot))
                    .collect();
                accumulate(grads, *x, &self.nodes[*x].value.shape, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let n = F::lit(tx.numel() as f64);
                let (xhat, _, s) = layernorm_raw(&tx.data, *eps);
                let dgamma: Vec<F> = g.data.iter().zip(&xhat).map(|(&gv, &xh)| gv * xh).collect();
                let dbeta = g.data.clone();
                let dxh: Vec<F> = g.data.iter().zip(&tg.data).map(|(&gv, &gm)| gv * gm).collect();
                let mut mean_dxh = F::zero();
                let mut mean_dxh_xh = F::zero();
                for (&d, &xh) in dxh.iter().zip(&xhat) {
                    mean_dxh += d;
                    mean_dxh_xh += d * xh;
                }
                mean_dxh /= n;
                mean_dxh_xh /= n;
                let dx: Vec<F> = dxh
                    .iter()
                    .zip(&xhat)
                    .map(|(&d, &xh)| (d - mean_dxh - xh * mean_dxh_xh) / s)
                    .collect();
                accumulate(grads, *x, &tx.shape, &dx);
                accumulate(grads, *gamma, &tg.shape, &dgamma);
                accumulate(grads, *beta, &self.nodes[*beta].value.shape, &dbeta);
            }
            Op::MaxPoolColumns(m) => {
                let tm = &self.nodes[*m].value;
                let (rows, cols) = (tm.shape[0], tm.shape[1]);
                let mut dm = vec![F::zero(); tm.numel()];
                for c in 0..cols {
                    let mut best = 0usize;
                    let mut bestv = tm.data[c];
                    for r in 1..rows {
                        let v = tm.data[r * cols + c];
                        if v > bestv {
                            bestv = v;
                            best = r;
                        }
                    }
                    dm[best * cols + c] += g.data[c];
                }
                accumulate(grads, *m, &tm.shape, &dm);
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = &self.nodes[p].value;
                    let n = tp.numel();
                    accumulate(grads, p, &tp.shape, &g.data[off..off + n]);
                    off += n;
                }
            }
            Op::SliceVec { x, start, len } => {
                let tx = &self.nodes[*x].value;
                let mut dx = vec![F::zero(); tx.numel()];
                dx[*start..start + len].copy_from_slice(&g.data);
                accumulate(grads, *x, &tx.shape, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let tx = &self.nodes[*x].value;
                let (rows, cols) = (tx.shape[0], tx.shape[1]);
                let mut dx = vec![F::zero(); tx.numel()];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * cols + start + j] = g.data[r * len + j];
                    }
                }
                accumulate(grads, *x, &tx.shape, &dx);
            }
            Op::ConcatColsVecMat { v, m } => {
                let (tv, tm) = (&self.nodes[*v].value, &self.nodes[*m].value);
                let (rows, cols, p) = (tm.shape[0], tm.shape[1], tv.shape[0]);
                let w = p + cols;
                let mut dv = vec![F::zero(); p];
                let mut dm = vec![F::zero(); tm.numel()];
                for r in 0..rows {
                    for j in 0..p {
                        dv[j] += g.data[r * w + j];
                    }
                    for j in 0..cols {
                        dm[r * cols + j] = g.data[r * w + p + j];
                    }
                }
                accumulate(grads, *v, &tv.shape, &dv);
                accumulate(grads, *m, &tm.shape, &dm);
            }
            Op::RowVec { m, row } => {
                let tm = &self.nodes[*m].value;
                let cols = tm.shape[1];
                let mut dm = vec![F::zero(); tm.numel()];
                dm[row * cols..(row + 1) * cols].copy_from_slice(&g.data);
                accumulate(grads, *m, &tm.shape, &dm);
            }
            Op::StackRows(rows) => {
                let cols = self.nodes[rows[0]].value.numel();
                for (i, &r) in rows.iter().enumerate() {
                    let tr = &self.nodes[r].value;
                    accumulate(grads, r, &tr.shape, &g.data[i * cols..(i + 1) * cols]);
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = &self.nodes[*table].value;
                let cols = tt.shape[1];
                let mut dt = vec![F::zero(); tt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dt[id * cols + j] += g.data[i * cols + j];
                    }
                }
                accumulate(grads, *table, &tt.shape, &dt);
            }
            Op::ScatterAddVec { src, ids } => {
                let ts = &self.nodes[*src].value;
                let ds: Vec<F> = ids.iter().map(|&id| g.data[id]).collect();
                accumulate(grads, *src, &ts.shape, &ds);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let gv = g.data[0];
                let n = F::lit(ta.numel() as f64);
                let two = F::lit(2.0);
                let da: Vec<F> = ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .map(|(&x, &y)| gv * two * (x - y) / n)
                    .collect();
                let db: Vec<F> = da.iter().map(|&d| -d).collect();
                accumulate(grads, *a, &ta.shape, &da);
                accumulate(grads, *b, &tb.shape, &db);
            }
            Op::Nll { probs, index } => {
                let tp = &self.nodes[*probs].value;
                let gv = g.data[0];
                let mut dp = vec![F::zero(); tp.numel()];
                dp[*index] = -gv / (tp.data[*index] + F::lit(NLL_EPS));
                accumulate(grads, *probs, &tp.shape, &dp);
            }
            Op::Bce { prob, label } => {
                let p = self.nodes[*prob].value.scalar_value();
                let gv = g.data[0];
                let dp = if *label {
                    -gv / p
                } else {
                    gv / (F::one() - p)
                };
                accumulate(grads, *prob, &self.nodes[*prob].value.shape, &[dp]);
            }
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], id: usize, shape: &[usize], delta: &[F]) {
    match &mut grads[id] {
        Some(t) => {
            for (dst, &d) in t.data.iter_mut().zip(delta) {
                *dst += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta.to_vec(),
            });
        }
    }
}

fn shape_err<F: Real>(primitive: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::Shape {
        primitive,
        detail: format!("lhs {:?} rhs {:?}", a.shape, b.shape),
    }
}

fn promote_lhs<F>(t: &Tensor<F>) -> Option<(usize, usize)> {
    match t.shape.len() {
        2 => Some((t.shape[0], t.shape[1])),
        1 => Some((1, t.shape[0])),
        _ => None,
    }
}

fn promote_rhs<F>(t: &Tensor<F>) -> Option<(usize, usize)> {
    match t.shape.len() {
        2 => Some((t.shape[0], t.shape[1])),
        1 => Some((t.shape[0], 1)),
        _ => None,
    }
}

fn mm<F: Real>(a: &[F], ra: usize, ka: usize, b: &[F], cb: usize) -> Vec<F> {
    let mut out = vec![F::zero(); ra * cb];
    for r in 0..ra {
        for k in 0..ka {
            let av = a[r * ka + k];
            if av == F::zero() {
                continue;
            }
            let brow = &b[k * cb..(k + 1) * cb];
            let orow = &mut out[r * cb..(r + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// dA = G·Bᵀ where G is ra×cb and B is ka×cb.
fn mm_bt<F: Real>(g: &[F], ra: usize, cb: usize, b: &[F], ka: usize) -> Vec<F> {
    let mut out = vec![F::zero(); ra * ka];
    for r in 0..ra {
        let grow = &g[r * cb..(r + 1) * cb];
        for k in 0..ka {
            let brow = &b[k * cb..(k + 1) * cb];
            let mut acc = F::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[r * ka + k] = acc;
        }
    }
    out
}

/// dB = Aᵀ·G where A is ra×ka and G is ra×cb.
fn mm_at<F: Real>(a: &[F], ra: usize, ka: usize, g: &[F], cb: usize) -> Vec<F> {
    let mut out = vec![F::zero(); ka * cb];
    for r in 0..ra {
        let grow = &g[r * cb..(r + 1) * cb];
        for k in 0..ka {
            let av = a[r * ka + k];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[k * cb..(k + 1) * cb];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn softmax_raw<F: Real>(x: &[F]) -> Vec<F> {
    let mut m = x[0];
    for &v in x.iter() {
        if v > m {
            m = v;
        }
    }
    let mut e: Vec<F> = x.iter().map(|&v| (v - m).exp()).collect();
    let mut s = F::zero();
    for &v in &e {
        s += v;
    }
    for v in &mut e {
        *v /= s;
    }
    e
}

/// Returns (xhat, mean, std) for a vector layer norm.
fn layernorm_raw<F: Real>(x: &[F], eps: F) -> (Vec<F>, F, F) {
    let n = F::lit(x.len() as f64);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let s = (var + eps).sqrt();
    let xhat = x.iter().map(|&v| (v - mean) / s).collect();
    (xhat, mean, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Central finite differences over every element of the listed leaves.
    fn fd_check<B>(build: B, leaves: &[Tensor<f64>], eps: f64, tol: f64)
    where
        B: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.of(vars[li]).cloned().unwrap_or(Tensor::zeros(&leaf.shape));
            for i in 0..leaf.numel() {
                let mut plus = leaves.to_vec();
                plus[li].data[i] += eps;
                let mut minus = leaves.to_vec();
                minus[li].data[i] -= eps;
                let eval = |ls: &[Tensor<f64>]| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
                    let l = build(&mut g, &vs);
                    g.value(l).scalar_value()
                };
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data[i];
                let rel = (a - num).abs() / f64::max(1e-8, a.abs() + num.abs());
                assert!(
                    rel < tol,
                    "leaf {li} elem {i}: analytic {a} vs numeric {num} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert!((grads.of(x).unwrap().data[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_backward_of_uniform_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.7; 5]));
        let y = g.softmax(x).unwrap();
        // Uniform upstream gradient: route through a dot with a constant ones vector.
        let ones = g.leaf(Tensor::vector(vec![1.0; 5]));
        let loss = g.matmul(y, ones).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in &grads.of(x).unwrap().data {
            assert!(v.abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let xs = vec![3.0, -1.0, 0.5, 9.0, 2.2];
        let y = softmax_raw(&xs);
        let s: f64 = y.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn maxpool_backward_first_index_on_ties() {
        let mut g = Graph::<f64>::new();
        let m = g
            .leaf(Tensor::matrix(3, 2, vec![1.0, 5.0, 1.0, 5.0, 0.0, 2.0]).unwrap());
        let pooled = g.maxpool_columns(m).unwrap();
        let ones = g.leaf(Tensor::vector(vec![1.0; 2]));
        let loss = g.matmul(pooled, ones).unwrap();
        let grads = g.backward(loss).unwrap();
        let dm = grads.of(m).unwrap();
        // Column 0 ties between rows 0 and 1: gradient goes to row 0 only.
        assert_eq!(dm.data, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_all_promotions() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.leaf(Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let v3 = g.leaf(Tensor::vector(vec![1., 0., -1.]));
        let mm = g.matmul(a, b).unwrap();
        assert_eq!(g.value(mm).data, vec![58., 64., 139., 154.]);
        let mv = g.matmul(a, v3).unwrap();
        assert_eq!(g.value(mv).data, vec![-2.0f64, -2.0]);
        let vm = g.matmul(v3, b).unwrap();
        assert_eq!(g.value(vm).data, vec![-4.0, -4.0]);
        let dot = g.matmul(v3, v3).unwrap();
        assert_eq!(g.value(dot).data, vec![2.0]);
        assert_eq!(g.value(dot).shape.len(), 0);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // Random-ish composite touching most primitives.
        let w = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.07 - 0.4).collect()).unwrap();
        let x = Tensor::vector(vec![0.3, -0.8, 0.5]);
        let b = Tensor::vector(vec![0.1, -0.2, 0.05, 0.4]);
        let gamma = Tensor::vector(vec![1.1, 0.9, 1.0, 1.2]);
        let beta = Tensor::vector(vec![0.0, 0.1, -0.1, 0.2]);
        let target = Tensor::vector(vec![0.2, 0.3, 0.1, 0.4]);
        fd_check(
            |g, vs| {
                let (w, x, b, gamma, beta, target) = (vs[0], vs[1], vs[2], vs[3], vs[4], vs[5]);
                let h = g.matmul(x, w).unwrap();
                let h = g.add(h, b).unwrap();
                let t = g.tanh(h);
                let sm = g.softmax(t).unwrap();
                let ln = g.layernorm(sm, gamma, beta, 1e-5).unwrap();
                let sg = g.sigmoid(ln);
                g.mse(sg, target).unwrap()
            },
            &[w, x, b, gamma, beta, target],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let table = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64) * 0.11 - 0.6).collect()).unwrap();
        let q = Tensor::vector(vec![0.4, -0.3, 0.9]);
        let gate = Tensor::vector(vec![0.2, -0.5]);
        fd_check(
            |g, vs| {
                let (table, q, gate) = (vs[0], vs[1], vs[2]);
                let rows = g.gather_rows(table, &[1, 3]).unwrap();
                let joined = g.concat_cols_vec_mat(q, rows).unwrap();
                let part = g.slice_cols(joined, 1, 4).unwrap();
                let gated = g.row_scale(part, gate).unwrap();
                let pooled = g.maxpool_columns(gated).unwrap();
                let s = g.slice_vec(pooled, 0, 2).unwrap();
                let sc = g.scatter_add_vec(s, &[1, 1], 3).unwrap();
                let sm = g.softmax(sc).unwrap();
                g.nll(sm, 1).unwrap()
            },
            &[table, q, gate],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn row_ops_match_finite_differences() {
        let m = Tensor::matrix(3, 2, vec![0.2, -0.1, 0.7, 0.4, -0.3, 0.9]).unwrap();
        fd_check(
            |g, vs| {
                let m = vs[0];
                let r0 = g.row_vec(m, 0).unwrap();
                let r2 = g.row_vec(m, 2).unwrap();
                let t = g.tanh(r0);
                let stacked = g.stack_rows(&[t, r2, r2]).unwrap();
                let pooled = g.maxpool_columns(stacked).unwrap();
                let sm = g.softmax(pooled).unwrap();
                g.nll(sm, 0).unwrap()
            },
            &[m],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn scalar_ops_match_finite_differences() {
        let s = Tensor::scalar(0.3);
        let x = Tensor::vector(vec![0.5, -0.4, 0.2]);
        fd_check(
            |g, vs| {
                let (s, x) = (vs[0], vs[1]);
                let p = g.sigmoid(s);
                let scaled = g.scale_by_scalar(x, p).unwrap();
                let shifted = g.add_scalar_broadcast(scaled, p).unwrap();
                let sm = g.softmax(shifted).unwrap();
                let l1 = g.nll(sm, 0).unwrap();
                let l2 = g.bce(p, true).unwrap();
                g.add(l1, l2).unwrap()
            },
            &[s, x],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.5, 1.5]));
        let d = g.detach(x);
        let loss = g.mse(x, d).unwrap();
        assert_eq!(g.value(loss).scalar_value(), 0.0);
        let grads = g.backward(loss).unwrap();
        // d(x - detach(x))^2/dx = 2(x - d) = 0 here; the detached side contributes nothing.
        for &v in &grads.of(x).unwrap().data {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn clamp_saturates_and_passes_gradient_inside() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-40.0, 0.5, 40.0]));
        let c = g.clamp(x, -30.0, 30.0);
        assert_eq!(g.value(c).data, vec![-30.0, 0.5, 30.0]);
        let ones = g.leaf(Tensor::vector(vec![1.0; 3]));
        let loss = g.matmul(c, ones).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap(); // x^2, dy/dx = 2x = 6
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.of(x).unwrap().data[0], 6.0);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match g.add(a, b) {
            Err(Error::Shape { primitive, .. }) => assert_eq!(primitive, "add"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
