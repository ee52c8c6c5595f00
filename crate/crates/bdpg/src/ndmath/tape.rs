//! Reverse-mode differentiation on a flat operation tape.
//!
//! A [`Tape`] records one forward computation as a sequence of nodes in
//! topological order; [`Tape::backward`] then sweeps the nodes once in
//! reverse, pushing adjoints toward the leaves and accumulating gradients
//! for every leaf bound to a [`ParamStore`] parameter. Freezing a network
//! is structural: a frozen parameter enters the tape as a plain constant,
//! so no gradient path to it exists at all.
//!
//! Shapes are validated eagerly; mixing incompatible shapes is a
//! programming error and panics at the call site rather than surfacing
//! later as a silent broadcast.

use super::{Array, NdError, ParamStore};

pub type NodeId = usize;

enum Op {
    /// Input node; `Some(name)` binds it to a store parameter.
    Leaf(Option<String>),
    /// `[n, k] @ [k, m]`.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise minimum; ties route the gradient to the first input.
    MinElem(NodeId, NodeId),
    /// `[n, c] + [1, c]`, the bias-add broadcast.
    AddRow(NodeId, NodeId),
    /// `[n, c] * [1, c]`.
    MulRow(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
    },
    /// Per-row column selection: output `[n, 1]` with `out[r] = in[r, idx[r]]`.
    ColPick {
        input: NodeId,
        indices: Vec<usize>,
    },
    /// Row-wise `x - logsumexp(x)`.
    LogSoftmax(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    /// The added constant does not appear in the backward rule.
    AddScalar(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Sum across columns: `[n, c] -> [n, 1]`.
    SumRows(NodeId),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// One recorded forward pass. Build nodes with the op methods, then call
/// [`Tape::backward`] on a scalar loss node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Value of a `[1, 1]` node.
    pub fn value_scalar(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id];
        assert!(
            node.rows == 1 && node.cols == 1,
            "value_scalar on [{}, {}] node",
            node.rows,
            node.cols
        );
        node.value[0]
    }

    /// Node value narrowed back to a 32-bit array of shape `[rows, cols]`.
    pub fn to_array(&self, id: NodeId) -> Array {
        let node = &self.nodes[id];
        let data = node.value.iter().map(|&v| v as f32).collect();
        Array::from_vec(&[node.rows, node.cols], data).expect("node value length matches dims")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    /// Constant leaf from a 32-bit array; never receives gradient.
    pub fn constant(&mut self, array: &Array) -> NodeId {
        let (rows, cols) = array.dims2();
        let value = array.data().iter().map(|&v| v as f64).collect();
        self.push(rows, cols, value, Op::Leaf(None))
    }

    /// Constant leaf from 64-bit data.
    pub fn constant_parts(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "constant data length");
        self.push(rows, cols, value, Op::Leaf(None))
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.push(1, 1, vec![value], Op::Leaf(None))
    }

    /// Leaf holding the current value of a store parameter. With
    /// `frozen = true` the leaf is a constant snapshot instead of a
    /// differentiable binding, which is how target networks are held
    /// fixed during adversarial updates.
    pub fn param(
        &mut self,
        store: &ParamStore,
        name: &str,
        frozen: bool,
    ) -> Result<NodeId, NdError> {
        let array = store.value(name)?;
        let (rows, cols) = array.dims2();
        let value = array.data().iter().map(|&v| v as f64).collect();
        let binding = if frozen { None } else { Some(name.to_string()) };
        Ok(self.push(rows, cols, value, Op::Leaf(binding)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims: [{n}, {k}] @ [{k2}, {m}]");
        let mut value = vec![0.0; n * m];
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        for i in 0..n {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                let crow = &mut value[i * m..(i + 1) * m];
                for j in 0..m {
                    crow[j] += aip * brow[j];
                }
            }
        }
        self.push(n, m, value, Op::MatMul(a, b))
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, name: &str) -> (usize, usize) {
        let da = self.dims(a);
        let db = self.dims(b);
        assert_eq!(da, db, "{name} shape mismatch: {da:?} vs {db:?}");
        da
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.elementwise(a, b, "add");
        let value = self.zip(a, b, |x, y| x + y);
        self.push(rows, cols, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.elementwise(a, b, "sub");
        let value = self.zip(a, b, |x, y| x - y);
        self.push(rows, cols, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.elementwise(a, b, "mul");
        let value = self.zip(a, b, |x, y| x * y);
        self.push(rows, cols, value, Op::Mul(a, b))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.elementwise(a, b, "min_elem");
        let value = self.zip(a, b, f64::min);
        self.push(rows, cols, value, Op::MinElem(a, b))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        assert!(rr == 1 && rc == c, "add_row: [{n}, {c}] + [{rr}, {rc}]");
        let rv = &self.nodes[row].value;
        let value = self.nodes[a]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % c])
            .collect();
        self.push(n, c, value, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        assert!(rr == 1 && rc == c, "mul_row: [{n}, {c}] * [{rr}, {rc}]");
        let rv = &self.nodes[row].value;
        let value = self.nodes[a]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rv[i % c])
            .collect();
        self.push(n, c, value, Op::MulRow(a, row))
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "concat_cols of nothing");
        let n = self.dims(inputs[0]).0;
        let mut cols = 0;
        for &id in inputs {
            let (r, c) = self.dims(id);
            assert_eq!(r, n, "concat_cols row mismatch");
            cols += c;
        }
        let mut value = vec![0.0; n * cols];
        let mut offset = 0;
        for &id in inputs {
            let c = self.nodes[id].cols;
            for r in 0..n {
                let src = &self.nodes[id].value[r * c..(r + 1) * c];
                value[r * cols + offset..r * cols + offset + c].copy_from_slice(src);
            }
            offset += c;
        }
        self.push(n, cols, value, Op::ConcatCols(inputs.to_vec()))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        let (n, c) = self.dims(input);
        assert!(
            start + len <= c,
            "slice_cols {start}..{} of {c}",
            start + len
        );
        let mut value = vec![0.0; n * len];
        for r in 0..n {
            let src = &self.nodes[input].value[r * c + start..r * c + start + len];
            value[r * len..(r + 1) * len].copy_from_slice(src);
        }
        self.push(n, len, value, Op::SliceCols { input, start })
    }

    pub fn col_pick(&mut self, input: NodeId, indices: &[usize]) -> NodeId {
        let (n, c) = self.dims(input);
        assert_eq!(indices.len(), n, "col_pick needs one index per row");
        let value = indices
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < c, "col_pick index {j} out of {c}");
                self.nodes[input].value[r * c + j]
            })
            .collect();
        self.push(
            n,
            1,
            value,
            Op::ColPick {
                input,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn log_softmax(&mut self, input: NodeId) -> NodeId {
        let (n, c) = self.dims(input);
        assert!(c > 0, "log_softmax of zero-width rows");
        let mut value = vec![0.0; n * c];
        for r in 0..n {
            let row = &self.nodes[input].value[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                value[r * c + j] = row[j] - lse;
            }
        }
        self.push(n, c, value, Op::LogSoftmax(input))
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::exp, Op::Exp(input))
    }

    pub fn ln(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::ln, Op::Ln(input))
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::tanh, Op::Tanh(input))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.unary(input, |x| x.max(0.0), Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(input))
    }

    /// ln(1 + exp(x)), evaluated in the overflow-free form.
    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        self.unary(
            input,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Op::Softplus(input),
        )
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        self.unary(input, |x| x * x, Op::Square(input))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.unary(input, |x| x * factor, Op::Scale(input, factor))
    }

    pub fn add_scalar(&mut self, input: NodeId, shift: f64) -> NodeId {
        self.unary(input, |x| x + shift, Op::AddScalar(input))
    }

    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clamp bounds inverted: [{lo}, {hi}]");
        self.unary(input, |x| x.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    fn unary(&mut self, input: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (rows, cols) = self.dims(input);
        let value = self.nodes[input].value.iter().map(|&x| f(x)).collect();
        self.push(rows, cols, value, op)
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.nodes[input].value.iter().sum();
        self.push(1, 1, vec![total], Op::SumAll(input))
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let n = self.nodes[input].value.len();
        assert!(n > 0, "mean_all of empty node");
        let total: f64 = self.nodes[input].value.iter().sum();
        self.push(1, 1, vec![total / n as f64], Op::MeanAll(input))
    }

    pub fn sum_rows(&mut self, input: NodeId) -> NodeId {
        let (n, c) = self.dims(input);
        let value = (0..n)
            .map(|r| self.nodes[input].value[r * c..(r + 1) * c].iter().sum())
            .collect();
        self.push(n, 1, value, Op::SumRows(input))
    }

    /// Reverse sweep from a scalar loss; gradients of every bound
    /// parameter leaf are accumulated into `store`. Call
    /// [`ParamStore::zero_grads`] first unless accumulation is intended.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<(), NdError> {
        let loss_node = &self.nodes[loss];
        if loss_node.rows != 1 || loss_node.cols != 1 {
            return Err(NdError::NonScalarLoss {
                rows: loss_node.rows,
                cols: loss_node.cols,
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let grad = match adjoints[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(binding) => {
                    if let Some(name) = binding {
                        store.accumulate_grad(name, &grad)?;
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let m = self.nodes[*b].cols;
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    // dA = dC @ B^T
                    let da = self.adjoint_mut(&mut adjoints, *a);
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += grad[i * m + j] * bv[p * m + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                    // dB = A^T @ dC
                    let db = self.adjoint_mut(&mut adjoints, *b);
                    for p in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += av[i * k + p] * grad[i * m + j];
                            }
                            db[p * m + j] += acc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoints, *a, &grad, |_, g| g);
                    self.accumulate(&mut adjoints, *b, &grad, |_, g| g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoints, *a, &grad, |_, g| g);
                    self.accumulate(&mut adjoints, *b, &grad, |_, g| -g);
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[*b].value.clone();
                    self.accumulate(&mut adjoints, *a, &grad, |i, g| g * bv[i]);
                    let av = &self.nodes[*a].value;
                    let da: Vec<f64> = grad.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    self.accumulate(&mut adjoints, *b, &da, |_, g| g);
                }
                Op::MinElem(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let pick_a: Vec<bool> = av.iter().zip(bv).map(|(&x, &y)| x <= y).collect();
                    self.accumulate(
                        &mut adjoints,
                        *a,
                        &grad,
                        |i, g| if pick_a[i] { g } else { 0.0 },
                    );
                    self.accumulate(
                        &mut adjoints,
                        *b,
                        &grad,
                        |i, g| if pick_a[i] { 0.0 } else { g },
                    );
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut adjoints, *a, &grad, |_, g| g);
                    let c = node.cols;
                    let drow = self.adjoint_mut(&mut adjoints, *row);
                    for (i, &g) in grad.iter().enumerate() {
                        drow[i % c] += g;
                    }
                }
                Op::MulRow(a, row) => {
                    let c = node.cols;
                    let rv = self.nodes[*row].value.clone();
                    self.accumulate(&mut adjoints, *a, &grad, |i, g| g * rv[i % c]);
                    let av = &self.nodes[*a].value;
                    let drow = self.adjoint_mut(&mut adjoints, *row);
                    for (i, &g) in grad.iter().enumerate() {
                        drow[i % c] += g * av[i];
                    }
                }
                Op::ConcatCols(inputs) => {
                    let inputs = inputs.clone();
                    let cols = node.cols;
                    let n = node.rows;
                    let mut offset = 0;
                    for id_in in inputs {
                        let c = self.nodes[id_in].cols;
                        let dst = self.adjoint_mut(&mut adjoints, id_in);
                        for r in 0..n {
                            for j in 0..c {
                                dst[r * c + j] += grad[r * cols + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { input, start } => {
                    let (n, len) = (node.rows, node.cols);
                    let c = self.nodes[*input].cols;
                    let start = *start;
                    let dst = self.adjoint_mut(&mut adjoints, *input);
                    for r in 0..n {
                        for j in 0..len {
                            dst[r * c + start + j] += grad[r * len + j];
                        }
                    }
                }
                Op::ColPick { input, indices } => {
                    let c = self.nodes[*input].cols;
                    let indices = indices.clone();
                    let dst = self.adjoint_mut(&mut adjoints, *input);
                    for (r, &j) in indices.iter().enumerate() {
                        dst[r * c + j] += grad[r];
                    }
                }
                Op::LogSoftmax(input) => {
                    let (n, c) = (node.rows, node.cols);
                    let probs: Vec<f64> = node.value.iter().map(|&v| v.exp()).collect();
                    let dst = self.adjoint_mut(&mut adjoints, *input);
                    for r in 0..n {
                        let gsum: f64 = grad[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            dst[r * c + j] += grad[r * c + j] - probs[r * c + j] * gsum;
                        }
                    }
                }
                Op::Exp(input) => {
                    let out = node.value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| g * out[i]);
                }
                Op::Ln(input) => {
                    let xv = self.nodes[*input].value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| g / xv[i]);
                }
                Op::Tanh(input) => {
                    let out = node.value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| {
                        g * (1.0 - out[i] * out[i])
                    });
                }
                Op::Relu(input) => {
                    let xv = self.nodes[*input].value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| {
                        if xv[i] > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    });
                }
                Op::Softplus(input) => {
                    let xv = self.nodes[*input].value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| {
                        g / (1.0 + (-xv[i]).exp())
                    });
                }
                Op::Sigmoid(input) => {
                    let out = node.value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| {
                        g * out[i] * (1.0 - out[i])
                    });
                }
                Op::Square(input) => {
                    let xv = self.nodes[*input].value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| g * 2.0 * xv[i]);
                }
                Op::Scale(input, factor) => {
                    let factor = *factor;
                    self.accumulate(&mut adjoints, *input, &grad, |_, g| g * factor);
                }
                Op::AddScalar(input) => {
                    self.accumulate(&mut adjoints, *input, &grad, |_, g| g);
                }
                Op::Clamp { input, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let xv = self.nodes[*input].value.clone();
                    self.accumulate(&mut adjoints, *input, &grad, |i, g| {
                        if xv[i] >= lo && xv[i] <= hi {
                            g
                        } else {
                            0.0
                        }
                    });
                }
                Op::SumAll(input) => {
                    let g = grad[0];
                    let dst = self.adjoint_mut(&mut adjoints, *input);
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                }
                Op::MeanAll(input) => {
                    let n = self.nodes[*input].value.len();
                    let g = grad[0] / n as f64;
                    let dst = self.adjoint_mut(&mut adjoints, *input);
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                }
                Op::SumRows(input) => {
                    let c = self.nodes[*input].cols;
                    let dst = self.adjoint_mut(&mut adjoints, *input);
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += grad[i / c];
                    }
                }
            }
        }
        Ok(())
    }

    fn adjoint_mut<'a>(
        &self,
        adjoints: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> &'a mut Vec<f64> {
        let len = self.nodes[id].value.len();
        adjoints[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(
        &self,
        adjoints: &mut [Option<Vec<f64>>],
        id: NodeId,
        grad: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let dst = self.adjoint_mut(adjoints, id);
        for (i, &g) in grad.iter().enumerate() {
            dst[i] += f(i, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(pairs: &[(&str, f32)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, v) in pairs {
            store.add(name, Array::scalar(*v)).unwrap();
        }
        store
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut store = scalar_store(&[("x", 3.0)]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x", false).unwrap();
        let loss = tape.square(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = scalar_store(&[("x", 3.0), ("y", 2.0)]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x", false).unwrap();
        let y = tape.param(&store, "y", true).unwrap();
        let prod = tape.mul(x, y);
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[2.0]);
        assert_eq!(store.grad("y").unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        store
            .add("w", Array::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w", false).unwrap();
        let sq = tape.square(w);
        let err = tape.backward(sq, &mut store).unwrap_err();
        assert_eq!(err, NdError::NonScalarLoss { rows: 1, cols: 2 });
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.constant_parts(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.constant_parts(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn log_softmax_rows_are_normalized() {
        let mut tape = Tape::new();
        let x = tape.constant_parts(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let ls = tape.log_softmax(x);
        for r in 0..2 {
            let total: f64 = tape.value(ls)[r * 3..(r + 1) * 3]
                .iter()
                .map(|&v| v.exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn min_elem_ties_route_gradient_to_first_input() {
        let mut store = scalar_store(&[("a", 1.5), ("b", 1.5)]);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a", false).unwrap();
        let b = tape.param(&store, "b", false).unwrap();
        let m = tape.min_elem(a, b);
        let loss = tape.sum_all(m);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("a").unwrap().data(), &[1.0]);
        assert_eq!(store.grad("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn clamp_zeroes_gradient_outside_bounds() {
        let mut store = scalar_store(&[("lo", -2.0), ("mid", 0.3), ("hi", 9.0)]);
        let mut tape = Tape::new();
        let lo = tape.param(&store, "lo", false).unwrap();
        let mid = tape.param(&store, "mid", false).unwrap();
        let hi = tape.param(&store, "hi", false).unwrap();
        let cat = tape.concat_cols(&[lo, mid, hi]);
        let clamped = tape.clamp(cat, -1.0, 1.0);
        let loss = tape.sum_all(clamped);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("lo").unwrap().data(), &[0.0]);
        assert_eq!(store.grad("mid").unwrap().data(), &[1.0]);
        assert_eq!(store.grad("hi").unwrap().data(), &[0.0]);
    }

    #[test]
    fn col_pick_gathers_and_scatters() {
        let mut store = ParamStore::new();
        store
            .add(
                "logits",
                Array::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "logits", false).unwrap();
        let picked = tape.col_pick(x, &[2, 0]);
        assert_eq!(
            tape.value(picked),
            &[0.30000001192092896, 0.4000000059604645]
        );
        let loss = tape.sum_all(picked);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(
            store.grad("logits").unwrap().data(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut store = scalar_store(&[("x", 2.0)]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x", false).unwrap();
        let loss = tape.square(x);
        tape.backward(loss, &mut store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[8.0]);
    }
}
