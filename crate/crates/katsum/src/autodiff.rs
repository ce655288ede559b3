//! A small reverse-mode automatic differentiation tape over 2-d arrays.
//!
//! Every forward pass builds a fresh tape of primitive operations;
//! [`Tape::backward`] walks it in reverse and accumulates gradients into a
//! per-parameter table. The op set is exactly what the summarizer needs:
//! matrix products, broadcast adds, row softmax, layer norm, embedding
//! gathers, row/column concatenation, slicing, dropout, and a fused
//! label-smoothed cross-entropy head.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A named parameter tensor. `decoder_group` selects which optimizer and
/// learning-rate schedule owns it.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub decoder_group: bool,
    pub value: Array2<f64>,
}

/// All trainable tensors of a model, in a fixed construction order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, decoder_group: bool, value: Array2<f64>) -> usize {
        self.params.push(Param {
            name: name.into(),
            decoder_group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

enum Op {
    /// Constant input; gradients are discarded.
    Leaf,
    /// Copy of `ParamSet` entry `idx`; gradients accumulate per parameter.
    ParamRef { idx: usize },
    Add(Var, Var),
    /// `(n, d) + (1, d)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    /// `a . b^T` without materializing the transpose.
    MatMulT(Var, Var),
    Relu(Var),
    /// Row-wise softmax; the node value caches the output.
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Rows of `table` selected by `ids`.
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, width: usize },
    /// Inverted dropout; `mask` entries are 0 or 1/keep.
    Dropout { x: Var, mask: Array2<f64> },
    /// Mean label-smoothed cross entropy over kept rows; caches softmax.
    CrossEntropy {
        logits: Var,
        probs: Array2<f64>,
        targets: Vec<usize>,
        kept: Vec<bool>,
        smoothing: f64,
        n_kept: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds parameter `idx` of `params` onto the tape.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> Var {
        self.push(params.params[idx].value.clone(), Op::ParamRef { idx })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let value = &self.nodes[x.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    /// `a . b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Row-wise softmax. Max subtraction keeps fully-masked rows finite
    /// (they come out uniform).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Per-row layer normalization with learned gain and shift (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let input = &self.nodes[x.0].value;
        let (n, d) = input.dim();
        let mut value = Array2::zeros((n, d));
        let mut means = Vec::with_capacity(n);
        let mut inv_stds = Vec::with_capacity(n);
        for (i, row) in input.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for j in 0..d {
                value[(i, j)] = (row[j] - mean) * inv_std;
            }
        }
        let gain_v = &self.nodes[gain.0].value;
        let shift_v = &self.nodes[shift.0].value;
        for i in 0..n {
            for j in 0..d {
                value[(i, j)] = value[(i, j)] * gain_v[(0, j)] + shift_v[(0, j)];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let src = &self.nodes[table.0].value;
        let mut value = Array2::zeros((ids.len(), src.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&src.row(id));
        }
        self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("row concat shapes agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("col concat shapes agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.nodes[x.0]
            .value
            .slice(s![.., start..start + width])
            .to_owned();
        self.push(value, Op::SliceCols { x, start, width })
    }

    /// Applies a precomputed inverted-dropout mask (entries 0 or 1/keep).
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let value = &self.nodes[x.0].value * &mask;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Mean label-smoothed cross entropy over the rows where `kept` is true.
    /// The smoothed target puts `1 - smoothing + smoothing/V` on the true
    /// class and `smoothing/V` elsewhere. Returns a `1 x 1` node.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        kept: &[bool],
        smoothing: f64,
    ) -> Var {
        let z = &self.nodes[logits.0].value;
        let (n, vocab) = z.dim();
        assert_eq!(targets.len(), n);
        assert_eq!(kept.len(), n);
        let n_kept = kept.iter().filter(|&&k| k).count();
        assert!(n_kept > 0, "cross entropy needs at least one kept row");
        let mut probs = Array2::zeros((n, vocab));
        let mut loss = 0.0;
        let uniform = smoothing / vocab as f64;
        for i in 0..n {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..vocab {
                let e = (row[j] - max).exp();
                probs[(i, j)] = e;
                sum += e;
            }
            for j in 0..vocab {
                probs[(i, j)] /= sum;
            }
            if kept[i] {
                let lse = max + sum.ln();
                // -sum_j q_j log p_j with q = (1 - eps) one_hot + eps/V.
                let mut q_dot_z = (1.0 - smoothing) * row[targets[i]];
                if smoothing > 0.0 {
                    q_dot_z += uniform * row.sum();
                }
                loss += lse - q_dot_z;
            }
        }
        loss /= n_kept as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                kept: kept.to_vec(),
                smoothing,
                n_kept,
            },
        )
    }

    /// Reverse pass from scalar node `loss`. Returns one gradient per entry
    /// of `params` (zeros for parameters the tape never touched).
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Vec<Array2<f64>> {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        let mut param_grads: Vec<Array2<f64>> = params
            .params
            .iter()
            .map(|p| Array2::zeros(p.value.dim()))
            .collect();

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::ParamRef { idx } => param_grads[*idx] += &grad,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &grad);
                    accumulate(&mut grads, *b, &grad);
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *x, &grad);
                    let row_grad = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, &row_grad);
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, &grad.mapv(|v| v * c)),
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&grad);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::MatMulT(a, b) => {
                    let da = grad.dot(&self.nodes[b.0].value);
                    let db = grad.t().dot(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Relu(x) => {
                    let dx = ndarray::Zip::from(&grad)
                        .and(&self.nodes[x.0].value)
                        .map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let mut dx = Array2::zeros(y.dim());
                    for (r, (y_row, g_row)) in
                        y.rows().into_iter().zip(grad.rows()).enumerate()
                    {
                        let dot: f64 = y_row.iter().zip(g_row.iter()).map(|(y, g)| y * g).sum();
                        for (c, (&yv, &gv)) in y_row.iter().zip(g_row.iter()).enumerate() {
                            dx[(r, c)] = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    mean,
                    inv_std,
                } => {
                    let input = &self.nodes[x.0].value;
                    let gain_v = &self.nodes[gain.0].value;
                    let (n, d) = input.dim();
                    let mut dx = Array2::zeros((n, d));
                    let mut dgain = Array2::zeros((1, d));
                    let mut dshift = Array2::zeros((1, d));
                    for r in 0..n {
                        let m = mean[r];
                        let is = inv_std[r];
                        // dxhat and the two row means the formula needs.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; d];
                        for c in 0..d {
                            let xhat = (input[(r, c)] - m) * is;
                            let g = grad[(r, c)];
                            dgain[(0, c)] += g * xhat;
                            dshift[(0, c)] += g;
                            let dh = g * gain_v[(0, c)];
                            dxhat[c] = dh;
                            sum_dxhat += dh;
                            sum_dxhat_xhat += dh * xhat;
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let xhat = (input[(r, c)] - m) * is;
                            dx[(r, c)] = is
                                * (dxhat[c]
                                    - sum_dxhat * inv_d
                                    - xhat * sum_dxhat_xhat * inv_d);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gain, &dgain);
                    accumulate(&mut grads, *shift, &dshift);
                }
                Op::GatherRows { table, ids } => {
                    let mut dt = Array2::zeros(self.nodes[table.0].value.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &grad.row(r);
                    }
                    accumulate(&mut grads, *table, &dt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for part in parts {
                        let rows = self.nodes[part.0].value.nrows();
                        let slice = grad.slice(s![offset..offset + rows, ..]).to_owned();
                        accumulate(&mut grads, *part, &slice);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for part in parts {
                        let cols = self.nodes[part.0].value.ncols();
                        let slice = grad.slice(s![.., offset..offset + cols]).to_owned();
                        accumulate(&mut grads, *part, &slice);
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start, width } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    dx.slice_mut(s![.., *start..*start + *width]).assign(&grad);
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, &(&grad * mask)),
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    kept,
                    smoothing,
                    n_kept,
                } => {
                    let g = grad[(0, 0)] / *n_kept as f64;
                    let (n, vocab) = probs.dim();
                    let uniform = smoothing / vocab as f64;
                    let mut dz = Array2::zeros((n, vocab));
                    for r in 0..n {
                        if !kept[r] {
                            continue;
                        }
                        for c in 0..vocab {
                            let q = if c == targets[r] {
                                1.0 - smoothing + uniform
                            } else {
                                uniform
                            };
                            dz[(r, c)] = g * (probs[(r, c)] - q);
                        }
                    }
                    accumulate(&mut grads, *logits, &dz);
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, grad: &Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += grad,
        slot => *slot = Some(grad.clone()),
    }
}
