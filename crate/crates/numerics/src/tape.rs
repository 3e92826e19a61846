use crate::ssm;
use crate::tensor::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Padding mode for [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output has as many rows as the input. Stride must be 1.
    Same,
    /// No padding; requires at least `k` input rows.
    None,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = x·w (+ b broadcast over rows)
    MatmulAffine {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    },
    /// Cross-correlation along the row (token) axis.
    Conv1d {
        x: ValueId,
        kernel: ValueId,
        stride: usize,
        pad_left: usize,
        n_padded: usize,
    },
    LeakyRelu {
        x: ValueId,
        slope: f64,
    },
    Sigmoid {
        x: ValueId,
    },
    SoftmaxRows {
        x: ValueId,
    },
    /// Columnwise max over rows; gradient routes to the argmax row
    /// (lowest index on ties).
    GlobalMaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        x: ValueId,
        c: f64,
    },
    AddConst {
        x: ValueId,
        c: f64,
    },
    Log {
        x: ValueId,
    },
    Clamp {
        x: ValueId,
        lo: f64,
        hi: f64,
    },
    Sum {
        x: ValueId,
    },
    Select {
        x: ValueId,
        row: usize,
        col: usize,
    },
    GatherRows {
        x: ValueId,
        indices: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<ValueId>,
    },
    /// Elementwise multiply by a constant mask (inverted-dropout scaling).
    DropoutMask {
        x: ValueId,
        mask: Vec<f64>,
    },
    Softplus {
        x: ValueId,
    },
    /// Fused zero-order-hold discretization + linear state scan.
    /// Saves the state trajectory and per-channel discretization terms.
    SsmScan {
        x: ValueId,
        a: ValueId,
        b: ValueId,
        c: ValueId,
        d: ValueId,
        delta: ValueId,
        states: Vec<f64>,
        a_hat: Vec<f64>,
        b_hat: Vec<f64>,
        phi: Vec<f64>,
        u: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward ops and composes their backward functions in reverse.
///
/// Build leaves with [`Tape::input`] (tracked) or [`Tape::constant`],
/// run ops, then call [`Tape::backward`] on a scalar output. Leaf gradients
/// are read back with [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.push_unchecked(t.with_requires_grad(true), Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push_unchecked(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<ValueId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    pub fn matmul(&mut self, x: ValueId, w: ValueId) -> Result<ValueId, NumericsError> {
        self.matmul_affine_inner(x, w, None)
    }

    /// out[i,j] = sum_k x[i,k]·w[k,j] + b[j]
    pub fn matmul_affine(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
    ) -> Result<ValueId, NumericsError> {
        self.matmul_affine_inner(x, w, Some(b))
    }

    fn matmul_affine_inner(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    ) -> Result<ValueId, NumericsError> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.shape().len() != 2 || wt.shape().len() != 2 || xt.cols() != wt.rows() {
            return Err(NumericsError::Dimension {
                op: "matmul_affine",
                left: xt.shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let (n, k, m) = (xt.rows(), xt.cols(), wt.cols());
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != m {
                return Err(NumericsError::Dimension {
                    op: "matmul_affine",
                    left: vec![n, m],
                    right: bt.shape().to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let xv = xd[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        if let Some(bid) = b {
            let bd = self.value(bid).data().to_vec();
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] += bd[j];
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push(value, Op::MatmulAffine { x, w, b }, "matmul_affine")
    }

    /// 1-D cross-correlation over rows. `x` is n×c_in, `kernel` is
    /// k×c_in×c_out; output is n'×c_out with n' = (n_padded − k)/stride + 1.
    pub fn conv1d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: Padding,
    ) -> Result<ValueId, NumericsError> {
        let (xt, kt) = (self.value(x), self.value(kernel));
        if xt.shape().len() != 2 || kt.shape().len() != 3 {
            return Err(NumericsError::Dimension {
                op: "conv1d",
                left: xt.shape().to_vec(),
                right: kt.shape().to_vec(),
            });
        }
        let (n, c_in) = (xt.rows(), xt.cols());
        let (k, kc_in, c_out) = (kt.shape()[0], kt.shape()[1], kt.shape()[2]);
        if kc_in != c_in {
            return Err(NumericsError::Dimension {
                op: "conv1d",
                left: xt.shape().to_vec(),
                right: kt.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(NumericsError::InvalidArgument("conv1d stride must be >= 1".into()));
        }
        let (pad_left, n_padded) = match padding {
            Padding::Same => {
                if stride != 1 {
                    return Err(NumericsError::InvalidArgument(
                        "conv1d same padding requires stride 1".into(),
                    ));
                }
                ((k - 1) / 2, n + k - 1)
            }
            Padding::None => {
                if n < k {
                    return Err(NumericsError::InvalidArgument(format!(
                        "conv1d without padding needs at least {k} rows, got {n}"
                    )));
                }
                (0, n)
            }
        };
        let n_out = (n_padded - k) / stride + 1;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; n_out * c_out];
        for t in 0..n_out {
            for j in 0..k {
                let src = (t * stride + j) as isize - pad_left as isize;
                if src < 0 || src as usize >= n {
                    continue;
                }
                let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
                for ci in 0..c_in {
                    let xv = xrow[ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kd[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                    let orow = &mut out[t * c_out..(t + 1) * c_out];
                    for co in 0..c_out {
                        orow[co] += xv * krow[co];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n_out, c_out], out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad_left,
                n_padded,
            },
            "conv1d",
        )
    }

    /// Elementwise x if x >= 0 else slope·x. The subgradient at 0 is `slope`.
    pub fn leaky_relu(&mut self, x: ValueId, slope: f64) -> Result<ValueId, NumericsError> {
        if !(0.0 < slope && slope < 1.0) {
            return Err(NumericsError::InvalidArgument(format!(
                "leaky_relu slope must lie in (0,1), got {slope}"
            )));
        }
        let xt = self.value(x);
        let data = xt
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::LeakyRelu { x, slope }, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Sigmoid { x }, "sigmoid")
    }

    /// Softmax over each row of a 2-D tensor; rows sum to 1.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        if xt.shape().len() != 2 {
            return Err(NumericsError::Dimension {
                op: "softmax_rows",
                left: xt.shape().to_vec(),
                right: vec![],
            });
        }
        let (n, m) = (xt.rows(), xt.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &xt.data()[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                data[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                data[i * m + j] /= sum;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::SoftmaxRows { x }, "softmax_rows")
    }

    /// Columnwise max over the row axis: n×d → 1×d.
    pub fn global_max_pool(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        if xt.shape().len() != 2 {
            return Err(NumericsError::Dimension {
                op: "global_max_pool",
                left: xt.shape().to_vec(),
                right: vec![],
            });
        }
        let (n, m) = (xt.rows(), xt.cols());
        let mut out = vec![f64::NEG_INFINITY; m];
        let mut argmax = vec![0usize; m];
        for i in 0..n {
            for j in 0..m {
                let v = xt.data()[i * m + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let value = Tensor::new(vec![1, m], out)?;
        self.push(value, Op::GlobalMaxPool { x, argmax }, "global_max_pool")
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(NumericsError::Dimension {
                op: "add",
                left: at.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(NumericsError::Dimension {
                op: "mul",
                left: at.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| c * v).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Scale { x, c }, "scale")
    }

    pub fn add_const(&mut self, x: ValueId, c: f64) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| c + v).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::AddConst { x, c }, "add_const")
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v.ln()).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Log { x }, "log")
    }

    /// Clamp into [lo, hi]; gradient passes only where the input is strictly
    /// inside the interval.
    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Clamp { x, lo, hi }, "clamp")
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let total: f64 = self.value(x).data().iter().sum();
        let value = Tensor::scalar(total);
        self.push(value, Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Extract one entry of a 2-D tensor as a scalar.
    pub fn select(&mut self, x: ValueId, row: usize, col: usize) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        if row >= xt.rows() || col >= xt.cols() {
            return Err(NumericsError::InvalidArgument(format!(
                "select ({row},{col}) out of bounds for shape {:?}",
                xt.shape()
            )));
        }
        let value = Tensor::scalar(xt.at(row, col));
        self.push(value, Op::Select { x, row, col }, "select")
    }

    /// Pick rows of a 2-D tensor by index (repeats allowed).
    pub fn gather_rows(
        &mut self,
        x: ValueId,
        indices: Vec<usize>,
    ) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        let (n, m) = (xt.rows(), xt.cols());
        if indices.is_empty() {
            return Err(NumericsError::EmptyInput("gather_rows".into()));
        }
        if indices.iter().any(|&i| i >= n) {
            return Err(NumericsError::InvalidArgument(format!(
                "gather_rows index out of range 0..{n}"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in &indices {
            data.extend_from_slice(&xt.data()[i * m..(i + 1) * m]);
        }
        let value = Tensor::new(vec![indices.len(), m], data)?;
        self.push(value, Op::GatherRows { x, indices }, "gather_rows")
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyInput("concat_rows".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NumericsError::Dimension {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            "concat_rows",
        )
    }

    /// Multiply by a fixed 0-or-scaled mask (inverted dropout). The mask is
    /// supplied by the caller so determinism stays with the seed owner.
    pub fn dropout_mask(&mut self, x: ValueId, mask: Vec<f64>) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        if mask.len() != xt.len() {
            return Err(NumericsError::Dimension {
                op: "dropout_mask",
                left: xt.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = xt
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::DropoutMask { x, mask }, "dropout_mask")
    }

    pub fn softplus(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| stable_softplus(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Softplus { x }, "softplus")
    }

    /// Zero-order-hold discretization followed by the linear state scan
    ///   h(t) = Â h(t−1) + B̂ x(t),  y(t) = C h(t) + D x(t),  h(0) = 0.
    ///
    /// `x` is T×d_in, `a` and `delta` are 1-D of length d_state (A diagonal
    /// and per-channel positive timescale), `b` is d_state×d_in, `c` is
    /// d_out×d_state, `d` is d_out×d_in. Output is T×d_out.
    pub fn ssm_scan(
        &mut self,
        x: ValueId,
        a: ValueId,
        b: ValueId,
        c: ValueId,
        d: ValueId,
        delta: ValueId,
    ) -> Result<ValueId, NumericsError> {
        let dims = ssm::ScanDims::infer(
            self.value(x),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
            self.value(delta),
        )?;
        let (a_hat, b_hat, phi, u) = ssm::discretize_buffers(
            self.value(a).data(),
            self.value(b).data(),
            dims.d_in,
            self.value(delta).data(),
        )?;
        let (y, states) = ssm::scan_with_states(
            self.value(x).data(),
            dims,
            &a_hat,
            &b_hat,
            self.value(c).data(),
            self.value(d).data(),
        );
        let value = Tensor::new(vec![dims.t_len, dims.d_out], y)?;
        self.push(
            value,
            Op::SsmScan {
                x,
                a,
                b,
                c,
                d,
                delta,
                states,
                a_hat,
                b_hat,
                phi,
                u,
            },
            "ssm_scan",
        )
    }

    /// Smallest distance from any recorded value to a nondifferentiable
    /// kink: |x| at LeakyReLU inputs, the top-two column gap at pooling
    /// inputs, and the distance to either bound at clamp inputs. Finite
    /// difference checks use this to reject draws that straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::GlobalMaxPool { x, .. } => {
                    let t = self.value(*x);
                    for c in 0..t.cols() {
                        let mut top = f64::NEG_INFINITY;
                        let mut second = f64::NEG_INFINITY;
                        for r in 0..t.rows() {
                            let v = t.at(r, c);
                            if v > top {
                                second = top;
                                top = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        if second.is_finite() {
                            margin = margin.min(top - second);
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.value(*x).data() {
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar output. Gradients for every node are kept
    /// and can be read with [`Tape::grad`].
    pub fn backward(&mut self, out: ValueId) -> Result<(), NumericsError> {
        if !self.value(out).is_scalar() {
            return Err(NumericsError::InvalidArgument(
                "backward target must be scalar".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op: "backward" });
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], id: ValueId, delta: &[f64]| {
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; delta.len()]);
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        };
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatmulAffine { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xt.rows(), xt.cols(), wt.cols());
                let mut dx = vec![0.0; n * k];
                let mut dw = vec![0.0; k * m];
                for i in 0..n {
                    for j in 0..m {
                        let go = g[i * m + j];
                        if go == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            dx[i * k + p] += go * wt.data()[p * m + j];
                            dw[p * m + j] += go * xt.data()[i * k + p];
                        }
                    }
                }
                add_into(grads, *x, &dx);
                add_into(grads, *w, &dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                    add_into(grads, *b, &db);
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad_left,
                n_padded,
            } => {
                let (xt, kt) = (self.value(*x), self.value(*kernel));
                let (n, c_in) = (xt.rows(), xt.cols());
                let (k, _, c_out) = (kt.shape()[0], kt.shape()[1], kt.shape()[2]);
                let n_out = (n_padded - k) / stride + 1;
                let mut dx = vec![0.0; n * c_in];
                let mut dk = vec![0.0; k * c_in * c_out];
                for t in 0..n_out {
                    for j in 0..k {
                        let src = (t * stride + j) as isize - *pad_left as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        let src = src as usize;
                        for ci in 0..c_in {
                            let xv = xt.data()[src * c_in + ci];
                            for co in 0..c_out {
                                let go = g[t * c_out + co];
                                if go == 0.0 {
                                    continue;
                                }
                                dx[src * c_in + ci] += go * kt.data()[(j * c_in + ci) * c_out + co];
                                dk[(j * c_in + ci) * c_out + co] += go * xv;
                            }
                        }
                    }
                }
                add_into(grads, *x, &dx);
                add_into(grads, *kernel, &dk);
            }
            Op::LeakyRelu { x, slope } => {
                let xt = self.value(*x);
                let dx: Vec<f64> = xt
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &go)| if v > 0.0 { go } else { go * slope })
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let s = self.nodes[node].value.data();
                let dx: Vec<f64> = s.iter().zip(g).map(|(&sv, &go)| go * sv * (1.0 - sv)).collect();
                add_into(grads, *x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let s = &self.nodes[node].value;
                let (n, m) = (s.rows(), s.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let srow = &s.data()[i * m..(i + 1) * m];
                    let grow = &g[i * m..(i + 1) * m];
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[i * m + j] = srow[j] * (grow[j] - dot);
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let xt = self.value(*x);
                let (n, m) = (xt.rows(), xt.cols());
                let mut dx = vec![0.0; n * m];
                for (j, &i) in argmax.iter().enumerate() {
                    dx[i * m + j] += g[j];
                }
                add_into(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = bt.data().iter().zip(g).map(|(&bv, &go)| go * bv).collect();
                let db: Vec<f64> = at.data().iter().zip(g).map(|(&av, &go)| go * av).collect();
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|&go| go * c).collect();
                add_into(grads, *x, &dx);
            }
            Op::AddConst { x, .. } => add_into(grads, *x, g),
            Op::Log { x } => {
                let xt = self.value(*x);
                let dx: Vec<f64> = xt.data().iter().zip(g).map(|(&v, &go)| go / v).collect();
                add_into(grads, *x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xt = self.value(*x);
                let dx: Vec<f64> = xt
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &go)| if v > *lo && v < *hi { go } else { 0.0 })
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let len = self.value(*x).len();
                add_into(grads, *x, &vec![g[0]; len]);
            }
            Op::Select { x, row, col } => {
                let xt = self.value(*x);
                let mut dx = vec![0.0; xt.len()];
                dx[row * xt.cols() + col] = g[0];
                add_into(grads, *x, &dx);
            }
            Op::GatherRows { x, indices } => {
                let xt = self.value(*x);
                let m = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..m {
                        dx[i * m + j] += g[r * m + j];
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::DropoutMask { x, mask } => {
                let dx: Vec<f64> = mask.iter().zip(g).map(|(&m, &go)| go * m).collect();
                add_into(grads, *x, &dx);
            }
            Op::Softplus { x } => {
                let xt = self.value(*x);
                let dx: Vec<f64> = xt
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &go)| go * stable_sigmoid(v))
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::SsmScan {
                x,
                a,
                b,
                c,
                d,
                delta,
                states,
                a_hat,
                b_hat,
                phi,
                u,
            } => {
                let dims = ssm::ScanDims::infer(
                    self.value(*x),
                    self.value(*a),
                    self.value(*b),
                    self.value(*c),
                    self.value(*d),
                    self.value(*delta),
                )
                .expect("shapes validated at forward time");
                let back = ssm::scan_backward(
                    g,
                    self.value(*x).data(),
                    dims,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    self.value(*d).data(),
                    self.value(*delta).data(),
                    states,
                    a_hat,
                    b_hat,
                    phi,
                    u,
                );
                add_into(grads, *x, &back.dx);
                add_into(grads, *a, &back.da);
                add_into(grads, *b, &back.db);
                add_into(grads, *c, &back.dc);
                add_into(grads, *d, &back.dd);
                add_into(grads, *delta, &back.ddelta);
            }
        }
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
