use super::tensor::{gemm, MatRef, Tensor, TensorError};

/// `tanh` without a libm call: `exp(−2|x|)` by Cody–Waite range reduction
/// and a degree-13 Taylor polynomial, written branch-free so the batch loop
/// vectorizes. Absolute error is within a few ulp of 1; odd symmetry and
/// `tanh(0) = 0` are exact.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // Below this exp(y) < 2^-1022 and tanh is 1 to double precision anyway.
    let y = (-2.0 * x.abs()).max(-708.0);
    // Round to nearest by the 1.5·2^52 trick; `round` is a libm call on
    // baseline x86-64.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let shifted = y * std::f64::consts::LOG2_E + SHIFTER;
    let k = shifted - SHIFTER;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // The low mantissa bits of `shifted` hold k in two's complement; building
    // 2^k from them avoids a float→int conversion that would not vectorize.
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    let t = p * scale;
    let r = ((1.0 - t) / (1.0 + t)).copysign(x);
    // `max` above swallows NaN; divergence detection needs it back.
    if x.is_nan() {
        x
    } else {
        r
    }
}

/// [`fast_tanh`] over a slice, using 256-bit lanes when the CPU has them.
/// Both paths perform the same IEEE operations, so results are identical.
fn tanh_batch(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { tanh_avx2(x, &mut out) };
        return out;
    }
    for (o, v) in out.iter_mut().zip(x) {
        *o = fast_tanh(*v);
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_avx2(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = fast_tanh(*v);
    }
}

fn column_sums(g: &Tensor, n: usize) -> Result<Tensor, TensorError> {
    let mut sums = vec![0.0; n];
    for row in g.data().chunks_exact(n) {
        for (d, r) in sums.iter_mut().zip(row) {
            *d += r;
        }
    }
    Tensor::new(&[n], sums)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Linear(Var, Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    DivScalar(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Abs(Var),
    RowMatvec(Var, Var),
    BlockMix(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Nodes are appended in evaluation order,
/// so every input of node `i` has an index below `i`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`]. `None` for constants
    /// and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        // Overflow to ±inf is reported by the solver as divergence; NaN from
        // finite inputs is a bug in an op.
        debug_assert!(
            !value.data().iter().any(|x| x.is_nan())
                || inputs.iter().any(|v| !self.value(*v).is_finite()),
            "NaN output from {op:?} on finite inputs"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[r, :] + bias` for every row `r` of a 2-D `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let [_, n] = xv.dims2("add_bias")?;
        if bv.len() != n {
            return Err(dim_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x·w + b` with `b` broadcast over rows; one buffer instead of a
    /// matmul and a bias add.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [m, k] = xv.dims2("linear")?;
        let [k2, n] = wv.dims2("linear")?;
        if k != k2 {
            return Err(dim_err("linear", xv, wv));
        }
        if bv.len() != n {
            return Err(dim_err("linear", wv, bv));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(xv.data(), k),
            MatRef::row_major(wv.data(), n),
            1.0,
            &mut out,
        );
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::Linear(x, w, b), &[x, w, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let out = self.value(x).map(|v| scale * v);
        self.push(out, Op::Affine(x, scale), &[x])
    }

    pub fn div_scalar(&mut self, x: Var, divisor: f64) -> Var {
        let out = self.value(x).map(|v| v / divisor);
        self.push(out, Op::DivScalar(x, divisor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), tanh_batch(xv.data()))
            .expect("same shape as the input");
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let [_, n] = xv.dims2("softmax_rows")?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row matrix-vector product. Row `r` of `mats` is read as an
    /// `a×b` row-major matrix and applied to row `r` of `vecs` (length `b`),
    /// giving an `R×a` result.
    pub fn row_matvec(&mut self, mats: Var, vecs: Var) -> Result<Var, TensorError> {
        let (m, v) = (self.value(mats), self.value(vecs));
        let [rows, b] = v.dims2("row_matvec")?;
        if m.rows() != rows || m.row_len() % b != 0 {
            return Err(dim_err("row_matvec", m, v));
        }
        let a = m.row_len() / b;
        let mut out = vec![0.0; rows * a];
        for ((mrow, vrow), orow) in m
            .data()
            .chunks_exact(a * b)
            .zip(v.data().chunks_exact(b))
            .zip(out.chunks_exact_mut(a))
        {
            for (o, mline) in orow.iter_mut().zip(mrow.chunks_exact(b)) {
                *o = mline.iter().zip(vrow).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new(&[rows, a], out)?;
        Ok(self.push(out, Op::RowMatvec(mats, vecs), &[mats, vecs]))
    }

    /// Applies a `V×V` mixing matrix to each consecutive block of `V` rows of
    /// `x`, i.e. block-diagonal left multiplication for a batch of graphs.
    pub fn block_mix(&mut self, mix: Var, x: Var) -> Result<Var, TensorError> {
        let (a, xv) = (self.value(mix), self.value(x));
        let [v, v2] = a.dims2("block_mix")?;
        let [rows, d] = xv.dims2("block_mix")?;
        if v != v2 || rows % v != 0 {
            return Err(dim_err("block_mix", a, xv));
        }
        let mut out = vec![0.0; rows * d];
        for (xb, ob) in xv
            .data()
            .chunks_exact(v * d)
            .zip(out.chunks_exact_mut(v * d))
        {
            gemm(
                v,
                v,
                d,
                1.0,
                MatRef::row_major(a.data(), v),
                MatRef::row_major(xb, d),
                0.0,
                ob,
            );
        }
        let out = Tensor::new(&[rows, d], out)?;
        Ok(self.push(out, Op::BlockMix(mix, x), &[mix, x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            // Nothing later reads this value, so free it as we go.
            let op = node.op.clone();
            let out = std::mem::replace(&mut self.nodes[i].value, Tensor::scalar(0.0));
            self.propagate(&op, &out, g, &mut grads)?;
        }

        // Trainable leaves always get a gradient, zero when unreachable.
        for (i, node) in self.nodes.iter().enumerate() {
            let trainable = node.requires_grad && matches!(node.op, Op::Leaf);
            if !trainable {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        mut g: Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let [m, k] = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(bv.data(), n),
                        0.0,
                        &mut da,
                    );
                    self.accumulate(grads, a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(g.data(), n),
                        0.0,
                        &mut db,
                    );
                    self.accumulate(grads, b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(x), self.value(w));
                let [m, k] = xv.dims2("linear")?;
                let n = wv.shape()[1];
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(wv.data(), n),
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, x, Tensor::new(&[m, k], dx)?);
                }
                if self.requires_grad(w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(xv.data(), k),
                        MatRef::row_major(g.data(), n),
                        0.0,
                        &mut dw,
                    );
                    self.accumulate(grads, w, Tensor::new(&[k, n], dw)?);
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, column_sums(&g, n)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                g.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.accumulate(grads, b, g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires_grad(bias) {
                    let n = self.value(bias).len();
                    self.accumulate(grads, bias, column_sums(&g, n)?);
                }
                self.accumulate(grads, x, g);
            }
            Op::Affine(x, scale) => {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, x, g);
            }
            Op::DivScalar(x, d) => {
                g.data_mut().iter_mut().for_each(|v| *v /= d);
                self.accumulate(grads, x, g);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, x, dx);
            }
            Op::Tanh(x) => {
                for (gv, y) in g.data_mut().iter_mut().zip(out.data()) {
                    *gv *= 1.0 - y * y;
                }
                self.accumulate(grads, x, g);
            }
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, x, dx);
            }
            Op::SoftmaxRows(x) => {
                let n = out.shape()[1];
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_exact_mut(n).zip(out.data().chunks_exact(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::RowMatvec(mats, vecs) => {
                let (m, v) = (self.value(mats), self.value(vecs));
                let b = v.shape()[1];
                let a = m.row_len() / b;
                if self.requires_grad(mats) {
                    let mut dm = vec![0.0; m.len()];
                    for ((dmrow, vrow), grow) in dm
                        .chunks_exact_mut(a * b)
                        .zip(v.data().chunks_exact(b))
                        .zip(g.data().chunks_exact(a))
                    {
                        for (dline, gi) in dmrow.chunks_exact_mut(b).zip(grow) {
                            for (d, vj) in dline.iter_mut().zip(vrow) {
                                *d = gi * vj;
                            }
                        }
                    }
                    self.accumulate(grads, mats, Tensor::new(m.shape(), dm)?);
                }
                if self.requires_grad(vecs) {
                    let mut dv = vec![0.0; v.len()];
                    for ((dvrow, mrow), grow) in dv
                        .chunks_exact_mut(b)
                        .zip(m.data().chunks_exact(a * b))
                        .zip(g.data().chunks_exact(a))
                    {
                        for (mline, gi) in mrow.chunks_exact(b).zip(grow) {
                            for (d, mij) in dvrow.iter_mut().zip(mline) {
                                *d += mij * gi;
                            }
                        }
                    }
                    self.accumulate(grads, vecs, Tensor::new(v.shape(), dv)?);
                }
            }
            Op::BlockMix(mix, x) => {
                let (a, xv) = (self.value(mix), self.value(x));
                let v = a.shape()[0];
                let d = xv.shape()[1];
                if self.requires_grad(mix) {
                    let mut da = vec![0.0; v * v];
                    for (gb, xb) in g.data().chunks_exact(v * d).zip(xv.data().chunks_exact(v * d)) {
                        gemm(
                            v,
                            d,
                            v,
                            1.0,
                            MatRef::row_major(gb, d),
                            MatRef::transposed(xb, d),
                            1.0,
                            &mut da,
                        );
                    }
                    self.accumulate(grads, mix, Tensor::new(&[v, v], da)?);
                }
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (gb, db) in g.data().chunks_exact(v * d).zip(dx.chunks_exact_mut(v * d)) {
                        gemm(
                            v,
                            v,
                            d,
                            1.0,
                            MatRef::transposed(a.data(), v),
                            MatRef::row_major(gb, d),
                            0.0,
                            db,
                        );
                    }
                    self.accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::new(&shape, g.into_data())?);
            }
            Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let scale = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, x, Tensor::full(xv.shape(), scale));
            }
        }
        Ok(())
    }
}
