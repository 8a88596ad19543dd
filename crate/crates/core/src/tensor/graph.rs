use super::{shape_string, HorizontalPad, Pad1d, PadMode, Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Sqrt,
    Abs,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_v: usize,
    circular: bool,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

impl Conv2dGeom {
    fn window_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Source element for patch offset (kh_i, kw_i) of output position (i, j),
    /// or None where zero padding applies.
    fn source(&self, i: usize, j: usize, kh_i: usize, kw_i: usize) -> Option<(usize, usize)> {
        let row = (i * self.sh + kh_i) as isize - self.pad_v as isize;
        if row < 0 || row >= self.h as isize {
            return None;
        }
        let ext = (j * self.sw + kw_i) as isize - self.pad_left as isize;
        let col = if self.circular {
            ext.rem_euclid(self.w as isize)
        } else {
            if ext < 0 || ext >= self.w as isize {
                return None;
            }
            ext
        };
        Some((row as usize, col as usize))
    }
}

enum Op<E> {
    Leaf,
    Unary { kind: UnaryKind, x: usize },
    Binary { kind: BinaryKind, a: usize, b: usize },
    AddScalar { x: usize },
    MulScalar { x: usize, c: E },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Conv2d { input: usize, kernel: usize, geom: Conv2dGeom, patches: Option<Vec<E>> },
    Conv1d { input: usize, kernel: usize, pad: Pad1d, len: usize, k: usize },
    Softmax { x: usize, axis: usize },
    SumAll { x: usize },
    SumAxis { x: usize, axis: usize },
    Pool { x: usize, kind: PoolKind, axes: Vec<usize>, argmax: Option<Vec<usize>>, count: usize },
    L2Norm { x: usize, axis: usize, norms: Vec<E>, lenient: bool },
    Reshape { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    ScaleRows { m: usize, v: usize },
    ScaleCols { m: usize, v: usize },
    AddRows { m: usize, v: usize },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Wengert tape. Operations append nodes; `backward` replays them in
/// reverse, accumulating gradients into every node that requires them.
/// One graph serves one forward/backward pass; evaluation-only passes
/// simply never call `backward`.
pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a graph input.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer populated by `backward`, in the node's own shape.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── Elementwise ──────────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let input = self.value(x);
        let data = input
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(E::ZERO),
                UnaryKind::Sigmoid => v.sigmoid(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Neg => -v,
            })
            .collect();
        let value = Tensor::new(input.shape().to_vec(), data).expect("unary preserves shape");
        let rg = self.needs(&[x.0]);
        self.push(value, rg, Op::Unary { kind, x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "elementwise binary op",
                expected: shape_string(ta.shape()),
                actual: shape_string(tb.shape()),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("binary preserves shape");
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    pub fn add_scalar(&mut self, x: Var, c: E) -> Var {
        let input = self.value(x);
        let data = input.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(input.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[x.0]);
        self.push(value, rg, Op::AddScalar { x: x.0 })
    }

    pub fn mul_scalar(&mut self, x: Var, c: E) -> Var {
        let input = self.value(x);
        let data = input.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(input.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[x.0]);
        self.push(value, rg, Op::MulScalar { x: x.0, c })
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                context: "matmul",
                expected: format!("[m x k] by [k x n], got {}", shape_string(ta.shape())),
                actual: shape_string(tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![E::ZERO; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for t in 0..k {
                let aik = da[i * k + t];
                let brow = &db[t * n..(t + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                context: "transpose",
                expected: "rank-2 tensor".to_string(),
                actual: shape_string(t.shape()),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![E::ZERO; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = t.data()[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out).expect("transpose shape");
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, rg, Op::Transpose { x: x.0, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, rg, Op::Reshape { x: x.0 }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis { axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    context: "concat",
                    expected: shape_string(&first),
                    actual: shape_string(s),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![E::ZERO; shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let alen = t.shape()[axis];
            for o in 0..outer {
                for a in 0..alen {
                    let src = (o * alen + a) * inner;
                    let dst = (o * axis_total + offset + a) * inner;
                    out[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
                }
            }
            offset += alen;
        }
        let value = Tensor::new(shape, out).expect("concat shape");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(value, rg, Op::Concat { parts: ids, axis }))
    }

    // ── Row/column broadcasts over rank-2 operands ───────────────────────

    /// out[r, c] = m[r, c] * v[r]
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var, TensorError> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (rows, cols) = Self::rows_cols(tm, tv, 0, "scale_rows")?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let s = tv.data()[r];
            out.extend(tm.data()[r * cols..(r + 1) * cols].iter().map(|&x| x * s));
        }
        let value = Tensor::new(vec![rows, cols], out).expect("scale_rows shape");
        let rg = self.needs(&[m.0, v.0]);
        Ok(self.push(value, rg, Op::ScaleRows { m: m.0, v: v.0 }))
    }

    /// out[r, c] = m[r, c] * v[c]
    pub fn scale_cols(&mut self, m: Var, v: Var) -> Result<Var, TensorError> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (rows, cols) = Self::rows_cols(tm, tv, 1, "scale_cols")?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(tm.data()[r * cols + c] * tv.data()[c]);
            }
        }
        let value = Tensor::new(vec![rows, cols], out).expect("scale_cols shape");
        let rg = self.needs(&[m.0, v.0]);
        Ok(self.push(value, rg, Op::ScaleCols { m: m.0, v: v.0 }))
    }

    /// out[r, c] = m[r, c] + v[r]
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var, TensorError> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (rows, cols) = Self::rows_cols(tm, tv, 0, "add_rows")?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let s = tv.data()[r];
            out.extend(tm.data()[r * cols..(r + 1) * cols].iter().map(|&x| x + s));
        }
        let value = Tensor::new(vec![rows, cols], out).expect("add_rows shape");
        let rg = self.needs(&[m.0, v.0]);
        Ok(self.push(value, rg, Op::AddRows { m: m.0, v: v.0 }))
    }

    fn rows_cols(
        tm: &Tensor<E>,
        tv: &Tensor<E>,
        broadcast_axis: usize,
        context: &'static str,
    ) -> Result<(usize, usize), TensorError> {
        if tm.rank() != 2 || tv.rank() != 1 || tv.len() != tm.shape()[broadcast_axis] {
            return Err(TensorError::ShapeMismatch {
                context: if broadcast_axis == 0 { "row broadcast" } else { "column broadcast" },
                expected: format!("{context}: matrix {} with matching vector", shape_string(tm.shape())),
                actual: shape_string(tv.shape()),
            });
        }
        Ok((tm.shape()[0], tm.shape()[1]))
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut acc = E::ZERO;
        for &v in t.data() {
            acc += v;
        }
        let rg = self.needs(&[x.0]);
        self.push(Tensor::scalar(acc), rg, Op::SumAll { x: x.0 })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let out_shape = drop_axis(t.shape(), axis);
        let mut out = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * len + a) * inner + i];
                }
            }
        }
        let value = Tensor::new(out_shape, out).expect("sum_axis shape");
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, rg, Op::SumAxis { x: x.0, axis }))
    }

    /// Pools over the listed axes, removing them from the shape.
    pub fn pool(&mut self, x: Var, kind: PoolKind, axes: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let rank = t.rank();
        let mut pooled = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::InvalidAxis { axis: a, rank });
            }
            pooled[a] = true;
        }
        let shape = t.shape().to_vec();
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !pooled[*i])
            .map(|(_, &d)| d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let count: usize = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| pooled[*i])
            .map(|(_, &d)| d)
            .product();
        let out_len: usize = out_shape.iter().product();

        let strides = row_major_strides(&shape);
        let mut out = vec![E::ZERO; out_len];
        let mut argmax = vec![usize::MAX; out_len];
        for (flat, &v) in t.data().iter().enumerate() {
            let mut out_idx = 0;
            for a in 0..rank {
                if pooled[a] {
                    continue;
                }
                out_idx = out_idx * shape[a] + (flat / strides[a]) % shape[a];
            }
            match kind {
                PoolKind::Mean => out[out_idx] += v,
                PoolKind::Max => {
                    if argmax[out_idx] == usize::MAX || v > out[out_idx] {
                        out[out_idx] = v;
                        argmax[out_idx] = flat;
                    }
                }
            }
        }
        if kind == PoolKind::Mean {
            let denom = E::from_f64(count as f64);
            for v in &mut out {
                *v /= denom;
            }
        }
        let value = Tensor::new(out_shape, out).expect("pool shape");
        let rg = self.needs(&[x.0]);
        let saved_argmax = if kind == PoolKind::Max && rg { Some(argmax) } else { None };
        Ok(self.push(
            value,
            rg,
            Op::Pool { x: x.0, kind, axes: axes.to_vec(), argmax: saved_argmax, count },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![E::ZERO; t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut m = t.data()[idx(0)];
                for a in 1..len {
                    m = m.max(t.data()[idx(a)]);
                }
                let mut denom = E::ZERO;
                for a in 0..len {
                    let e = (t.data()[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    denom += e;
                }
                for a in 0..len {
                    out[idx(a)] /= denom;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("softmax shape");
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, rg, Op::Softmax { x: x.0, axis }))
    }

    /// Normalizes each slice along `axis` to unit Euclidean norm. A slice of
    /// exact zeros has no direction and is rejected.
    pub fn l2norm(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.l2norm_impl(x, axis, false)
    }

    /// Like [`Graph::l2norm`], but slices of exact zeros pass through as
    /// zeros instead of erroring (they receive no gradient either). Used
    /// where a zero slice means "no mass landed here" rather than a bug.
    pub fn l2norm_lenient(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.l2norm_impl(x, axis, true)
    }

    fn l2norm_impl(&mut self, x: Var, axis: usize, lenient: bool) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![E::ZERO; t.len()];
        let mut norms = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut sq = E::ZERO;
                for a in 0..len {
                    let v = t.data()[idx(a)];
                    sq += v * v;
                }
                if sq == E::ZERO {
                    if lenient {
                        continue; // output and saved norm stay zero
                    }
                    return Err(TensorError::ZeroNormSlice { slice: o * inner + i });
                }
                let norm = sq.sqrt();
                norms[o * inner + i] = norm;
                for a in 0..len {
                    out[idx(a)] = t.data()[idx(a)] / norm;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("l2norm shape");
        let rg = self.needs(&[x.0]);
        let norms = if rg { norms } else { Vec::new() };
        Ok(self.push(value, rg, Op::L2Norm { x: x.0, axis, norms, lenient }))
    }

    // ── Convolutions ─────────────────────────────────────────────────────

    /// 2-D convolution (cross-correlation) of `input` `[C_in, H, W]` with
    /// `kernel` `[C_out, C_in, K_h, K_w]`. Windows are gathered explicitly;
    /// with circular horizontal padding the column index wraps modulo W, so
    /// every output element of a column-shifted input sees the identical
    /// operand sequence and the shift equivariance is bit-exact for
    /// horizontal stride 1.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        pad: PadMode,
    ) -> Result<Var, TensorError> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 3 || tk.rank() != 4 {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d",
                expected: "input [C_in,H,W], kernel [C_out,C_in,K_h,K_w]".to_string(),
                actual: format!("{} and {}", shape_string(ti.shape()), shape_string(tk.shape())),
            });
        }
        if ti.shape()[0] != tk.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d input channels",
                expected: tk.shape()[1].to_string(),
                actual: ti.shape()[0].to_string(),
            });
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(TensorError::ZeroStride);
        }
        let (c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (c_out, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        let (pad_left, pad_right) = pad.horizontal.widths();
        let circular = matches!(pad.horizontal, HorizontalPad::Circular { .. });
        let h_pad = h + 2 * pad.vertical;
        let w_pad = w + pad_left + pad_right;
        if kh > h_pad {
            return Err(TensorError::KernelTooLarge { context: "conv2d rows", kernel: kh, padded: h_pad });
        }
        if kw > w_pad {
            return Err(TensorError::KernelTooLarge { context: "conv2d cols", kernel: kw, padded: w_pad });
        }
        let geom = Conv2dGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh,
            sw,
            pad_v: pad.vertical,
            circular,
            pad_left,
            h_out: (h_pad - kh) / sh + 1,
            w_out: (w_pad - kw) / sw + 1,
        };

        let window = geom.window_len();
        let positions = geom.h_out * geom.w_out;
        // Source rows and columns depend only on the output coordinate and
        // kernel offset; resolving them once keeps the modulo arithmetic
        // out of the per-element gather.
        const MISS: usize = usize::MAX;
        let mut row_map = vec![MISS; geom.h_out * kh];
        for i in 0..geom.h_out {
            for kh_i in 0..kh {
                let row = (i * sh + kh_i) as isize - geom.pad_v as isize;
                if row >= 0 && row < h as isize {
                    row_map[i * kh + kh_i] = row as usize;
                }
            }
        }
        let mut col_map = vec![MISS; geom.w_out * kw];
        for j in 0..geom.w_out {
            for kw_i in 0..kw {
                let ext = (j * sw + kw_i) as isize - pad_left as isize;
                if circular {
                    col_map[j * kw + kw_i] = ext.rem_euclid(w as isize) as usize;
                } else if ext >= 0 && ext < w as isize {
                    col_map[j * kw + kw_i] = ext as usize;
                }
            }
        }

        let mut patches = vec![E::ZERO; positions * window];
        let in_data = ti.data();
        for i in 0..geom.h_out {
            for j in 0..geom.w_out {
                let base = (i * geom.w_out + j) * window;
                let mut t = 0;
                for ci in 0..c_in {
                    for kh_i in 0..kh {
                        let row = row_map[i * kh + kh_i];
                        if row == MISS {
                            t += kw;
                            continue;
                        }
                        let row_base = (ci * h + row) * w;
                        for kw_i in 0..kw {
                            let col = col_map[j * kw + kw_i];
                            if col != MISS {
                                patches[base + t] = in_data[row_base + col];
                            }
                            t += 1;
                        }
                    }
                }
            }
        }

        let k_data = tk.data();
        let mut out = vec![E::ZERO; c_out * positions];
        for pos in 0..positions {
            let p_row = &patches[pos * window..(pos + 1) * window];
            for co in 0..c_out {
                let k_row = &k_data[co * window..(co + 1) * window];
                out[co * positions + pos] = dot_fixed_order(k_row, p_row);
            }
        }

        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out).expect("conv2d shape");
        let rg = self.needs(&[input.0, kernel.0]);
        let patches = if rg { Some(patches) } else { None };
        Ok(self.push(value, rg, Op::Conv2d { input: input.0, kernel: kernel.0, geom, patches }))
    }

    /// Length-preserving 1-D convolution of `input` `[1, C]` with an odd
    /// `kernel` `[1, 1, k]`, padded circularly or with zeros.
    pub fn conv1d(&mut self, input: Var, kernel: Var, pad: Pad1d) -> Result<Var, TensorError> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 2 || ti.shape()[0] != 1 {
            return Err(TensorError::ShapeMismatch {
                context: "conv1d",
                expected: "input [1, C]".to_string(),
                actual: shape_string(ti.shape()),
            });
        }
        if tk.rank() != 3 || tk.shape()[0] != 1 || tk.shape()[1] != 1 {
            return Err(TensorError::ShapeMismatch {
                context: "conv1d",
                expected: "kernel [1, 1, k]".to_string(),
                actual: shape_string(tk.shape()),
            });
        }
        let k = tk.shape()[2];
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel { len: k });
        }
        let len = ti.shape()[1];
        if matches!(pad, Pad1d::Zero) && k > len + (k - 1) {
            return Err(TensorError::KernelTooLarge { context: "conv1d", kernel: k, padded: len + k - 1 });
        }
        let half = (k - 1) / 2;
        let mut out = vec![E::ZERO; len];
        for c in 0..len {
            let mut acc = E::ZERO;
            for t in 0..k {
                let src = c as isize + t as isize - half as isize;
                let v = match pad {
                    Pad1d::Circular => ti.data()[src.rem_euclid(len as isize) as usize],
                    Pad1d::Zero => {
                        if src < 0 || src >= len as isize {
                            E::ZERO
                        } else {
                            ti.data()[src as usize]
                        }
                    }
                };
                acc += tk.data()[t] * v;
            }
            out[c] = acc;
        }
        let value = Tensor::new(vec![1, len], out).expect("conv1d shape");
        let rg = self.needs(&[input.0, kernel.0]);
        Ok(self.push(value, rg, Op::Conv1d { input: input.0, kernel: kernel.0, pad, len, k }))
    }

    // ── Backward pass ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// node that requires one and is reachable from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss { len: self.value(loss).len() });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![E::ONE]);

        for id in (0..=loss.0).rev() {
            let grad = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &grad);
            self.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, update: impl FnOnce(&mut [E])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let buf = self.nodes[target].grad.get_or_insert_with(|| vec![E::ZERO; len]);
        update(buf);
    }

    fn propagate(&mut self, id: usize, grad: &[E]) {
        // Ops borrow their own aux data; take the op out while dispatching.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let x = *x;
                let contrib: Vec<E> = match kind {
                    UnaryKind::Relu => {
                        let xin = self.nodes[x].value.data();
                        grad.iter()
                            .zip(xin)
                            .map(|(&g, &v)| if v > E::ZERO { g } else { E::ZERO })
                            .collect()
                    }
                    UnaryKind::Sigmoid => {
                        let y = self.nodes[id].value.data();
                        grad.iter().zip(y).map(|(&g, &s)| g * s * (E::ONE - s)).collect()
                    }
                    UnaryKind::Sqrt => {
                        let y = self.nodes[id].value.data();
                        let two = E::from_f64(2.0);
                        grad.iter().zip(y).map(|(&g, &s)| g / (two * s)).collect()
                    }
                    UnaryKind::Abs => {
                        let xin = self.nodes[x].value.data();
                        grad.iter()
                            .zip(xin)
                            .map(|(&g, &v)| {
                                if v > E::ZERO {
                                    g
                                } else if v < E::ZERO {
                                    -g
                                } else {
                                    E::ZERO
                                }
                            })
                            .collect()
                    }
                    UnaryKind::Neg => grad.iter().map(|&g| -g).collect(),
                };
                self.accumulate(x, |buf| add_into(buf, &contrib));
            }
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                match kind {
                    BinaryKind::Add => {
                        self.accumulate(a, |buf| add_into(buf, grad));
                        self.accumulate(b, |buf| add_into(buf, grad));
                    }
                    BinaryKind::Sub => {
                        self.accumulate(a, |buf| add_into(buf, grad));
                        self.accumulate(b, |buf| sub_into(buf, grad));
                    }
                    BinaryKind::Mul => {
                        let da: Vec<E> = grad
                            .iter()
                            .zip(self.nodes[b].value.data())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        let db: Vec<E> = grad
                            .iter()
                            .zip(self.nodes[a].value.data())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(a, |buf| add_into(buf, &da));
                        self.accumulate(b, |buf| add_into(buf, &db));
                    }
                    BinaryKind::Div => {
                        let bv = self.nodes[b].value.data();
                        let av = self.nodes[a].value.data();
                        let da: Vec<E> = grad.iter().zip(bv).map(|(&g, &v)| g / v).collect();
                        let db: Vec<E> = grad
                            .iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect();
                        self.accumulate(a, |buf| add_into(buf, &da));
                        self.accumulate(b, |buf| add_into(buf, &db));
                    }
                }
            }
            Op::AddScalar { x } => {
                self.accumulate(*x, |buf| add_into(buf, grad));
            }
            Op::MulScalar { x, c } => {
                let contrib: Vec<E> = grad.iter().map(|&g| g * *c).collect();
                self.accumulate(*x, |buf| add_into(buf, &contrib));
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.nodes[*b].value.data();
                let av = self.nodes[*a].value.data();
                // dA = dC * B^T
                let mut da = vec![E::ZERO; m * k];
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = E::ZERO;
                        for j in 0..n {
                            acc += grad[i * n + j] * bv[t * n + j];
                        }
                        da[i * k + t] = acc;
                    }
                }
                // dB = A^T * dC
                let mut db = vec![E::ZERO; k * n];
                for t in 0..k {
                    for i in 0..m {
                        let ait = av[i * k + t];
                        for j in 0..n {
                            db[t * n + j] += ait * grad[i * n + j];
                        }
                    }
                }
                self.accumulate(*a, |buf| add_into(buf, &da));
                self.accumulate(*b, |buf| add_into(buf, &db));
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![E::ZERO; rows * cols];
                for c in 0..cols {
                    for r in 0..rows {
                        dx[r * cols + c] = grad[c * rows + r];
                    }
                }
                self.accumulate(*x, |buf| add_into(buf, &dx));
            }
            Op::Conv2d { input, kernel, geom, patches } => {
                let window = geom.window_len();
                let positions = geom.h_out * geom.w_out;
                let patches = patches.as_ref().expect("conv2d patches saved when grads needed");
                if self.nodes[*kernel].requires_grad {
                    let mut dk = vec![E::ZERO; geom.c_out * window];
                    for co in 0..geom.c_out {
                        for pos in 0..positions {
                            let g = grad[co * positions + pos];
                            let p_row = &patches[pos * window..(pos + 1) * window];
                            let k_row = &mut dk[co * window..(co + 1) * window];
                            for (kd, &pv) in k_row.iter_mut().zip(p_row) {
                                *kd += g * pv;
                            }
                        }
                    }
                    self.accumulate(*kernel, |buf| add_into(buf, &dk));
                }
                if self.nodes[*input].requires_grad {
                    let k_data = self.nodes[*kernel].value.data();
                    let mut dx = vec![E::ZERO; geom.c_in * geom.h * geom.w];
                    for i in 0..geom.h_out {
                        for j in 0..geom.w_out {
                            let pos = i * geom.w_out + j;
                            let mut t = 0;
                            for ci in 0..geom.c_in {
                                for kh_i in 0..geom.kh {
                                    for kw_i in 0..geom.kw {
                                        if let Some((r, c)) = geom.source(i, j, kh_i, kw_i) {
                                            let mut acc = E::ZERO;
                                            for co in 0..geom.c_out {
                                                acc += k_data[co * window + t]
                                                    * grad[co * positions + pos];
                                            }
                                            dx[(ci * geom.h + r) * geom.w + c] += acc;
                                        }
                                        t += 1;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*input, |buf| add_into(buf, &dx));
                }
            }
            Op::Conv1d { input, kernel, pad, len, k } => {
                let (len, k) = (*len, *k);
                let half = (k - 1) / 2;
                if self.nodes[*kernel].requires_grad {
                    let xin = self.nodes[*input].value.data();
                    let mut dk = vec![E::ZERO; k];
                    for c in 0..len {
                        for (t, kd) in dk.iter_mut().enumerate() {
                            let src = c as isize + t as isize - half as isize;
                            let v = match pad {
                                Pad1d::Circular => xin[src.rem_euclid(len as isize) as usize],
                                Pad1d::Zero => {
                                    if src < 0 || src >= len as isize {
                                        E::ZERO
                                    } else {
                                        xin[src as usize]
                                    }
                                }
                            };
                            *kd += grad[c] * v;
                        }
                    }
                    self.accumulate(*kernel, |buf| add_into(buf, &dk));
                }
                if self.nodes[*input].requires_grad {
                    let kv = self.nodes[*kernel].value.data();
                    let mut dx = vec![E::ZERO; len];
                    for c in 0..len {
                        for (t, &kval) in kv.iter().enumerate() {
                            let src = c as isize + t as isize - half as isize;
                            match pad {
                                Pad1d::Circular => {
                                    dx[src.rem_euclid(len as isize) as usize] += kval * grad[c];
                                }
                                Pad1d::Zero => {
                                    if src >= 0 && src < len as isize {
                                        dx[src as usize] += kval * grad[c];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*input, |buf| add_into(buf, &dx));
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[id].value.clone();
                let (outer, len, inner) = axis_split(y.shape(), *axis).expect("validated axis");
                let mut dx = vec![E::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let mut dot = E::ZERO;
                        for a in 0..len {
                            dot += grad[idx(a)] * y.data()[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] = y.data()[idx(a)] * (grad[idx(a)] - dot);
                        }
                    }
                }
                self.accumulate(*x, |buf| add_into(buf, &dx));
            }
            Op::SumAll { x } => {
                let g = grad[0];
                self.accumulate(*x, |buf| {
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis).expect("validated axis");
                let mut dx = vec![E::ZERO; self.nodes[*x].value.len()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = grad[o * inner + i];
                        }
                    }
                }
                self.accumulate(*x, |buf| add_into(buf, &dx));
            }
            Op::Pool { x, kind, axes, argmax, count } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                match kind {
                    PoolKind::Max => {
                        let argmax = argmax.as_ref().expect("argmax saved when grads needed");
                        let mut dx = vec![E::ZERO; self.nodes[*x].value.len()];
                        for (out_idx, &src) in argmax.iter().enumerate() {
                            dx[src] += grad[out_idx];
                        }
                        self.accumulate(*x, |buf| add_into(buf, &dx));
                    }
                    PoolKind::Mean => {
                        let rank = shape.len();
                        let mut pooled = vec![false; rank];
                        for &a in axes {
                            pooled[a] = true;
                        }
                        let strides = row_major_strides(&shape);
                        let scale = E::ONE / E::from_f64(*count as f64);
                        let mut dx = vec![E::ZERO; self.nodes[*x].value.len()];
                        for (flat, d) in dx.iter_mut().enumerate() {
                            let mut out_idx = 0;
                            for a in 0..rank {
                                if pooled[a] {
                                    continue;
                                }
                                out_idx = out_idx * shape[a] + (flat / strides[a]) % shape[a];
                            }
                            *d = grad[out_idx] * scale;
                        }
                        self.accumulate(*x, |buf| add_into(buf, &dx));
                    }
                }
            }
            Op::L2Norm { x, axis, norms, lenient } => {
                let y = self.nodes[id].value.clone();
                let (outer, len, inner) = axis_split(y.shape(), *axis).expect("validated axis");
                let mut dx = vec![E::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let norm = norms[o * inner + i];
                        if *lenient && norm == E::ZERO {
                            continue; // skipped slice, no gradient
                        }
                        let mut dot = E::ZERO;
                        for a in 0..len {
                            dot += grad[idx(a)] * y.data()[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] = (grad[idx(a)] - y.data()[idx(a)] * dot) / norm;
                        }
                    }
                }
                self.accumulate(*x, |buf| add_into(buf, &dx));
            }
            Op::Reshape { x } => {
                self.accumulate(*x, |buf| add_into(buf, grad));
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let alen = self.nodes[p].value.shape()[axis];
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![E::ZERO; self.nodes[p].value.len()];
                        for o in 0..outer {
                            for a in 0..alen {
                                let src = (o * total + offset + a) * inner;
                                let dst = (o * alen + a) * inner;
                                dp[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
                            }
                        }
                        self.accumulate(p, |buf| add_into(buf, &dp));
                    }
                    offset += alen;
                }
            }
            Op::ScaleRows { m, v } => {
                let tm = self.nodes[*m].value.clone();
                let tv = self.nodes[*v].value.clone();
                let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
                let mut dm = vec![E::ZERO; rows * cols];
                let mut dv = vec![E::ZERO; rows];
                for r in 0..rows {
                    let s = tv.data()[r];
                    for c in 0..cols {
                        let g = grad[r * cols + c];
                        dm[r * cols + c] = g * s;
                        dv[r] += g * tm.data()[r * cols + c];
                    }
                }
                self.accumulate(*m, |buf| add_into(buf, &dm));
                self.accumulate(*v, |buf| add_into(buf, &dv));
            }
            Op::ScaleCols { m, v } => {
                let tm = self.nodes[*m].value.clone();
                let tv = self.nodes[*v].value.clone();
                let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
                let mut dm = vec![E::ZERO; rows * cols];
                let mut dv = vec![E::ZERO; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let g = grad[r * cols + c];
                        dm[r * cols + c] = g * tv.data()[c];
                        dv[c] += g * tm.data()[r * cols + c];
                    }
                }
                self.accumulate(*m, |buf| add_into(buf, &dm));
                self.accumulate(*v, |buf| add_into(buf, &dv));
            }
            Op::AddRows { m, v } => {
                let (rows, cols) = {
                    let s = self.nodes[*m].value.shape();
                    (s[0], s[1])
                };
                let mut dv = vec![E::ZERO; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[r] += grad[r * cols + c];
                    }
                }
                self.accumulate(*m, |buf| add_into(buf, grad));
                self.accumulate(*v, |buf| add_into(buf, &dv));
            }
        }
        self.nodes[id].op = op;
    }
}

/// Dot product with eight independent accumulators folded in a fixed
/// pattern. The summation order is a function of the index alone, so every
/// output element of a column-shifted convolution still sees the identical
/// operand sequence, and the shorter dependency chains let the loop
/// vectorize.
fn dot_fixed_order<E: Real>(a: &[E], b: &[E]) -> E {
    const LANES: usize = 8;
    let mut acc = [E::ZERO; LANES];
    let mut chunks_a = a.chunks_exact(LANES);
    let mut chunks_b = b.chunks_exact(LANES);
    for (ca, cb) in chunks_a.by_ref().zip(chunks_b.by_ref()) {
        for lane in 0..LANES {
            acc[lane] += ca[lane] * cb[lane];
        }
    }
    let mut tail = E::ZERO;
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn add_into<E: Real>(buf: &mut [E], src: &[E]) {
    for (b, &s) in buf.iter_mut().zip(src) {
        *b += s;
    }
}

fn sub_into<E: Real>(buf: &mut [E], src: &[E]) {
    for (b, &s) in buf.iter_mut().zip(src) {
        *b -= s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, &d)| d).collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
