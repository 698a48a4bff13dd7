//! Reverse-mode differentiation over an op tape.
//!
//! A [`Tape`] records every op in execution order together with the buffers
//! needed for its backward rule. [`Tape::backward`] replays the record once in
//! exact reverse order and accumulates gradients into the leaves. A tape is
//! single-threaded and consumed by its backward pass; independent tapes may
//! live on separate threads.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Epsilon added inside the root-mean-square of `rms_norm`/`layer_norm`.
pub const NORM_EPS: f64 = 1e-6;

/// Additive pre-softmax bias used to mask padded attention positions.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    /// `a[.., n] + b[n]`, `b` broadcast over all leading dims.
    AddRows(Var, Var),
    /// `a[.., n] * b[n]`, `b` broadcast over all leading dims.
    MulRows(Var, Var),
    /// `a[b, l, n] + m[b, n]`, `m` broadcast along the middle axis.
    AddAxis1(Var, Var),
    /// `a[b, l, n] * m[b, n]`, `m` broadcast along the middle axis.
    MulAxis1(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        dims: MatmulDims,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        inv_std: Vec<T>,
    },
    Silu(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    /// Row lookup into a `[vocab, width]` table. `frozen_row` (the pad row)
    /// receives no gradient.
    Gather {
        table: Var,
        ids: Vec<usize>,
        frozen_row: Option<usize>,
    },
    /// Per-plane 2D rotation of `x[b, l, h, d]`; `cos`/`sin` are `[l, d/2]`.
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
}

#[derive(Debug, Clone, Copy)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_broadcast: bool,
    b_broadcast: bool,
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    checked: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// New tape with NaN/Inf checking enabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
            consumed: false,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. Gradients flow into it iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push_unchecked(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push_unchecked(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node buffers are consistent")
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].shape.clone(), g.clone()).expect("grad shape"))
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        if self.checked && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(shape, data, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push("add", self.nodes[a.0].shape.clone(), data, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", self.nodes[a.0].shape.clone(), data, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push("scale", self.nodes[a.0].shape.clone(), data, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| x + c).collect();
        let needs = self.needs(a);
        self.push(
            "add_scalar",
            self.nodes[a.0].shape.clone(),
            data,
            Op::AddScalar(a, c),
            needs,
        )
    }

    fn rows_compatible(&self, name: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let n = *sa.last().ok_or(Error::Dimension {
            op: name,
            msg: "lhs has rank 0".into(),
        })?;
        if sb != [n] {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(n)
    }

    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.rows_compatible("add_rows", a, b)?;
        let bv = self.value(b).to_vec();
        let data: Vec<T> = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &y)| x + y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("add_rows", self.nodes[a.0].shape.clone(), data, Op::AddRows(a, b), needs)
    }

    pub fn mul_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.rows_compatible("mul_rows", a, b)?;
        let bv = self.value(b).to_vec();
        let data: Vec<T> = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &y)| x * y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul_rows", self.nodes[a.0].shape.clone(), data, Op::MulRows(a, b), needs)
    }

    fn axis1_compatible(&self, name: &'static str, a: Var, m: Var) -> Result<(usize, usize, usize)> {
        let sa = self.shape(a);
        let sm = self.shape(m);
        if sa.len() != 3 || sm.len() != 2 || sa[0] != sm[0] || sa[2] != sm[1] {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sm.to_vec(),
            });
        }
        Ok((sa[0], sa[1], sa[2]))
    }

    pub fn add_axis1(&mut self, a: Var, m: Var) -> Result<Var> {
        let (b, l, n) = self.axis1_compatible("add_axis1", a, m)?;
        let mut data = self.value(a).to_vec();
        let mv = self.value(m);
        for bi in 0..b {
            let mrow = &mv[bi * n..(bi + 1) * n];
            for li in 0..l {
                let off = (bi * l + li) * n;
                for j in 0..n {
                    data[off + j] = data[off + j] + mrow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(m);
        self.push("add_axis1", self.nodes[a.0].shape.clone(), data, Op::AddAxis1(a, m), needs)
    }

    pub fn mul_axis1(&mut self, a: Var, m: Var) -> Result<Var> {
        let (b, l, n) = self.axis1_compatible("mul_axis1", a, m)?;
        let mut data = self.value(a).to_vec();
        let mv = self.value(m);
        for bi in 0..b {
            let mrow = &mv[bi * n..(bi + 1) * n];
            for li in 0..l {
                let off = (bi * l + li) * n;
                for j in 0..n {
                    data[off + j] = data[off + j] * mrow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(m);
        self.push("mul_axis1", self.nodes[a.0].shape.clone(), data, Op::MulAxis1(a, m), needs)
    }

    // ---- matmul ----

    /// Batched matrix product. Leading batch dims must match exactly, or one
    /// operand may be rank-2 and is then broadcast over the other's batches.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_dims, a_broadcast, b_broadcast) = if ba == bb {
            (ba.to_vec(), false, false)
        } else if bb.is_empty() {
            (ba.to_vec(), false, true)
        } else if ba.is_empty() {
            (bb.to_vec(), true, false)
        } else {
            return Err(mismatch());
        };
        let batch: usize = batch_dims.iter().product();
        let dims = MatmulDims {
            batch,
            m,
            k: ka,
            n,
            a_broadcast,
            b_broadcast,
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ao = if a_broadcast { 0 } else { i * m * ka };
            let bo = if b_broadcast { 0 } else { i * ka * n };
            mm_nn(
                &av[ao..ao + m * ka],
                &bv[bo..bo + ka * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let mut shape = batch_dims;
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", shape, out, Op::Matmul { a, b, dims }, needs)
    }

    // ---- normalization / activation ----

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(Error::Dimension {
            op: "softmax_lastdim",
            msg: "rank-0 input".into(),
        })?;
        if n == 0 {
            return Err(Error::Dimension {
                op: "softmax_lastdim",
                msg: "empty last dimension".into(),
            });
        }
        let mut data = self.value(x).to_vec();
        for slice in data.chunks_exact_mut(n) {
            let max = slice.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in slice.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(x);
        self.push("softmax_lastdim", shape, data, Op::Softmax(x), needs)
    }

    /// Normalize each last-dim slice by its root mean square, scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let n = self.rows_compatible("rms_norm", x, gain)?;
        let eps = T::from_f64(NORM_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let gv = self.value(gain).to_vec();
        let xv = self.value(x);
        let slices = xv.len() / n;
        let mut inv_rms = Vec::with_capacity(slices);
        let mut data = Vec::with_capacity(xv.len());
        for slice in xv.chunks_exact(n) {
            let ms = slice.iter().fold(T::zero(), |acc, &v| acc + v * v) * inv_n;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(slice.iter().zip(&gv).map(|(&v, &g)| v * r * g));
        }
        let needs = self.needs(x) || self.needs(gain);
        self.push(
            "rms_norm",
            self.nodes[x.0].shape.clone(),
            data,
            Op::RmsNorm { x, gain, inv_rms },
            needs,
        )
    }

    /// Standard layer norm over the last dim with a learned gain (no bias).
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let n = self.rows_compatible("layer_norm", x, gain)?;
        let eps = T::from_f64(NORM_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let gv = self.value(gain).to_vec();
        let xv = self.value(x);
        let slices = xv.len() / n;
        let mut inv_std = Vec::with_capacity(slices);
        let mut data = Vec::with_capacity(xv.len());
        for slice in xv.chunks_exact(n) {
            let mean = slice.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
            let var = slice
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                * inv_n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            data.extend(slice.iter().zip(&gv).map(|(&v, &g)| (v - mean) * istd * g));
        }
        let needs = self.needs(x) || self.needs(gain);
        self.push(
            "layer_norm",
            self.nodes[x.0].shape.clone(),
            data,
            Op::LayerNorm { x, gain, inv_std },
            needs,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .iter()
            .map(|&v| v * (T::one() / (T::one() + (-v).exp())))
            .collect();
        let needs = self.needs(x);
        self.push("silu", self.nodes[x.0].shape.clone(), data, Op::Silu(x), needs)
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(x), shape),
            });
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), needs)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension {
                op: "permute",
                msg: format!("invalid axes {:?} for shape {:?}", axes, shape),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut data = vec![T::zero(); self.value(x).len()];
        permute_copy(self.value(x), &mut data, &shape, axes, false);
        let needs = self.needs(x);
        self.push(
            "permute",
            out_shape,
            data,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            needs,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, base),
            });
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &v in inputs {
            let a = self.shape(v)[axis];
            let src = self.value(v);
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * a * inner;
                data[dst_start..dst_start + a * inner]
                    .copy_from_slice(&src[src_start..src_start + a * inner]);
            }
            offset += a;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            out_shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Dimension {
                op: "slice",
                msg: format!("slice [{start}, {start}+{len}) on axis {axis} of {:?}", shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let a = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x);
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * a + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let needs = self.needs(x);
        self.push(
            "slice",
            out_shape,
            data,
            Op::Slice { x, axis, start, len },
            needs,
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let needs = self.needs(x);
        self.push("sum_all", vec![1], vec![s], Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let needs = self.needs(x);
        self.push("mean_all", vec![1], vec![s], Op::MeanAll(x), needs)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ---- lookup / positional ----

    pub fn gather(&mut self, table: Var, ids: &[usize], frozen_row: Option<usize>) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Dimension {
                op: "gather",
                msg: format!("table must be rank 2, got {:?}", ts),
            });
        }
        let (vocab, width) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary (size {vocab})"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            data.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let needs = self.needs(table);
        self.push(
            "gather",
            vec![ids.len(), width],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                frozen_row,
            },
            needs,
        )
    }

    /// Rotate adjacent feature pairs of `x[b, l, h, d]` by per-token angles.
    /// `cos`/`sin` hold `l * d/2` entries laid out `[l][d/2]`; the same
    /// rotation is applied across batches and heads.
    pub fn rope(&mut self, x: Var, cos: &[T], sin: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension {
                op: "rope",
                msg: format!("expected [b, l, h, d], got {:?}", shape),
            });
        }
        let (b, l, h, d) = (shape[0], shape[1], shape[2], shape[3]);
        if d % 2 != 0 || cos.len() != l * d / 2 || sin.len() != l * d / 2 {
            return Err(Error::Dimension {
                op: "rope",
                msg: format!(
                    "phase table len {} does not match {} tokens x {} planes",
                    cos.len(),
                    l,
                    d / 2
                ),
            });
        }
        let planes = d / 2;
        let xv = self.value(x);
        let mut data = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for li in 0..l {
                let ph = li * planes;
                for hi in 0..h {
                    let off = ((bi * l + li) * h + hi) * d;
                    for p in 0..planes {
                        let (c, s) = (cos[ph + p], sin[ph + p]);
                        let x0 = xv[off + 2 * p];
                        let x1 = xv[off + 2 * p + 1];
                        data[off + 2 * p] = x0 * c - x1 * s;
                        data[off + 2 * p + 1] = x0 * s + x1 * c;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "rope",
            shape,
            data,
            Op::Rope {
                x,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
            needs,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates leaf gradients; the tape
    /// is consumed and cannot run a second backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("tape already consumed by a backward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let numel = self.nodes[v.0].data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
        contrib(slot);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Ops needing the node's own output value read it before borrowing grads.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| {
                    for (s, &v) in gb.iter_mut().zip(g) {
                        *s = *s - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc(a, |ga| {
                    for ((s, &v), &o) in ga.iter_mut().zip(g).zip(&bv) {
                        *s = *s + v * o;
                    }
                });
                self.acc(b, |gb| {
                    for ((s, &v), &o) in gb.iter_mut().zip(g).zip(&av) {
                        *s = *s + v * o;
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.acc(a, |ga| {
                    for (s, &v) in ga.iter_mut().zip(g) {
                        *s = *s + v * c;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.acc(a, |ga| add_into(ga, g));
            }
            Op::AddRows(a, b) => {
                let (a, b) = (*a, *b);
                let n = *self.nodes[b.0].shape.last().expect("rows");
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRows(a, b) => {
                let (a, b) = (*a, *b);
                let n = *self.nodes[b.0].shape.last().expect("rows");
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc(a, |ga| {
                    for (grow, (srow, _)) in g
                        .chunks_exact(n)
                        .zip(ga.chunks_exact_mut(n).map(|c| (c, ())))
                    {
                        for ((s, &v), &o) in srow.iter_mut().zip(grow).zip(&bv) {
                            *s = *s + v * o;
                        }
                    }
                });
                self.acc(b, |gb| {
                    for (grow, arow) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                        for ((s, &v), &x) in gb.iter_mut().zip(grow).zip(arow) {
                            *s = *s + v * x;
                        }
                    }
                });
            }
            Op::AddAxis1(a, m) => {
                let (a, m) = (*a, *m);
                let [b, l, n] = three_dims(&self.nodes[a.0].shape);
                self.acc(a, |ga| add_into(ga, g));
                self.acc(m, |gm| {
                    for bi in 0..b {
                        for li in 0..l {
                            let off = (bi * l + li) * n;
                            let mrow = &mut gm[bi * n..(bi + 1) * n];
                            for j in 0..n {
                                mrow[j] = mrow[j] + g[off + j];
                            }
                        }
                    }
                });
            }
            Op::MulAxis1(a, m) => {
                let (a, m) = (*a, *m);
                let [b, l, n] = three_dims(&self.nodes[a.0].shape);
                let av = self.nodes[a.0].data.clone();
                let mv = self.nodes[m.0].data.clone();
                self.acc(a, |ga| {
                    for bi in 0..b {
                        let mrow = &mv[bi * n..(bi + 1) * n];
                        for li in 0..l {
                            let off = (bi * l + li) * n;
                            for j in 0..n {
                                ga[off + j] = ga[off + j] + g[off + j] * mrow[j];
                            }
                        }
                    }
                });
                self.acc(m, |gm| {
                    for bi in 0..b {
                        let mrow = &mut gm[bi * n..(bi + 1) * n];
                        for li in 0..l {
                            let off = (bi * l + li) * n;
                            for j in 0..n {
                                mrow[j] = mrow[j] + g[off + j] * av[off + j];
                            }
                        }
                    }
                });
            }
            Op::Matmul { a, b, dims } => {
                let (a, b, d) = (*a, *b, *dims);
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                let MatmulDims {
                    batch,
                    m,
                    k,
                    n,
                    a_broadcast,
                    b_broadcast,
                } = d;
                self.acc(a, |ga| {
                    for i in 0..batch {
                        let ao = if a_broadcast { 0 } else { i * m * k };
                        let bo = if b_broadcast { 0 } else { i * k * n };
                        mm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(b, |gb| {
                    for i in 0..batch {
                        let ao = if a_broadcast { 0 } else { i * m * k };
                        let bo = if b_broadcast { 0 } else { i * k * n };
                        mm_tn(
                            &av[ao..ao + m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Softmax(x) => {
                let x = *x;
                let y = self.nodes[i].data.clone();
                let n = *self.nodes[i].shape.last().expect("softmax rank");
                self.acc(x, |gx| {
                    for ((yrow, grow), srow) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let dot = yrow
                            .iter()
                            .zip(grow)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for ((s, &yv), &gv) in srow.iter_mut().zip(yrow).zip(grow) {
                            *s = *s + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let r = inv_rms.clone();
                let n = *self.nodes[gain.0].shape.last().expect("gain rank");
                let xv = self.nodes[x.0].data.clone();
                let gv = self.nodes[gain.0].data.clone();
                let inv_n = T::from_f64(1.0 / n as f64);
                self.acc(x, |gx| {
                    for (si, (xrow, grow)) in xv.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        let ri = r[si];
                        // dl/du where u = x * r, y = u * gain
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + grow[j] * gv[j] * xrow[j];
                        }
                        let coef = ri * ri * ri * inv_n * dot;
                        let srow = &mut gx[si * n..(si + 1) * n];
                        for j in 0..n {
                            srow[j] = srow[j] + ri * grow[j] * gv[j] - coef * xrow[j];
                        }
                    }
                });
                self.acc(gain, |gg| {
                    for (si, (xrow, grow)) in xv.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        let ri = r[si];
                        for j in 0..n {
                            gg[j] = gg[j] + grow[j] * xrow[j] * ri;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, inv_std } => {
                let (x, gain) = (*x, *gain);
                let istd = inv_std.clone();
                let n = *self.nodes[gain.0].shape.last().expect("gain rank");
                let y = self.nodes[i].data.clone();
                let gv = self.nodes[gain.0].data.clone();
                let inv_n = T::from_f64(1.0 / n as f64);
                self.acc(x, |gx| {
                    for si in 0..istd.len() {
                        let yrow = &y[si * n..(si + 1) * n];
                        let grow = &g[si * n..(si + 1) * n];
                        // recover u = (x - mean) * istd from y = u * gain
                        let mut du = vec![T::zero(); n];
                        let mut u = vec![T::zero(); n];
                        for j in 0..n {
                            du[j] = grow[j] * gv[j];
                            u[j] = if gv[j] != T::zero() {
                                yrow[j] / gv[j]
                            } else {
                                T::zero()
                            };
                        }
                        let mean_du = du.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
                        let mean_duu = du
                            .iter()
                            .zip(&u)
                            .fold(T::zero(), |a, (&dv, &uv)| a + dv * uv)
                            * inv_n;
                        let srow = &mut gx[si * n..(si + 1) * n];
                        for j in 0..n {
                            srow[j] = srow[j] + istd[si] * (du[j] - mean_du - u[j] * mean_duu);
                        }
                    }
                });
                self.acc(gain, |gg| {
                    for si in 0..istd.len() {
                        let yrow = &y[si * n..(si + 1) * n];
                        let grow = &g[si * n..(si + 1) * n];
                        for j in 0..n {
                            let u = if gv[j] != T::zero() {
                                yrow[j] / gv[j]
                            } else {
                                T::zero()
                            };
                            gg[j] = gg[j] + grow[j] * u;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].data.clone();
                self.acc(x, |gx| {
                    for ((s, &v), &xi) in gx.iter_mut().zip(g).zip(&xv) {
                        let sig = T::one() / (T::one() + (-xi).exp());
                        *s = *s + v * sig * (T::one() + xi * (T::one() - sig));
                    }
                });
            }
            Op::Reshape(x) => {
                let x = *x;
                self.acc(x, |gx| add_into(gx, g));
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let axes = axes.clone();
                let in_shape = self.nodes[x.0].shape.clone();
                self.acc(x, |gx| {
                    // scatter: gx[in_idx] += g[out_idx]
                    permute_acc(g, gx, &in_shape, &axes);
                });
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for v in inputs {
                    let a = self.nodes[v.0].shape[axis];
                    let off = offset;
                    self.acc(v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            let dst = o * a * inner;
                            for j in 0..a * inner {
                                gv[dst + j] = gv[dst + j] + g[src + j];
                            }
                        }
                    });
                    offset += a;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (x, axis, start, len) = (*x, *axis, *start, *len);
                let in_shape = self.nodes[x.0].shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let a = in_shape[axis];
                self.acc(x, |gx| {
                    for o in 0..outer {
                        let dst = (o * a + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] = gx[dst + j] + g[src + j];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = g[0];
                self.acc(x, |gx| {
                    for s in gx.iter_mut() {
                        *s = *s + gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = T::from_f64(self.nodes[x.0].data.len() as f64);
                let gv = g[0] / n;
                self.acc(x, |gx| {
                    for s in gx.iter_mut() {
                        *s = *s + gv;
                    }
                });
            }
            Op::Gather {
                table,
                ids,
                frozen_row,
            } => {
                let table = *table;
                let ids = ids.clone();
                let frozen = *frozen_row;
                let width = self.nodes[table.0].shape[1];
                self.acc(table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        if Some(id) == frozen {
                            continue;
                        }
                        let dst = &mut gt[id * width..(id + 1) * width];
                        let src = &g[row * width..(row + 1) * width];
                        add_into(dst, src);
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let x = *x;
                let cos = cos.clone();
                let sin = sin.clone();
                let shape = self.nodes[x.0].shape.clone();
                let (b, l, h, d) = (shape[0], shape[1], shape[2], shape[3]);
                let planes = d / 2;
                self.acc(x, |gx| {
                    for bi in 0..b {
                        for li in 0..l {
                            let ph = li * planes;
                            for hi in 0..h {
                                let off = ((bi * l + li) * h + hi) * d;
                                for p in 0..planes {
                                    let (c, s) = (cos[ph + p], sin[ph + p]);
                                    let g0 = g[off + 2 * p];
                                    let g1 = g[off + 2 * p + 1];
                                    gx[off + 2 * p] = gx[off + 2 * p] + g0 * c + g1 * s;
                                    gx[off + 2 * p + 1] = gx[off + 2 * p + 1] - g0 * s + g1 * c;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn three_dims(shape: &[usize]) -> [usize; 3] {
    [shape[0], shape[1], shape[2]]
}

/// `out += a @ b` for row-major `a[m,k]`, `b[k,n]`.
fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// `out += a @ b^T` for `a[m,k]`, `b[n,k]` -> `out[m,n]`.
fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            orow[j] = orow[j] + acc;
        }
    }
}

/// `out += a^T @ b` for `a[m,k]`, `b[m,n]` -> `out[k,n]`.
fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// Copy `src` (shape `in_shape`) into `dst` laid out with axes permuted.
fn permute_copy<T: Scalar>(src: &[T], dst: &mut [T], in_shape: &[usize], axes: &[usize], _acc: bool) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
    }
    let stride_for_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    for (flat, slot) in dst.iter_mut().enumerate() {
        let mut rem = flat;
        let mut in_off = 0;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            in_off += idx * stride_for_out[d];
        }
        *slot = src[in_off];
    }
}

/// Accumulate permuted gradient back: `gx[in_idx] += g[out_idx]`.
fn permute_acc<T: Scalar>(g: &[T], gx: &mut [T], in_shape: &[usize], axes: &[usize]) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
    }
    let stride_for_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    for (flat, &gv) in g.iter().enumerate() {
        let mut rem = flat;
        let mut in_off = 0;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            in_off += idx * stride_for_out[d];
        }
        gx[in_off] = gx[in_off] + gv;
    }
}


#[cfg(test)]
impl Tape<f64> {
    /// Test helper: reduce any node to a scalar with a fixed weighting so
    /// finite-difference probes see a non-degenerate objective.
    fn sum_abs_like(&mut self, v: Var) -> Var {
        let n = self.value(v).len();
        let weights: Vec<f64> = (0..n).map(|i| 0.25 + (i % 7) as f64 * 0.35).collect();
        let w = self.constant(&[n], weights);
        let flat = self.reshape(v, &[n]).unwrap();
        let prod = self.mul(flat, w).unwrap();
        self.sum_all(prod).unwrap()
    }
}
