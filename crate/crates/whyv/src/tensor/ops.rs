//! Op kernels and their VJPs.
//!
//! Binary elementwise ops broadcast with trailing-dimension alignment.
//! Matrix multiplication delegates the inner kernel to `matrixmultiply`;
//! everything else is written out directly.

use std::rc::Rc;

use super::graph::{Backward, Graph, Value};
use super::{uninit_vec, Result, Tensor, TensorError};

// ── broadcasting helpers ────────────────────────────────────────────

/// Broadcast shape of `a` vs `b` under trailing alignment, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` viewed as `out_shape`: zero on broadcast axes,
/// left-padded to the output rank.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = row_major_strides(shape);
    let mut out = vec![0usize; rank];
    let off = rank - shape.len();
    for i in 0..shape.len() {
        out[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

/// Elementwise binary op with broadcasting.
fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
    })?;
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = uninit_vec(numel);

    // Innermost axis runs as a tight loop; outer axes use an odometer.
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    for chunk in out.chunks_mut(inner) {
        match (ia, ib) {
            (1, 1) => {
                for (j, o) in chunk.iter_mut().enumerate() {
                    *o = f(ad[oa + j], bd[ob + j]);
                }
            }
            (1, 0) => {
                let y = bd[ob];
                for (j, o) in chunk.iter_mut().enumerate() {
                    *o = f(ad[oa + j], y);
                }
            }
            (0, 1) => {
                let x = ad[oa];
                for (j, o) in chunk.iter_mut().enumerate() {
                    *o = f(x, bd[ob + j]);
                }
            }
            _ => {
                for (j, o) in chunk.iter_mut().enumerate() {
                    *o = f(ad[oa + j * ia], bd[ob + j * ib]);
                }
            }
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Reduces `g` (whose shape broadcast-extends `target`) back to `target`
/// by summing over the broadcast axes.
pub(crate) fn sum_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let rank = g.shape().len();
    let st = broadcast_strides(target, g.shape());
    let numel_t: usize = target.iter().product();
    let mut out = vec![0.0; numel_t];
    let shape = g.shape();
    let inner = shape[rank - 1];
    let it = st[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut ot = 0usize;
    for chunk in g.data().chunks(inner) {
        if it == 1 {
            for (j, &v) in chunk.iter().enumerate() {
                out[ot + j] += v;
            }
        } else {
            let mut s = 0.0;
            for &v in chunk {
                s += v;
            }
            out[ot] += s;
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * shape[ax];
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

// ── matmul kernel ───────────────────────────────────────────────────

/// C = A(m,k) . B(k,n), arbitrary input strides, row-major output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ── backward structs ────────────────────────────────────────────────

struct AddBack {
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
}

impl Backward for AddBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![sum_to_shape(g, &self.a_shape), sum_to_shape(g, &self.b_shape)])
    }
    fn name(&self) -> &'static str {
        "add"
    }
}

struct SubBack {
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
}

impl Backward for SubBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let mut neg = g.clone();
        for v in neg.data_mut() {
            *v = -*v;
        }
        Ok(vec![sum_to_shape(g, &self.a_shape), sum_to_shape(&neg, &self.b_shape)])
    }
    fn name(&self) -> &'static str {
        "sub"
    }
}

struct MulBack {
    a: Rc<Tensor>,
    b: Rc<Tensor>,
}

impl Backward for MulBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let da = binary_broadcast("mul_back", g, &self.b, |x, y| x * y)?;
        let db = binary_broadcast("mul_back", g, &self.a, |x, y| x * y)?;
        Ok(vec![sum_to_shape(&da, self.a.shape()), sum_to_shape(&db, self.b.shape())])
    }
    fn name(&self) -> &'static str {
        "mul"
    }
}

struct DivBack {
    a: Rc<Tensor>,
    b: Rc<Tensor>,
}

impl Backward for DivBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let da = binary_broadcast("div_back", g, &self.b, |x, y| x / y)?;
        let ga = binary_broadcast("div_back", g, &self.a, |x, y| x * y)?;
        let db = binary_broadcast("div_back", &ga, &self.b, |x, y| -x / (y * y))?;
        Ok(vec![sum_to_shape(&da, self.a.shape()), sum_to_shape(&db, self.b.shape())])
    }
    fn name(&self) -> &'static str {
        "div"
    }
}

struct MatMulBack {
    a: Rc<Tensor>,
    b: Rc<Tensor>,
}

impl Backward for MatMulBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let (m, k) = (self.a.shape()[0], self.a.shape()[1]);
        let n = self.b.shape()[1];
        // dA = g . B^T
        let mut da = vec![0.0; m * k];
        dgemm_rm(m, n, k, g.data(), n as isize, 1, self.b.data(), 1, n as isize, &mut da);
        // dB = A^T . g
        let mut db = vec![0.0; k * n];
        dgemm_rm(k, m, n, self.a.data(), 1, k as isize, g.data(), n as isize, 1, &mut db);
        Ok(vec![Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db)])
    }
    fn name(&self) -> &'static str {
        "matmul"
    }
}

/// Unary op whose derivative is a pointwise function of one saved tensor
/// (either the input or the output, whichever is cheaper).
struct UnaryBack {
    name: &'static str,
    saved: Rc<Tensor>,
    dfn: fn(f64) -> f64,
}

impl Backward for UnaryBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let data = g
            .data()
            .iter()
            .zip(self.saved.data())
            .map(|(&gv, &sv)| gv * (self.dfn)(sv))
            .collect();
        Ok(vec![Tensor::from_parts(g.shape().to_vec(), data)])
    }
    fn name(&self) -> &'static str {
        self.name
    }
}

struct LinearBack {
    name: &'static str,
    factor: f64,
}

impl Backward for LinearBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let data = g.data().iter().map(|&v| v * self.factor).collect();
        Ok(vec![Tensor::from_parts(g.shape().to_vec(), data)])
    }
    fn name(&self) -> &'static str {
        self.name
    }
}

struct ReshapeBack {
    in_shape: Vec<usize>,
}

impl Backward for ReshapeBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::from_parts(self.in_shape.clone(), g.data().to_vec())])
    }
    fn name(&self) -> &'static str {
        "reshape"
    }
}

struct TransposeBack {
    ax0: usize,
    ax1: usize,
}

impl Backward for TransposeBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![transpose_copy(g, self.ax0, self.ax1)])
    }
    fn name(&self) -> &'static str {
        "transpose"
    }
}

struct BroadcastBack {
    in_shape: Vec<usize>,
}

impl Backward for BroadcastBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![sum_to_shape(g, &self.in_shape)])
    }
    fn name(&self) -> &'static str {
        "broadcast"
    }
}

struct ConcatBack {
    axis: usize,
    extents: Vec<usize>,
}

impl Backward for ConcatBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.extents.len());
        let mut start = 0usize;
        for &ext in &self.extents {
            outs.push(slice_copy(g, self.axis, start, start + ext));
            start += ext;
        }
        Ok(outs)
    }
    fn name(&self) -> &'static str {
        "concat"
    }
}

struct SliceBack {
    in_shape: Vec<usize>,
    axis: usize,
    start: usize,
}

impl Backward for SliceBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Tensor::zeros(&self.in_shape);
        scatter_slice(&mut out, g, self.axis, self.start);
        Ok(vec![out])
    }
    fn name(&self) -> &'static str {
        "slice"
    }
}

struct SoftmaxBack {
    axis: usize,
    out: Rc<Tensor>,
}

impl Backward for SoftmaxBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let shape = self.out.shape();
        let (outer, lane, inner) = lane_split(shape, self.axis);
        let y = self.out.data();
        let gd = g.data();
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut s = 0.0;
                for l in 0..lane {
                    let p = base + l * inner;
                    s += gd[p] * y[p];
                }
                for l in 0..lane {
                    let p = base + l * inner;
                    dx[p] = y[p] * (gd[p] - s);
                }
            }
        }
        Ok(vec![Tensor::from_parts(shape.to_vec(), dx)])
    }
    fn name(&self) -> &'static str {
        "softmax"
    }
}

struct LayerNormBack {
    axis: usize,
    y: Rc<Tensor>,
    rstd: Vec<f64>,
}

impl Backward for LayerNormBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let shape = self.y.shape();
        let (outer, lane, inner) = lane_split(shape, self.axis);
        let y = self.y.data();
        let gd = g.data();
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let rstd = self.rstd[o * inner + i];
                let (mut m1, mut m2) = (0.0, 0.0);
                for l in 0..lane {
                    let p = base + l * inner;
                    m1 += gd[p];
                    m2 += gd[p] * y[p];
                }
                m1 /= lane as f64;
                m2 /= lane as f64;
                for l in 0..lane {
                    let p = base + l * inner;
                    dx[p] = rstd * (gd[p] - m1 - y[p] * m2);
                }
            }
        }
        Ok(vec![Tensor::from_parts(shape.to_vec(), dx)])
    }
    fn name(&self) -> &'static str {
        "layer_norm"
    }
}

struct ReduceBack {
    name: &'static str,
    in_shape: Vec<usize>,
    axis: Option<usize>,
    scale: f64,
}

impl Backward for ReduceBack {
    fn backward(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        let numel: usize = self.in_shape.iter().product();
        let mut out = vec![0.0; numel];
        match self.axis {
            None => {
                let gv = g.data()[0] * self.scale;
                out.iter_mut().for_each(|v| *v = gv);
            }
            Some(axis) => {
                let (outer, lane, inner) = lane_split(&self.in_shape, axis);
                let gd = g.data();
                for o in 0..outer {
                    for l in 0..lane {
                        for i in 0..inner {
                            out[o * lane * inner + l * inner + i] = gd[o * inner + i] * self.scale;
                        }
                    }
                }
            }
        }
        Ok(vec![Tensor::from_parts(self.in_shape.clone(), out)])
    }
    fn name(&self) -> &'static str {
        self.name
    }
}

// ── shared kernels ──────────────────────────────────────────────────

/// Splits `shape` around `axis` into (outer, lane, inner) extents.
pub(crate) fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn transpose_copy(t: &Tensor, ax0: usize, ax1: usize) -> Tensor {
    if ax0 == ax1 {
        return t.clone();
    }
    let shape = t.shape();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    // View the shape as [pre, A, mid, B, post] with the swap applied to A
    // and B; `post` runs contiguously in both source and destination.
    let (a, b) = (ax0.min(ax1), ax0.max(ax1));
    let pre: usize = shape[..a].iter().product();
    let ea = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let eb = shape[b];
    let post: usize = shape[b + 1..].iter().product();
    let mut out = uninit_vec(t.numel());
    let data = t.data();
    for p in 0..pre {
        for ib in 0..eb {
            for m in 0..mid {
                for ia in 0..ea {
                    let src = (((p * ea + ia) * mid + m) * eb + ib) * post;
                    let dst = (((p * eb + ib) * mid + m) * ea + ia) * post;
                    if post == 1 {
                        out[dst] = data[src];
                    } else {
                        out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn slice_copy(t: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let shape = t.shape();
    let (outer, lane, inner) = lane_split(shape, axis);
    let take = end - start;
    let mut out_shape = shape.to_vec();
    out_shape[axis] = take;
    let mut out = uninit_vec(outer * take * inner);
    let data = t.data();
    for o in 0..outer {
        let src = o * lane * inner + start * inner;
        let dst = o * take * inner;
        out[dst..dst + take * inner].copy_from_slice(&data[src..src + take * inner]);
    }
    Tensor::from_parts(out_shape, out)
}

fn scatter_slice(dst: &mut Tensor, src: &Tensor, axis: usize, start: usize) {
    let shape = dst.shape().to_vec();
    let (outer, lane, inner) = lane_split(&shape, axis);
    let take = src.shape()[axis];
    let sd = src.data();
    let dd = dst.data_mut();
    for o in 0..outer {
        let d = o * lane * inner + start * inner;
        let s = o * take * inner;
        dd[d..d + take * inner].copy_from_slice(&sd[s..s + take * inner]);
    }
}

fn broadcast_to_copy(t: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
    let check = broadcast_shape(t.shape(), out_shape).ok_or_else(|| TensorError::ShapeMismatch {
        op: "broadcast",
        detail: format!("{:?} -> {:?}", t.shape(), out_shape),
    })?;
    if check != out_shape {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast",
            detail: format!("{:?} does not broadcast to {:?}", t.shape(), out_shape),
        });
    }
    let rank = out_shape.len();
    let st = broadcast_strides(t.shape(), out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let data = t.data();
    for o in out.iter_mut() {
        *o = data[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            src -= st[ax] * out_shape[ax];
        }
    }
    Ok(Tensor::from_parts(out_shape.to_vec(), out))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── graph op methods ────────────────────────────────────────────────

impl Graph {
    pub fn add(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = binary_broadcast("add", a.tensor(), b.tensor(), |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.push("add", out, &[a, b], |_| Box::new(AddBack { a_shape: sa, b_shape: sb }))
    }

    pub fn sub(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = binary_broadcast("sub", a.tensor(), b.tensor(), |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.push("sub", out, &[a, b], |_| Box::new(SubBack { a_shape: sa, b_shape: sb }))
    }

    pub fn mul(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = binary_broadcast("mul", a.tensor(), b.tensor(), |x, y| x * y)?;
        let (ra, rb) = (a.rc(), b.rc());
        self.push("mul", out, &[a, b], |_| Box::new(MulBack { a: ra, b: rb }))
    }

    pub fn div(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = binary_broadcast("div", a.tensor(), b.tensor(), |x, y| x / y)?;
        let (ra, rb) = (a.rc(), b.rc());
        self.push("div", out, &[a, b], |_| Box::new(DivBack { a: ra, b: rb }))
    }

    pub fn matmul(&self, a: &Value, b: &Value) -> Result<Value> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} . {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        dgemm_rm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut c);
        let out = Tensor::from_parts(vec![m, n], c);
        let (ra, rb) = (a.rc(), b.rc());
        self.push("matmul", out, &[a, b], |_| Box::new(MatMulBack { a: ra, b: rb }))
    }

    pub fn concat(&self, inputs: &[&Value], axis: usize) -> Result<Value> {
        if inputs.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "concat", detail: "no inputs".into() });
        }
        let rank = inputs[0].shape().len();
        if axis >= rank {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} out of rank {rank}"),
            });
        }
        let mut ref_shape = inputs[0].shape().to_vec();
        let mut total = 0usize;
        for v in inputs {
            if v.shape().len() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: "rank mismatch".into(),
                });
            }
            for (ax, (&d, &r)) in v.shape().iter().zip(&ref_shape).enumerate() {
                if ax != axis && d != r {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        detail: format!("{:?} vs {:?}", v.shape(), ref_shape),
                    });
                }
            }
            total += v.shape()[axis];
        }
        ref_shape[axis] = total;
        let (outer, _, inner) = lane_split(&ref_shape, axis);
        let mut data = uninit_vec(outer * total * inner);
        for o in 0..outer {
            let mut dst = o * total * inner;
            for v in inputs {
                let ext = v.shape()[axis];
                let src = o * ext * inner;
                data[dst..dst + ext * inner].copy_from_slice(&v.data()[src..src + ext * inner]);
                dst += ext * inner;
            }
        }
        let out = Tensor::from_parts(ref_shape, data);
        let extents: Vec<usize> = inputs.iter().map(|v| v.shape()[axis]).collect();
        self.push("concat", out, inputs, |_| Box::new(ConcatBack { axis, extents }))
    }

    pub fn slice(&self, v: &Value, axis: usize, start: usize, end: usize) -> Result<Value> {
        let shape = v.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {end}) along axis {axis} of {shape:?}"),
            });
        }
        let out = slice_copy(v.tensor(), axis, start, end);
        let in_shape = shape.to_vec();
        self.push("slice", out, &[v], |_| Box::new(SliceBack { in_shape, axis, start }))
    }

    pub fn reshape(&self, v: &Value, shape: &[usize]) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if numel != v.tensor().numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", v.shape(), shape),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let in_shape = v.shape().to_vec();
        self.push("reshape", out, &[v], |_| Box::new(ReshapeBack { in_shape }))
    }

    pub fn transpose(&self, v: &Value, ax0: usize, ax1: usize) -> Result<Value> {
        let rank = v.shape().len();
        if ax0 >= rank || ax1 >= rank {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("axes ({ax0},{ax1}) out of rank {rank}"),
            });
        }
        let out = transpose_copy(v.tensor(), ax0, ax1);
        self.push("transpose", out, &[v], |_| Box::new(TransposeBack { ax0, ax1 }))
    }

    pub fn broadcast_to(&self, v: &Value, shape: &[usize]) -> Result<Value> {
        let out = broadcast_to_copy(v.tensor(), shape)?;
        let in_shape = v.shape().to_vec();
        self.push("broadcast", out, &[v], |_| Box::new(BroadcastBack { in_shape }))
    }

    fn unary_saving_input(
        &self,
        name: &'static str,
        v: &Value,
        f: impl Fn(f64) -> f64,
        dfn: fn(f64) -> f64,
    ) -> Result<Value> {
        let data: Vec<f64> = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let saved = v.rc();
        self.push(name, out, &[v], |_| Box::new(UnaryBack { name, saved, dfn }))
    }

    fn unary_saving_output(
        &self,
        name: &'static str,
        v: &Value,
        f: impl Fn(f64) -> f64,
        dfn: fn(f64) -> f64,
    ) -> Result<Value> {
        let data: Vec<f64> = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(name, out, &[v], |out_rc| {
            Box::new(UnaryBack { name, saved: Rc::clone(out_rc), dfn })
        })
    }

    pub fn sigmoid(&self, v: &Value) -> Result<Value> {
        self.unary_saving_output("sigmoid", v, sigmoid, |y| y * (1.0 - y))
    }

    pub fn tanh(&self, v: &Value) -> Result<Value> {
        self.unary_saving_output("tanh", v, |x| x.tanh(), |y| 1.0 - y * y)
    }

    pub fn relu(&self, v: &Value) -> Result<Value> {
        self.unary_saving_output("relu", v, |x| x.max(0.0), |y| if y > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self, v: &Value) -> Result<Value> {
        self.unary_saving_output("exp", v, |x| x.exp(), |y| y)
    }

    pub fn log(&self, v: &Value) -> Result<Value> {
        self.unary_saving_input("log", v, |x| x.ln(), |x| 1.0 / x)
    }

    pub fn sqrt(&self, v: &Value) -> Result<Value> {
        self.unary_saving_output("sqrt", v, |x| x.sqrt(), |y| 0.5 / y)
    }

    pub fn square(&self, v: &Value) -> Result<Value> {
        self.unary_saving_input("square", v, |x| x * x, |x| 2.0 * x)
    }

    pub fn scale(&self, v: &Value, c: f64) -> Result<Value> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let data: Vec<f64> = v.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("scale", out, &[v], |_| Box::new(LinearBack { name: "scale", factor: c }))
    }

    pub fn add_scalar(&self, v: &Value, c: f64) -> Result<Value> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "add_scalar" });
        }
        let data: Vec<f64> = v.data().iter().map(|&x| x + c).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("add_scalar", out, &[v], |_| {
            Box::new(LinearBack { name: "add_scalar", factor: 1.0 })
        })
    }

    pub fn neg(&self, v: &Value) -> Result<Value> {
        self.scale(v, -1.0)
    }

    pub fn softmax(&self, v: &Value, axis: usize) -> Result<Value> {
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} out of rank {}", shape.len()),
            });
        }
        let (outer, lane, inner) = lane_split(shape, axis);
        let x = v.data();
        let mut out = uninit_vec(x.len());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut s = 0.0;
                for l in 0..lane {
                    let e = (x[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    s += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= s;
                }
            }
        }
        let out = Tensor::from_parts(shape.to_vec(), out);
        self.push("softmax", out, &[v], |out_rc| {
            Box::new(SoftmaxBack { axis, out: Rc::clone(out_rc) })
        })
    }

    /// Pure normalization over `axis`: zero mean, unit variance per lane.
    /// Learnable gain/bias are applied by the caller as separate ops.
    pub fn layer_norm(&self, v: &Value, axis: usize, eps: f64) -> Result<Value> {
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("axis {axis} out of rank {}", shape.len()),
            });
        }
        let (outer, lane, inner) = lane_split(shape, axis);
        let x = v.data();
        let mut out = uninit_vec(x.len());
        let mut rstd = uninit_vec(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mean = 0.0;
                for l in 0..lane {
                    mean += x[base + l * inner];
                }
                mean /= lane as f64;
                let mut var = 0.0;
                for l in 0..lane {
                    let d = x[base + l * inner] - mean;
                    var += d * d;
                }
                var /= lane as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..lane {
                    out[base + l * inner] = (x[base + l * inner] - mean) * r;
                }
            }
        }
        let out = Tensor::from_parts(shape.to_vec(), out);
        self.push("layer_norm", out, &[v], |out_rc| {
            Box::new(LayerNormBack { axis, y: Rc::clone(out_rc), rstd })
        })
    }

    pub fn sum(&self, v: &Value, axis: Option<usize>, keep_dim: bool) -> Result<Value> {
        self.reduce("sum", v, axis, keep_dim, 1.0)
    }

    pub fn mean(&self, v: &Value, axis: Option<usize>, keep_dim: bool) -> Result<Value> {
        let lane = match axis {
            None => v.tensor().numel(),
            Some(a) => {
                if a >= v.shape().len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "mean",
                        detail: format!("axis {a} out of rank {}", v.shape().len()),
                    });
                }
                v.shape()[a]
            }
        };
        self.reduce("mean", v, axis, keep_dim, 1.0 / lane as f64)
    }

    pub fn sum_all(&self, v: &Value) -> Result<Value> {
        self.sum(v, None, false)
    }

    fn reduce(
        &self,
        name: &'static str,
        v: &Value,
        axis: Option<usize>,
        keep_dim: bool,
        scale: f64,
    ) -> Result<Value> {
        let shape = v.shape();
        let out = match axis {
            None => {
                let s: f64 = v.data().iter().sum::<f64>() * scale;
                Tensor::from_parts(vec![1], vec![s])
            }
            Some(a) => {
                if a >= shape.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: name,
                        detail: format!("axis {a} out of rank {}", shape.len()),
                    });
                }
                let (outer, lane, inner) = lane_split(shape, a);
                let x = v.data();
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..lane {
                        let base = o * lane * inner + l * inner;
                        for i in 0..inner {
                            data[o * inner + i] += x[base + i];
                        }
                    }
                }
                if scale != 1.0 {
                    data.iter_mut().for_each(|x| *x *= scale);
                }
                let mut out_shape: Vec<usize> = Vec::new();
                for (ax, &d) in shape.iter().enumerate() {
                    if ax == a {
                        if keep_dim {
                            out_shape.push(1);
                        }
                    } else {
                        out_shape.push(d);
                    }
                }
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                Tensor::from_parts(out_shape, data)
            }
        };
        let in_shape = shape.to_vec();
        self.push(name, out, &[v], |_| Box::new(ReduceBack { name, in_shape, axis, scale }))
    }
}

// ── uniform apply() entry point ─────────────────────────────────────

/// Op kinds accepted by [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Broadcast,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    Square,
    Scale,
    AddScalar,
    Softmax,
    LayerNorm,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::MatMul,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Broadcast,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Broadcast => "broadcast",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Attributes for [`Graph::apply`]; each op reads the fields it needs.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub axis: Option<usize>,
    pub keep_dim: bool,
    pub scalar: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub axes: Option<(usize, usize)>,
    pub range: Option<(usize, usize)>,
    pub eps: Option<f64>,
}

impl Graph {
    /// Uniform op dispatch. Typed methods are the primary API; this entry
    /// point exists so ops can be enumerated and driven generically.
    pub fn apply(&self, kind: OpKind, inputs: &[&Value], attrs: &OpAttrs) -> Result<Value> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(TensorError::ShapeMismatch {
                    op: kind.name(),
                    detail: format!("expected {n} inputs, got {}", inputs.len()),
                })
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Div => {
                arity(2)?;
                self.div(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Concat => {
                let axis =
                    attrs.axis.ok_or(TensorError::MissingAttr { op: "concat", attr: "axis" })?;
                self.concat(inputs, axis)
            }
            OpKind::Slice => {
                arity(1)?;
                let axis =
                    attrs.axis.ok_or(TensorError::MissingAttr { op: "slice", attr: "axis" })?;
                let (s, e) =
                    attrs.range.ok_or(TensorError::MissingAttr { op: "slice", attr: "range" })?;
                self.slice(inputs[0], axis, s, e)
            }
            OpKind::Reshape => {
                arity(1)?;
                let shape = attrs
                    .shape
                    .as_ref()
                    .ok_or(TensorError::MissingAttr { op: "reshape", attr: "shape" })?;
                self.reshape(inputs[0], shape)
            }
            OpKind::Transpose => {
                arity(1)?;
                let (a0, a1) =
                    attrs.axes.ok_or(TensorError::MissingAttr { op: "transpose", attr: "axes" })?;
                self.transpose(inputs[0], a0, a1)
            }
            OpKind::Broadcast => {
                arity(1)?;
                let shape = attrs
                    .shape
                    .as_ref()
                    .ok_or(TensorError::MissingAttr { op: "broadcast", attr: "shape" })?;
                self.broadcast_to(inputs[0], shape)
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            OpKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpKind::Sqrt => {
                arity(1)?;
                self.sqrt(inputs[0])
            }
            OpKind::Square => {
                arity(1)?;
                self.square(inputs[0])
            }
            OpKind::Scale => {
                arity(1)?;
                let c =
                    attrs.scalar.ok_or(TensorError::MissingAttr { op: "scale", attr: "scalar" })?;
                self.scale(inputs[0], c)
            }
            OpKind::AddScalar => {
                arity(1)?;
                let c = attrs
                    .scalar
                    .ok_or(TensorError::MissingAttr { op: "add_scalar", attr: "scalar" })?;
                self.add_scalar(inputs[0], c)
            }
            OpKind::Softmax => {
                arity(1)?;
                let axis =
                    attrs.axis.ok_or(TensorError::MissingAttr { op: "softmax", attr: "axis" })?;
                self.softmax(inputs[0], axis)
            }
            OpKind::LayerNorm => {
                arity(1)?;
                let axis = attrs
                    .axis
                    .ok_or(TensorError::MissingAttr { op: "layer_norm", attr: "axis" })?;
                self.layer_norm(inputs[0], axis, attrs.eps.unwrap_or(1e-5))
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0], attrs.axis, attrs.keep_dim)
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0], attrs.axis, attrs.keep_dim)
            }
        }
    }
}
