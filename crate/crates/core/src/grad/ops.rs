//! Primitive catalog: forward definitions and vector-Jacobian products.

use super::kernels::{self, bin_taps, ConvGeom, Tap};
use super::{GradError, Real, Tensor};

/// A crop window in input-image coordinates, applied to one batch item.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub batch: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// The primitive operations recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Elementwise product of two same-shape tensors.
    Mul,
    /// `[m,k] × [k,n]`.
    Matmul,
    /// Inputs `x[N,C,H,W]`, `w[O,C,kh,kw]` and optionally `b[O]`.
    Conv2d { stride: usize, pad: usize },
    Relu,
    LeakyRelu { alpha: f64 },
    Sigmoid,
    Concat { axis: usize },
    Tile { axis: usize, count: usize },
    /// Bilinear crop-and-resize of `x[N,C,H,W]` into `[R,C,S,S]`, one sample
    /// per output bin at the bin center. Windows are scaled by `scale` into
    /// feature coordinates.
    BilinearCrop { windows: Vec<CropWindow>, out_size: usize, scale: f64 },
    /// `[N, ...] → [N, prod(...)]`.
    Flatten,
    /// Inputs `x[N,Din]`, `w[Dout,Din]` and optionally `b[Dout]`; `x·wᵀ + b`.
    Linear,
    Reshape { shape: Vec<usize> },
    Slice { axis: usize, start: usize, len: usize },
    /// Sum of all elements into a one-element tensor.
    Sum,
    /// Identity on values; blocks gradient flow into its input.
    StopGradient,
    /// Mean binary cross-entropy over elements where `mask` is set.
    /// Inputs: logits and targets of equal size.
    BceWithLogits { mask: Vec<bool> },
    /// Mean softmax cross-entropy over rows of `logits[R,C]`.
    SoftmaxCe { labels: Vec<usize> },
    /// Mean smooth-L1 (transition at 1) over elements where `mask` is set.
    SmoothL1 { mask: Vec<bool> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Matmul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu { .. } => "leaky_relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Concat { .. } => "concat",
            Primitive::Tile { .. } => "tile",
            Primitive::BilinearCrop { .. } => "bilinear_crop",
            Primitive::Flatten => "flatten",
            Primitive::Linear => "linear",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::StopGradient => "stop_gradient",
            Primitive::BceWithLogits { .. } => "bce_with_logits",
            Primitive::SoftmaxCe { .. } => "softmax_ce",
            Primitive::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T, GradError> {
    Err(GradError::Shape { op, detail })
}

fn arity(op: &Primitive, got: usize, allowed: &[usize]) -> Result<(), GradError> {
    if allowed.contains(&got) {
        Ok(())
    } else {
        shape_err(op.name(), format!("expected {allowed:?} inputs, got {got}"))
    }
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<(), GradError> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `(outer, axis extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        channels: x[1],
        height: x[2],
        width: x[3],
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        pad,
    }
}

struct CropPlan<F> {
    rows: Vec<Vec<Tap<F>>>,
    cols: Vec<Vec<Tap<F>>>,
}

fn crop_plan<F: Real>(
    windows: &[CropWindow],
    out: usize,
    scale: f64,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<CropPlan<F>, GradError> {
    let mut rows = Vec::with_capacity(windows.len());
    let mut cols = Vec::with_capacity(windows.len());
    for win in windows {
        if win.batch >= batch {
            return shape_err("bilinear_crop", format!("batch index {} out of {batch}", win.batch));
        }
        let x0 = (win.x0 * scale).clamp(0.0, w as f64);
        let x1 = (win.x1 * scale).clamp(0.0, w as f64);
        let y0 = (win.y0 * scale).clamp(0.0, h as f64);
        let y1 = (win.y1 * scale).clamp(0.0, h as f64);
        if !(x1 - x0 >= 1.0 && y1 - y0 >= 1.0) {
            return Err(GradError::Invalid {
                op: "bilinear_crop",
                detail: format!(
                    "degenerate window ({x0:.3},{y0:.3})-({x1:.3},{y1:.3}) in feature coordinates"
                ),
            });
        }
        rows.push(bin_taps(y0, y1, out, h));
        cols.push(bin_taps(x0, x1, out, w));
    }
    Ok(CropPlan { rows, cols })
}

/// Forward value of `prim` applied to `inputs`.
pub(crate) fn forward<F: Real>(prim: &Primitive, inputs: &[&Tensor<F>]) -> Result<Tensor<F>, GradError> {
    let op = prim.name();
    match prim {
        Primitive::Add | Primitive::Mul => {
            arity(prim, inputs.len(), &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| if *prim == Primitive::Add { x + y } else { x * y })
                .collect();
            Tensor::new(a.shape(), data)
        }
        Primitive::Matmul => {
            arity(prim, inputs.len(), &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return shape_err(op, format!("{:?} × {:?}", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![F::zero(); m * n];
            kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut out);
            Tensor::new(&[m, n], out)
        }
        Primitive::Conv2d { stride, pad } => {
            arity(prim, inputs.len(), &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || *stride == 0 {
                return shape_err(op, format!("input {xs:?}, weight {ws:?}, stride {stride}"));
            }
            if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
                return shape_err(op, format!("kernel {ws:?} larger than padded input {xs:?}"));
            }
            if let Some(b) = inputs.get(2) {
                if b.shape() != [ws[0]] {
                    return shape_err(op, format!("bias {:?} for {} outputs", b.shape(), ws[0]));
                }
            }
            let g = conv_geom(xs, ws, *stride, *pad);
            let (n, cout) = (xs[0], ws[0]);
            let (rows, plane) = (g.col_rows(), g.col_cols());
            let in_sz = g.channels * g.height * g.width;
            let mut out = vec![F::zero(); n * cout * plane];
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * plane] };
            for s in 0..n {
                let img = &x.data()[s * in_sz..(s + 1) * in_sz];
                let dst = &mut out[s * cout * plane..(s + 1) * cout * plane];
                if let Some(b) = inputs.get(2) {
                    for (o, &bv) in b.data().iter().enumerate() {
                        dst[o * plane..(o + 1) * plane].fill(bv);
                    }
                }
                let src = if g.is_pointwise() {
                    img
                } else {
                    kernels::im2col(&g, img, &mut cols);
                    &cols[..]
                };
                kernels::gemm_nn(cout, rows, plane, w.data(), src, dst);
            }
            Tensor::new(&[n, cout, g.out_h(), g.out_w()], out)
        }
        Primitive::Relu => {
            arity(prim, inputs.len(), &[1])?;
            Ok(inputs[0].map(|v| if v > F::zero() { v } else { F::zero() }))
        }
        Primitive::LeakyRelu { alpha } => {
            arity(prim, inputs.len(), &[1])?;
            if !(*alpha > 0.0) {
                return Err(GradError::Invalid { op, detail: format!("alpha must be > 0, got {alpha}") });
            }
            let a = F::lit(*alpha);
            Ok(inputs[0].map(|v| if v > F::zero() { v } else { a * v }))
        }
        Primitive::Sigmoid => {
            arity(prim, inputs.len(), &[1])?;
            Ok(inputs[0].map(sigmoid))
        }
        Primitive::Concat { axis } => {
            if inputs.is_empty() {
                return shape_err(op, "no inputs".into());
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return shape_err(op, format!("axis {axis} for rank {}", first.len()));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return shape_err(op, format!("{s:?} vs {first:?} along axis {axis}"));
                }
                total += s[*axis];
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&shape, out)
        }
        Primitive::Tile { axis, count } => {
            arity(prim, inputs.len(), &[1])?;
            let x = inputs[0];
            if *axis >= x.shape().len() || *count == 0 {
                return shape_err(op, format!("axis {axis} count {count} for {:?}", x.shape()));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let chunk = len * inner;
            let mut out = Vec::with_capacity(x.numel() * count);
            for o in 0..outer {
                for _ in 0..*count {
                    out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] *= count;
            Tensor::new(&shape, out)
        }
        Primitive::BilinearCrop { windows, out_size, scale } => {
            arity(prim, inputs.len(), &[1])?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() != 4 || *out_size == 0 || windows.is_empty() {
                return shape_err(op, format!("input {xs:?}, out {out_size}, {} windows", windows.len()));
            }
            let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let plan = crop_plan::<F>(windows, *out_size, *scale, nb, h, w)?;
            let s = *out_size;
            let mut out = vec![F::zero(); windows.len() * c * s * s];
            for (r, win) in windows.iter().enumerate() {
                for ch in 0..c {
                    let src = &x.data()[(win.batch * c + ch) * h * w..(win.batch * c + ch + 1) * h * w];
                    let dst = &mut out[(r * c + ch) * s * s..(r * c + ch + 1) * s * s];
                    for (i, ty) in plan.rows[r].iter().enumerate() {
                        for (j, tx) in plan.cols[r].iter().enumerate() {
                            let v00 = src[ty.lo * w + tx.lo];
                            let v01 = src[ty.lo * w + tx.hi];
                            let v10 = src[ty.hi * w + tx.lo];
                            let v11 = src[ty.hi * w + tx.hi];
                            let top = v00 + (v01 - v00) * tx.t;
                            let bot = v10 + (v11 - v10) * tx.t;
                            dst[i * s + j] = top + (bot - top) * ty.t;
                        }
                    }
                }
            }
            Tensor::new(&[windows.len(), c, s, s], out)
        }
        Primitive::Flatten => {
            arity(prim, inputs.len(), &[1])?;
            let x = inputs[0];
            let n = x.shape()[0];
            x.reshaped(&[n, x.numel() / n])
        }
        Primitive::Linear => {
            arity(prim, inputs.len(), &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
                return shape_err(op, format!("input {:?}, weight {:?}", x.shape(), w.shape()));
            }
            let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            let mut out = vec![F::zero(); n * dout];
            if let Some(b) = inputs.get(2) {
                if b.shape() != [dout] {
                    return shape_err(op, format!("bias {:?} for {dout} outputs", b.shape()));
                }
                for row in out.chunks_exact_mut(dout) {
                    row.copy_from_slice(b.data());
                }
            }
            kernels::gemm_nt(n, din, dout, x.data(), w.data(), &mut out);
            Tensor::new(&[n, dout], out)
        }
        Primitive::Reshape { shape } => {
            arity(prim, inputs.len(), &[1])?;
            inputs[0].reshaped(shape)
        }
        Primitive::Slice { axis, start, len } => {
            arity(prim, inputs.len(), &[1])?;
            let x = inputs[0];
            if *axis >= x.shape().len() || *len == 0 || start + len > x.shape()[*axis] {
                return shape_err(op, format!("[{start}..{}) on axis {axis} of {:?}", start + len, x.shape()));
            }
            let (outer, ext, inner) = split_axis(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * ext * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(&shape, out)
        }
        Primitive::Sum => {
            arity(prim, inputs.len(), &[1])?;
            Ok(Tensor::scalar(inputs[0].data().iter().copied().sum()))
        }
        Primitive::StopGradient => {
            arity(prim, inputs.len(), &[1])?;
            Ok(inputs[0].clone())
        }
        Primitive::BceWithLogits { mask } => {
            arity(prim, inputs.len(), &[2])?;
            let (x, t) = (inputs[0], inputs[1]);
            check_masked(op, x, t, mask)?;
            let count = mask.iter().filter(|&&m| m).count();
            let mut acc = F::zero();
            for ((&xv, &tv), _) in x.data().iter().zip(t.data()).zip(mask).filter(|(_, &m)| m) {
                acc += xv.max(F::zero()) - xv * tv + (F::one() + (-xv.abs()).exp()).ln();
            }
            Ok(Tensor::scalar(acc / F::lit(count as f64)))
        }
        Primitive::SoftmaxCe { labels } => {
            arity(prim, inputs.len(), &[1])?;
            let x = inputs[0];
            if x.shape().len() != 2 || x.shape()[0] != labels.len() || labels.is_empty() {
                return shape_err(op, format!("logits {:?} with {} labels", x.shape(), labels.len()));
            }
            let classes = x.shape()[1];
            let mut acc = F::zero();
            for (row, &label) in x.data().chunks_exact(classes).zip(labels) {
                if label >= classes {
                    return Err(GradError::Invalid { op, detail: format!("label {label} ≥ {classes}") });
                }
                acc += log_sum_exp(row) - row[label];
            }
            Ok(Tensor::scalar(acc / F::lit(labels.len() as f64)))
        }
        Primitive::SmoothL1 { mask } => {
            arity(prim, inputs.len(), &[2])?;
            let (x, t) = (inputs[0], inputs[1]);
            check_masked(op, x, t, mask)?;
            let count = mask.iter().filter(|&&m| m).count();
            let mut acc = F::zero();
            for ((&xv, &tv), _) in x.data().iter().zip(t.data()).zip(mask).filter(|(_, &m)| m) {
                let d = (xv - tv).abs();
                acc += if d < F::one() { F::lit(0.5) * d * d } else { d - F::lit(0.5) };
            }
            Ok(Tensor::scalar(acc / F::lit(count as f64)))
        }
    }
}

fn check_masked<F: Real>(op: &'static str, x: &Tensor<F>, t: &Tensor<F>, mask: &[bool]) -> Result<(), GradError> {
    if x.numel() != t.numel() || x.numel() != mask.len() {
        return shape_err(op, format!("prediction {:?}, target {:?}, mask {}", x.shape(), t.shape(), mask.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(GradError::Invalid { op, detail: "empty contributing set".into() });
    }
    Ok(())
}

fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln()
}

/// Gradients with respect to each input, given the output gradient.
/// Entries whose `needs` flag is false are returned as `None`.
pub(crate) fn backward<F: Real>(
    prim: &Primitive,
    inputs: &[&Tensor<F>],
    output: &Tensor<F>,
    grad: &Tensor<F>,
    needs: &[bool],
) -> Vec<Option<Tensor<F>>> {
    let g = grad.data();
    let mut res: Vec<Option<Tensor<F>>> = vec![None; inputs.len()];
    let like = |t: &Tensor<F>, data: Vec<F>| Tensor::new(t.shape(), data).expect("gradient shape");
    match prim {
        Primitive::Add => {
            for i in 0..2 {
                if needs[i] {
                    res[i] = Some(grad.clone());
                }
            }
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                res[0] = Some(like(a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect()));
            }
            if needs[1] {
                res[1] = Some(like(b, g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect()));
            }
        }
        Primitive::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                let mut da = vec![F::zero(); m * k];
                kernels::gemm_nt(m, n, k, g, b.data(), &mut da);
                res[0] = Some(like(a, da));
            }
            if needs[1] {
                let mut db = vec![F::zero(); k * n];
                kernels::gemm_tn(k, m, n, a.data(), g, &mut db);
                res[1] = Some(like(b, db));
            }
        }
        Primitive::Conv2d { stride, pad } => {
            let (x, w) = (inputs[0], inputs[1]);
            let geom = conv_geom(x.shape(), w.shape(), *stride, *pad);
            let (n, cout) = (x.shape()[0], w.shape()[0]);
            let (rows, plane) = (geom.col_rows(), geom.col_cols());
            let in_sz = geom.channels * geom.height * geom.width;
            let mut dx = needs[0].then(|| vec![F::zero(); x.numel()]);
            let mut dw = needs[1].then(|| vec![F::zero(); w.numel()]);
            let mut cols = vec![F::zero(); rows * plane];
            let mut dcols = vec![F::zero(); rows * plane];
            for s in 0..n {
                let gs = &g[s * cout * plane..(s + 1) * cout * plane];
                if let Some(dw) = dw.as_mut() {
                    let img = &x.data()[s * in_sz..(s + 1) * in_sz];
                    let src = if geom.is_pointwise() {
                        img
                    } else {
                        kernels::im2col(&geom, img, &mut cols);
                        &cols[..]
                    };
                    kernels::gemm_nt(cout, plane, rows, gs, src, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx[s * in_sz..(s + 1) * in_sz];
                    if geom.is_pointwise() {
                        kernels::gemm_tn(rows, cout, plane, w.data(), gs, dst);
                    } else {
                        dcols.fill(F::zero());
                        kernels::gemm_tn(rows, cout, plane, w.data(), gs, &mut dcols);
                        kernels::col2im(&geom, &dcols, dst);
                    }
                }
            }
            res[0] = dx.map(|d| like(x, d));
            res[1] = dw.map(|d| like(w, d));
            if inputs.len() == 3 && needs[2] {
                let mut db = vec![F::zero(); cout];
                for s in 0..n {
                    for (o, dbv) in db.iter_mut().enumerate() {
                        let base = (s * cout + o) * plane;
                        *dbv += g[base..base + plane].iter().copied().sum::<F>();
                    }
                }
                res[2] = Some(like(inputs[2], db));
            }
        }
        Primitive::Relu => {
            if needs[0] {
                let x = inputs[0];
                let d = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                res[0] = Some(like(x, d));
            }
        }
        Primitive::LeakyRelu { alpha } => {
            if needs[0] {
                let x = inputs[0];
                let a = F::lit(*alpha);
                let d = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > F::zero() { gv } else { a * gv })
                    .collect();
                res[0] = Some(like(x, d));
            }
        }
        Primitive::Sigmoid => {
            if needs[0] {
                let d = output
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (F::one() - s))
                    .collect();
                res[0] = Some(like(inputs[0], d));
            }
        }
        Primitive::Concat { axis } => {
            let (outer, total, inner) = split_axis(output.shape(), *axis);
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                if needs[i] {
                    let mut d = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    res[i] = Some(like(t, d));
                }
                offset += len;
            }
        }
        Primitive::Tile { axis, count } => {
            if needs[0] {
                let x = inputs[0];
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let chunk = len * inner;
                let mut d = vec![F::zero(); x.numel()];
                for o in 0..outer {
                    let dst = &mut d[o * chunk..(o + 1) * chunk];
                    for r in 0..*count {
                        let base = (o * count + r) * chunk;
                        for (dv, &gv) in dst.iter_mut().zip(&g[base..base + chunk]) {
                            *dv += gv;
                        }
                    }
                }
                res[0] = Some(like(x, d));
            }
        }
        Primitive::BilinearCrop { windows, out_size, scale } => {
            if needs[0] {
                let x = inputs[0];
                let xs = x.shape();
                let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plan = crop_plan::<F>(windows, *out_size, *scale, nb, h, w).expect("validated in forward");
                let s = *out_size;
                let mut d = vec![F::zero(); x.numel()];
                for (r, win) in windows.iter().enumerate() {
                    for ch in 0..c {
                        let dst = &mut d[(win.batch * c + ch) * h * w..(win.batch * c + ch + 1) * h * w];
                        let src = &g[(r * c + ch) * s * s..(r * c + ch + 1) * s * s];
                        for (i, ty) in plan.rows[r].iter().enumerate() {
                            for (j, tx) in plan.cols[r].iter().enumerate() {
                                let gv = src[i * s + j];
                                let top = gv * (F::one() - ty.t);
                                let bot = gv * ty.t;
                                dst[ty.lo * w + tx.lo] += top * (F::one() - tx.t);
                                dst[ty.lo * w + tx.hi] += top * tx.t;
                                dst[ty.hi * w + tx.lo] += bot * (F::one() - tx.t);
                                dst[ty.hi * w + tx.hi] += bot * tx.t;
                            }
                        }
                    }
                }
                res[0] = Some(like(x, d));
            }
        }
        Primitive::Flatten | Primitive::Reshape { .. } => {
            if needs[0] {
                res[0] = Some(like(inputs[0], g.to_vec()));
            }
        }
        Primitive::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            if needs[0] {
                let mut dx = vec![F::zero(); n * din];
                kernels::gemm_nn(n, dout, din, g, w.data(), &mut dx);
                res[0] = Some(like(x, dx));
            }
            if needs[1] {
                let mut dw = vec![F::zero(); dout * din];
                kernels::gemm_tn(dout, n, din, g, x.data(), &mut dw);
                res[1] = Some(like(w, dw));
            }
            if inputs.len() == 3 && needs[2] {
                let mut db = vec![F::zero(); dout];
                for row in g.chunks_exact(dout) {
                    for (dbv, &gv) in db.iter_mut().zip(row) {
                        *dbv += gv;
                    }
                }
                res[2] = Some(like(inputs[2], db));
            }
        }
        Primitive::Slice { axis, start, len } => {
            if needs[0] {
                let x = inputs[0];
                let (outer, ext, inner) = split_axis(x.shape(), *axis);
                let mut d = vec![F::zero(); x.numel()];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res[0] = Some(like(x, d));
            }
        }
        Primitive::Sum => {
            if needs[0] {
                res[0] = Some(Tensor::full(inputs[0].shape(), g[0]));
            }
        }
        Primitive::StopGradient => {}
        Primitive::BceWithLogits { mask } => {
            let (x, t) = (inputs[0], inputs[1]);
            let count = F::lit(mask.iter().filter(|&&m| m).count() as f64);
            let scale = g[0] / count;
            if needs[0] {
                let d = x
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(mask)
                    .map(|((&xv, &tv), &m)| if m { (sigmoid(xv) - tv) * scale } else { F::zero() })
                    .collect();
                res[0] = Some(like(x, d));
            }
            if needs[1] {
                let d = x
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&xv, &m)| if m { -xv * scale } else { F::zero() })
                    .collect();
                res[1] = Some(like(t, d));
            }
        }
        Primitive::SoftmaxCe { labels } => {
            if needs[0] {
                let x = inputs[0];
                let classes = x.shape()[1];
                let scale = g[0] / F::lit(labels.len() as f64);
                let mut d = Vec::with_capacity(x.numel());
                for (row, &label) in x.data().chunks_exact(classes).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (c, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let onehot = if c == label { F::one() } else { F::zero() };
                        d.push((p - onehot) * scale);
                    }
                }
                res[0] = Some(like(x, d));
            }
        }
        Primitive::SmoothL1 { mask } => {
            let (x, t) = (inputs[0], inputs[1]);
            let count = F::lit(mask.iter().filter(|&&m| m).count() as f64);
            let scale = g[0] / count;
            let deriv: Vec<F> = x
                .data()
                .iter()
                .zip(t.data())
                .zip(mask)
                .map(|((&xv, &tv), &m)| {
                    if !m {
                        return F::zero();
                    }
                    let d = xv - tv;
                    let s = if d.abs() < F::one() { d } else { d.signum() };
                    s * scale
                })
                .collect();
            if needs[1] {
                res[1] = Some(like(t, deriv.iter().map(|&v| -v).collect()));
            }
            if needs[0] {
                res[0] = Some(like(x, deriv));
            }
        }
    }
    res
}
