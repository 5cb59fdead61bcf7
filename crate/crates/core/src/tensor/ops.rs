//! Forward kernels and backward rules for every recorded operation.

use super::conv::{conv3d_backward, conv3d_forward, Conv3dGeometry};
use super::tape::{Op, Tape, Var};
use super::{strides, Real};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanh` dominated GELU-heavy profiles.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&a| T::from_f64(a)).collect()
}

/// (outer, axis length, inner) split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_values<T: Copy>(values: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = shape.len();
    let mut out = Vec::with_capacity(values.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..values.len() {
        out.push(values[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    /// 3D convolution over `[N, C_in, D, H, W]` with a cubic kernel.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = Conv3dGeometry::new(
            self.shape(input),
            self.shape(weight),
            stride,
            padding,
            groups,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::dim(
                    "C_out",
                    format!("bias shape {:?} for {} channels", self.shape(b), geom.out_channels),
                ));
            }
        }
        let out = conv3d_forward(
            &geom,
            self.value(input).values(),
            self.value(weight).values(),
            bias.map(|b| self.value(b).values()),
        );
        self.push(
            geom.output_shape(),
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Per-channel convolution with an odd kernel and size-preserving padding.
    pub fn depthwise_conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let k = self.shape(weight).get(2).copied().unwrap_or(0);
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "depthwise kernel must be odd, got {k}"
            )));
        }
        let channels = self.shape(input).get(1).copied().unwrap_or(0);
        self.conv3d(input, weight, bias, 1, (k - 1) / 2, channels)
    }

    /// Per-channel 1-D convolution along the token axis of `[N, T, C]`.
    /// `weight` is `[C, k]` with `k` odd.
    pub fn depthwise_conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || ws[1].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "depthwise_conv1d: input {xs:?}, weight {ws:?}"
            )));
        }
        if self.shape(bias) != [xs[2]] {
            return Err(Error::dim("C", "bias length"));
        }
        let (n, t, c, k) = (xs[0], xs[1], xs[2], ws[1]);
        let pad = (k - 1) / 2;
        let x = self.value(input).values();
        let w = self.value(weight).values();
        let b = self.value(bias).values();
        let mut out = Vec::with_capacity(x.len());
        for s in 0..n {
            for ti in 0..t {
                for ch in 0..c {
                    let mut acc = b[ch].as_f64();
                    for j in 0..k {
                        let src = ti as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += x[(s * t + src as usize) * c + ch].as_f64()
                                * w[ch * k + j].as_f64();
                        }
                    }
                    out.push(T::from_f64(acc));
                }
            }
        }
        self.push(
            xs,
            out,
            Op::DepthwiseConv1d {
                input,
                weight,
                bias,
            },
        )
    }

    /// Normalizes each slice along the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(input).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "last",
                format!(
                    "gamma {:?} / beta {:?} for last axis {c}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let x = self.value(input).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let rows = x.len() / c;
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v.as_f64() - mean) * r;
                xhat.push(h);
                out.push(T::from_f64(h * g[j].as_f64() + b[j].as_f64()));
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Affine map over the last axis: `input @ weight^T + bias`, `weight` is `[F_out, F_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let f_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != f_in {
            return Err(Error::dim(
                "F_in",
                format!("input {xs:?} against weight {ws:?}"),
            ));
        }
        let f_out = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [f_out] {
                return Err(Error::dim("F_out", format!("bias {:?}", self.shape(b))));
            }
        }
        let x = self.value(input).values();
        let w = self.value(weight).values();
        let mut wt = vec![0.0f64; f_in * f_out];
        for o in 0..f_out {
            for i in 0..f_in {
                wt[i * f_out + o] = w[o * f_in + i].as_f64();
            }
        }
        let bias64: Vec<f64> = match bias {
            Some(b) => self.value(b).to_f64_vec(),
            None => vec![0.0; f_out],
        };
        let rows = x.len() / f_in;
        let mut out = Vec::with_capacity(rows * f_out);
        let mut acc = vec![0.0f64; f_out];
        for row in x.chunks_exact(f_in) {
            acc.copy_from_slice(&bias64);
            for (xv, wrow) in row.iter().zip(wt.chunks_exact(f_out)) {
                let xv = xv.as_f64();
                for (a, wv) in acc.iter_mut().zip(wrow) {
                    *a += xv * wv;
                }
            }
            out.extend(acc.iter().map(|&a| T::from_f64(a)));
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = f_out;
        self.push(
            shape,
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t
            .values()
            .iter()
            .map(|v| T::from_f64(gelu_scalar(v.as_f64())))
            .collect();
        self.push(t.shape().to_vec(), out, Op::Gelu { input })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Add { a, b })
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul { a, b })
    }

    pub fn mul_scalar(&mut self, input: Var, factor: f64) -> Result<Var> {
        let t = self.value(input);
        let out = t
            .values()
            .iter()
            .map(|v| T::from_f64(v.as_f64() * factor))
            .collect();
        self.push(t.shape().to_vec(), out, Op::MulScalar { input, factor })
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Result<Var> {
        let t = self.value(input);
        let out = t
            .values()
            .iter()
            .map(|v| T::from_f64(v.as_f64() + offset))
            .collect();
        self.push(t.shape().to_vec(), out, Op::AddScalar { input })
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or(Error::Empty("concat needs at least one input"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).values()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "mean axis {axis} for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(input).values();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len)
                    .map(|j| x[(o * len + j) * inner + i].as_f64())
                    .sum();
                out.push(T::from_f64(s / len as f64));
            }
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| *d != axis)
            .map(|(_, &s)| s)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push(new_shape, out, Op::MeanAxis { input, axis })
    }

    /// `[N, C, D, H, W]` -> `[N, C]` by averaging every spatial position.
    pub fn mean_pool_spatial(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 5 {
            return Err(Error::Shape(format!(
                "mean_pool_spatial expects [N,C,D,H,W], got {s:?}"
            )));
        }
        let flat = self.reshape(input, vec![s[0], s[1], s[2] * s[3] * s[4]])?;
        self.mean_axis(flat, 2)
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(input).values();
        let mut out = vec![T::zero(); x.len()];
        let mut buf = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len)
                    .map(|j| x[at(j)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (x[at(j)].as_f64() - m).exp();
                    z += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    out[at(j)] = T::from_f64(b / z);
                }
            }
        }
        self.push(shape, out, Op::Softmax { input, axis })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} for rank {}",
                shape.len()
            )));
        }
        let out = permute_values(self.value(input).values(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(
            out_shape,
            out,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let values = self.value(input).values().to_vec();
        self.push(shape, values, Op::Reshape { input })
    }

    /// Batched matrix product of `[B, M, K]` with `[B, K, N]`, or with
    /// `[B, N, K]` transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim(
                "K",
                format!("batch_matmul inner sizes {k} vs {kb}"),
            ));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(bs * m * n);
        for bi in 0..bs {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            for r in 0..m {
                for c in 0..n {
                    let mut acc = 0.0f64;
                    for j in 0..k {
                        let bval = if trans_b { bb[c * k + j] } else { bb[j * n + c] };
                        acc += ab[r * k + j].as_f64() * bval.as_f64();
                    }
                    out.push(T::from_f64(acc));
                }
            }
        }
        self.push(vec![bs, m, n], out, Op::BatchMatmul { a, b, trans_b })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).values().iter().map(|v| v.as_f64()).sum();
        self.push(vec![1], vec![T::from_f64(s)], Op::Sum { input })
    }

    /// Records a scalar computed outside the tape from `input`, together with
    /// its gradient with respect to `input`.
    pub fn scalar_loss(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::Shape(format!(
                "scalar_loss gradient of length {} for {} inputs",
                grad.len(),
                self.value(input).numel()
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        self.push(vec![1], vec![T::from_f64(value)], Op::ScalarLoss { input, grad })
    }

    /// Gradient contributions of node `i` to its parents, given its output gradient.
    pub(crate) fn backward_node(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v).values();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) =
                    conv3d_backward(geom, val(*input), val(*weight), g, self.tracks(*input));
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*weight, dw));
                if let Some(b) = bias {
                    out.push((*b, db));
                }
            }
            Op::DepthwiseConv1d {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, t, c) = (xs[0], xs[1], xs[2]);
                let k = self.shape(*weight)[1];
                let pad = (k - 1) / 2;
                let x = val(*input);
                let w = val(*weight);
                let mut dx = vec![0.0f64; x.len()];
                let mut dw = vec![0.0f64; w.len()];
                let mut db = vec![0.0f64; c];
                for s in 0..n {
                    for ti in 0..t {
                        for ch in 0..c {
                            let go = g[(s * t + ti) * c + ch].as_f64();
                            db[ch] += go;
                            for j in 0..k {
                                let src = ti as isize + j as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    let xi = (s * t + src as usize) * c + ch;
                                    dx[xi] += go * w[ch * k + j].as_f64();
                                    dw[ch * k + j] += go * x[xi].as_f64();
                                }
                            }
                        }
                    }
                }
                out.push((*input, to_t(&dx)));
                out.push((*weight, to_t(&dw)));
                out.push((*bias, to_t(&db)));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *self.shape(*input).last().unwrap();
                let gm = val(*gamma);
                let mut dx = Vec::with_capacity(g.len());
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dxhat = vec![0.0f64; c];
                for ((grow, hrow), r) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(rstd) {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        let gj = grow[j].as_f64();
                        dgamma[j] += gj * hrow[j];
                        dbeta[j] += gj;
                        dxhat[j] = gj * gm[j].as_f64();
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hrow[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        dx.push(T::from_f64(r * (dxhat[j] - mean_d - hrow[j] * mean_dh)));
                    }
                }
                out.push((*input, dx));
                out.push((*gamma, to_t(&dgamma)));
                out.push((*beta, to_t(&dbeta)));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = self.shape(*weight);
                let (f_out, f_in) = (ws[0], ws[1]);
                let x = val(*input);
                let w = val(*weight);
                let w64: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
                let mut dw = vec![0.0f64; w.len()];
                let mut db = vec![0.0f64; f_out];
                let need_dx = self.tracks(*input);
                let mut dx = Vec::with_capacity(if need_dx { x.len() } else { 0 });
                let mut dxrow = vec![0.0f64; f_in];
                let mut xrow64 = vec![0.0f64; f_in];
                for (grow, xrow) in g.chunks_exact(f_out).zip(x.chunks_exact(f_in)) {
                    for (d, v) in xrow64.iter_mut().zip(xrow) {
                        *d = v.as_f64();
                    }
                    dxrow.iter_mut().for_each(|d| *d = 0.0);
                    for (o, gv) in grow.iter().enumerate() {
                        let gv = gv.as_f64();
                        db[o] += gv;
                        let dwrow = &mut dw[o * f_in..(o + 1) * f_in];
                        for (d, xv) in dwrow.iter_mut().zip(&xrow64) {
                            *d += gv * xv;
                        }
                        if need_dx {
                            let wrow = &w64[o * f_in..(o + 1) * f_in];
                            for (d, wv) in dxrow.iter_mut().zip(wrow) {
                                *d += gv * wv;
                            }
                        }
                    }
                    if need_dx {
                        dx.extend(dxrow.iter().map(|&d| T::from_f64(d)));
                    }
                }
                if need_dx {
                    out.push((*input, dx));
                }
                out.push((*weight, to_t(&dw)));
                if let Some(b) = bias {
                    out.push((*b, to_t(&db)));
                }
            }
            Op::Gelu { input } => {
                let dx = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| T::from_f64(gv.as_f64() * gelu_derivative(x.as_f64())))
                    .collect();
                out.push((*input, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let av = val(*a);
                let bv = val(*b);
                out.push((*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()));
                out.push((*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()));
            }
            Op::MulScalar { input, factor } => {
                out.push((
                    *input,
                    g.iter().map(|v| T::from_f64(v.as_f64() * factor)).collect(),
                ));
            }
            Op::AddScalar { input } | Op::Reshape { input } => {
                out.push((*input, g.to_vec()));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.tensor.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    out.push((*v, d));
                }
            }
            Op::MeanAxis { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] =
                                T::from_f64(g[o * inner + i].as_f64() * scale);
                        }
                    }
                }
                out.push((*input, d));
            }
            Op::Softmax { input, axis } => {
                let y = node.tensor.values();
                let (outer, len, inner) = split_axis(node.tensor.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g[at(j)].as_f64() * y[at(j)].as_f64())
                            .sum();
                        for j in 0..len {
                            d[at(j)] =
                                T::from_f64(y[at(j)].as_f64() * (g[at(j)].as_f64() - dot));
                        }
                    }
                }
                out.push((*input, d));
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                out.push((*input, permute_values(g, node.tensor.shape(), &inverse)));
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.tensor.shape()[2];
                let av = val(*a);
                let bv = val(*b);
                let mut da = vec![0.0f64; av.len()];
                let mut db = vec![0.0f64; bv.len()];
                for bi in 0..bs {
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                    let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = gb[r * n + c].as_f64();
                            for j in 0..k {
                                let bi_idx = if *trans_b { c * k + j } else { j * n + c };
                                dab[r * k + j] += gv * bb[bi_idx].as_f64();
                                dbb[bi_idx] += gv * ab[r * k + j].as_f64();
                            }
                        }
                    }
                }
                out.push((*a, to_t(&da)));
                out.push((*b, to_t(&db)));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::ScalarLoss { input, grad } => {
                let g0 = g[0].as_f64();
                out.push((*input, grad.iter().map(|&v| T::from_f64(v * g0)).collect()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tensor(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn permute_round_trip() {
        let v: Vec<i32> = (0..24).collect();
        let p = permute_values(&v, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(p[1], 4); // out[0,0,1] = in[0,1,0]
        let back = permute_values(&p, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(back, v);
    }

    #[test]
    fn conv_identity_and_bias_only() {
        let mut tape = Tape::<f32>::new();
        let xv: Vec<f32> = (0..27).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = tape.constant(tensor(&[1, 1, 3, 3, 3], &xv));
        let w = tape.constant(tensor(&[1, 1, 1, 1, 1], &[1.0]));
        let b = tape.constant(tensor(&[1], &[0.0]));
        let y = tape.conv3d(x, w, Some(b), 1, 0, 1).unwrap();
        assert_eq!(tape.value(y).values(), &xv[..]);

        let w0 = tape.constant(Tensor::zeros(vec![2, 1, 3, 3, 3]).unwrap());
        let b2 = tape.constant(tensor(&[2], &[1.5, -2.0]));
        let y = tape.conv3d(x, w0, Some(b2), 1, 1, 1).unwrap();
        let v = tape.value(y).values();
        assert!(v[..27].iter().all(|&a| a == 1.5));
        assert!(v[27..].iter().all(|&a| a == -2.0));
    }

    #[test]
    fn conv_all_ones_cube() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 2, 2, 2], 1.0).unwrap());
        let w = tape.constant(Tensor::full(vec![1, 1, 2, 2, 2], 1.0).unwrap());
        let y = tape.conv3d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1, 1]);
        assert_eq!(tape.value(y).values(), &[8.0]);
    }

    #[test]
    fn depthwise_rejects_even_kernel_and_sums_center() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![2, 1, 2, 2, 2]).unwrap());
        assert!(tape.depthwise_conv3d(x, w, None).is_err());

        let xv: Vec<f32> = (0..27).map(|i| ((i * 7) % 11) as f32 - 4.0).collect();
        let x = tape.constant(tensor(&[1, 1, 3, 3, 3], &xv));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3, 3], 1.0).unwrap());
        let y = tape.depthwise_conv3d(x, w, None).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3, 3]);
        assert_eq!(tape.value(y).values()[13], xv.iter().sum::<f32>());
    }

    #[test]
    fn depthwise_constant_interior() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 5, 5, 5], 2.0).unwrap());
        let wv: Vec<f32> = (0..27).map(|i| i as f32 / 27.0).collect();
        let s: f32 = wv.iter().sum();
        let w = tape.constant(tensor(&[1, 1, 3, 3, 3], &wv));
        let y = tape.depthwise_conv3d(x, w, None).unwrap();
        let center = (2 * 5 + 2) * 5 + 2;
        assert!((tape.value(y).values()[center] - 2.0 * s).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap());
        let g = tape.constant(Tensor::full(vec![2], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        assert_eq!(&v[2..], &[0.0, 0.0]);

        let g0 = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let beta = tape.constant(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, -1.0, 0.5, -1.0]);
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(tensor(&[1, 2], &[3.0, 4.0]));
        let b = tape.constant(tensor(&[1], &[5.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).values(), &[16.0]);

        let eye = tape.constant(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let z = tape.constant(tensor(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, eye, Some(z)).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0]);

        let w0 = tape.constant(Tensor::zeros(vec![2, 2]).unwrap());
        let b2 = tape.constant(tensor(&[2], &[0.25, 7.0]));
        let y = tape.linear(x, w0, Some(b2)).unwrap();
        assert_eq!(tape.value(y).values(), &[0.25, 7.0]);

        let bad = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![4], 3.0).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).values(), &[0.25; 4]);

        let v: Vec<f32> = (1..=8).map(|i| i as f32).collect();
        let x = tape.constant(tensor(&[1, 1, 2, 2, 2], &v));
        let m = tape.mean_pool_spatial(x).unwrap();
        assert_eq!(tape.shape(m), &[1, 1]);
        assert_eq!(tape.value(m).values(), &[4.5]);

        let a = tape.constant(tensor(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(tensor(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn backward_simple_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(tensor(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(tensor(&[2], &[1.0, -2.0]).with_requires_grad(true));
        let c = tape.constant(tensor(&[2], &[5.0, 5.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
        assert!(tape.grad(c).is_none());
        assert!(tape.backward(sq).is_err());
    }
}
