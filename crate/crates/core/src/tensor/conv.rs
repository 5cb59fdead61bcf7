//! 3D convolution kernels.
//!
//! `conv3d_reference*` are plain direct loops over the NCDHW layout and
//! support any group count. The tape dispatches dense (`groups == 1`) and
//! depthwise (`groups == C_in == C_out`) convolutions to channels-last paths
//! whose innermost loops run over contiguous channel vectors; those must agree
//! with the reference to 1e-5.

use super::Real;
use crate::error::{Error, Result};

/// Validated sizes of one 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

const AXES: [&str; 3] = ["D", "H", "W"];

impl Conv3dGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if input_shape.len() != 5 {
            return Err(Error::dim(
                "input rank",
                format!("conv3d expects [N,C,D,H,W], got {input_shape:?}"),
            ));
        }
        if weight_shape.len() != 5 {
            return Err(Error::dim(
                "weight rank",
                format!("conv3d expects [C_out,C_in/groups,k,k,k], got {weight_shape:?}"),
            ));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArgument(
                "conv3d stride and groups must be positive".into(),
            ));
        }
        let (batch, in_channels) = (input_shape[0], input_shape[1]);
        let out_channels = weight_shape[0];
        let kernel = weight_shape[2];
        if weight_shape[3] != kernel || weight_shape[4] != kernel {
            return Err(Error::dim(
                "kernel",
                format!("only cubic kernels are supported, got {:?}", &weight_shape[2..]),
            ));
        }
        if in_channels % groups != 0 {
            return Err(Error::dim(
                "C_in",
                format!("{in_channels} input channels not divisible by {groups} groups"),
            ));
        }
        if !out_channels.is_multiple_of(groups) {
            return Err(Error::dim(
                "C_out",
                format!("{out_channels} output channels not divisible by {groups} groups"),
            ));
        }
        if weight_shape[1] != in_channels / groups {
            return Err(Error::dim(
                "C_in",
                format!(
                    "weight expects {} channels per group, input provides {}",
                    weight_shape[1],
                    in_channels / groups
                ),
            ));
        }
        let mut in_dims = [0; 3];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let d = input_shape[2 + a];
            if d + 2 * padding < kernel {
                return Err(Error::dim(
                    AXES[a],
                    format!("size {d} with padding {padding} is smaller than kernel {kernel}"),
                ));
            }
            in_dims[a] = d;
            out_dims[a] = (d + 2 * padding - kernel) / stride + 1;
        }
        Ok(Conv3dGeometry {
            batch,
            in_channels,
            out_channels,
            groups,
            kernel,
            stride,
            padding,
            in_dims,
            out_dims,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
        ]
    }

    fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    /// Input coordinate for output coordinate `o` and kernel offset `k`, if in bounds.
    #[inline(always)]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < self.in_dims[axis]).then_some(i as usize)
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }
}

/// Direct-loop convolution over NCDHW. `bias`, when given, has `C_out` entries.
pub fn conv3d_reference<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let k = g.kernel;
    let [od, oh, ow] = g.out_dims;
    let [id, ih, iw] = g.in_dims;
    let mut out = Vec::with_capacity(g.batch * g.out_channels * g.out_spatial());
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let group = co / cout_g;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[co].as_f64());
                        for cl in 0..cin_g {
                            let ci = group * cin_g + cl;
                            for kd in 0..k {
                                let Some(sz) = g.source(0, z, kd) else { continue };
                                for kh in 0..k {
                                    let Some(sy) = g.source(1, y, kh) else { continue };
                                    for kw in 0..k {
                                        let Some(sx) = g.source(2, xo, kw) else { continue };
                                        let xi = (((n * g.in_channels + ci) * id + sz) * ih + sy)
                                            * iw
                                            + sx;
                                        let wi = (((co * cin_g + cl) * k + kd) * k + kh) * k + kw;
                                        acc += x[xi].as_f64() * w[wi].as_f64();
                                    }
                                }
                            }
                        }
                        out.push(T::from_f64(acc));
                    }
                }
            }
        }
    }
    out
}

/// Direct-loop gradients `(d_input, d_weight, d_bias)` for [`conv3d_reference`].
pub fn conv3d_reference_backward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let k = g.kernel;
    let [od, oh, ow] = g.out_dims;
    let [id, ih, iw] = g.in_dims;
    let mut dx = vec![0.0f64; x.len()];
    let mut dw = vec![0.0f64; w.len()];
    let mut db = vec![0.0f64; g.out_channels];
    let mut gi = 0;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let group = co / cout_g;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let go = grad_out[gi].as_f64();
                        gi += 1;
                        db[co] += go;
                        for cl in 0..cin_g {
                            let ci = group * cin_g + cl;
                            for kd in 0..k {
                                let Some(sz) = g.source(0, z, kd) else { continue };
                                for kh in 0..k {
                                    let Some(sy) = g.source(1, y, kh) else { continue };
                                    for kw in 0..k {
                                        let Some(sx) = g.source(2, xo, kw) else { continue };
                                        let xi = (((n * g.in_channels + ci) * id + sz) * ih + sy)
                                            * iw
                                            + sx;
                                        let wi = (((co * cin_g + cl) * k + kd) * k + kh) * k + kw;
                                        dx[xi] += go * w[wi].as_f64();
                                        dw[wi] += go * x[xi].as_f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (cast(&dx), cast(&dw), cast(&db))
}

/// Forward convolution through the fastest path available for `g`.
pub(crate) fn conv3d_forward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    if g.groups == 1 {
        dense_forward(g, x, w, bias)
    } else if g.is_depthwise() {
        depthwise_forward(g, x, w, bias)
    } else {
        conv3d_reference(g, x, w, bias)
    }
}

/// Gradients through the path matching [`conv3d_forward`]. `d_input` is only
/// computed when `need_input_grad` is set.
pub(crate) fn conv3d_backward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    if g.groups == 1 {
        dense_backward(g, x, w, grad_out, need_input_grad)
    } else if g.is_depthwise() {
        depthwise_backward(g, x, w, grad_out, need_input_grad)
    } else {
        let (dx, dw, db) = conv3d_reference_backward(g, x, w, grad_out);
        (need_input_grad.then_some(dx), dw, db)
    }
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&a| T::from_f64(a)).collect()
}

/// [N, C, S] -> [N, S, C] in f64.
fn to_channels_last<T: Real>(x: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        let src = &x[n * channels * spatial..(n + 1) * channels * spatial];
        let dst = &mut out[n * channels * spatial..(n + 1) * channels * spatial];
        for c in 0..channels {
            let plane = &src[c * spatial..(c + 1) * spatial];
            for (s, v) in plane.iter().enumerate() {
                dst[s * channels + c] = v.as_f64();
            }
        }
    }
    out
}

/// [N, S, C] in f64 -> [N, C, S].
fn to_channels_first<T: Real>(x: &[f64], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        let src = &x[n * channels * spatial..(n + 1) * channels * spatial];
        let dst = &mut out[n * channels * spatial..(n + 1) * channels * spatial];
        for s in 0..spatial {
            let row = &src[s * channels..(s + 1) * channels];
            for (c, v) in row.iter().enumerate() {
                dst[c * spatial + s] = T::from_f64(*v);
            }
        }
    }
    out
}

/// Visits every (output voxel, kernel tap, input voxel) triple that lies in bounds.
/// Voxel indices are flat per-sample spatial offsets.
#[inline(always)]
fn for_each_tap(g: &Conv3dGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let k = g.kernel;
    let [od, oh, ow] = g.out_dims;
    let [_, ih, iw] = g.in_dims;
    let mut out_idx = 0;
    for z in 0..od {
        for y in 0..oh {
            for xo in 0..ow {
                for kd in 0..k {
                    let Some(sz) = g.source(0, z, kd) else { continue };
                    for kh in 0..k {
                        let Some(sy) = g.source(1, y, kh) else { continue };
                        let row = (sz * ih + sy) * iw;
                        let tap_row = (kd * k + kh) * k;
                        for kw in 0..k {
                            let Some(sx) = g.source(2, xo, kw) else { continue };
                            f(out_idx, tap_row + kw, row + sx);
                        }
                    }
                }
                out_idx += 1;
            }
        }
    }
}

fn dense_forward<T: Real>(g: &Conv3dGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cin, cout, taps) = (g.in_channels, g.out_channels, g.taps());
    let (si, so) = (g.in_spatial(), g.out_spatial());
    let xt = to_channels_last(x, g.batch, cin, si);
    // [tap][ci][co]
    let mut wt = vec![0.0f64; taps * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                wt[(t * cin + ci) * cout + co] = w[(co * cin + ci) * taps + t].as_f64();
            }
        }
    }
    let bias64: Vec<f64> = match bias {
        Some(b) => b.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; cout],
    };
    let mut out = vec![0.0f64; g.batch * so * cout];
    for n in 0..g.batch {
        let xs = &xt[n * si * cin..(n + 1) * si * cin];
        let os = &mut out[n * so * cout..(n + 1) * so * cout];
        for row in os.chunks_exact_mut(cout) {
            row.copy_from_slice(&bias64);
        }
        for_each_tap(g, |o, t, i| {
            let acc = &mut os[o * cout..(o + 1) * cout];
            let xrow = &xs[i * cin..(i + 1) * cin];
            let wtap = &wt[t * cin * cout..(t + 1) * cin * cout];
            for (xv, wrow) in xrow.iter().zip(wtap.chunks_exact(cout)) {
                for (a, wv) in acc.iter_mut().zip(wrow) {
                    *a += xv * wv;
                }
            }
        });
    }
    to_channels_first(&out, g.batch, cout, so)
}

fn dense_backward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (cin, cout, taps) = (g.in_channels, g.out_channels, g.taps());
    let (si, so) = (g.in_spatial(), g.out_spatial());
    let xt = to_channels_last(x, g.batch, cin, si);
    let gt = to_channels_last(grad_out, g.batch, cout, so);
    // [tap][co][ci]
    let mut w2 = vec![0.0f64; taps * cout * cin];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                w2[(t * cout + co) * cin + ci] = w[(co * cin + ci) * taps + t].as_f64();
            }
        }
    }
    let mut dx = if need_input_grad {
        vec![0.0f64; xt.len()]
    } else {
        Vec::new()
    };
    // [tap][ci][co]
    let mut dwt = vec![0.0f64; taps * cin * cout];
    let mut db = vec![0.0f64; cout];
    for n in 0..g.batch {
        let xs = &xt[n * si * cin..(n + 1) * si * cin];
        let gs = &gt[n * so * cout..(n + 1) * so * cout];
        for grow in gs.chunks_exact(cout) {
            for (b, v) in db.iter_mut().zip(grow) {
                *b += v;
            }
        }
        let dxs: &mut [f64] = if need_input_grad {
            &mut dx[n * si * cin..(n + 1) * si * cin]
        } else {
            &mut []
        };
        for_each_tap(g, |o, t, i| {
            let grow = &gs[o * cout..(o + 1) * cout];
            let xrow = &xs[i * cin..(i + 1) * cin];
            let dwtap = &mut dwt[t * cin * cout..(t + 1) * cin * cout];
            for (xv, dwrow) in xrow.iter().zip(dwtap.chunks_exact_mut(cout)) {
                for (d, gv) in dwrow.iter_mut().zip(grow) {
                    *d += xv * gv;
                }
            }
            if need_input_grad {
                let dxrow = &mut dxs[i * cin..(i + 1) * cin];
                let wtap = &w2[t * cout * cin..(t + 1) * cout * cin];
                for (gv, wrow) in grow.iter().zip(wtap.chunks_exact(cin)) {
                    for (d, wv) in dxrow.iter_mut().zip(wrow) {
                        *d += gv * wv;
                    }
                }
            }
        });
    }
    let mut dw = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                dw[(co * cin + ci) * taps + t] = T::from_f64(dwt[(t * cin + ci) * cout + co]);
            }
        }
    }
    let dx = need_input_grad.then(|| to_channels_first(&dx, g.batch, cin, si));
    (dx, dw, cast(&db))
}

fn depthwise_forward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (c, taps) = (g.in_channels, g.taps());
    let (si, so) = (g.in_spatial(), g.out_spatial());
    let xt = to_channels_last(x, g.batch, c, si);
    // [tap][c]
    let mut wt = vec![0.0f64; taps * c];
    for ch in 0..c {
        for t in 0..taps {
            wt[t * c + ch] = w[ch * taps + t].as_f64();
        }
    }
    let bias64: Vec<f64> = match bias {
        Some(b) => b.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; c],
    };
    let mut out = vec![0.0f64; g.batch * so * c];
    for n in 0..g.batch {
        let xs = &xt[n * si * c..(n + 1) * si * c];
        let os = &mut out[n * so * c..(n + 1) * so * c];
        for row in os.chunks_exact_mut(c) {
            row.copy_from_slice(&bias64);
        }
        for_each_tap(g, |o, t, i| {
            let acc = &mut os[o * c..(o + 1) * c];
            let xrow = &xs[i * c..(i + 1) * c];
            let wrow = &wt[t * c..(t + 1) * c];
            for ((a, xv), wv) in acc.iter_mut().zip(xrow).zip(wrow) {
                *a += xv * wv;
            }
        });
    }
    to_channels_first(&out, g.batch, c, so)
}

fn depthwise_backward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (c, taps) = (g.in_channels, g.taps());
    let (si, so) = (g.in_spatial(), g.out_spatial());
    let xt = to_channels_last(x, g.batch, c, si);
    let gt = to_channels_last(grad_out, g.batch, c, so);
    let mut wt = vec![0.0f64; taps * c];
    for ch in 0..c {
        for t in 0..taps {
            wt[t * c + ch] = w[ch * taps + t].as_f64();
        }
    }
    let mut dx = if need_input_grad {
        vec![0.0f64; xt.len()]
    } else {
        Vec::new()
    };
    let mut dwt = vec![0.0f64; taps * c];
    let mut db = vec![0.0f64; c];
    for n in 0..g.batch {
        let xs = &xt[n * si * c..(n + 1) * si * c];
        let gs = &gt[n * so * c..(n + 1) * so * c];
        for grow in gs.chunks_exact(c) {
            for (b, v) in db.iter_mut().zip(grow) {
                *b += v;
            }
        }
        let dxs: &mut [f64] = if need_input_grad {
            &mut dx[n * si * c..(n + 1) * si * c]
        } else {
            &mut []
        };
        for_each_tap(g, |o, t, i| {
            let grow = &gs[o * c..(o + 1) * c];
            let xrow = &xs[i * c..(i + 1) * c];
            let dwrow = &mut dwt[t * c..(t + 1) * c];
            for ((d, xv), gv) in dwrow.iter_mut().zip(xrow).zip(grow) {
                *d += xv * gv;
            }
            if need_input_grad {
                let dxrow = &mut dxs[i * c..(i + 1) * c];
                let wrow = &wt[t * c..(t + 1) * c];
                for ((d, wv), gv) in dxrow.iter_mut().zip(wrow).zip(grow) {
                    *d += wv * gv;
                }
            }
        });
    }
    let mut dw = vec![T::zero(); w.len()];
    for ch in 0..c {
        for t in 0..taps {
            dw[ch * taps + t] = T::from_f64(dwt[t * c + ch]);
        }
    }
    let dx = need_input_grad.then(|| to_channels_first(&dx, g.batch, c, si));
    (dx, dw, cast(&db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn output_size_formula() {
        let g = Conv3dGeometry::new(&[1, 1, 16, 16, 16], &[4, 1, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!(g.out_dims, [8, 8, 8]);
        let g = Conv3dGeometry::new(&[1, 1, 91, 109, 91], &[4, 1, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!(g.out_dims, [46, 55, 46]);
    }

    #[test]
    fn names_the_offending_axis() {
        let err = Conv3dGeometry::new(&[1, 1, 4, 2, 4], &[1, 1, 3, 3, 3], 1, 0, 1).unwrap_err();
        match err {
            Error::Dimension { axis, .. } => assert_eq!(axis, "H"),
            other => panic!("unexpected {other:?}"),
        }
        let err = Conv3dGeometry::new(&[1, 3, 4, 4, 4], &[2, 1, 1, 1, 1], 1, 0, 2).unwrap_err();
        assert!(matches!(err, Error::Dimension { ref axis, .. } if axis == "C_in"));
    }

    #[test]
    fn fast_paths_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = [
            // (input shape, weight shape, stride, padding, groups)
            ([2, 3, 5, 4, 6], [4, 3, 3, 3, 3], 2, 1, 1),
            ([1, 2, 4, 4, 4], [5, 2, 1, 1, 1], 1, 0, 1),
            ([2, 4, 5, 5, 3], [4, 1, 3, 3, 3], 1, 1, 4),
            ([1, 3, 6, 6, 6], [3, 1, 5, 5, 5], 1, 2, 3),
            ([1, 2, 7, 5, 6], [2, 2, 3, 3, 3], 2, 0, 1),
        ];
        for (xs, ws, s, p, gr) in cases {
            let g = Conv3dGeometry::new(&xs, &ws, s, p, gr).unwrap();
            let x = random(&mut rng, xs.iter().product());
            let w = random(&mut rng, ws.iter().product());
            let b = random(&mut rng, ws[0]);
            let reference = conv3d_reference(&g, &x, &w, Some(&b));
            let fast = conv3d_forward(&g, &x, &w, Some(&b));
            assert!(max_abs_diff(&reference, &fast) < 1e-5);

            let go = random(&mut rng, reference.len());
            let (rdx, rdw, rdb) = conv3d_reference_backward(&g, &x, &w, &go);
            let (fdx, fdw, fdb) = conv3d_backward(&g, &x, &w, &go, true);
            assert!(max_abs_diff(&rdx, &fdx.unwrap()) < 1e-5);
            assert!(max_abs_diff(&rdw, &fdw) < 1e-5);
            assert!(max_abs_diff(&rdb, &fdb) < 1e-5);
        }
    }
}
