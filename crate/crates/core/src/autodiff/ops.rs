//! Differentiable tensor operations.
//!
//! Shape errors here are programmer errors (public entry points validate
//! their inputs before building a graph), so ops assert rather than
//! returning `Result`.

use super::{Var,};
use ndarray::{Array1, Array2, ArrayD, Ix2, IxDyn};
use std::rc::Rc;

fn elems(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = &*a + &*b;
        let (ia, ib) = (self.id(), other.id());
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                store.accumulate(ia, g.clone());
                store.accumulate(ib, g.clone());
            }),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = &*a - &*b;
        let (ia, ib) = (self.id(), other.id());
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                store.accumulate(ia, g.clone());
                store.accumulate(ib, -g);
            }),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        assert!(self.same_graph(other));
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = &*a * &*b;
        let (ia, ib) = (self.id(), other.id());
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                store.accumulate(ia, g * &*b);
                store.accumulate(ib, g * &*a);
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let a = self.value();
        let out = &*a * c;
        let ia = self.id();
        self.graph()
            .push_op(out, Box::new(move |g, store| store.accumulate(ia, g * c)))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let a = self.value();
        let out = &*a + c;
        let ia = self.id();
        self.graph()
            .push_op(out, Box::new(move |g, store| store.accumulate(ia, g.clone())))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn abs(&self) -> Var {
        let a = self.value();
        let out = a.mapv(f64::abs);
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let mut d = g.clone();
                d.zip_mut_with(&a, |gi, &xi| *gi *= sign(xi));
                store.accumulate(ia, d);
            }),
        )
    }

    pub fn square(&self) -> Var {
        let a = self.value();
        let out = a.mapv(|x| x * x);
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let mut d = g.clone();
                d.zip_mut_with(&a, |gi, &xi| *gi *= 2.0 * xi);
                store.accumulate(ia, d);
            }),
        )
    }

    pub fn exp(&self) -> Var {
        let a = self.value();
        let out = a.mapv(f64::exp);
        let out_rc = Rc::new(out.clone());
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let mut d = g.clone();
                d.zip_mut_with(&out_rc, |gi, &yi| *gi *= yi);
                store.accumulate(ia, d);
            }),
        )
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, alpha: f64) -> Var {
        let a = self.value();
        let out = a.mapv(|x| if x > 0.0 { x } else { alpha * x });
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let mut d = g.clone();
                d.zip_mut_with(&a, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi *= alpha;
                    }
                });
                store.accumulate(ia, d);
            }),
        )
    }

    /// x * sigmoid(x)
    pub fn silu(&self) -> Var {
        let a = self.value();
        let out = a.mapv(|x| x * sigmoid(x));
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let mut d = g.clone();
                d.zip_mut_with(&a, |gi, &xi| {
                    let s = sigmoid(xi);
                    *gi *= s * (1.0 + xi * (1.0 - s));
                });
                store.accumulate(ia, d);
            }),
        )
    }

    pub fn mean_all(&self) -> Var {
        let a = self.value();
        let n = a.len().max(1) as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), a.sum() / n);
        let ia = self.id();
        let shape = a.shape().to_vec();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let gv = g[IxDyn(&[])] / n;
                store.accumulate(ia, ArrayD::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn sum_all(&self) -> Var {
        let a = self.value();
        let out = ArrayD::from_elem(IxDyn(&[]), a.sum());
        let ia = self.id();
        let shape = a.shape().to_vec();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let gv = g[IxDyn(&[])];
                store.accumulate(ia, ArrayD::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let a = self.value();
        assert_eq!(elems(a.shape()), elems(shape), "reshape element count mismatch");
        let out = a
            .to_shape(IxDyn(shape))
            .expect("reshape of standard layout")
            .to_owned();
        let ia = self.id();
        let back_shape = a.shape().to_vec();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let d = g.to_shape(IxDyn(&back_shape)).expect("reshape back").to_owned();
                store.accumulate(ia, d);
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Var {
        let a = self.value();
        assert_eq!(a.ndim(), 2, "transpose2 requires a 2-D value");
        let out = transpose_owned(&a);
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| store.accumulate(ia, transpose_owned(g))),
        )
    }

    /// Channel slice of a (C, H, W) tensor: rows `from..to`.
    pub fn slice_channels(&self, from: usize, to: usize) -> Var {
        let a = self.value();
        assert_eq!(a.ndim(), 3);
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert!(from < to && to <= c, "bad channel slice {from}..{to} of {c}");
        let plane = h * w;
        let src = a.as_slice().unwrap();
        let out_slice = &src[from * plane..to * plane];
        let out = ArrayD::from_shape_vec(IxDyn(&[to - from, h, w]), out_slice.to_vec()).unwrap();
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let mut d = ArrayD::zeros(IxDyn(&[c, h, w]));
                d.as_slice_mut().unwrap()[from * plane..to * plane].copy_from_slice(g.as_slice().unwrap());
                store.accumulate(ia, d);
            }),
        )
    }

    /// Adds a per-channel vector (C,) to a (C, H, W) tensor.
    pub fn add_channel_vec(&self, v: &Var) -> Var {
        assert!(self.same_graph(v));
        let a = self.value();
        let b = v.value();
        assert_eq!(a.ndim(), 3);
        assert_eq!(b.shape(), [a.shape()[0]]);
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let plane = h * w;
        let mut out = (*a).clone();
        {
            let o = out.as_slice_mut().unwrap();
            let bv = b.as_slice().unwrap();
            for ci in 0..c {
                for x in &mut o[ci * plane..(ci + 1) * plane] {
                    *x += bv[ci];
                }
            }
        }
        let (ia, ib) = (self.id(), v.id());
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                store.accumulate(ia, g.clone());
                let gs = g.as_slice().unwrap();
                let mut dv = Array1::zeros(c);
                for ci in 0..c {
                    dv[ci] = gs[ci * plane..(ci + 1) * plane].iter().sum();
                }
                store.accumulate(ib, dv.into_dyn());
            }),
        )
    }

    /// (C*r*r, H, W) -> (C, H*r, W*r) channel-to-space rearrangement.
    pub fn pixel_shuffle(&self, r: usize) -> Var {
        let a = self.value();
        assert_eq!(a.ndim(), 3);
        let (cin, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert!(r >= 1 && cin % (r * r) == 0, "pixel_shuffle channels {cin} not divisible by {}", r * r);
        let c = cin / (r * r);
        let out = shuffle_forward(&a, c, h, w, r);
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| store.accumulate(ia, shuffle_backward(g, c, h, w, r))),
        )
    }

    /// Inverse of [`Var::pixel_shuffle`]: (C, H*r, W*r) -> (C*r*r, H, W).
    pub fn pixel_unshuffle(&self, r: usize) -> Var {
        let a = self.value();
        assert_eq!(a.ndim(), 3);
        let (c, hr, wr) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert!(r >= 1 && hr % r == 0 && wr % r == 0);
        let (h, w) = (hr / r, wr / r);
        let out = shuffle_backward(&a, c, h, w, r);
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| store.accumulate(ia, shuffle_forward(g, c, h, w, r))),
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of (C, H, W).
    pub fn nearest_up2(&self) -> Var {
        let a = self.value();
        assert_eq!(a.ndim(), 3);
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        {
            let src = a.as_slice().unwrap();
            let dst = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = src[(ci * h + y) * w + x];
                        let base = (ci * 2 * h + 2 * y) * 2 * w + 2 * x;
                        dst[base] = v;
                        dst[base + 1] = v;
                        dst[base + 2 * w] = v;
                        dst[base + 2 * w + 1] = v;
                    }
                }
            }
        }
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let gs = g.as_slice().unwrap();
                let mut d = ArrayD::zeros(IxDyn(&[c, h, w]));
                let ds = d.as_slice_mut().unwrap();
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = (ci * 2 * h + 2 * y) * 2 * w + 2 * x;
                            ds[(ci * h + y) * w + x] =
                                gs[base] + gs[base + 1] + gs[base + 2 * w] + gs[base + 2 * w + 1];
                        }
                    }
                }
                store.accumulate(ia, d);
            }),
        )
    }

    /// Bilinear resize of (C, H, W) to (C, out_h, out_w), half-pixel
    /// centers, edges clamped.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Var {
        let a = self.value();
        assert_eq!(a.ndim(), 3);
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let ys = linear_coeffs(h, out_h);
        let xs = linear_coeffs(w, out_w);
        let mut out = ArrayD::zeros(IxDyn(&[c, out_h, out_w]));
        {
            let src = a.as_slice().unwrap();
            let dst = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                        let p = |yy: usize, xx: usize| src[(ci * h + yy) * w + xx];
                        dst[(ci * out_h + oy) * out_w + ox] = wy0 * (wx0 * p(y0, x0) + wx1 * p(y0, x1))
                            + wy1 * (wx0 * p(y1, x0) + wx1 * p(y1, x1));
                    }
                }
            }
        }
        let ia = self.id();
        self.graph().push_op(
            out,
            Box::new(move |g, store| {
                let gs = g.as_slice().unwrap();
                let mut d = ArrayD::zeros(IxDyn(&[c, h, w]));
                let ds = d.as_slice_mut().unwrap();
                for ci in 0..c {
                    for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                            let gv = gs[(ci * out_h + oy) * out_w + ox];
                            ds[(ci * h + y0) * w + x0] += wy0 * wx0 * gv;
                            ds[(ci * h + y0) * w + x1] += wy0 * wx1 * gv;
                            ds[(ci * h + y1) * w + x0] += wy1 * wx0 * gv;
                            ds[(ci * h + y1) * w + x1] += wy1 * wx1 * gv;
                        }
                    }
                }
                store.accumulate(ia, d);
            }),
        )
    }
}

/// Reinterprets a 2-D result in logical row-major order as `shape`,
/// copying when the source strides are not already standard (ndarray's
/// `dot` can hand back exotic layouts for degenerate dims).
fn into_std_shape(a: Array2<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a.into_shape_with_order(IxDyn(shape)).unwrap()
    } else {
        let data: Vec<f64> = a.iter().cloned().collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }
}

/// Transpose copied into standard (row-major) layout.
fn transpose_owned(a: &ArrayD<f64>) -> ArrayD<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let src = a.as_slice().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, m]), out).unwrap()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-output-index source pair and weights for 1-D linear interpolation
/// with half-pixel centers.
fn linear_coeffs(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            if src <= 0.0 {
                (0, 0, 1.0, 0.0)
            } else {
                let i0 = src.floor() as usize;
                if i0 >= n_in - 1 {
                    (n_in - 1, n_in - 1, 1.0, 0.0)
                } else {
                    let frac = src - i0 as f64;
                    (i0, i0 + 1, 1.0 - frac, frac)
                }
            }
        })
        .collect()
}

fn shuffle_forward(a: &ArrayD<f64>, c: usize, h: usize, w: usize, r: usize) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[c, h * r, w * r]));
    {
        let src = a.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        let (hr, wr) = (h * r, w * r);
        for ci in 0..c {
            for y in 0..hr {
                for x in 0..wr {
                    let cin = ci * r * r + (y % r) * r + (x % r);
                    dst[(ci * hr + y) * wr + x] = src[(cin * h + y / r) * w + x / r];
                }
            }
        }
    }
    out
}

fn shuffle_backward(g: &ArrayD<f64>, c: usize, h: usize, w: usize, r: usize) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[c * r * r, h, w]));
    {
        let src = g.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        let (hr, wr) = (h * r, w * r);
        for ci in 0..c {
            for y in 0..hr {
                for x in 0..wr {
                    let cin = ci * r * r + (y % r) * r + (x % r);
                    dst[(cin * h + y / r) * w + x / r] = src[(ci * hr + y) * wr + x];
                }
            }
        }
    }
    out
}

/// Matrix product of 2-D values.
pub fn matmul(a: &Var, b: &Var) -> Var {
    assert!(a.same_graph(b));
    let (av, bv) = (a.value(), b.value());
    assert_eq!(av.ndim(), 2);
    assert_eq!(bv.ndim(), 2);
    assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dims");
    let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
    let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
    let (m, n) = (a2.nrows(), b2.ncols());
    let out = into_std_shape(a2.dot(&b2), &[m, n]);
    let (ia, ib) = (a.id(), b.id());
    a.graph().push_op(
        out,
        Box::new(move |g, store| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
            let (m, k) = a2.dim();
            let n = b2.ncols();
            store.accumulate(ia, into_std_shape(g2.dot(&b2.t()), &[m, k]));
            store.accumulate(ib, into_std_shape(a2.t().dot(&g2), &[k, n]));
        }),
    )
}

/// Row-wise softmax of a 2-D value.
pub fn softmax_rows(a: &Var) -> Var {
    let av = a.value();
    assert_eq!(av.ndim(), 2);
    let (m, n) = (av.shape()[0], av.shape()[1]);
    let mut out = (*av).clone();
    {
        let o = out.as_slice_mut().unwrap();
        for row in o.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }
    let out_rc = Rc::new(out.clone());
    let ia = a.id();
    a.graph().push_op(
        out,
        Box::new(move |g, store| {
            let s = out_rc.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                let sr = &s[r * n..(r + 1) * n];
                let gr = &gs[r * n..(r + 1) * n];
                let dot: f64 = sr.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                for j in 0..n {
                    d[r * n + j] = sr[j] * (gr[j] - dot);
                }
            }
            store.accumulate(ia, ArrayD::from_shape_vec(IxDyn(&[m, n]), d).unwrap());
        }),
    )
}

/// Concatenates (C_i, H, W) tensors along channels.
pub fn concat_channels(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let g0 = parts[0].graph().clone();
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (h, w) = (values[0].shape()[1], values[0].shape()[2]);
    let mut chans = Vec::with_capacity(parts.len());
    let mut total = 0usize;
    for v in &values {
        assert_eq!(v.ndim(), 3);
        assert_eq!(v.shape()[1], h);
        assert_eq!(v.shape()[2], w);
        chans.push(v.shape()[0]);
        total += v.shape()[0];
    }
    let plane = h * w;
    let mut out = ArrayD::zeros(IxDyn(&[total, h, w]));
    {
        let dst = out.as_slice_mut().unwrap();
        let mut offset = 0usize;
        for v in &values {
            let s = v.as_slice().unwrap();
            dst[offset..offset + s.len()].copy_from_slice(s);
            offset += s.len();
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
    g0.push_op(
        out,
        Box::new(move |g, store| {
            let gs = g.as_slice().unwrap();
            let mut offset = 0usize;
            for (idx, &ci) in chans.iter().enumerate() {
                let len = ci * plane;
                let d = ArrayD::from_shape_vec(IxDyn(&[ci, h, w]), gs[offset..offset + len].to_vec()).unwrap();
                store.accumulate(ids[idx], d);
                offset += len;
            }
        }),
    )
}

/// Fully-connected layer: `y = w @ x + b` with x (F,), w (O, F), b (O,).
pub fn linear(x: &Var, w: &Var, b: &Var) -> Var {
    assert!(x.same_graph(w) && x.same_graph(b));
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    assert_eq!(xv.ndim(), 1);
    assert_eq!(wv.ndim(), 2);
    let (o, f) = (wv.shape()[0], wv.shape()[1]);
    assert_eq!(xv.shape()[0], f);
    assert_eq!(bv.shape(), [o]);
    let mut out = Array1::zeros(o);
    {
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        for i in 0..o {
            let row = &ws[i * f..(i + 1) * f];
            out[i] = bs[i] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let (ix, iw, ib) = (x.id(), w.id(), b.id());
    x.graph().push_op(
        out.into_dyn(),
        Box::new(move |g, store| {
            let gs = g.as_slice().unwrap();
            let xs = xv.as_slice().unwrap();
            let ws = wv.as_slice().unwrap();
            store.accumulate(ib, g.clone());
            let mut dw = vec![0.0; o * f];
            let mut dx = vec![0.0; f];
            for i in 0..o {
                let gi = gs[i];
                for j in 0..f {
                    dw[i * f + j] = gi * xs[j];
                    dx[j] += gi * ws[i * f + j];
                }
            }
            store.accumulate(iw, ArrayD::from_shape_vec(IxDyn(&[o, f]), dw).unwrap());
            store.accumulate(ix, ArrayD::from_shape_vec(IxDyn(&[f]), dx).unwrap());
        }),
    )
}

/// 2-D convolution of (Ci, H, W) with weights (Co, Ci, Kh, Kw), zero
/// padding `pad`, stride `stride`, plus a (Co,) bias.
pub fn conv2d(x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Var {
    assert!(x.same_graph(w) && x.same_graph(b));
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    assert_eq!(xv.ndim(), 3, "conv2d input must be (C, H, W)");
    assert_eq!(wv.ndim(), 4, "conv2d weight must be (Co, Ci, Kh, Kw)");
    let (ci, h, ww) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (co, wci, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(ci, wci, "conv2d channel mismatch");
    assert_eq!(bv.shape(), [co]);
    assert!(h + 2 * pad >= kh && ww + 2 * pad >= kw, "conv2d kernel larger than padded input");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (ww + 2 * pad - kw) / stride + 1;

    let cols = im2col(&xv, kh, kw, stride, pad, oh, ow);
    let w2 = wv
        .to_shape(IxDyn(&[co, ci * kh * kw]))
        .unwrap()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let mut y2 = w2.dot(&cols);
    {
        let bs = bv.as_slice().unwrap();
        for (i, mut row) in y2.rows_mut().into_iter().enumerate() {
            row += bs[i];
        }
    }
    let out = into_std_shape(y2, &[co, oh, ow]);

    let (ix, iw, ib) = (x.id(), w.id(), b.id());
    x.graph().push_op(
        out,
        Box::new(move |g, store| {
            let g2 = g
                .to_shape(IxDyn(&[co, oh * ow]))
                .unwrap()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            // bias
            let db = g2.sum_axis(ndarray::Axis(1));
            store.accumulate(ib, db.into_dyn());
            // weights: dW = g2 . cols^T (cols recomputed; cheaper than caching
            // one per conv across a deep SR branch)
            let cols = im2col(&xv, kh, kw, stride, pad, oh, ow);
            let dw2 = g2.dot(&cols.t());
            store.accumulate(iw, into_std_shape(dw2, &[co, ci, kh, kw]));
            // input: dcols = W^T . g2, scattered back
            let w2 = wv
                .to_shape(IxDyn(&[co, ci * kh * kw]))
                .unwrap()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let dcols = into_std_shape(w2.t().dot(&g2), &[ci * kh * kw, oh * ow])
                .into_dimensionality::<Ix2>()
                .unwrap();
            store.accumulate(ix, col2im(&dcols, ci, h, ww, kh, kw, stride, pad, oh, ow));
        }),
    )
}

fn im2col(x: &ArrayD<f64>, kh: usize, kw: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = x.as_slice().unwrap();
    let mut cols = Array2::zeros((ci * kh * kw, oh * ow));
    let dst = cols.as_slice_mut().unwrap();
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ixp = (ox * stride + kj) as isize - pad as isize;
                        if ixp < 0 || ixp >= w as isize {
                            continue;
                        }
                        dst[dst_row + ox] = src[src_row + ixp as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<f64> {
    let mut dx = ArrayD::zeros(IxDyn(&[ci, h, w]));
    let dst = dx.as_slice_mut().unwrap();
    let src = dcols.as_slice().unwrap();
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ixp = (ox * stride + kj) as isize - pad as isize;
                        if ixp < 0 || ixp >= w as isize {
                            continue;
                        }
                        dst[dst_row + ixp as usize] += src[src_row + ox];
                    }
                }
            }
        }
    }
    dx
}

/// Group normalization of (C, H, W) with per-channel affine parameters.
pub fn group_norm(x: &Var, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Var {
    assert!(x.same_graph(gamma) && x.same_graph(beta));
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    assert_eq!(xv.ndim(), 3);
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    assert!(groups >= 1 && c % groups == 0, "groups {groups} must divide channels {c}");
    assert_eq!(gv.shape(), [c]);
    assert_eq!(bv.shape(), [c]);
    let cg = c / groups;
    let gsize = (cg * h * w) as f64;
    let plane = h * w;

    let src = xv.as_slice().unwrap();
    let mut xhat = vec![0.0; c * plane];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let span = g * cg * plane..(g + 1) * cg * plane;
        let mean = src[span.clone()].iter().sum::<f64>() / gsize;
        let var = src[span.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsize;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[g] = istd;
        for (o, &v) in xhat[span.clone()].iter_mut().zip(&src[span]) {
            *o = (v - mean) * istd;
        }
    }
    let mut out = vec![0.0; c * plane];
    {
        let gs = gv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        for ci in 0..c {
            for i in 0..plane {
                out[ci * plane + i] = xhat[ci * plane + i] * gs[ci] + bs[ci];
            }
        }
    }
    let xhat = Rc::new(xhat);
    let inv_std = Rc::new(inv_std);
    let (ix, ig, ib) = (x.id(), gamma.id(), beta.id());
    x.graph().push_op(
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap(),
        Box::new(move |g, store| {
            let gout = g.as_slice().unwrap();
            let gs = gv.as_slice().unwrap();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dxhat = vec![0.0; c * plane];
            for ci in 0..c {
                for i in 0..plane {
                    let idx = ci * plane + i;
                    dgamma[ci] += gout[idx] * xhat[idx];
                    dbeta[ci] += gout[idx];
                    dxhat[idx] = gout[idx] * gs[ci];
                }
            }
            let mut dx = vec![0.0; c * plane];
            for grp in 0..groups {
                let span = grp * cg * plane..(grp + 1) * cg * plane;
                let m1 = dxhat[span.clone()].iter().sum::<f64>() / gsize;
                let m2 = dxhat[span.clone()]
                    .iter()
                    .zip(&xhat[span.clone()])
                    .map(|(d, xh)| d * xh)
                    .sum::<f64>()
                    / gsize;
                let istd = inv_std[grp];
                for idx in span {
                    dx[idx] = istd * (dxhat[idx] - m1 - xhat[idx] * m2);
                }
            }
            store.accumulate(ix, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap());
            store.accumulate(ig, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
            store.accumulate(ib, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
        }),
    )
}
