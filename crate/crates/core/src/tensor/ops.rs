use super::graph::{BackwardFn, Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn boxed(f: impl Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static) -> BackwardFn {
    Box::new(f)
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of one 3D convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    dims: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
    out_dims: [usize; 3],
}

impl ConvGeom {
    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn in_len(&self) -> usize {
        self.channels * self.dims.iter().product::<usize>()
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    /// Column matrix `[C*k^3, out_len]` of one sample.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let [d, h, w] = self.dims;
        let [od, oh, ow] = self.out_dims;
        let k = self.kernel;
        let s = self.out_len();
        col.fill(0.0);
        for c in 0..self.channels {
            let xc = &x[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let dst = &mut col[row * s..(row + 1) * s];
                        for z in 0..od {
                            let iz = (z * self.stride + kz) as isize - self.pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src = (iz as usize * h + iy as usize) * w;
                                let base = (z * oh + y) * ow;
                                for xo in 0..ow {
                                    let ix = (xo * self.stride + kx) as isize - self.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst[base + xo] = xc[src + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto the input layout.
    fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let [d, h, w] = self.dims;
        let [od, oh, ow] = self.out_dims;
        let k = self.kernel;
        let s = self.out_len();
        for c in 0..self.channels {
            let gc = &mut gx[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let src = &col[row * s..(row + 1) * s];
                        for z in 0..od {
                            let iz = (z * self.stride + kz) as isize - self.pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let dst = (iz as usize * h + iy as usize) * w;
                                let base = (z * oh + y) * ow;
                                for xo in 0..ow {
                                    let ix = (xo * self.stride + kx) as isize - self.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        gc[dst + ix as usize] += src[base + xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// `x [B, in] * w [in, out] + b [out]`.
    pub fn dense(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(&[x, w, b], |t| {
            let (x, w, b) = (t[0], t[1], t[2]);
            if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[0] || b.shape != [w.shape[1]] {
                return Err(Error::shape(format!(
                    "dense: x {:?}, w {:?}, b {:?}",
                    x.shape, w.shape, b.shape
                )));
            }
            let (batch, n_in, n_out) = (x.shape[0], w.shape[0], w.shape[1]);
            let mut out = vec![0.0; batch * n_out];
            for r in 0..batch {
                let o = &mut out[r * n_out..(r + 1) * n_out];
                o.copy_from_slice(&b.data);
                for i in 0..n_in {
                    let xv = x.data[r * n_in + i];
                    if xv != 0.0 {
                        axpy(xv, &w.data[i * n_out..(i + 1) * n_out], o);
                    }
                }
            }
            let bw = boxed(move |g, t, _, needs| {
                let (x, w) = (t[0], t[1]);
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; batch * n_in];
                    for r in 0..batch {
                        let go = &g.data[r * n_out..(r + 1) * n_out];
                        for i in 0..n_in {
                            gx[r * n_in + i] = dot(go, &w.data[i * n_out..(i + 1) * n_out]);
                        }
                    }
                    Tensor { shape: x.shape.clone(), data: gx }
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; n_in * n_out];
                    for r in 0..batch {
                        let go = &g.data[r * n_out..(r + 1) * n_out];
                        for i in 0..n_in {
                            let xv = x.data[r * n_in + i];
                            if xv != 0.0 {
                                axpy(xv, go, &mut gw[i * n_out..(i + 1) * n_out]);
                            }
                        }
                    }
                    Tensor { shape: w.shape.clone(), data: gw }
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; n_out];
                    for r in 0..batch {
                        axpy(1.0, &g.data[r * n_out..(r + 1) * n_out], &mut gb);
                    }
                    Tensor { shape: vec![n_out], data: gb }
                });
                vec![gx, gw, gb]
            });
            Ok((Tensor { shape: vec![batch, n_out], data: out }, bw))
        })
    }

    /// `x [B, C, D, H, W]`, `kernels [O, C, k, k, k]`, `bias [O]`.
    pub fn conv3d(&self, x: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.record(&[x, kernels, bias], |t| {
            let (x, wk, b) = (t[0], t[1], t[2]);
            let ok = x.shape.len() == 5
                && wk.shape.len() == 5
                && wk.shape[1] == x.shape[1]
                && wk.shape[2] == wk.shape[3]
                && wk.shape[3] == wk.shape[4]
                && b.shape == [wk.shape[0]]
                && stride > 0;
            if !ok {
                return Err(Error::shape(format!(
                    "conv3d: x {:?}, kernels {:?}, bias {:?}",
                    x.shape, wk.shape, b.shape
                )));
            }
            let k = wk.shape[2];
            let dims = [x.shape[2], x.shape[3], x.shape[4]];
            if dims.iter().any(|&d| d + 2 * padding < k) {
                return Err(Error::shape(format!("conv3d: kernel {k} larger than padded input {dims:?}")));
            }
            let out_dims = dims.map(|d| (d + 2 * padding - k) / stride + 1);
            let geom = ConvGeom {
                channels: x.shape[1],
                dims,
                kernel: k,
                stride,
                pad: padding,
                out_dims,
            };
            let (batch, n_out) = (x.shape[0], wk.shape[0]);
            let (s, rows, in_len) = (geom.out_len(), geom.rows(), geom.in_len());
            let mut out = vec![0.0; batch * n_out * s];
            let mut col = vec![0.0; rows * s];
            for n in 0..batch {
                geom.im2col(&x.data[n * in_len..(n + 1) * in_len], &mut col);
                for o in 0..n_out {
                    let dst = &mut out[(n * n_out + o) * s..(n * n_out + o + 1) * s];
                    dst.fill(b.data[o]);
                    let wrow = &wk.data[o * rows..(o + 1) * rows];
                    for (r, &wv) in wrow.iter().enumerate() {
                        if wv != 0.0 {
                            axpy(wv, &col[r * s..(r + 1) * s], dst);
                        }
                    }
                }
            }
            let bw = boxed(move |g, t, _, needs| {
                let (x, wk) = (t[0], t[1]);
                let mut gx = needs[0].then(|| vec![0.0; x.data.len()]);
                let mut gw = needs[1].then(|| vec![0.0; wk.data.len()]);
                let mut gb = needs[2].then(|| vec![0.0; n_out]);
                let mut col = vec![0.0; rows * s];
                let mut gcol = vec![0.0; rows * s];
                for n in 0..batch {
                    let gout = &g.data[n * n_out * s..(n + 1) * n_out * s];
                    if let Some(gb) = gb.as_mut() {
                        for o in 0..n_out {
                            gb[o] += gout[o * s..(o + 1) * s].iter().sum::<f64>();
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&x.data[n * in_len..(n + 1) * in_len], &mut col);
                        for o in 0..n_out {
                            let go = &gout[o * s..(o + 1) * s];
                            let gwr = &mut gw[o * rows..(o + 1) * rows];
                            for (r, acc) in gwr.iter_mut().enumerate() {
                                *acc += dot(go, &col[r * s..(r + 1) * s]);
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        gcol.fill(0.0);
                        for o in 0..n_out {
                            let go = &gout[o * s..(o + 1) * s];
                            let wrow = &wk.data[o * rows..(o + 1) * rows];
                            for (r, &wv) in wrow.iter().enumerate() {
                                if wv != 0.0 {
                                    axpy(wv, go, &mut gcol[r * s..(r + 1) * s]);
                                }
                            }
                        }
                        geom.col2im(&gcol, &mut gx[n * in_len..(n + 1) * in_len]);
                    }
                }
                vec![
                    gx.map(|d| Tensor { shape: x.shape.clone(), data: d }),
                    gw.map(|d| Tensor { shape: wk.shape.clone(), data: d }),
                    gb.map(|d| Tensor { shape: vec![n_out], data: d }),
                ]
            });
            let mut shape = vec![batch, n_out];
            shape.extend_from_slice(&out_dims);
            Ok((Tensor { shape, data: out }, bw))
        })
    }

    /// Non-overlapping max pooling with window `factor` over the three
    /// spatial axes of `[B, C, D, H, W]`.
    pub fn maxpool3d(&self, x: Var, factor: usize) -> Result<Var> {
        self.record(&[x], |t| {
            let x = t[0];
            if x.shape.len() != 5 || factor == 0 || x.shape[2..].iter().any(|d| d % factor != 0) {
                return Err(Error::shape(format!("maxpool3d({factor}) on {:?}", x.shape)));
            }
            let (bc, d, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
            let (od, oh, ow) = (d / factor, h / factor, w / factor);
            let mut out = Vec::with_capacity(bc * od * oh * ow);
            let mut arg = Vec::with_capacity(bc * od * oh * ow);
            for c in 0..bc {
                let base = c * d * h * w;
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0;
                            for dz in 0..factor {
                                for dy in 0..factor {
                                    for dx in 0..factor {
                                        let i = base + ((z * factor + dz) * h + y * factor + dy) * w + xo * factor + dx;
                                        if x.data[i] > best {
                                            best = x.data[i];
                                            at = i;
                                        }
                                    }
                                }
                            }
                            out.push(best);
                            arg.push(at);
                        }
                    }
                }
            }
            let in_shape = x.shape.clone();
            let bw = boxed(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                for (gv, &i) in g.data.iter().zip(&arg) {
                    gx.data[i] += gv;
                }
                vec![Some(gx)]
            });
            let shape = vec![x.shape[0], x.shape[1], od, oh, ow];
            Ok((Tensor { shape, data: out }, bw))
        })
    }

    /// Nearest-neighbor upsampling of `[B, C, D, H, W]`.
    pub fn upsample3d(&self, x: Var, factor: usize) -> Result<Var> {
        self.record(&[x], |t| {
            let x = t[0];
            if x.shape.len() != 5 || factor == 0 {
                return Err(Error::shape(format!("upsample3d({factor}) on {:?}", x.shape)));
            }
            let (bc, d, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
            let (od, oh, ow) = (d * factor, h * factor, w * factor);
            let src = move |c: usize, z: usize, y: usize, xo: usize| {
                c * d * h * w + ((z / factor) * h + y / factor) * w + xo / factor
            };
            let mut out = Vec::with_capacity(bc * od * oh * ow);
            for c in 0..bc {
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            out.push(x.data[src(c, z, y, xo)]);
                        }
                    }
                }
            }
            let in_shape = x.shape.clone();
            let bw = boxed(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let mut i = 0;
                for c in 0..bc {
                    for z in 0..od {
                        for y in 0..oh {
                            for xo in 0..ow {
                                gx.data[src(c, z, y, xo)] += g.data[i];
                                i += 1;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            });
            let shape = vec![x.shape[0], x.shape[1], od, oh, ow];
            Ok((Tensor { shape, data: out }, bw))
        })
    }

    fn unary(&self, x: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        // Unary maps cannot fail on shape.
        self.record(&[x], |t| {
            let out = t[0].map(f);
            let bw = boxed(move |g, t, y, _| {
                let data = g
                    .data
                    .iter()
                    .zip(&t[0].data)
                    .zip(&y.data)
                    .map(|((gv, xv), yv)| gv * df(*xv, *yv))
                    .collect();
                vec![Some(Tensor { shape: g.shape.clone(), data })]
            });
            Ok((out, bw))
        })
        .expect("unary op")
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, x: Var, floor: f64) -> Var {
        self.record(&[x], |t| {
            let out = t[0].map(|v| v.max(floor));
            let bw = boxed(move |g, t, _, _| {
                vec![Some(g.zip(t[0], |gv, xv| if xv > floor { gv } else { 0.0 }))]
            });
            Ok((out, bw))
        })
        .expect("unary op")
    }

    pub fn scale(&self, x: Var, alpha: f64) -> Var {
        self.record(&[x], |t| {
            let bw = boxed(move |g, _, _, _| vec![Some(g.map(|v| alpha * v))]);
            Ok((t[0].map(|v| alpha * v), bw))
        })
        .expect("unary op")
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.record(&[x], |t| {
            let bw = boxed(|g, _, _, _| vec![Some(g.clone())]);
            Ok((t[0].map(|v| v + c), bw))
        })
        .expect("unary op")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], |t| {
            same_shape("add", t[0], t[1])?;
            let bw = boxed(|g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            });
            Ok((t[0].zip(t[1], |x, y| x + y), bw))
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], |t| {
            same_shape("sub", t[0], t[1])?;
            let bw = boxed(|g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
            });
            Ok((t[0].zip(t[1], |x, y| x - y), bw))
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], |t| {
            same_shape("mul", t[0], t[1])?;
            let bw = boxed(|g, t, _, needs| {
                vec![
                    needs[0].then(|| g.zip(t[1], |gv, y| gv * y)),
                    needs[1].then(|| g.zip(t[0], |gv, x| gv * x)),
                ]
            });
            Ok((t[0].zip(t[1], |x, y| x * y), bw))
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], |t| {
            same_shape("div", t[0], t[1])?;
            let bw = boxed(|g, t, out, needs| {
                vec![
                    needs[0].then(|| g.zip(t[1], |gv, y| gv / y)),
                    needs[1].then(|| {
                        let q = out.zip(t[1], |o, y| -o / y);
                        g.zip(&q, |gv, qv| gv * qv)
                    }),
                ]
            });
            Ok((t[0].zip(t[1], |x, y| x / y), bw))
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        self.record(&[x], |t| {
            let shape = t[0].shape.clone();
            let bw = boxed(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.data[0]))]);
            Ok((Tensor::scalar(t[0].data.iter().sum()), bw))
        })
        .expect("reduction")
    }

    /// Mean over every element.
    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference over every element.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let shape = shape.to_vec();
        self.record(&[x], move |t| {
            let out = t[0].clone().reshape(&shape)?;
            let in_shape = t[0].shape.clone();
            let bw = boxed(move |g, _, _, _| {
                vec![Some(Tensor { shape: in_shape.clone(), data: g.data.clone() })]
            });
            Ok((out, bw))
        })
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.record(&[x], |t| {
            let x = t[0];
            if x.shape.len() != 2 || start >= end || end > x.shape[1] {
                return Err(Error::shape(format!("slice_cols({start}..{end}) of {:?}", x.shape)));
            }
            let (rows, cols, w) = (x.shape[0], x.shape[1], end - start);
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&x.data[r * cols + start..r * cols + end]);
            }
            let bw = boxed(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    gx.data[r * cols + start..r * cols + end].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                vec![Some(gx)]
            });
            Ok((Tensor { shape: vec![rows, w], data }, bw))
        })
    }
}
