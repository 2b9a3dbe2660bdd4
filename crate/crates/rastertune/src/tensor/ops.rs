//! Differentiable operations recorded on a [`Tape`].
//!
//! Convolutions go through im2col + GEMM; the backward pass recomputes the
//! column matrix instead of caching it to keep peak memory flat.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;

use super::{Result, Tape, Tensor, TensorError};

pub(crate) fn standard(a: ArrayD<f32>) -> ArrayD<f32> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sums `g` down to `target` shape (inverse of broadcasting).
fn reduce_to_shape(g: &ArrayD<f32>, target: &[usize]) -> ArrayD<f32> {
    let mut out = g.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&od, &td)) in out.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if od != td {
            debug_assert_eq!(td, 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn as2(a: &ArrayD<f32>) -> ndarray::ArrayView2<'_, f32> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 view")
}

impl<'p> Tape<'p> {
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, |x, y| x + y, BinKind::Add)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, |x, y| x * y, BinKind::Mul)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    fn binary_broadcast(
        &mut self,
        a: Tensor,
        b: Tensor,
        f: fn(f32, f32) -> f32,
        kind: BinKind,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb)
            .ok_or_else(|| err(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let av = self.value(a).broadcast(IxDyn(&out_shape)).unwrap().to_owned();
        let bv = self.value(b).broadcast(IxDyn(&out_shape)).unwrap().to_owned();
        let mut out = av;
        out.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
        Ok(self.node(
            out,
            vec![a.id, b.id],
            Box::new(move |g, parents, _| {
                let (pa, pb) = (parents[0], parents[1]);
                match kind {
                    BinKind::Add => vec![
                        reduce_to_shape(g, pa.shape()),
                        reduce_to_shape(g, pb.shape()),
                    ],
                    BinKind::Mul => {
                        let shape = g.shape();
                        let pav = pa.broadcast(IxDyn(shape)).unwrap();
                        let pbv = pb.broadcast(IxDyn(shape)).unwrap();
                        let ga = g * &pbv;
                        let gb = g * &pav;
                        vec![
                            reduce_to_shape(&ga, pa.shape()),
                            reduce_to_shape(&gb, pb.shape()),
                        ]
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: Tensor, c: f32) -> Tensor {
        let out = self.value(a).mapv(|v| v * c);
        self.node(
            out,
            vec![a.id],
            Box::new(move |g, _, _| vec![g.mapv(|v| v * c)]),
        )
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = self.value(a);
        if v.len() != shape.iter().product::<usize>() {
            return Err(err(format!(
                "reshape {:?} -> {shape:?} changes element count",
                v.shape()
            )));
        }
        let old_shape = v.shape().to_vec();
        let out = reshaped(v, shape);
        Ok(self.node(
            out,
            vec![a.id],
            Box::new(move |g, _, _| vec![reshaped(g, &old_shape)]),
        ))
    }

    pub fn permute(&mut self, a: Tensor, axes: &[usize]) -> Result<Tensor> {
        let v = self.value(a);
        if axes.len() != v.ndim() {
            return Err(err(format!(
                "permute axes {axes:?} vs rank {}",
                v.ndim()
            )));
        }
        let out = standard(v.clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.node(
            out,
            vec![a.id],
            Box::new(move |g, _, _| vec![standard(g.clone().permuted_axes(IxDyn(&inverse)))]),
        ))
    }

    /// Selects index `i` along `axis`, dropping that axis.
    pub fn index_axis(&mut self, a: Tensor, axis: usize, i: usize) -> Result<Tensor> {
        let v = self.value(a);
        if axis >= v.ndim() || i >= v.shape()[axis] {
            return Err(err(format!(
                "index {i} on axis {axis} of shape {:?}",
                v.shape()
            )));
        }
        let out = v.index_axis(Axis(axis), i).to_owned();
        let full_shape = v.shape().to_vec();
        Ok(self.node(
            out,
            vec![a.id],
            Box::new(move |g, _, _| {
                let mut gx = ArrayD::<f32>::zeros(IxDyn(&full_shape));
                gx.index_axis_mut(Axis(axis), i).assign(g);
                vec![gx]
            }),
        ))
    }

    /// Concatenates along `axis`.
    pub fn concat(&mut self, axis: usize, items: &[Tensor]) -> Result<Tensor> {
        if items.is_empty() {
            return Err(err("concat of zero tensors".into()));
        }
        let views: Vec<_> = items.iter().map(|t| self.value(*t).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| err(format!("concat: {e}")))?;
        let sizes: Vec<usize> = items.iter().map(|t| self.shape(*t)[axis]).collect();
        Ok(self.node(
            out,
            items.iter().map(|t| t.id).collect(),
            Box::new(move |g, _, _| {
                let mut offset = 0usize;
                sizes
                    .iter()
                    .map(|&s| {
                        let part = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + s))
                            .to_owned();
                        offset += s;
                        part
                    })
                    .collect()
            }),
        ))
    }

    /// 2-D matmul: (M,K) x (K,N).
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(err(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = as2(va).dot(&as2(vb)).into_dyn();
        Ok(self.node(
            out,
            vec![a.id, b.id],
            Box::new(|g, parents, _| {
                let g2 = as2(g);
                let (pa, pb) = (as2(parents[0]), as2(parents[1]));
                vec![g2.dot(&pb.t()).into_dyn(), pa.t().dot(&g2).into_dyn()]
            }),
        ))
    }

    /// Batched matmul over one leading axis: (L,M,K) x (L,K,N) -> (L,M,N).
    pub fn batch_matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 3 || vb.ndim() != 3 || va.shape()[0] != vb.shape()[0]
            || va.shape()[2] != vb.shape()[1]
        {
            return Err(err(format!(
                "batch_matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (l, m, n) = (va.shape()[0], va.shape()[1], vb.shape()[2]);
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[l, m, n]));
        for i in 0..l {
            let ai = va.index_axis(Axis(0), i);
            let bi = vb.index_axis(Axis(0), i);
            out.index_axis_mut(Axis(0), i)
                .assign(&as2(&ai.to_owned().into_dyn()).dot(&as2(&bi.to_owned().into_dyn())));
        }
        Ok(self.node(
            out,
            vec![a.id, b.id],
            Box::new(move |g, parents, _| {
                let (pa, pb) = (parents[0], parents[1]);
                let mut ga = ArrayD::<f32>::zeros(IxDyn(pa.shape()));
                let mut gb = ArrayD::<f32>::zeros(IxDyn(pb.shape()));
                for i in 0..l {
                    let gi = g.index_axis(Axis(0), i).to_owned().into_dyn();
                    let ai = pa.index_axis(Axis(0), i).to_owned().into_dyn();
                    let bi = pb.index_axis(Axis(0), i).to_owned().into_dyn();
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&as2(&gi).dot(&as2(&bi).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&as2(&ai).t().dot(&as2(&gi)));
                }
                vec![ga, gb]
            }),
        ))
    }

    /// `x (.., in) x w (in, out) + b (out)` applied over the last axis.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let (din, dout) = {
            let ws = self.shape(w);
            if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
                return Err(err(format!("linear {:?} x {:?}", xs, ws)));
            }
            (ws[0], ws[1])
        };
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, din])?;
        let y2 = self.matmul(x2, w)?;
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = dout;
        let y = self.reshape(y2, &out_shape)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.node(
            out,
            vec![a.id],
            Box::new(|g, parents, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(parents[0], |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![gx]
            }),
        )
    }

    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        const A: f32 = 0.044_715;
        let out = self.value(a).mapv(|x| {
            let u = C * (x + A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.node(
            out,
            vec![a.id],
            Box::new(|g, parents, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(parents[0], |gv, &x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * x * x);
                    *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                vec![gx]
            }),
        )
    }

    /// Mean over the listed axes (dropped from the output shape).
    pub fn mean_axes(&mut self, a: Tensor, axes: &[usize]) -> Result<Tensor> {
        let v = self.value(a);
        let in_shape = v.shape().to_vec();
        for &ax in axes {
            if ax >= in_shape.len() {
                return Err(err(format!("mean axis {ax} of rank {}", in_shape.len())));
            }
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = v.clone();
        for &ax in sorted.iter().rev() {
            out = out.mean_axis(Axis(ax)).expect("non-empty axis");
        }
        let count: usize = sorted.iter().map(|&ax| in_shape[ax]).product();
        Ok(self.node(
            out,
            vec![a.id],
            Box::new(move |g, _, _| {
                // Re-insert dropped axes as size-1 and broadcast back.
                let mut gshape = g.shape().to_vec();
                for &ax in &sorted {
                    gshape.insert(ax, 1);
                }
                let gk = reshaped(g, &gshape);
                let gx = gk.broadcast(IxDyn(&in_shape)).unwrap().to_owned()
                    / count as f32;
                vec![gx]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let rows = v.len() / d;
        let mut out = v.clone();
        {
            let flat = out.as_slice_mut().unwrap();
            for r in 0..rows {
                let row = &mut flat[r * d..(r + 1) * d];
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
        }
        self.node(
            out,
            vec![a.id],
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                let gs = gx.as_slice_mut().unwrap();
                let ys = y.as_slice().unwrap();
                for r in 0..rows {
                    let lo = r * d;
                    let dot: f32 = (0..d).map(|i| gs[lo + i] * ys[lo + i]).sum();
                    for i in 0..d {
                        gs[lo + i] = ys[lo + i] * (gs[lo + i] - dot);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f32) -> Result<Tensor> {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(err(format!(
                "layer_norm affine shape {:?}/{:?} vs feature {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = v.len() / d;
        let mut out = v.clone();
        let mut inv_std = vec![0.0f32; rows];
        let mut means = vec![0.0f32; rows];
        {
            let flat = out.as_slice_mut().unwrap();
            let gam = self.values[gamma.id].as_slice().unwrap();
            let bet = self.values[beta.id].as_slice().unwrap();
            for r in 0..rows {
                let row = &mut flat[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let inv = 1.0 / (var + eps).sqrt();
                means[r] = mean;
                inv_std[r] = inv;
                for (i, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * gam[i] + bet[i];
                }
            }
        }
        Ok(self.node(
            out,
            vec![x.id, gamma.id, beta.id],
            Box::new(move |g, parents, _| {
                let xs = parents[0].as_slice().unwrap();
                let gam = parents[1].as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut gx = vec![0.0f32; xs.len()];
                let mut ggamma = vec![0.0f32; d];
                let mut gbeta = vec![0.0f32; d];
                for r in 0..rows {
                    let lo = r * d;
                    let inv = inv_std[r];
                    let mean = means[r];
                    let mut m1 = 0.0f32; // mean of gamma*g
                    let mut m2 = 0.0f32; // mean of gamma*g*xhat
                    for i in 0..d {
                        let xhat = (xs[lo + i] - mean) * inv;
                        let gg = gs[lo + i] * gam[i];
                        m1 += gg;
                        m2 += gg * xhat;
                        ggamma[i] += gs[lo + i] * xhat;
                        gbeta[i] += gs[lo + i];
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    for i in 0..d {
                        let xhat = (xs[lo + i] - mean) * inv;
                        gx[lo + i] = (gs[lo + i] * gam[i] - m1 - xhat * m2) * inv;
                    }
                }
                vec![
                    ArrayD::from_shape_vec(IxDyn(parents[0].shape()), gx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), ggamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), gbeta).unwrap(),
                ]
            }),
        ))
    }

    /// 2-D convolution, NCHW x (O,C,kh,kw), symmetric padding.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.ndim() != 4 || vw.ndim() != 4 {
            return Err(err(format!("conv2d ranks {:?} {:?}", vx.shape(), vw.shape())));
        }
        let (bsz, c, h, wth) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (o, cw, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        if c != cw {
            return Err(err(format!("conv2d channels {c} vs weight {cw}")));
        }
        if h + 2 * pad < kh || wth + 2 * pad < kw {
            return Err(err(format!("conv2d kernel {kh}x{kw} larger than padded input")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wth + 2 * pad - kw) / stride + 1;

        let col = im2col(vx, kh, kw, stride, pad, oh, ow); // (B*OH*OW, C*kh*kw)
        let w2 = reshaped(vw, &[o, c * kh * kw]); // (O, CKK)
        let mut y2 = col.dot(&as2(&w2).t()); // (B*OH*OW, O)
        if let Some(bt) = b {
            let bv = self.value(bt);
            if bv.shape() != [o] {
                return Err(err(format!("conv2d bias shape {:?}", bv.shape())));
            }
            let b1 = Array1::from_iter(bv.iter().cloned());
            y2 += &b1;
        }
        let out = nhwc_rows_to_nchw(&y2, bsz, oh, ow, o);

        let parents = match b {
            Some(bt) => vec![x.id, w.id, bt.id],
            None => vec![x.id, w.id],
        };
        let has_bias = b.is_some();
        Ok(self.node(
            out,
            parents,
            Box::new(move |g, parents, _| {
                let vx = parents[0];
                let vw = parents[1];
                let g2 = nchw_to_nhwc_rows(g); // (B*OH*OW, O)
                let col = im2col(vx, kh, kw, stride, pad, oh, ow);
                let w2 = reshaped(vw, &[o, c * kh * kw]);
                // dW = g2^T . col  -> (O, CKK)
                let gw2 = g2.t().dot(&col);
                let gw = reshaped(&gw2.into_dyn(), &[o, c, kh, kw]);
                // dX = col2im(g2 . w2)
                let gcol = g2.dot(&as2(&w2)); // (B*OH*OW, CKK)
                let gx = col2im(&gcol, bsz, c, h, wth, kh, kw, stride, pad, oh, ow);
                let mut grads = vec![gx, gw];
                if has_bias {
                    let gb = g2.sum_axis(Axis(0)).into_dyn();
                    grads.push(gb);
                }
                grads
            }),
        ))
    }

    /// Transposed convolution with kernel == stride (non-overlapping learned
    /// upsampling). Weight layout (C_in, C_out, k, k).
    pub fn conv_transpose2d_blocky(
        &mut self,
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        k: usize,
    ) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != k || ws[3] != k || xs[1] != ws[0] {
            return Err(err(format!("conv_transpose {:?} w {:?} k {k}", xs, ws)));
        }
        let (bsz, c, h, wth) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[1];
        // (B,C,H,W) -> (B,H,W,C) rows, then GEMM with (C, O*k*k), then scatter.
        let xp = self.permute(x, &[0, 2, 3, 1])?;
        let x2 = self.reshape(xp, &[bsz * h * wth, c])?;
        let w2 = self.reshape(w, &[c, o * k * k])?;
        let y2 = self.matmul(x2, w2)?; // (BHW, Okk)
        let y = self.reshape(y2, &[bsz, h, wth, o, k, k])?;
        let yp = self.permute(y, &[0, 3, 1, 4, 2, 5])?; // (B,O,H,k,W,k)
        let out = self.reshape(yp, &[bsz, o, h * k, wth * k])?;
        match b {
            Some(bt) => {
                let bb = self.reshape(bt, &[1, o, 1, 1])?;
                self.add(out, bb)
            }
            None => Ok(out),
        }
    }

    /// Fixed-window average pooling (used for 0.5x downscaling).
    pub fn avg_pool2d(&mut self, x: Tensor, k: usize, stride: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < k || xs[3] < k {
            return Err(err(format!("avg_pool2d on {:?} k {k}", xs)));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let vx = self.value(x).as_slice().unwrap().to_vec();
        let mut out = vec![0.0f32; bsz * c * oh * ow];
        let inv = 1.0 / (k * k) as f32;
        for bc in 0..bsz * c {
            let src = &vx[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0f32;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(oy * stride + dy) * w + ox * stride + dx];
                        }
                    }
                    dst[oy * ow + ox] = s * inv;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[bsz, c, oh, ow]), out).unwrap();
        Ok(self.node(
            out,
            vec![x.id],
            Box::new(move |g, _, _| {
                let gs = g.as_slice().unwrap();
                let mut gx = vec![0.0f32; bsz * c * h * w];
                for bc in 0..bsz * c {
                    let gsrc = &gs[bc * oh * ow..(bc + 1) * oh * ow];
                    let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gsrc[oy * ow + ox] * inv;
                            for dy in 0..k {
                                for dx in 0..k {
                                    gdst[(oy * stride + dy) * w + ox * stride + dx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&[bsz, c, h, w]), gx).unwrap()]
            }),
        ))
    }

    /// Adaptive average pooling to (oh, ow), torch-style bins.
    pub fn adaptive_avg_pool2d(&mut self, x: Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(err(format!("adaptive_avg_pool2d on {:?}", xs)));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let bin = |i: usize, o: usize, n: usize| -> (usize, usize) {
            ((i * n) / o, ((i + 1) * n).div_ceil(o))
        };
        let vx = self.value(x).as_slice().unwrap().to_vec();
        let mut out = vec![0.0f32; bsz * c * oh * ow];
        for bc in 0..bsz * c {
            let src = &vx[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1) = bin(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1) = bin(ox, ow, w);
                    let mut s = 0.0f32;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += src[y * w + x];
                        }
                    }
                    dst[oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[bsz, c, oh, ow]), out).unwrap();
        Ok(self.node(
            out,
            vec![x.id],
            Box::new(move |g, _, _| {
                let gs = g.as_slice().unwrap();
                let mut gx = vec![0.0f32; bsz * c * h * w];
                for bc in 0..bsz * c {
                    let gsrc = &gs[bc * oh * ow..(bc + 1) * oh * ow];
                    let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1) = bin(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1) = bin(ox, ow, w);
                            let gv = gsrc[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    gdst[y * w + x] += gv;
                                }
                            }
                        }
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&[bsz, c, h, w]), gx).unwrap()]
            }),
        ))
    }

    /// Bilinear resize (half-pixel centers) to (oh, ow).
    pub fn bilinear_resize(&mut self, x: Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(err(format!("bilinear_resize on {:?}", xs)));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if (h, w) == (oh, ow) {
            // Identity resize: still record a pass-through node.
            let out = self.value(x).clone();
            return Ok(self.node(out, vec![x.id], Box::new(|g, _, _| vec![g.clone()])));
        }
        let plan_y = bilinear_plan(h, oh);
        let plan_x = bilinear_plan(w, ow);
        let vx = self.value(x).as_slice().unwrap().to_vec();
        let mut out = vec![0.0f32; bsz * c * oh * ow];
        for bc in 0..bsz * c {
            let src = &vx[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in plan_y.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in plan_x.iter().enumerate() {
                    let v00 = src[y0 * w + x0];
                    let v01 = src[y0 * w + x1];
                    let v10 = src[y1 * w + x0];
                    let v11 = src[y1 * w + x1];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    dst[oy * ow + ox] = top + (bot - top) * wy;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[bsz, c, oh, ow]), out).unwrap();
        Ok(self.node(
            out,
            vec![x.id],
            Box::new(move |g, _, _| {
                let gs = g.as_slice().unwrap();
                let mut gx = vec![0.0f32; bsz * c * h * w];
                for bc in 0..bsz * c {
                    let gsrc = &gs[bc * oh * ow..(bc + 1) * oh * ow];
                    let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in plan_y.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in plan_x.iter().enumerate() {
                            let gv = gsrc[oy * ow + ox];
                            gdst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            gdst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            gdst[y1 * w + x0] += gv * wy * (1.0 - wx);
                            gdst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&[bsz, c, h, w]), gx).unwrap()]
            }),
        ))
    }

    /// Inverted dropout; identity when gradients are disabled or p == 0.
    pub fn dropout(&mut self, x: Tensor, p: f32) -> Tensor {
        if !self.grad_enabled() || p <= 0.0 {
            let out = self.value(x).clone();
            return self.node(out, vec![x.id], Box::new(|g, _, _| vec![g.clone()]));
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mut mask = vec![0.0f32; n];
        for m in mask.iter_mut() {
            if self.rng().random::<f32>() < keep {
                *m = 1.0 / keep;
            }
        }
        let mask = ArrayD::from_shape_vec(IxDyn(&shape), mask).unwrap();
        let out = self.value(x) * &mask;
        self.node(
            out,
            vec![x.id],
            Box::new(move |g, _, _| vec![g * &mask]),
        )
    }

    /// Cross-entropy over class axis 1 with an ignored label value.
    /// `logits`: (B,K) or (B,K,H,W); `targets`: (B) or (B,H,W) class indices.
    /// Mean over non-ignored positions; zero loss if everything is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Tensor,
        targets: &ArrayD<i64>,
        ignore_index: i64,
    ) -> Result<Tensor> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 && ls.len() != 4 {
            return Err(err(format!("cross_entropy logits rank {:?}", ls)));
        }
        let k = ls[1];
        let mut tshape = vec![ls[0]];
        tshape.extend_from_slice(&ls[2..]);
        if targets.shape() != tshape.as_slice() {
            return Err(err(format!(
                "cross_entropy target shape {:?} vs logits {:?}",
                targets.shape(),
                ls
            )));
        }
        // Flatten to positions x classes: position index = b * (spatial) + s.
        let spatial: usize = ls[2..].iter().product();
        let npos = ls[0] * spatial;
        let lv = self.value(logits).as_slice().unwrap();
        let tv: Vec<i64> = targets.iter().cloned().collect();
        let logit_at = |pos: usize, class: usize| -> f32 {
            let b = pos / spatial;
            let s = pos % spatial;
            lv[(b * k + class) * spatial + s]
        };
        let mut n_valid = 0usize;
        let mut total = 0.0f64;
        for pos in 0..npos {
            let t = tv[pos];
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= k {
                return Err(err(format!("target class {t} out of range 0..{k}")));
            }
            let m = (0..k).map(|c| logit_at(pos, c)).fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = m + (0..k).map(|c| (logit_at(pos, c) - m).exp()).sum::<f32>().ln();
            total += (lse - logit_at(pos, t as usize)) as f64;
            n_valid += 1;
        }
        let loss = if n_valid == 0 { 0.0 } else { (total / n_valid as f64) as f32 };
        let out = ArrayD::from_shape_vec(IxDyn(&[]), vec![loss]).unwrap();
        let ls_cl = ls.clone();
        Ok(self.node(
            out,
            vec![logits.id],
            Box::new(move |g, parents, _| {
                let gscale = g.iter().next().copied().unwrap_or(1.0);
                let lv = parents[0].as_slice().unwrap();
                let mut gx = vec![0.0f32; lv.len()];
                if n_valid > 0 {
                    let inv = gscale / n_valid as f32;
                    for pos in 0..npos {
                        let t = tv[pos];
                        if t == ignore_index {
                            continue;
                        }
                        let b = pos / spatial;
                        let s = pos % spatial;
                        let idx = |c: usize| (b * k + c) * spatial + s;
                        let m = (0..k).map(|c| lv[idx(c)]).fold(f32::NEG_INFINITY, f32::max);
                        let denom: f32 = (0..k).map(|c| (lv[idx(c)] - m).exp()).sum();
                        for c in 0..k {
                            let p = (lv[idx(c)] - m).exp() / denom;
                            let onehot = if c as i64 == t { 1.0 } else { 0.0 };
                            gx[idx(c)] = (p - onehot) * inv;
                        }
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&ls_cl), gx).unwrap()]
            }),
        ))
    }

    /// Mean squared error with an optional validity mask (1.0 = counted).
    pub fn mse_loss(&mut self, pred: Tensor, target: &ArrayD<f32>, mask: Option<&ArrayD<f32>>) -> Result<Tensor> {
        let ps = self.shape(pred).to_vec();
        if target.shape() != ps.as_slice() {
            return Err(err(format!(
                "mse target {:?} vs pred {:?}",
                target.shape(),
                ps
            )));
        }
        if let Some(m) = mask {
            if m.shape() != ps.as_slice() {
                return Err(err(format!("mse mask {:?} vs pred {:?}", m.shape(), ps)));
            }
        }
        let pv = self.value(pred).as_slice().unwrap();
        let tv: Vec<f32> = target.iter().cloned().collect();
        let mv: Option<Vec<f32>> = mask.map(|m| m.iter().cloned().collect());
        let mut n = 0.0f64;
        let mut total = 0.0f64;
        for i in 0..pv.len() {
            let w = mv.as_ref().map_or(1.0, |m| m[i]);
            if w > 0.0 {
                let d = (pv[i] - tv[i]) as f64;
                total += d * d;
                n += 1.0;
            }
        }
        let loss = if n == 0.0 { 0.0 } else { (total / n) as f32 };
        let out = ArrayD::from_shape_vec(IxDyn(&[]), vec![loss]).unwrap();
        Ok(self.node(
            out,
            vec![pred.id],
            Box::new(move |g, parents, _| {
                let gscale = g.iter().next().copied().unwrap_or(1.0);
                let pv = parents[0].as_slice().unwrap();
                let mut gx = vec![0.0f32; pv.len()];
                if n > 0.0 {
                    let inv = gscale * 2.0 / n as f32;
                    for i in 0..pv.len() {
                        let w = mv.as_ref().map_or(1.0, |m| m[i]);
                        if w > 0.0 {
                            gx[i] = (pv[i] - tv[i]) * inv;
                        }
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(parents[0].shape()), gx).unwrap()]
            }),
        ))
    }
}

enum BinKind {
    Add,
    Mul,
}

pub(crate) fn reshaped(a: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    let v: Vec<f32> = if a.is_standard_layout() {
        a.as_slice().unwrap().to_vec()
    } else {
        a.iter().cloned().collect()
    };
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("element count preserved")
}

/// (src0, src1, weight) per output coordinate, half-pixel convention.
fn bilinear_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|i| {
            let src = (i as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

fn im2col(
    x: &ArrayD<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xs = x.as_slice().expect("standard layout");
    let ckk = c * kh * kw;
    let mut col = Array2::<f32>::zeros((b * oh * ow, ckk));
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let chan = (bi * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        let dst = row + (ci * kh + ky) * kw;
                        if iy < 0 || iy >= h as isize {
                            continue; // zeros already in place
                        }
                        let src_row = chan + iy as usize * w;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst + kx] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f32>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<f32> {
    let ckk = c * kh * kw;
    let gs = gcol.as_slice().expect("standard layout");
    let mut gx = vec![0.0f32; b * c * h * w];
    for bi in 0..b {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let chan = (bi * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = chan + iy as usize * w;
                        let src = row + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                gx[dst_row + ix as usize] += gs[src + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), gx).unwrap()
}

/// Rows (B*OH*OW, O) -> NCHW (B,O,OH,OW).
fn nhwc_rows_to_nchw(y: &Array2<f32>, b: usize, oh: usize, ow: usize, o: usize) -> ArrayD<f32> {
    let ys = y.as_slice().unwrap();
    let mut out = vec![0.0f32; b * o * oh * ow];
    for bi in 0..b {
        for s in 0..oh * ow {
            let row = (bi * oh * ow + s) * o;
            for ci in 0..o {
                out[(bi * o + ci) * oh * ow + s] = ys[row + ci];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, o, oh, ow]), out).unwrap()
}

/// NCHW (B,O,OH,OW) -> rows (B*OH*OW, O).
fn nchw_to_nhwc_rows(g: &ArrayD<f32>) -> Array2<f32> {
    let (b, o, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let gs = g.as_slice().expect("standard layout");
    let mut out = Array2::<f32>::zeros((b * oh * ow, o));
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..o {
            let chan = (bi * o + ci) * oh * ow;
            for s in 0..oh * ow {
                os[(bi * oh * ow + s) * o + ci] = gs[chan + s];
            }
        }
    }
    out
}
