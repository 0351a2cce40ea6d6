//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! Each op records a backward closure; [`Tape::backward`] walks the nodes in
//! reverse, taking the output gradient of each node exactly once (the graph is
//! SSA: every variable is produced by at most one node). Forward math lives in
//! free `*_fwd` functions so the gradient-free evaluation path used by the
//! teacher model and by inference shares the same kernels bit for bit.
//!
//! Convolution and attention readout parallelize with rayon over independent
//! output slices only, so results do not depend on thread scheduling.

use crate::tensor::{logistic, Tensor};
use rayon::prelude::*;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&[Tensor], &Tensor, &mut GradSink)>;

struct Node {
    out: usize,
    backward: BackwardFn,
}

pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
    needs: &'a [bool],
}

impl GradSink<'_> {
    pub fn needs(&self, var: Var) -> bool {
        self.needs[var.0]
    }

    pub fn add(&mut self, var: Var, g: Tensor) {
        if !self.needs[var.0] {
            return;
        }
        match &mut self.grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `add`, but skips computing the gradient when the target does not
    /// require one (e.g. fixed Sobel stencils fed through `conv3d`).
    pub fn add_with(&mut self, var: Var, f: impl FnOnce() -> Tensor) {
        if self.needs[var.0] {
            let g = f();
            self.add(var, g);
        }
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    needs: Vec<bool>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf variable. `needs_grad = false` marks constants (labels, stencils).
    pub fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        self.values.push(t);
        self.needs.push(needs_grad);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        self.values.push(value);
        self.needs.push(needs);
        let out = self.values.len() - 1;
        if needs {
            self.nodes.push(Node { out, backward });
        }
        Var(out)
    }

    /// Gradients of a scalar `root` with respect to every recorded variable.
    /// Entries are `None` for variables the root does not depend on or that
    /// did not request gradients.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.values[root.0].numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for node in self.nodes.iter().rev() {
            if node.out > root.0 {
                continue;
            }
            let Some(out_grad) = grads[node.out].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                needs: &self.needs,
            };
            (node.backward)(&self.values, &out_grad, &mut sink);
            if node.out == root.0 {
                // keep the seed visible for callers that ask for d root/d root
                grads[root.0] = Some(Tensor::scalar(1.0));
            }
        }
        grads
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = zip(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(t, &[a, b], Box::new(move |_, g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = zip(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(t, &[a, b], Box::new(move |_, g, sink| {
            sink.add(a, g.clone());
            let mut neg = g.clone();
            neg.scale_in_place(-1.0);
            sink.add(b, neg);
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = zip(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(t, &[a, b], Box::new(move |vals, g, sink| {
            sink.add_with(a, || zip(g, &vals[b.0], |gv, bv| gv * bv));
            sink.add_with(b, || zip(g, &vals[a.0], |gv, av| gv * av));
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = zip(&self.values[a.0], &self.values[b.0], |x, y| x / y);
        self.push(t, &[a, b], Box::new(move |vals, g, sink| {
            sink.add_with(a, || zip(g, &vals[b.0], |gv, bv| gv / bv));
            sink.add_with(b, || {
                let av = &vals[a.0];
                let bv = &vals[b.0];
                Tensor::new(
                    bv.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(gv, (x, y))| -gv * x / (y * y))
                        .collect(),
                )
            });
        }))
    }

    // ---- elementwise unary ----

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.values[a.0].map(|x| x * c);
        self.push(t, &[a], Box::new(move |_, g, sink| {
            sink.add(a, g.map(|gv| gv * c));
        }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.values[a.0].map(|x| x + c);
        self.push(t, &[a], Box::new(move |_, g, sink| {
            sink.add(a, g.clone());
        }))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(f64::abs);
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            sink.add_with(a, || {
                zip(g, &vals[a.0], |gv, x| gv * sign_or_zero(x))
            });
        }))
    }

    /// sqrt(max(x, 0)); subgradient 0 where x <= 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(|x| x.max(0.0).sqrt());
        let out_probe = t.clone();
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            sink.add_with(a, || {
                let x = &vals[a.0];
                Tensor::new(
                    x.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data().iter().zip(out_probe.data()))
                        .map(|(gv, (&xv, &sv))| if xv > 0.0 { gv / (2.0 * sv) } else { 0.0 })
                        .collect(),
                )
            });
        }))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(f64::ln);
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            sink.add_with(a, || zip(g, &vals[a.0], |gv, x| gv / x));
        }))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(logistic);
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            sink.add_with(a, || {
                zip(g, &vals[a.0], |gv, x| {
                    let y = logistic(x);
                    gv * y * (1.0 - y)
                })
            });
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(|x| x.max(0.0));
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            sink.add_with(a, || {
                zip(g, &vals[a.0], |gv, x| if x > 0.0 { gv } else { 0.0 })
            });
        }))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.values[a.0].map(|x| x.clamp(lo, hi));
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            sink.add_with(a, || {
                zip(g, &vals[a.0], |gv, x| if x > lo && x < hi { gv } else { 0.0 })
            });
        }))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.values[a.0].sum());
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            let gv = g.item();
            sink.add_with(a, || Tensor::full(vals[a.0].shape(), gv));
        }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.numel(), shape.iter().product::<usize>(), "reshape numel mismatch");
        let t = Tensor::new(shape, src.data().to_vec());
        self.push(t, &[a], Box::new(move |vals, g, sink| {
            sink.add_with(a, || Tensor::new(vals[a.0].shape().to_vec(), g.data().to_vec()));
        }))
    }

    // ---- structured ops ----

    /// 3D convolution, stride 1, zero padding k/2 (odd k).
    /// x: [Ci, D, H, W], w: [Co, Ci, k, k, k], b: [Co] optional.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let t = conv3d_fwd(&self.values[x.0], &self.values[w.0], b.map(|v| &self.values[v.0]));
        let mut inputs = vec![x, w];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        self.push(t, &inputs, Box::new(move |vals, g, sink| {
            sink.add_with(x, || conv3d_bwd_x(&vals[w.0], g, vals[x.0].shape()));
            sink.add_with(w, || conv3d_bwd_w(&vals[x.0], g, vals[w.0].shape()));
            if let Some(bv) = b {
                sink.add_with(bv, || conv3d_bwd_b(g));
            }
        }))
    }

    /// Per-channel instance normalization over all non-channel dims.
    /// x: [C, ...], gamma/beta: [C].
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (t, stats) = instance_norm_fwd_stats(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        );
        self.push(t, &[x, gamma, beta], Box::new(move |vals, g, sink| {
            let xt = &vals[x.0];
            let gam = &vals[gamma.0];
            let c = xt.shape()[0];
            let n = xt.numel() / c;
            let (dx, dgamma, dbeta) = instance_norm_bwd(xt, gam, g, &stats, c, n);
            sink.add(x, dx);
            sink.add(gamma, dgamma);
            sink.add(beta, dbeta);
        }))
    }

    /// 2x average pooling over the three spatial dims of [C, D, H, W].
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = avg_pool2_fwd(&self.values[x.0]);
        self.push(t, &[x], Box::new(move |vals, g, sink| {
            sink.add_with(x, || avg_pool2_bwd(g, vals[x.0].shape()));
        }))
    }

    /// Nearest-neighbor 2x upsampling of [C, D, H, W].
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = upsample2_fwd(&self.values[x.0]);
        self.push(t, &[x], Box::new(move |vals, g, sink| {
            sink.add_with(x, || upsample2_bwd(g, vals[x.0].shape()));
        }))
    }

    /// Pad each spatial dim of [C, D, H, W] by one voxel, replicating the
    /// border values (so constant fields stay constant under convolution).
    pub fn replicate_pad1(&mut self, x: Var) -> Var {
        let t = replicate_pad1_fwd(&self.values[x.0]);
        self.push(t, &[x], Box::new(move |vals, g, sink| {
            sink.add_with(x, || replicate_pad1_bwd(g, vals[x.0].shape()));
        }))
    }

    /// Drop the one-voxel spatial shell of [C, D, H, W] (inverse of the
    /// padding above in shape).
    pub fn crop1(&mut self, x: Var) -> Var {
        let t = crop1_fwd(&self.values[x.0]);
        self.push(t, &[x], Box::new(move |vals, g, sink| {
            sink.add_with(x, || {
                let src_shape = vals[x.0].shape();
                let mut full = Tensor::zeros(src_shape);
                scatter_interior(full.data_mut(), g.data(), src_shape);
                full
            });
        }))
    }

    /// Concatenate along the channel (first) dim; spatial dims must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<&Tensor> = parts.iter().map(|v| &self.values[v.0]).collect();
        let t = concat_channels_fwd(&tensors);
        let owned: Vec<Var> = parts.to_vec();
        let channels: Vec<usize> = tensors.iter().map(|t| t.shape()[0]).collect();
        self.push(t, parts, Box::new(move |vals, g, sink| {
            let spatial: usize = vals[owned[0].0].shape()[1..].iter().product();
            let mut offset = 0usize;
            for (part, &c) in owned.iter().zip(&channels) {
                let len = c * spatial;
                let from = offset;
                offset += len;
                sink.add_with(*part, || {
                    let mut shape = vals[part.0].shape().to_vec();
                    shape[0] = c;
                    Tensor::new(shape, g.data()[from..from + len].to_vec())
                });
            }
        }))
    }

    /// Channels [from, to) of [C, ...].
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Var {
        let src = &self.values[x.0];
        let c = src.shape()[0];
        assert!(from < to && to <= c);
        let spatial: usize = src.shape()[1..].iter().product();
        let mut shape = src.shape().to_vec();
        shape[0] = to - from;
        let t = Tensor::new(shape, src.data()[from * spatial..to * spatial].to_vec());
        self.push(t, &[x], Box::new(move |vals, g, sink| {
            sink.add_with(x, || {
                let mut full = Tensor::zeros(vals[x.0].shape());
                full.data_mut()[from * spatial..to * spatial].copy_from_slice(g.data());
                full
            });
        }))
    }

    /// Broadcast a [C] vector over a spatial grid -> [C, d, h, w].
    pub fn broadcast_vec_spatial(&mut self, v: Var, dims: [usize; 3]) -> Var {
        let src = &self.values[v.0];
        let c = src.shape()[0];
        let n = dims[0] * dims[1] * dims[2];
        let mut data = Vec::with_capacity(c * n);
        for ch in 0..c {
            data.extend(std::iter::repeat(src.data()[ch]).take(n));
        }
        let t = Tensor::new(vec![c, dims[0], dims[1], dims[2]], data);
        self.push(t, &[v], Box::new(move |_, g, sink| {
            sink.add_with(v, || {
                let mut out = Tensor::zeros(&[c]);
                for ch in 0..c {
                    out.data_mut()[ch] = g.data()[ch * n..(ch + 1) * n].iter().sum();
                }
                out
            });
        }))
    }

    /// Top-k softmax attention readout against a fixed memory bank.
    ///
    /// `query_key`: [Ck, d, h, w] (on tape); `bank_keys`: [Ck, M] and
    /// `bank_values`: [Cv, M] are detached constants. Per query position the k
    /// highest-affinity memory positions are kept and their softmax weights
    /// renormalized, which equals a softmax over the selected logits alone.
    pub fn memory_readout(
        &mut self,
        query_key: Var,
        bank_keys: &Tensor,
        bank_values: &Tensor,
        topk: usize,
    ) -> Var {
        let q = &self.values[query_key.0];
        let dims = [q.shape()[1], q.shape()[2], q.shape()[3]];
        let (out, sel, wsel) = readout_fwd(q, bank_keys, bank_values, topk);
        let keys = bank_keys.clone();
        let values = bank_values.clone();
        let t = Tensor::new(
            vec![values.shape()[0], dims[0], dims[1], dims[2]],
            out,
        );
        self.push(t, &[query_key], Box::new(move |vals, g, sink| {
            sink.add_with(query_key, || {
                readout_bwd(&vals[query_key.0], &keys, &values, &sel, &wsel, g)
            });
        }))
    }
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

// ---------------------------------------------------------------------------
// convolution kernels
// ---------------------------------------------------------------------------

fn conv_dims(x: &Tensor, w: &Tensor) -> (usize, usize, usize, usize, usize, usize, i64) {
    let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, wci, "conv3d channel mismatch");
    assert_eq!(w.shape()[3], k);
    assert_eq!(w.shape()[4], k);
    assert!(k % 2 == 1, "conv3d requires odd kernels");
    (ci, d, h, wd, co, k, (k / 2) as i64)
}

/// dst[i] += v * src[i] over the overlap of a shifted row pair.
#[inline]
fn row_axpy(dst: &mut [f64], src: &[f64], v: f64, shift: i64, len: usize) {
    let d0 = (-shift).max(0) as usize;
    let s0 = shift.max(0) as usize;
    let n = len - d0.max(s0);
    let (dst_row, src_row) = (&mut dst[d0..d0 + n], &src[s0..s0 + n]);
    for i in 0..n {
        dst_row[i] += v * src_row[i];
    }
}

/// Σ dst[i] * src[i] over the overlap of a shifted row pair.
#[inline]
fn row_dot(a: &[f64], b: &[f64], shift: i64, len: usize) -> f64 {
    let a0 = (-shift).max(0) as usize;
    let b0 = shift.max(0) as usize;
    let n = len - a0.max(b0);
    let (ra, rb) = (&a[a0..a0 + n], &b[b0..b0 + n]);
    let mut acc = 0.0;
    for i in 0..n {
        acc += ra[i] * rb[i];
    }
    acc
}

pub fn conv3d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (ci, d, h, wd, co, k, r) = conv_dims(x, w);
    let plane = h * wd;
    let vol = d * plane;
    let mut out = vec![0.0f64; co * vol];
    let xdata = x.data();
    let wdata = w.data();
    out.par_chunks_mut(vol).enumerate().for_each(|(oc, out_c)| {
        if let Some(bias) = b {
            let bv = bias.data()[oc];
            out_c.iter_mut().for_each(|o| *o = bv);
        }
        for ic in 0..ci {
            let xc = &xdata[ic * vol..(ic + 1) * vol];
            let wbase = ((oc * ci) + ic) * k * k * k;
            for kz in 0..k {
                let dz = kz as i64 - r;
                for ky in 0..k {
                    let dy = ky as i64 - r;
                    for kx in 0..k {
                        let dx = kx as i64 - r;
                        let v = wdata[wbase + (kz * k + ky) * k + kx];
                        if v == 0.0 {
                            continue;
                        }
                        let z0 = (-dz).max(0) as usize;
                        let z1 = d - dz.max(0) as usize;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = h - dy.max(0) as usize;
                        for z in z0..z1 {
                            let sz = (z as i64 + dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as i64 + dy) as usize;
                                let drow = &mut out_c[z * plane + y * wd..z * plane + y * wd + wd];
                                let srow = &xc[sz * plane + sy * wd..sz * plane + sy * wd + wd];
                                row_axpy(drow, srow, v, dx, wd);
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![co, d, h, wd], out)
}

pub fn conv3d_bwd_x(w: &Tensor, g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let r = (k / 2) as i64;
    let (d, h, wd) = (x_shape[1], x_shape[2], x_shape[3]);
    let plane = h * wd;
    let vol = d * plane;
    let mut dx = vec![0.0f64; ci * vol];
    let gdata = g.data();
    let wdata = w.data();
    dx.par_chunks_mut(vol).enumerate().for_each(|(ic, dx_c)| {
        for oc in 0..co {
            let gc = &gdata[oc * vol..(oc + 1) * vol];
            let wbase = ((oc * ci) + ic) * k * k * k;
            for kz in 0..k {
                let dz = kz as i64 - r;
                for ky in 0..k {
                    let dy = ky as i64 - r;
                    for kx in 0..k {
                        let dx_shift = kx as i64 - r;
                        let v = wdata[wbase + (kz * k + ky) * k + kx];
                        if v == 0.0 {
                            continue;
                        }
                        // dL/dx[u] += w[t] * g[u - t]
                        let z0 = dz.max(0) as usize;
                        let z1 = d - (-dz).max(0) as usize;
                        let y0 = dy.max(0) as usize;
                        let y1 = h - (-dy).max(0) as usize;
                        for z in z0..z1 {
                            let sz = (z as i64 - dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as i64 - dy) as usize;
                                let drow = &mut dx_c[z * plane + y * wd..z * plane + y * wd + wd];
                                let srow = &gc[sz * plane + sy * wd..sz * plane + sy * wd + wd];
                                row_axpy(drow, srow, v, -dx_shift, wd);
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x_shape.to_vec(), dx)
}

pub fn conv3d_bwd_w(x: &Tensor, g: &Tensor, w_shape: &[usize]) -> Tensor {
    let (co, ci, k) = (w_shape[0], w_shape[1], w_shape[2]);
    let r = (k / 2) as i64;
    let (d, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * wd;
    let vol = d * plane;
    let taps = k * k * k;
    let mut dw = vec![0.0f64; co * ci * taps];
    let gdata = g.data();
    let xdata = x.data();
    dw.par_chunks_mut(ci * taps).enumerate().for_each(|(oc, dw_oc)| {
        let gc = &gdata[oc * vol..(oc + 1) * vol];
        for ic in 0..ci {
            let xc = &xdata[ic * vol..(ic + 1) * vol];
            for kz in 0..k {
                let dz = kz as i64 - r;
                for ky in 0..k {
                    let dy = ky as i64 - r;
                    for kx in 0..k {
                        let dx = kx as i64 - r;
                        let mut acc = 0.0;
                        let z0 = (-dz).max(0) as usize;
                        let z1 = d - dz.max(0) as usize;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = h - dy.max(0) as usize;
                        for z in z0..z1 {
                            let sz = (z as i64 + dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as i64 + dy) as usize;
                                let grow = &gc[z * plane + y * wd..z * plane + y * wd + wd];
                                let xrow = &xc[sz * plane + sy * wd..sz * plane + sy * wd + wd];
                                acc += row_dot(grow, xrow, dx, wd);
                            }
                        }
                        dw_oc[ic * taps + (kz * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
    });
    Tensor::new(w_shape.to_vec(), dw)
}

pub fn conv3d_bwd_b(g: &Tensor) -> Tensor {
    let co = g.shape()[0];
    let vol: usize = g.shape()[1..].iter().product();
    let mut db = Tensor::zeros(&[co]);
    for oc in 0..co {
        db.data_mut()[oc] = g.data()[oc * vol..(oc + 1) * vol].iter().sum();
    }
    db
}

// ---------------------------------------------------------------------------
// normalization / pooling / upsampling
// ---------------------------------------------------------------------------

pub struct NormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm_fwd_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, NormStats) {
    let c = x.shape()[0];
    let n = x.numel() / c;
    assert_eq!(gamma.numel(), c);
    assert_eq!(beta.numel(), c);
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: vec![0.0; c],
        inv_std: vec![0.0; c],
    };
    for ch in 0..c {
        let xs = &x.data()[ch * n..(ch + 1) * n];
        let mu = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let (gam, bet) = (gamma.data()[ch], beta.data()[ch]);
        let os = &mut out.data_mut()[ch * n..(ch + 1) * n];
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - mu) * istd * gam + bet;
        }
        stats.mean[ch] = mu;
        stats.inv_std[ch] = istd;
    }
    (out, stats)
}

pub fn instance_norm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    instance_norm_fwd_stats(x, gamma, beta, eps).0
}

fn instance_norm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    stats: &NormStats,
    c: usize,
    n: usize,
) -> (Tensor, Tensor, Tensor) {
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let xs = &x.data()[ch * n..(ch + 1) * n];
        let gs = &g.data()[ch * n..(ch + 1) * n];
        let (mu, istd, gam) = (stats.mean[ch], stats.inv_std[ch], gamma.data()[ch]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (&gv, &xv) in gs.iter().zip(xs) {
            let xhat = (xv - mu) * istd;
            sum_g += gv;
            sum_gx += gv * xhat;
        }
        dbeta.data_mut()[ch] = sum_g;
        dgamma.data_mut()[ch] = sum_gx;
        let mean_dxhat = gam * sum_g / n as f64;
        let mean_dxhat_x = gam * sum_gx / n as f64;
        let ds = &mut dx.data_mut()[ch * n..(ch + 1) * n];
        for ((d, &gv), &xv) in ds.iter_mut().zip(gs).zip(xs) {
            let xhat = (xv - mu) * istd;
            *d = istd * (gam * gv - mean_dxhat - xhat * mean_dxhat_x);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn avg_pool2_fwd(x: &Tensor) -> Tensor {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let xs = &x.data()[ch * d * plane..(ch + 1) * d * plane];
        let os = &mut out.data_mut()[ch * od * oplane..(ch + 1) * od * oplane];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dxx in 0..2 {
                                acc += xs[(2 * z + dz) * plane + (2 * y + dy) * w + 2 * xx + dxx];
                            }
                        }
                    }
                    os[z * oplane + y * ow + xx] = acc / 8.0;
                }
            }
        }
    }
    out
}

fn avg_pool2_bwd(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (c, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut dx = Tensor::zeros(x_shape);
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let gs = &g.data()[ch * od * oplane..(ch + 1) * od * oplane];
        let ds = &mut dx.data_mut()[ch * d * plane..(ch + 1) * d * plane];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = gs[z * oplane + y * ow + xx] / 8.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dxx in 0..2 {
                                ds[(2 * z + dz) * plane + (2 * y + dy) * w + 2 * xx + dxx] = gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample2_fwd(x: &Tensor) -> Tensor {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let xs = &x.data()[ch * d * plane..(ch + 1) * d * plane];
        let os = &mut out.data_mut()[ch * od * oplane..(ch + 1) * od * oplane];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    os[z * oplane + y * ow + xx] = xs[(z / 2) * plane + (y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

fn upsample2_bwd(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (c, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let mut dx = Tensor::zeros(x_shape);
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let gs = &g.data()[ch * od * oplane..(ch + 1) * od * oplane];
        let ds = &mut dx.data_mut()[ch * d * plane..(ch + 1) * d * plane];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    ds[(z / 2) * plane + (y / 2) * w + xx / 2] += gs[z * oplane + y * ow + xx];
                }
            }
        }
    }
    dx
}

pub fn replicate_pad1_fwd(x: &Tensor) -> Tensor {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut out = Tensor::zeros(&[c, pd, ph, pw]);
    for ch in 0..c {
        let xs = &x.data()[ch * d * h * w..(ch + 1) * d * h * w];
        let os = &mut out.data_mut()[ch * pd * ph * pw..(ch + 1) * pd * ph * pw];
        for z in 0..pd {
            let sz = (z.max(1) - 1).min(d - 1);
            for y in 0..ph {
                let sy = (y.max(1) - 1).min(h - 1);
                for xx in 0..pw {
                    let sx = (xx.max(1) - 1).min(w - 1);
                    os[(z * ph + y) * pw + xx] = xs[(sz * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

fn replicate_pad1_bwd(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (c, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut dx = Tensor::zeros(x_shape);
    for ch in 0..c {
        let gs = &g.data()[ch * pd * ph * pw..(ch + 1) * pd * ph * pw];
        let ds = &mut dx.data_mut()[ch * d * h * w..(ch + 1) * d * h * w];
        for z in 0..pd {
            let sz = (z.max(1) - 1).min(d - 1);
            for y in 0..ph {
                let sy = (y.max(1) - 1).min(h - 1);
                for xx in 0..pw {
                    let sx = (xx.max(1) - 1).min(w - 1);
                    ds[(sz * h + sy) * w + sx] += gs[(z * ph + y) * pw + xx];
                }
            }
        }
    }
    dx
}

pub fn crop1_fwd(x: &Tensor) -> Tensor {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(d > 2 && h > 2 && w > 2, "crop1 needs dims > 2");
    let (cd, chh, cw) = (d - 2, h - 2, w - 2);
    let mut out = Tensor::zeros(&[c, cd, chh, cw]);
    for ch in 0..c {
        let xs = &x.data()[ch * d * h * w..(ch + 1) * d * h * w];
        let os = &mut out.data_mut()[ch * cd * chh * cw..(ch + 1) * cd * chh * cw];
        for z in 0..cd {
            for y in 0..chh {
                for xx in 0..cw {
                    os[(z * chh + y) * cw + xx] = xs[((z + 1) * h + y + 1) * w + xx + 1];
                }
            }
        }
    }
    out
}

fn scatter_interior(dst: &mut [f64], g: &[f64], src_shape: &[usize]) {
    let (c, d, h, w) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
    let (cd, chh, cw) = (d - 2, h - 2, w - 2);
    for ch in 0..c {
        let gs = &g[ch * cd * chh * cw..(ch + 1) * cd * chh * cw];
        let ds = &mut dst[ch * d * h * w..(ch + 1) * d * h * w];
        for z in 0..cd {
            for y in 0..chh {
                for xx in 0..cw {
                    ds[((z + 1) * h + y + 1) * w + xx + 1] = gs[(z * chh + y) * cw + xx];
                }
            }
        }
    }
}

pub fn concat_channels_fwd(parts: &[&Tensor]) -> Tensor {
    let spatial = &parts[0].shape()[1..];
    let mut c_total = 0;
    for p in parts {
        assert_eq!(&p.shape()[1..], spatial, "concat spatial mismatch");
        c_total += p.shape()[0];
    }
    let mut shape = vec![c_total];
    shape.extend_from_slice(spatial);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

// ---------------------------------------------------------------------------
// top-k attention readout
// ---------------------------------------------------------------------------

/// Forward pass of the top-k readout. Returns the output data in
/// [Cv, N] layout plus the selected memory indices and renormalized weights
/// per query position (needed by the backward pass).
pub fn readout_fwd(
    query_key: &Tensor,
    bank_keys: &Tensor,
    bank_values: &Tensor,
    topk: usize,
) -> (Vec<f64>, Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let ck = query_key.shape()[0];
    let n: usize = query_key.shape()[1..].iter().product();
    assert_eq!(bank_keys.shape()[0], ck, "key channel mismatch");
    let m = bank_keys.shape()[1];
    let cv = bank_values.shape()[0];
    assert_eq!(bank_values.shape()[1], m);
    assert!(m > 0, "readout over empty bank");
    let k = topk.max(1).min(m);

    let q = query_key.data();
    let km = bank_keys.data();
    let vm = bank_values.data();

    let per_query: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            // logits_i = k_i^M . k_j^Q
            let mut logits = vec![0.0f64; m];
            for c in 0..ck {
                let qv = q[c * n + j];
                let krow = &km[c * m..(c + 1) * m];
                for (l, &kv) in logits.iter_mut().zip(krow) {
                    *l += qv * kv;
                }
            }
            // top-k by logit, ties broken toward lower memory index
            let mut idx: Vec<u32> = (0..m as u32).collect();
            if k < m {
                idx.select_nth_unstable_by(k - 1, |&a, &b| {
                    logits[b as usize]
                        .partial_cmp(&logits[a as usize])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                idx.truncate(k);
            }
            idx.sort_unstable();
            // softmax over the selected logits (max-subtracted)
            let mx = idx
                .iter()
                .map(|&i| logits[i as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut wts: Vec<f64> = idx.iter().map(|&i| (logits[i as usize] - mx).exp()).collect();
            let z: f64 = wts.iter().sum();
            for w in &mut wts {
                *w /= z;
            }
            let mut col = vec![0.0f64; cv];
            for (t, &i) in idx.iter().enumerate() {
                let wt = wts[t];
                for c in 0..cv {
                    col[c] += wt * vm[c * m + i as usize];
                }
            }
            (idx, wts, col)
        })
        .collect();

    let mut out = vec![0.0f64; cv * n];
    let mut sel = Vec::with_capacity(n);
    let mut wsel = Vec::with_capacity(n);
    for (j, (idx, wts, col)) in per_query.into_iter().enumerate() {
        for c in 0..cv {
            out[c * n + j] = col[c];
        }
        sel.push(idx);
        wsel.push(wts);
    }
    (out, sel, wsel)
}

fn readout_bwd(
    query_key: &Tensor,
    bank_keys: &Tensor,
    bank_values: &Tensor,
    sel: &[Vec<u32>],
    wsel: &[Vec<f64>],
    g: &Tensor,
) -> Tensor {
    let ck = query_key.shape()[0];
    let n: usize = query_key.shape()[1..].iter().product();
    let m = bank_keys.shape()[1];
    let cv = bank_values.shape()[0];
    let km = bank_keys.data();
    let vm = bank_values.data();
    let gd = g.data();

    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let idx = &sel[j];
            let wts = &wsel[j];
            // a_t = g_col . v_t, then softmax backward over selected logits
            let mut a = vec![0.0f64; idx.len()];
            for (t, &i) in idx.iter().enumerate() {
                let mut acc = 0.0;
                for c in 0..cv {
                    acc += gd[c * n + j] * vm[c * m + i as usize];
                }
                a[t] = acc;
            }
            let s: f64 = wts.iter().zip(&a).map(|(&w, &av)| w * av).sum();
            let mut dq = vec![0.0f64; ck];
            for (t, &i) in idx.iter().enumerate() {
                let dlogit = wts[t] * (a[t] - s);
                for (c, dqc) in dq.iter_mut().enumerate() {
                    *dqc += dlogit * km[c * m + i as usize];
                }
            }
            dq
        })
        .collect();

    let mut dq_full = Tensor::zeros(query_key.shape());
    for (j, col) in cols.into_iter().enumerate() {
        for (c, v) in col.into_iter().enumerate() {
            dq_full.data_mut()[c * n + j] = v;
        }
    }
    dq_full
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of scalar-valued builder at every coordinate
    /// of one designated leaf.
    fn fd_check(
        build: impl Fn(&mut Tape, Tensor) -> (Var, Var),
        x0: Tensor,
        step: f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let (leaf, root) = build(&mut tape, x0.clone());
        let grads = tape.backward(root);
        let analytic = grads[leaf.0].as_ref().expect("leaf grad").clone();

        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += step;
            let mut tp = Tape::new();
            let (_, rp) = build(&mut tp, xp);
            let fp = tp.value(rp).item();

            let mut xm = x0.clone();
            xm.data_mut()[i] -= step;
            let mut tm = Tape::new();
            let (_, rm) = build(&mut tm, xm);
            let fm = tm.value(rm).item();

            let fd = (fp - fm) / (2.0 * step);
            let an = analytic.data()[i];
            // floor the denominator: below ~1e-3 the central difference is
            // dominated by f64 roundoff (f·eps/step), not by the gradient
            let denom = an.abs().max(fd.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / denom < tol,
                "coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut r = rng(0);
        let x0 = Tensor::uniform(&[2, 3, 3, 3], 0.2, 0.9, &mut r);
        fd_check(
            |tape, x| {
                let v = tape.leaf(x, true);
                let a = tape.logistic(v);
                let b = tape.ln(a);
                let c = tape.abs(b);
                let d = tape.sqrt(c);
                let s = tape.mean(d);
                (v, s)
            },
            x0,
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn binary_op_gradients() {
        let mut r = rng(1);
        let x0 = Tensor::uniform(&[10], 0.5, 1.5, &mut r);
        let other = Tensor::uniform(&[10], 0.5, 1.5, &mut r);
        fd_check(
            |tape, x| {
                let v = tape.leaf(x, true);
                let c = tape.constant(other.clone());
                let m = tape.mul(v, c);
                let d = tape.div(m, v);
                let s = tape.sub(m, d);
                let a = tape.add(s, v);
                let sum = tape.sum(a);
                (v, sum)
            },
            x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn conv3d_gradient_wrt_input_and_weight() {
        let mut r = rng(2);
        let x0 = Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut r);
        let w0 = Tensor::uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut r);
        let b0 = Tensor::uniform(&[3], -0.1, 0.1, &mut r);

        // grad wrt x
        let wc = w0.clone();
        let bc = b0.clone();
        fd_check(
            move |tape, x| {
                let xv = tape.leaf(x, true);
                let wv = tape.constant(wc.clone());
                let bv = tape.constant(bc.clone());
                let y = tape.conv3d(xv, wv, Some(bv));
                let sq = tape.mul(y, y);
                let s = tape.sum(sq);
                (xv, s)
            },
            x0.clone(),
            1e-5,
            1e-4,
        );

        // grad wrt w (exercised by swapping which tensor is the leaf)
        let xc = x0;
        let bc2 = b0;
        fd_check(
            move |tape, w| {
                let xv = tape.constant(xc.clone());
                let wv = tape.leaf(w, true);
                let bv = tape.leaf(bc2.clone(), true);
                let y = tape.conv3d(xv, wv, Some(bv));
                let sq = tape.mul(y, y);
                let s = tape.sum(sq);
                (wv, s)
            },
            w0,
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn conv3d_1x1_matches_channel_mix() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[2, 3, 1, 1, 1], -1.0, 1.0, &mut r);
        let y = conv3d_fwd(&x, &w, None);
        // hand-computed mix at one voxel
        let v = 5; // arbitrary voxel
        for oc in 0..2 {
            let mut expect = 0.0;
            for ic in 0..3 {
                expect += w.data()[oc * 3 + ic] * x.data()[ic * 8 + v];
            }
            assert!((y.data()[oc * 8 + v] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_gradients() {
        let mut r = rng(4);
        let x0 = Tensor::uniform(&[2, 3, 3, 3], -2.0, 2.0, &mut r);
        let gam = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
        let bet = Tensor::uniform(&[2], -0.5, 0.5, &mut r);
        let gam2 = gam.clone();
        let bet2 = bet.clone();
        fd_check(
            move |tape, x| {
                let xv = tape.leaf(x, true);
                let gv = tape.leaf(gam2.clone(), true);
                let bv = tape.leaf(bet2.clone(), true);
                let y = tape.instance_norm(xv, gv, bv, 1e-5);
                let sq = tape.mul(y, y);
                let s = tape.sum(sq);
                (xv, s)
            },
            x0.clone(),
            1e-5,
            1e-4,
        );
        // gamma path
        fd_check(
            move |tape, g| {
                let xv = tape.constant(x0.clone());
                let gv = tape.leaf(g, true);
                let bv = tape.leaf(bet.clone(), true);
                let y = tape.instance_norm(xv, gv, bv, 1e-5);
                let sq = tape.mul(y, y);
                let s = tape.sum(sq);
                (gv, s)
            },
            gam,
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn pool_upsample_concat_slice_broadcast_gradients() {
        let mut r = rng(5);
        let x0 = Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut r);
        fd_check(
            |tape, x| {
                let xv = tape.leaf(x, true);
                let p = tape.avg_pool2(xv);
                let u = tape.upsample2(p);
                let cat = tape.concat_channels(&[u, xv]);
                let sl = tape.slice_channels(cat, 1, 3);
                let sq = tape.mul(sl, sl);
                let s = tape.sum(sq);
                (xv, s)
            },
            x0,
            1e-5,
            1e-5,
        );

        let v0 = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        fd_check(
            |tape, v| {
                let vv = tape.leaf(v, true);
                let b = tape.broadcast_vec_spatial(vv, [2, 2, 2]);
                let sq = tape.mul(b, b);
                let s = tape.sum(sq);
                (vv, s)
            },
            v0,
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn replicate_pad_and_crop_gradients() {
        let mut r = rng(9);
        let x0 = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
        fd_check(
            |tape, x| {
                let xv = tape.leaf(x, true);
                let p = tape.replicate_pad1(xv);
                let sq = tape.mul(p, p);
                let c = tape.crop1(sq);
                let s = tape.sum(c);
                (xv, s)
            },
            x0.clone(),
            1e-6,
            1e-6,
        );
        // shape round trip
        let mut tape = Tape::new();
        let xv = tape.constant(x0.clone());
        let p = tape.replicate_pad1(xv);
        assert_eq!(tape.value(p).shape(), &[2, 5, 5, 5]);
        let c = tape.crop1(p);
        assert_eq!(tape.value(c), &x0);
        // constant field stays constant after padding
        let flat = tape.constant(Tensor::full(&[1, 2, 2, 2], 0.3));
        let fp = tape.replicate_pad1(flat);
        assert!(tape.value(fp).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn relu_clamp_gradients_away_from_kinks() {
        let mut r = rng(6);
        // keep samples away from 0 and clamp edges so FD is valid
        let x0 = Tensor::new(
            vec![8],
            (0..8)
                .map(|_| {
                    let v: f64 = Tensor::uniform(&[1], 0.1, 0.9, &mut r).item();
                    if v > 0.5 {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        );
        fd_check(
            |tape, x| {
                let xv = tape.leaf(x, true);
                let rl = tape.relu(xv);
                let cl = tape.clamp(rl, 0.05, 0.85);
                let s = tape.sum(cl);
                (xv, s)
            },
            x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn readout_gradient_wrt_query() {
        let mut r = rng(7);
        let q0 = Tensor::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut r);
        let keys = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut r);
        let vals = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut r);
        let keys2 = keys.clone();
        let vals2 = vals.clone();
        fd_check(
            move |tape, q| {
                let qv = tape.leaf(q, true);
                let ro = tape.memory_readout(qv, &keys2, &vals2, 3);
                let sq = tape.mul(ro, ro);
                let s = tape.sum(sq);
                (qv, s)
            },
            q0,
            1e-6,
            1e-3,
        );
    }

    #[test]
    fn readout_full_k_equals_dense_softmax() {
        let mut r = rng(8);
        let q = Tensor::uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut r);
        let keys = Tensor::uniform(&[2, 5], -1.0, 1.0, &mut r);
        let vals = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let (out, _, _) = readout_fwd(&q, &keys, &vals, 5);
        // dense softmax per query column
        let n = 8;
        let m = 5;
        for j in 0..n {
            let mut logits = vec![0.0; m];
            for i in 0..m {
                for c in 0..2 {
                    logits[i] += keys.data()[c * m + i] * q.data()[c * n + j];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..3 {
                let mut expect = 0.0;
                for i in 0..m {
                    expect += exps[i] / z * vals.data()[c * m + i];
                }
                assert!((out[c * n + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        // f = x*x uses the same var twice; d/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x);
        let grads = tape.backward(y);
        assert_eq!(grads[x.0].as_ref().unwrap().item(), 6.0);
    }
}
