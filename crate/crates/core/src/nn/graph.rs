//! Reverse-mode tape over the handful of ops the denoiser needs.
//!
//! A [`Graph`] records every op applied to its nodes. Parameters live in a
//! separate [`ParamStore`]; `backward` adds (`+=`) into their gradients, so
//! several backward passes accumulate until the caller zeroes them.
//!
//! Nodes may carry a single-channel validity mask (`N×1×H×W`, 0/1 values)
//! that partial convolutions consume and update.

use rayon::prelude::*;

use super::conv::{col2im_masked, im2col, window_counts, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Weights and hyper-parameters of one partial convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartialConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl PartialConv {
    /// Adds a Xavier-initialized `c_in → c_out` layer to `store`.
    pub fn new<T: Real, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel size {k} must be odd")));
        }
        let w = super::params::xavier_uniform([c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out, 1, 1, 1]));
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
        })
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }
}

struct ConvState<T> {
    x: NodeId,
    layer: PartialConv,
    geom: ConvGeom,
    in_mask: Vec<T>,
    /// Per sample im2col matrix of the masked input.
    cols: Vec<Vec<T>>,
    /// Per sample renormalization factor per output pixel, 0 where invalid.
    ratio: Vec<Vec<T>>,
}

enum Op<T> {
    Input,
    Conv(Box<ConvState<T>>),
    Elu { x: NodeId, alpha: T },
    Upsample { x: NodeId, factor: usize },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: T },
    Sum { x: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    mask: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient of input leaves.
    grad: Option<Tensor<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, mask: Option<Vec<T>>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            mask,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients are kept for it when `requires_grad` is set.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, None, Op::Input, requires_grad)
    }

    /// Leaf node with a validity mask of shape `N×1×H×W`.
    pub fn masked_input(&mut self, value: Tensor<T>, mask: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        let [n, _, h, w] = value.shape();
        if mask.shape() != [n, 1, h, w] {
            return Err(Error::Config(format!(
                "mask shape {:?} does not match input {:?}",
                mask.shape(),
                value.shape()
            )));
        }
        Ok(self.push(value, Some(mask.into_vec()), Op::Input, requires_grad))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Validity mask of a node as an `N×1×H×W` tensor (all ones if absent).
    pub fn mask(&self, id: NodeId) -> Tensor<T> {
        let [n, _, h, w] = self.nodes[id.0].value.shape();
        match &self.nodes[id.0].mask {
            Some(m) => Tensor::from_vec([n, 1, h, w], m.clone()).expect("mask shape"),
            None => Tensor::filled([n, 1, h, w], T::one()),
        }
    }

    /// Accumulated gradient of an input leaf.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn mask_or_ones(&self, id: NodeId) -> Vec<T> {
        self.mask(id).into_vec()
    }

    /// Partial convolution with zero padding `k/2`. Padded taps count as
    /// invalid, so outputs are renormalized by `k² / valid taps`.
    pub fn partial_conv(&mut self, store: &ParamStore<T>, x: NodeId, layer: &PartialConv) -> Result<NodeId> {
        let [n, c, h, w] = self.nodes[x.0].value.shape();
        if c != layer.c_in {
            return Err(Error::Config(format!(
                "partial conv expects {} input channels, got {c}",
                layer.c_in
            )));
        }
        let weight = &store.get(layer.weight).value;
        let bias = store.get(layer.bias).value.data();
        if weight.shape() != [layer.c_out, layer.c_in, layer.k, layer.k] {
            return Err(Error::Config("weight shape does not match layer".into()));
        }
        let geom = ConvGeom {
            c_in: c,
            h,
            w,
            k: layer.k,
            stride: layer.stride,
            pad: layer.pad(),
        };
        let (ho, wo) = (geom.h_out(), geom.w_out());
        let np = ho * wo;
        let kk = T::of((layer.k * layer.k) as f64);
        let in_mask = self.mask_or_ones(x);
        let xv = self.nodes[x.0].value.data();
        let plane = h * w;
        let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &xv[s * c * plane..(s + 1) * c * plane];
                let ms = &in_mask[s * plane..(s + 1) * plane];
                let counts = window_counts(ms, &geom);
                let ratio: Vec<T> = counts
                    .iter()
                    .map(|&cnt| if cnt > T::zero() { kk / cnt } else { T::zero() })
                    .collect();
                let mut cols = vec![T::zero(); geom.patch_len() * np];
                im2col(xs, ms, &geom, &mut cols);
                let mut out = vec![T::zero(); layer.c_out * np];
                T::gemm(
                    layer.c_out,
                    geom.patch_len(),
                    np,
                    T::one(),
                    weight.data(),
                    geom.patch_len() as isize,
                    1,
                    &cols,
                    np as isize,
                    1,
                    T::zero(),
                    &mut out,
                    np as isize,
                    1,
                );
                for (o, row) in out.chunks_mut(np).enumerate() {
                    let b = bias[o];
                    for (v, &r) in row.iter_mut().zip(&ratio) {
                        *v = if r > T::zero() { *v * r + b } else { T::zero() };
                    }
                }
                let m_out: Vec<T> = ratio
                    .iter()
                    .map(|&r| if r > T::zero() { T::one() } else { T::zero() })
                    .collect();
                (out, m_out, cols, ratio)
            })
            .collect();
        let mut value = Vec::with_capacity(n * layer.c_out * np);
        let mut mask = Vec::with_capacity(n * np);
        let mut cols = Vec::with_capacity(n);
        let mut ratio = Vec::with_capacity(n);
        for (o, m, cl, r) in per_sample {
            value.extend(o);
            mask.extend(m);
            cols.push(cl);
            ratio.push(r);
        }
        let state = ConvState {
            x,
            layer: *layer,
            geom,
            in_mask,
            cols,
            ratio,
        };
        let value = Tensor::from_vec([n, layer.c_out, ho, wo], value)?;
        Ok(self.push(value, Some(mask), Op::Conv(Box::new(state)), true))
    }

    /// ELU: `x` for `x > 0`, `alpha·(eˣ − 1)` otherwise.
    pub fn elu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let a = T::of(alpha);
        let src = &self.nodes[x.0];
        let data = src
            .value
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { a * (v.exp() - T::one()) })
            .collect();
        let value = Tensor::from_vec(src.value.shape(), data).expect("same shape");
        let mask = src.mask.clone();
        let rg = src.requires_grad;
        self.push(value, mask, Op::Elu { x, alpha: a }, rg)
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let src = &self.nodes[x.0];
        let [n, c, h, w] = src.value.shape();
        let value = upsample_nearest(src.value.data(), n * c, h, w, factor);
        let mask = src.mask.as_ref().map(|m| upsample_nearest(m, n, h, w, factor));
        let rg = src.requires_grad;
        let value = Tensor::from_vec([n, c, h * factor, w * factor], value).expect("shape");
        self.push(value, mask, Op::Upsample { x, factor }, rg)
    }

    /// Channel concatenation; the mask is the union of both masks.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [na, ca, ha, wa] = self.nodes[a.0].value.shape();
        let [nb, cb, hb, wb] = self.nodes[b.0].value.shape();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Config(format!(
                "cannot concatenate {:?} and {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for s in 0..na {
            data.extend_from_slice(&va[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&vb[s * cb * plane..(s + 1) * cb * plane]);
        }
        let mask = self.union_mask(a, b);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let value = Tensor::from_vec([na, ca + cb, ha, wa], data)?;
        Ok(self.push(value, mask, Op::Concat { a, b }, rg))
    }

    fn union_mask(&self, a: NodeId, b: NodeId) -> Option<Vec<T>> {
        match (&self.nodes[a.0].mask, &self.nodes[b.0].mask) {
            (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(&p, &q)| p.max(q)).collect()),
            _ => None,
        }
    }

    fn check_same(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::Config(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise sum (residual connection); the mask is the union.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.nodes[a.0].value.shape(), data)?;
        let mask = self.union_mask(a, b);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, mask, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.nodes[a.0].value.shape(), data)?;
        let mask = self.union_mask(a, b);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, mask, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let s = T::of(s);
        let src = &self.nodes[x.0];
        let data = src.value.data().iter().map(|&v| v * s).collect();
        let value = Tensor::from_vec(src.value.shape(), data).expect("same shape");
        let (mask, rg) = (src.mask.clone(), src.requires_grad);
        self.push(value, mask, Op::Scale { x, s }, rg)
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let src = &self.nodes[x.0];
        let total: T = src.value.data().iter().copied().sum();
        let rg = src.requires_grad;
        self.push(Tensor::scalar(total), None, Op::Sum { x }, rg)
    }

    /// Back-propagate from a scalar root with seed 1.
    pub fn backward(&mut self, store: &mut ParamStore<T>, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.backward_with(store, root, Tensor::scalar(T::one()))
    }

    /// Back-propagate an explicit upstream gradient `dL/d root`.
    pub fn backward_with(&mut self, store: &mut ParamStore<T>, root: NodeId, upstream: Tensor<T>) -> Result<()> {
        if upstream.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::Usage(format!(
                "upstream gradient shape {:?} does not match node {:?}",
                upstream.shape(),
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(upstream.into_vec());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(store, i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(
        &mut self,
        store: &mut ParamStore<T>,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, f: impl FnOnce(&mut Vec<T>), len: usize) {
            let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        }
        let node = &self.nodes[i];
        let len_of = |id: NodeId| self.nodes[id.0].value.numel();
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Input => {
                let shape = node.value.shape();
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(Tensor::from_vec(shape, g)?),
                }
            }
            Op::Elu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let y = node.value.data();
                let xs = self.nodes[x.0].value.data();
                let n = g.len();
                let local: Vec<T> = (0..n)
                    .map(|j| if xs[j] > T::zero() { g[j] } else { g[j] * (y[j] + alpha) })
                    .collect();
                acc(grads, x, |s| s.iter_mut().zip(&local).for_each(|(a, &b)| *a += b), n);
            }
            Op::Scale { x, s } => {
                let (x, s) = (*x, *s);
                acc(grads, x, |v| v.iter_mut().zip(&g).for_each(|(a, &b)| *a += b * s), g.len());
            }
            Op::Sum { x } => {
                let x = *x;
                let n = len_of(x);
                let g0 = g[0];
                acc(grads, x, |v| v.iter_mut().for_each(|a| *a += g0), n);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let n = g.len();
                if rg(a) {
                    acc(grads, a, |v| v.iter_mut().zip(&g).for_each(|(p, &q)| *p += q), n);
                }
                if rg(b) {
                    acc(grads, b, |v| v.iter_mut().zip(&g).for_each(|(p, &q)| *p += q), n);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let n = g.len();
                let va = self.nodes[a.0].value.data().to_vec();
                let vb = self.nodes[b.0].value.data().to_vec();
                if rg(a) {
                    acc(grads, a, |v| (0..n).for_each(|j| v[j] += g[j] * vb[j]), n);
                }
                if rg(b) {
                    acc(grads, b, |v| (0..n).for_each(|j| v[j] += g[j] * va[j]), n);
                }
            }
            Op::Upsample { x, factor } => {
                let (x, f) = (*x, *factor);
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let (ho, wo) = (h * f, w * f);
                let local_len = n * c * h * w;
                acc(
                    grads,
                    x,
                    |v| {
                        for p in 0..n * c {
                            for y in 0..ho {
                                for xx in 0..wo {
                                    v[p * h * w + (y / f) * w + xx / f] += g[p * ho * wo + y * wo + xx];
                                }
                            }
                        }
                    },
                    local_len,
                );
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let [n, ca, h, w] = self.nodes[a.0].value.shape();
                let cb = self.nodes[b.0].value.shape()[1];
                let plane = h * w;
                let ct = ca + cb;
                if rg(a) {
                    acc(
                        grads,
                        a,
                        |v| {
                            for s in 0..n {
                                let src = &g[s * ct * plane..(s * ct + ca) * plane];
                                v[s * ca * plane..(s + 1) * ca * plane]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(p, &q)| *p += q);
                            }
                        },
                        n * ca * plane,
                    );
                }
                if rg(b) {
                    acc(
                        grads,
                        b,
                        |v| {
                            for s in 0..n {
                                let src = &g[(s * ct + ca) * plane..(s + 1) * ct * plane];
                                v[s * cb * plane..(s + 1) * cb * plane]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(p, &q)| *p += q);
                            }
                        },
                        n * cb * plane,
                    );
                }
            }
            Op::Conv(state) => {
                let x = state.x;
                let x_rg = rg(x);
                let x_len = len_of(x);
                let (dw, db, dx) = conv_backward(state, store, &g, x_rg);
                let layer = state.layer;
                store
                    .get_mut(layer.weight)
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(&dw)
                    .for_each(|(a, &b)| *a += b);
                store
                    .get_mut(layer.bias)
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(&db)
                    .for_each(|(a, &b)| *a += b);
                if let Some(dx) = dx {
                    acc(grads, x, |v| v.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b), x_len);
                }
            }
        }
        Ok(())
    }
}

fn upsample_nearest<T: Real>(src: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            let row = &s[(y / f) * w..(y / f + 1) * w];
            for x in 0..wo {
                out.push(row[x / f]);
            }
        }
    }
    out
}

/// Returns `(dW, db, dx)`; per-sample partial sums are reduced in sample
/// order so results do not depend on the thread count.
fn conv_backward<T: Real>(
    state: &ConvState<T>,
    store: &ParamStore<T>,
    g: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let geom = state.geom;
    let layer = state.layer;
    let np = geom.out_pixels();
    let kp = geom.patch_len();
    let n = state.cols.len();
    let weight = store.get(layer.weight).value.data();
    let plane = geom.h * geom.w;
    let parts: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let gs = &g[s * layer.c_out * np..(s + 1) * layer.c_out * np];
            let ratio = &state.ratio[s];
            let mut db = vec![T::zero(); layer.c_out];
            let mut gr = vec![T::zero(); layer.c_out * np];
            for o in 0..layer.c_out {
                let row = &gs[o * np..(o + 1) * np];
                let dst = &mut gr[o * np..(o + 1) * np];
                let mut acc = T::zero();
                for p in 0..np {
                    if ratio[p] > T::zero() {
                        acc += row[p];
                        dst[p] = row[p] * ratio[p];
                    }
                }
                db[o] = acc;
            }
            let mut dw = vec![T::zero(); layer.c_out * kp];
            // dW = gr · colsᵀ
            T::gemm(
                layer.c_out,
                np,
                kp,
                T::one(),
                &gr,
                np as isize,
                1,
                &state.cols[s],
                1,
                np as isize,
                T::zero(),
                &mut dw,
                kp as isize,
                1,
            );
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::zero(); kp * np];
                // dcols = Wᵀ · gr
                T::gemm(
                    kp,
                    layer.c_out,
                    np,
                    T::one(),
                    weight,
                    1,
                    kp as isize,
                    &gr,
                    np as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    np as isize,
                    1,
                );
                let mut dx = vec![T::zero(); geom.c_in * plane];
                col2im_masked(&dcols, &state.in_mask[s * plane..(s + 1) * plane], &geom, &mut dx);
                dx
            });
            (dw, db, dx)
        })
        .collect();
    let mut dw = vec![T::zero(); layer.c_out * kp];
    let mut db = vec![T::zero(); layer.c_out];
    let mut dx = need_dx.then(|| Vec::with_capacity(n * geom.c_in * plane));
    for (pw, pb, px) in parts {
        dw.iter_mut().zip(&pw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a += b);
        if let (Some(all), Some(px)) = (dx.as_mut(), px) {
            all.extend(px);
        }
    }
    (dw, db, dx)
}
