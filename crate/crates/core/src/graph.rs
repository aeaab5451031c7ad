//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`], which also records the access so callers can
//! prove which leaves a computation touched. [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node that needs one.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed lift-splat geometry: for every `(unit, bin, pixel)` the flat
/// destination `sample * H * W + cell`, or [`SplatPlan::NONE`] when the
/// lifted point falls outside the BEV grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPlan {
    pub units: usize,
    pub bins: usize,
    pub pixels: usize,
    pub samples: usize,
    pub bev_h: usize,
    pub bev_w: usize,
    pub dest: Vec<u32>,
}

impl SplatPlan {
    pub const NONE: u32 = u32::MAX;
}

/// Pillar scatter geometry: flat destination `sample * H * W + cell` per
/// kept point.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarPlan {
    pub samples: usize,
    pub bev_h: usize,
    pub bev_w: usize,
    pub dest: Vec<u32>,
}

enum Op<T> {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Mean {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Upsample2x(Var),
    LiftSplat {
        feat: Var,
        prob: Var,
        plan: Arc<SplatPlan>,
    },
    PillarMax {
        emb: Var,
        argmax: Vec<u32>,
    },
    Focal {
        logits: Var,
        dlogits: Vec<T>,
    },
    L1Masked {
        pred: Var,
        dpred: Vec<T>,
    },
    InfoNce {
        rgb: Var,
        dep: Var,
        drgb: Vec<T>,
        ddep: Vec<T>,
    },
    Sum(Var),
    Dot {
        x: Var,
        c: Arc<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    touched: BTreeSet<ParamId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Public scalar sigmoid shared with decoding.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    sigmoid(x)
}

/// Outer/axis/inner split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("broadcast rank {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a, b)))
            }
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for o in 0..n {
        f(o, ai, bi);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ai -= sa[d] * out[d];
            bi -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to `shape` along broadcast axes.
fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut r = Tensor::zeros(shape);
    let s = bcast_strides(shape, g.shape());
    let zero = vec![0; shape.len()];
    let gd = g.data();
    let rd = r.data_mut();
    for_each_bcast(g.shape(), &s, &zero, |o, ri, _| rd[ri] += gd[o]);
    r
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw_o = ho * wo;
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw_o = ho * wo;
    for c in 0..cin {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvGeom {
    fn direct(&self, stride: usize, pad: usize) -> bool {
        self.k == 1 && stride == 1 && pad == 0
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            touched: BTreeSet::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters loaded into this graph so far.
    pub fn touched(&self) -> &BTreeSet<ParamId> {
        &self.touched
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Constant input that still receives a gradient (for input-gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Loads a parameter leaf. Frozen leaves enter without a gradient slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.touched.insert(id);
        let leaf = store.leaf(id);
        let v = self.push(leaf.value.clone(), Op::Param, leaf.trainable);
        self.params.insert(id, v);
        v
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {:?} weight {:?}", xs, ws)));
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::Shape(format!(
                "conv2d channels: input {cin}, weight {:?}, groups {groups}",
                ws
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("conv2d kernel {k} too large for {h}x{wd}")));
        }
        Ok(ConvGeom {
            b,
            cin,
            h,
            w: wd,
            cout,
            k,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
            cin_g,
            cout_g: cout / groups,
        })
    }

    /// 2-D convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin/groups, k, k]`,
    /// optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, pad, groups)?;
        if let Some(bv) = b {
            if self.shape(bv) != [g.cout] {
                return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(bv))));
            }
        }
        let hw_o = g.ho * g.wo;
        let kk = g.cin_g * g.k * g.k;
        let mut out = Tensor::zeros(&[g.b, g.cout, g.ho, g.wo]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let od = out.data_mut();
            let direct = g.direct(stride, pad);
            let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * hw_o] };
            for bi in 0..g.b {
                for gi in 0..groups {
                    let xs = &xd[(bi * g.cin + gi * g.cin_g) * g.h * g.w..][..g.cin_g * g.h * g.w];
                    let cols_ref: &[T] = if direct {
                        xs
                    } else {
                        im2col(xs, g.cin_g, g.h, g.w, g.k, stride, pad, g.ho, g.wo, &mut cols);
                        &cols
                    };
                    let wg = &wd[gi * g.cout_g * kk..(gi + 1) * g.cout_g * kk];
                    let og = &mut od[(bi * g.cout + gi * g.cout_g) * hw_o..][..g.cout_g * hw_o];
                    gemm(g.cout_g, kk, hw_o, wg, false, cols_ref, false, og, false);
                }
            }
            if let Some(bv) = b {
                let bd = self.value(bv).data();
                for bi in 0..g.b {
                    for c in 0..g.cout {
                        let o = &mut od[(bi * g.cout + c) * hw_o..][..hw_o];
                        o.iter_mut().for_each(|v| *v += bd[c]);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|bv| self.ng(bv));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            },
            ng,
        ))
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (av, bv) = (self.value(a), self.value(b));
            let (ad, bd) = (av.data(), bv.data());
            let od = out.data_mut();
            if av.shape() == bv.shape() {
                for ((o, &x), &y) in od.iter_mut().zip(ad).zip(bd) {
                    *o = if mul { x * y } else { x + y };
                }
            } else {
                let sa = bcast_strides(av.shape(), &out_shape);
                let sb = bcast_strides(bv.shape(), &out_shape);
                for_each_bcast(&out_shape, &sa, &sb, |o, i, j| {
                    od[o] = if mul { ad[i] * bd[j] } else { ad[i] + bd[j] };
                });
            }
        }
        let ng = self.ng(a) || self.ng(b);
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(out, op, ng))
    }

    /// Elementwise sum with size-1 broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with size-1 broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, k }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Normalizes over axis 1 (channels) at every other index, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::Shape(format!(
                "layer_norm needs rank >= 2, got {:?}",
                xv.shape()
            )));
        }
        let (outer, c, inner) = split_axis(xv.shape(), 1);
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_std = vec![T::zero(); outer * inner];
        let xd = xv.data();
        let od = out.data_mut();
        let cf = T::of(c as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<T>() / cf;
                let var = (0..c)
                    .map(|ch| {
                        let d = xd[at(ch)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / cf;
                let is = T::one() / (var + T::of(eps)).sqrt();
                inv_std[o * inner + i] = is;
                for ch in 0..c {
                    od[at(ch)] = (xd[at(ch)] - mean) * is;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, ng))
    }

    /// Softmax over axis 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::Shape(format!("softmax needs rank >= 2, got {:?}", xv.shape())));
        }
        let (outer, c, inner) = split_axis(xv.shape(), 1);
        let mut out = Tensor::zeros(xv.shape());
        let xd = xv.data();
        let od = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let m = (0..c).map(|ch| xd[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (xd[at(ch)] - m).exp();
                    od[at(ch)] = e;
                    s += e;
                }
                for ch in 0..c {
                    od[at(ch)] = od[at(ch)] / s;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Shape(format!("mean axis {axis} of {:?}", xv.shape())));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let mut out = Tensor::zeros(&shape);
        let xd = xv.data();
        let od = out.data_mut();
        let nf = T::of(n as f64);
        for o in 0..outer {
            for i in 0..inner {
                let s: T = (0..n).map(|j| xd[(o * n + j) * inner + i]).sum();
                od[o * inner + i] = s / nf;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Mean { x, axis }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?)
            .to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Shape(format!("concat {:?} with {:?} on axis {axis}", s, first)));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Tensor::zeros(&shape);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let n = pv.shape()[axis];
            let pd = pv.data();
            let od = out.data_mut();
            for o in 0..outer {
                od[(o * total + off) * inner..(o * total + off + n) * inner]
                    .copy_from_slice(&pd[o * n * inner..(o + 1) * n * inner]);
            }
            off += n;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} on axis {axis} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut out = Tensor::zeros(&shape);
        let xd = xv.data();
        let od = out.data_mut();
        for o in 0..outer {
            od[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::Shape(format!("upsample2x of {:?}", xv.shape())));
        }
        let (b, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        let xd = xv.data();
        let od = out.data_mut();
        for p in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Upsample2x(x), ng))
    }

    /// Weights every pixel feature by its per-bin depth probability and
    /// sum-pools the products into BEV cells. `feat: [U, C, h, w]`,
    /// `prob: [U, D, h, w]`, output `[samples, C, bev_h, bev_w]`.
    pub fn lift_splat(&mut self, feat: Var, prob: Var, plan: Arc<SplatPlan>) -> Result<Var> {
        let (fu, c, fh, fw) = self.value(feat).dims4();
        let (pu, d, ph, pw) = self.value(prob).dims4();
        if fu != pu
            || fh != ph
            || fw != pw
            || fu != plan.units
            || d != plan.bins
            || fh * fw != plan.pixels
            || plan.dest.len() != plan.units * plan.bins * plan.pixels
        {
            return Err(Error::Shape(format!(
                "lift_splat feat {:?} prob {:?} plan units={} bins={} pixels={}",
                self.shape(feat),
                self.shape(prob),
                plan.units,
                plan.bins,
                plan.pixels
            )));
        }
        let cells = plan.bev_h * plan.bev_w;
        let mut out = Tensor::zeros(&[plan.samples, c, plan.bev_h, plan.bev_w]);
        {
            let fd = self.value(feat).data();
            let pd = self.value(prob).data();
            let od = out.data_mut();
            let px = plan.pixels;
            for u in 0..fu {
                for k in 0..d {
                    for p in 0..px {
                        let dest = plan.dest[(u * d + k) * px + p];
                        if dest == SplatPlan::NONE {
                            continue;
                        }
                        let (s, cell) = (dest as usize / cells, dest as usize % cells);
                        let wgt = pd[(u * d + k) * px + p];
                        for ch in 0..c {
                            od[(s * c + ch) * cells + cell] += fd[(u * c + ch) * px + p] * wgt;
                        }
                    }
                }
            }
        }
        let ng = self.ng(feat) || self.ng(prob);
        Ok(self.push(out, Op::LiftSplat { feat, prob, plan }, ng))
    }

    /// Max-pools point embeddings `[N, E]` into pillars and scatters them to
    /// `[samples, E, bev_h, bev_w]`; empty pillars stay 0. Inputs are expected
    /// to be non-negative (post-ReLU).
    pub fn pillar_max(&mut self, emb: Var, plan: &PillarPlan) -> Result<Var> {
        let es = self.shape(emb);
        if es.len() != 2 || es[0] != plan.dest.len() {
            return Err(Error::Shape(format!(
                "pillar_max embedding {:?} for {} points",
                es,
                plan.dest.len()
            )));
        }
        let e = es[1];
        let cells = plan.bev_h * plan.bev_w;
        let mut out = Tensor::zeros(&[plan.samples, e, plan.bev_h, plan.bev_w]);
        let mut argmax = vec![u32::MAX; plan.samples * e * cells];
        {
            let ed = self.value(emb).data();
            let od = out.data_mut();
            for (pt, &dest) in plan.dest.iter().enumerate() {
                let (s, cell) = (dest as usize / cells, dest as usize % cells);
                for ch in 0..e {
                    let o = (s * e + ch) * cells + cell;
                    let v = ed[pt * e + ch];
                    if v > od[o] {
                        od[o] = v;
                        argmax[o] = pt as u32;
                    }
                }
            }
        }
        let ng = self.ng(emb);
        Ok(self.push(out, Op::PillarMax { emb, argmax }, ng))
    }

    /// Penalty-reduced Gaussian focal loss on heatmap logits (alpha=2,
    /// beta=4), normalized by the number of cells whose target is exactly 1.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "focal loss logits {:?} target {:?}",
                lv.shape(),
                target.shape()
            )));
        }
        let lo = T::of(1e-4);
        let hi = T::one() - lo;
        let two = T::of(2.0);
        let npos = target.data().iter().filter(|&&t| t == T::one()).count().max(1);
        let norm = T::of(npos as f64);
        let mut loss = T::zero();
        let mut dlogits = vec![T::zero(); lv.len()];
        for (i, (&x, &t)) in lv.data().iter().zip(target.data()).enumerate() {
            let raw = sigmoid(x);
            let clamped = raw < lo || raw > hi;
            let p = raw.max(lo).min(hi);
            let (l, dp) = if t == T::one() {
                let q = T::one() - p;
                (-(q * q) * p.ln(), two * q * p.ln() - q * q / p)
            } else {
                let nw = (T::one() - t).powi(4);
                let q = T::one() - p;
                (-nw * p * p * q.ln(), -nw * (two * p * q.ln() - p * p / q))
            };
            loss += l;
            if !clamped {
                dlogits[i] = dp * p * (T::one() - p) / norm;
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss / norm), Op::Focal { logits, dlogits }, ng))
    }

    /// Mean absolute error over all channels at masked cells.
    /// `pred`, `target`: `[B, R, H, W]`; `mask`: `[B, 1, H, W]` of 0/1.
    pub fn l1_masked(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.rank() != 4 {
            return Err(Error::Shape(format!(
                "reg loss pred {:?} target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let (b, r, h, w) = pv.dims4();
        if mask.shape() != [b, 1, h, w] {
            return Err(Error::Shape(format!("reg loss mask {:?}", mask.shape())));
        }
        let npos = mask.data().iter().filter(|&&m| m != T::zero()).count();
        let mut dpred = vec![T::zero(); pv.len()];
        if npos == 0 {
            let ng = self.ng(pred);
            return Ok(self.push(Tensor::scalar(T::zero()), Op::L1Masked { pred, dpred }, ng));
        }
        let norm = T::of((npos * r) as f64);
        let mut loss = T::zero();
        let (pd, td, md) = (pv.data(), target.data(), mask.data());
        for bi in 0..b {
            for cell in 0..h * w {
                let m = md[bi * h * w + cell];
                if m == T::zero() {
                    continue;
                }
                for ch in 0..r {
                    let i = (bi * r + ch) * h * w + cell;
                    let diff = pd[i] - td[i];
                    loss += m * diff.abs();
                    let sgn = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    dpred[i] = m * sgn / norm;
                }
            }
        }
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss / norm), Op::L1Masked { pred, dpred }, ng))
    }

    /// Temperature-scaled cross-entropy over cosine similarities between
    /// `rgb[i]` and `dep[j]`; the diagonal pairs are positives. Rows are the
    /// leading axis, everything after it is flattened.
    pub fn info_nce(&mut self, rgb: Var, dep: Var, tau: T, symmetric: bool) -> Result<Var> {
        let (rv, dv) = (self.value(rgb), self.value(dep));
        if rv.shape() != dv.shape() || rv.rank() < 1 || rv.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "align features {:?} vs {:?}",
                rv.shape(),
                dv.shape()
            )));
        }
        if !(tau > T::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let u = rv.shape()[0];
        let l = rv.len() / u;
        let normalize = |d: &[T], what: &str| -> Result<(Vec<T>, Vec<T>)> {
            let mut hat = vec![T::zero(); d.len()];
            let mut norms = vec![T::zero(); u];
            for i in 0..u {
                let row = &d[i * l..(i + 1) * l];
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if !(n.f64() >= 1e-12) {
                    return Err(Error::Degenerate(format!(
                        "{what} vector {i} has norm {n}; cosine similarity undefined"
                    )));
                }
                norms[i] = n;
                for (h, &v) in hat[i * l..(i + 1) * l].iter_mut().zip(row) {
                    *h = v / n;
                }
            }
            Ok((hat, norms))
        };
        let (rh, rn) = normalize(rv.data(), "rgb")?;
        let (dh, dn) = normalize(dv.data(), "depth")?;
        let mut sim = vec![T::zero(); u * u];
        gemm(u, l, u, &rh, false, &dh, true, &mut sim, false);

        // Row-softmax (rgb anchors) and, if symmetric, column-softmax.
        let uf = T::of(u as f64);
        let mut grad_s = vec![T::zero(); u * u];
        let mut loss = T::zero();
        let dirs: &[bool] = if symmetric { &[false, true] } else { &[false] };
        let wdir = T::one() / T::of(dirs.len() as f64);
        for &by_col in dirs {
            for i in 0..u {
                let at = |j: usize| if by_col { j * u + i } else { i * u + j };
                let m = (0..u).map(|j| sim[at(j)] / tau).fold(T::neg_infinity(), T::max);
                let z: T = (0..u).map(|j| (sim[at(j)] / tau - m).exp()).sum();
                let lse = m + z.ln();
                loss += wdir * (lse - sim[at(i)] / tau) / uf;
                for j in 0..u {
                    let p = (sim[at(j)] / tau - m).exp() / z;
                    let delta = if i == j { T::one() } else { T::zero() };
                    grad_s[at(j)] += wdir * (p - delta) / (uf * tau);
                }
            }
        }

        // d sim_ij / d r_i = (dhat_j - sim_ij rhat_i) / |r_i|, symmetric for d.
        let mut drgb = vec![T::zero(); u * l];
        let mut ddep = vec![T::zero(); u * l];
        for i in 0..u {
            for j in 0..u {
                let g = grad_s[i * u + j];
                if g == T::zero() {
                    continue;
                }
                let s = sim[i * u + j];
                let (ri, dj) = (&rh[i * l..(i + 1) * l], &dh[j * l..(j + 1) * l]);
                let gr = g / rn[i];
                let gd = g / dn[j];
                for k in 0..l {
                    drgb[i * l + k] += gr * (dj[k] - s * ri[k]);
                    ddep[j * l + k] += gd * (ri[k] - s * dj[k]);
                }
            }
        }
        let ng = self.ng(rgb) || self.ng(dep);
        Ok(self.push(Tensor::scalar(loss), Op::InfoNce { rgb, dep, drgb, ddep }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `sum(x * c)` for a constant `c` of the same shape; used as a random
    /// scalar probe in gradient checks.
    pub fn dot_const(&mut self, x: Var, c: Arc<Tensor<T>>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape(format!("probe {:?} vs {:?}", self.shape(x), c.shape())));
        }
        let s = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, c }, ng))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Gradients { grads, params }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, *groups, g, grads),
            Op::MatMul { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(&[n, k]);
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        ga.data_mut(),
                        false,
                    );
                    self.accum(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(&[k, m]);
                    gemm(
                        k,
                        n,
                        m,
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        gb.data_mut(),
                        false,
                    );
                    self.accum(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        let r = reduce_to(g, self.shape(v));
                        self.accum(grads, v, r);
                    }
                }
            }
            Op::Mul { a, b } => {
                let out_shape = g.shape().to_vec();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.ng(v) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod = if ov.shape() == out_shape.as_slice() {
                        let d = g.data().iter().zip(ov.data()).map(|(&x, &y)| x * y).collect();
                        Tensor::from_vec(&out_shape, d).expect("same shape")
                    } else {
                        let mut t = Tensor::zeros(&out_shape);
                        let so = bcast_strides(ov.shape(), &out_shape);
                        let zero = vec![0; out_shape.len()];
                        let (gd, od) = (g.data(), ov.data());
                        let td = t.data_mut();
                        for_each_bcast(&out_shape, &so, &zero, |o, j, _| td[o] = gd[o] * od[j]);
                        t
                    };
                    let r = reduce_to(&prod, self.shape(v));
                    self.accum(grads, v, r);
                }
            }
            Op::Scale { x, k } => {
                let k = *k;
                self.accum(grads, *x, g.map(|v| v * k));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            Op::Gelu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * gelu_parts(xv).1)
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            Op::LayerNorm { x, inv_std } => {
                let (outer, c, inner) = split_axis(out.shape(), 1);
                let mut dx = Tensor::zeros(out.shape());
                let (yd, gd) = (out.data(), g.data());
                let dd = dx.data_mut();
                let cf = T::of(c as f64);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + ii;
                        let mg = (0..c).map(|ch| gd[at(ch)]).sum::<T>() / cf;
                        let mgy = (0..c).map(|ch| gd[at(ch)] * yd[at(ch)]).sum::<T>() / cf;
                        let is = inv_std[o * inner + ii];
                        for ch in 0..c {
                            dd[at(ch)] = is * (gd[at(ch)] - mg - yd[at(ch)] * mgy);
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let (outer, c, inner) = split_axis(out.shape(), 1);
                let mut dx = Tensor::zeros(out.shape());
                let (yd, gd) = (out.data(), g.data());
                let dd = dx.data_mut();
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + ii;
                        let dot = (0..c).map(|ch| gd[at(ch)] * yd[at(ch)]).sum::<T>();
                        for ch in 0..c {
                            dd[at(ch)] = yd[at(ch)] * (gd[at(ch)] - dot);
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let mut dx = Tensor::zeros(xs);
                let nf = T::of(n as f64);
                let (gd, dd) = (g.data(), dx.data_mut());
                for o in 0..outer {
                    for ii in 0..inner {
                        let v = gd[o * inner + ii] / nf;
                        for j in 0..n {
                            dd[(o * n + j) * inner + ii] = v;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut off = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let n = ps[*axis];
                    if self.ng(p) {
                        let mut dp = Tensor::zeros(&ps);
                        let (gd, dd) = (g.data(), dp.data_mut());
                        for o in 0..outer {
                            dd[o * n * inner..(o + 1) * n * inner]
                                .copy_from_slice(&gd[(o * total + off) * inner..(o * total + off + n) * inner]);
                        }
                        self.accum(grads, p, dp);
                    }
                    off += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&xs, *axis);
                let len = out.shape()[*axis];
                let mut dx = Tensor::zeros(&xs);
                let (gd, dd) = (g.data(), dx.data_mut());
                for o in 0..outer {
                    dd[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let r = g.clone().reshaped(self.shape(*x)).expect("same size");
                self.accum(grads, *x, r);
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = self.value(*x).dims4();
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let (gd, dd) = (g.data(), dx.data_mut());
                for p in 0..b * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dd[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::LiftSplat { feat, prob, plan } => {
                let (u, c, _, _) = self.value(*feat).dims4();
                let d = plan.bins;
                let px = plan.pixels;
                let cells = plan.bev_h * plan.bev_w;
                let fd = self.value(*feat).data();
                let pd = self.value(*prob).data();
                let gd = g.data();
                let mut dfeat = Tensor::zeros(self.shape(*feat));
                let mut dprob = Tensor::zeros(self.shape(*prob));
                {
                    let (dfd, dpd) = (dfeat.data_mut(), dprob.data_mut());
                    for ui in 0..u {
                        for k in 0..d {
                            for p in 0..px {
                                let dest = plan.dest[(ui * d + k) * px + p];
                                if dest == SplatPlan::NONE {
                                    continue;
                                }
                                let (s, cell) = (dest as usize / cells, dest as usize % cells);
                                let wgt = pd[(ui * d + k) * px + p];
                                let mut acc = T::zero();
                                for ch in 0..c {
                                    let go = gd[(s * c + ch) * cells + cell];
                                    dfd[(ui * c + ch) * px + p] += go * wgt;
                                    acc += go * fd[(ui * c + ch) * px + p];
                                }
                                dpd[(ui * d + k) * px + p] += acc;
                            }
                        }
                    }
                }
                self.accum(grads, *feat, dfeat);
                self.accum(grads, *prob, dprob);
            }
            Op::PillarMax { emb, argmax } => {
                let es = self.shape(*emb).to_vec();
                let e = es[1];
                let cells = out.shape()[2] * out.shape()[3];
                let mut de = Tensor::zeros(&es);
                let (gd, dd) = (g.data(), de.data_mut());
                for (o, &pt) in argmax.iter().enumerate() {
                    if pt != u32::MAX {
                        let ch = (o / cells) % e;
                        dd[pt as usize * e + ch] += gd[o];
                    }
                }
                self.accum(grads, *emb, de);
            }
            Op::Focal { logits, dlogits } => {
                let s = g.data()[0];
                let d = dlogits.iter().map(|&v| v * s).collect();
                let t = Tensor::from_vec(self.shape(*logits), d).expect("shape");
                self.accum(grads, *logits, t);
            }
            Op::L1Masked { pred, dpred } => {
                let s = g.data()[0];
                let d = dpred.iter().map(|&v| v * s).collect();
                let t = Tensor::from_vec(self.shape(*pred), d).expect("shape");
                self.accum(grads, *pred, t);
            }
            Op::InfoNce { rgb, dep, drgb, ddep } => {
                let s = g.data()[0];
                let tr = Tensor::from_vec(self.shape(*rgb), drgb.iter().map(|&v| v * s).collect()).expect("shape");
                let td = Tensor::from_vec(self.shape(*dep), ddep.iter().map(|&v| v * s).collect()).expect("shape");
                self.accum(grads, *rgb, tr);
                self.accum(grads, *dep, td);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accum(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Dot { x, c } => {
                let s = g.data()[0];
                self.accum(grads, *x, c.map(|v| v * s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let geo = self.conv_geom(x, w, stride, pad, groups).expect("validated in forward");
        let hw_o = geo.ho * geo.wo;
        let kk = geo.cin_g * geo.k * geo.k;
        let gd = g.data();
        if let Some(bv) = b {
            if self.ng(bv) {
                let mut db = Tensor::zeros(&[geo.cout]);
                let dbd = db.data_mut();
                for bi in 0..geo.b {
                    for c in 0..geo.cout {
                        dbd[c] += gd[(bi * geo.cout + c) * hw_o..][..hw_o].iter().copied().sum();
                    }
                }
                self.accum(grads, bv, db);
            }
        }
        let (need_x, need_w) = (self.ng(x), self.ng(w));
        if !need_x && !need_w {
            return;
        }
        let direct = geo.direct(stride, pad);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut dw = Tensor::zeros(self.shape(w));
        let mut dx = Tensor::zeros(self.shape(x));
        let mut cols = vec![T::zero(); if direct { 0 } else { kk * hw_o }];
        let mut dcols = vec![T::zero(); kk * hw_o];
        for bi in 0..geo.b {
            for gi in 0..groups {
                let x_off = (bi * geo.cin + gi * geo.cin_g) * geo.h * geo.w;
                let xs = &xd[x_off..][..geo.cin_g * geo.h * geo.w];
                let gg = &gd[(bi * geo.cout + gi * geo.cout_g) * hw_o..][..geo.cout_g * hw_o];
                let wg = &wd[gi * geo.cout_g * kk..(gi + 1) * geo.cout_g * kk];
                if need_w {
                    let cols_ref: &[T] = if direct {
                        xs
                    } else {
                        im2col(
                            xs, geo.cin_g, geo.h, geo.w, geo.k, stride, pad, geo.ho, geo.wo, &mut cols,
                        );
                        &cols
                    };
                    let dwg = &mut dw.data_mut()[gi * geo.cout_g * kk..(gi + 1) * geo.cout_g * kk];
                    gemm(geo.cout_g, hw_o, kk, gg, false, cols_ref, true, dwg, true);
                }
                if need_x {
                    let dxs = &mut dx.data_mut()[x_off..][..geo.cin_g * geo.h * geo.w];
                    if direct {
                        gemm(kk, geo.cout_g, hw_o, wg, true, gg, false, dxs, true);
                    } else {
                        gemm(kk, geo.cout_g, hw_o, wg, true, gg, false, &mut dcols, false);
                        col2im(&dcols, geo.cin_g, geo.h, geo.w, geo.k, stride, pad, geo.ho, geo.wo, dxs);
                    }
                }
            }
        }
        if need_w {
            self.accum(grads, w, dw);
        }
        if need_x {
            self.accum(grads, x, dx);
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every trainable parameter the graph touched.
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let xv: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let wv: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let x = g.input(t(&[2, 2, 5, 4], &xv));
        let w = g.input(t(&[3, 2, 3, 3], &wv));
        let y = g.conv2d(x, w, None, 2, 1, 1).unwrap();
        let (_, _, ho, wo) = g.value(y).dims4();
        assert_eq!((ho, wo), (3, 2));
        for b in 0..2 {
            for co in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    s += xv[((b * 2 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                        * wv[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        assert!((g.value(y).at4(b, co, oy, ox) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_mul_and_reduce() {
        let mut g = Graph::<f64>::new();
        let a = g.input_with_grad(t(&[1, 2, 3, 1], &[1., 2., 3., 4., 5., 6.]));
        let b = g.input_with_grad(t(&[1, 2, 1, 2], &[1., -1., 2., 0.5]));
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 2]);
        assert_eq!(g.value(y).at4(0, 1, 2, 0), 12.0);
        let s = g.sum(y);
        let gr = g.backward(s);
        // d/da = sum over broadcast axis of b
        assert_eq!(gr.wrt(a).unwrap().data(), &[0., 0., 0., 2.5, 2.5, 2.5]);
        assert_eq!(gr.wrt(b).unwrap().data(), &[6., 6., 15., 15.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 3, 1, 2], &[0.1, -2.0, 3.0, 0.5, 7.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let v = g.value(y);
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| v.at4(0, c, 0, i)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", crate::params::Group::Head, t(&[1], &[2.0]));
        store.set_trainable(id, false);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let x = g.input_with_grad(t(&[1], &[3.0]));
        let y = g.mul(w, x).unwrap();
        let gr = g.backward(y);
        assert!(gr.param(id).is_none());
        assert_eq!(gr.wrt(x).unwrap().data(), &[2.0]);
        assert!(g.touched().contains(&id));
    }
}
