//! Define-by-run reverse-mode differentiation over [`Tensor`] feature maps.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! its output. [`Graph::backward`] walks the tape in reverse and returns
//! parameter gradients. Parameters are referenced by [`ParamId`] and never
//! copied into the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f32 = 1e-5;

enum Op {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        spec: ConvSpec,
    },
    InstanceNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample2x {
        x: Var,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelScale {
        x: Var,
        gate: Var,
    },
    Softmax {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Graph<'p> {
    /// `training` enables dropout; `seed` drives the dropout masks.
    pub fn new(params: &'p ParamStore, training: bool, seed: u64) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, spec: ConvSpec) -> Var {
        let bias = b.map(|b| self.params.get(b).data()).unwrap_or(&[]);
        let y = conv3d_forward(self.value(x), self.params.get(w), bias, spec);
        self.push(y, Op::Conv { x, w, b, spec }, true)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let n = xv.voxels() as f64;
        let mut y = Tensor::zeros(xv.shape());
        let mut mean = Vec::with_capacity(c);
        let mut rstd = Vec::with_capacity(c);
        let (gm, bt) = (self.params.get(gamma).data(), self.params.get(beta).data());
        for ch in 0..c {
            let src = xv.channel(ch);
            let m = src.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = src.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + NORM_EPS as f64).sqrt();
            let (m, r) = (m as f32, r as f32);
            let (g, b) = (gm[ch] * r, bt[ch]);
            y.channel_mut(ch)
                .iter_mut()
                .zip(src)
                .for_each(|(o, &v)| *o = (v - m) * g + b);
            mean.push(m);
            rstd.push(r);
        }
        self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            true,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        let ng = self.needs(x);
        self.push(y, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        let ng = self.needs(x);
        self.push(y, Op::Sigmoid { x }, ng)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let ng = self.needs(x);
        self.push(y, Op::Dropout { x, mask }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    /// Channel concatenation of two maps with identical spatial extent.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.spatial() != tb.spatial() {
            return Err(Error::Shape(format!(
                "concat: spatial {:?} vs {:?}",
                ta.spatial(),
                tb.spatial()
            )));
        }
        let s = ta.spatial();
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let y = Tensor::new(vec![ta.channels() + tb.channels(), s[0], s[1], s[2]], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Concat { a, b }, ng))
    }

    /// Trilinear 2x upsampling with half-voxel aligned sample centres.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for axis in [3, 2, 1] {
            t = linear_up_axis(&t, axis);
        }
        let ng = self.needs(x);
        self.push(t, Op::Upsample2x { x }, ng)
    }

    /// Block replication by an integer factor on every spatial axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let [d, h, w] = xv.spatial();
        let c = xv.channels();
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let mut y = Tensor::zeros(&[c, od, oh, ow]);
        for ch in 0..c {
            let src = xv.channel(ch);
            let dst = y.channel_mut(ch);
            for z in 0..od {
                for yy in 0..oh {
                    let row = &src[((z / factor) * h + yy / factor) * w..];
                    for (xx, o) in dst[(z * oh + yy) * ow..(z * oh + yy + 1) * ow].iter_mut().enumerate() {
                        *o = row[xx / factor];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(y, Op::UpsampleNearest { x, factor }, ng)
    }

    /// Per-channel spatial mean, shape `[C, 1, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.voxels() as f64;
        let data = (0..xv.channels())
            .map(|c| (xv.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
            .collect();
        let y = Tensor::new(vec![xv.channels(), 1, 1, 1], data).expect("pool shape");
        let ng = self.needs(x);
        self.push(y, Op::GlobalAvgPool { x }, ng)
    }

    /// Multiplies channel `c` of `x` by `gate[c]` (`gate: [C, 1, 1, 1]`).
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        if gv.len() != xv.channels() {
            return Err(Error::Shape(format!(
                "channel_scale: {} gates for {} channels",
                gv.len(),
                xv.channels()
            )));
        }
        let mut y = xv.clone();
        for c in 0..xv.channels() {
            let s = gv.data()[c];
            y.channel_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.needs(x) || self.needs(gate);
        Ok(self.push(y, Op::ChannelScale { x, gate }, ng))
    }

    /// Softmax across channels at every voxel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_channels(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Softmax { x }, ng)
    }

    /// Reverse pass seeded with `dL/dv` for each `(v, grad)` pair.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads, v, g);
            last = last.max(v.0);
        }
        let mut pg = Gradients::new(self.params.len());
        for i in (0..=last).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                &Op::Conv { x, w, b, spec } => {
                    let need_dx = self.needs(x);
                    let cg = conv3d_backward(self.value(x), self.params.get(w), &gy, spec, need_dx);
                    pg.accumulate(w, cg.dw.data(), cg.dw.shape());
                    if let Some(b) = b {
                        pg.accumulate(b, &cg.db, &[cg.db.len()]);
                    }
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let c = xv.channels();
                    let n = xv.voxels() as f32;
                    let gm = self.params.get(*gamma).data();
                    let mut dgamma = vec![0f32; c];
                    let mut dbeta = vec![0f32; c];
                    let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                    for ch in 0..c {
                        let (m, r) = (mean[ch], rstd[ch]);
                        let src = xv.channel(ch);
                        let g = gy.channel(ch);
                        let mut sum_g = 0f64;
                        let mut sum_gx = 0f64;
                        for (&v, &gv) in src.iter().zip(g) {
                            let xh = (v - m) * r;
                            sum_g += gv as f64;
                            sum_gx += (gv * xh) as f64;
                        }
                        dbeta[ch] = sum_g as f32;
                        dgamma[ch] = sum_gx as f32;
                        if let Some(dx) = dx.as_mut() {
                            // dxhat = g * gamma; dx = r/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                            let k = gm[ch] * r / n;
                            let (sg, sgx) = (sum_g as f32, sum_gx as f32);
                            dx.channel_mut(ch)
                                .iter_mut()
                                .zip(src.iter().zip(g))
                                .for_each(|(o, (&v, &gv))| {
                                    let xh = (v - m) * r;
                                    *o = k * (n * gv - sg - xh * sgx);
                                });
                        }
                    }
                    pg.accumulate(*gamma, &dgamma, &[c]);
                    pg.accumulate(*beta, &dbeta, &[c]);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                &Op::LeakyRelu { x, slope } => {
                    let mut dx = gy;
                    dx.data_mut().iter_mut().zip(self.value(x).data()).for_each(|(g, &v)| {
                        if v < 0.0 {
                            *g *= slope
                        }
                    });
                    accumulate(&mut grads, x, dx);
                }
                &Op::Sigmoid { x } => {
                    let mut dx = gy;
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(g, &s)| *g *= s * (1.0 - s));
                    accumulate(&mut grads, x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = gy;
                    dx.data_mut().iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                    accumulate(&mut grads, *x, dx);
                }
                &Op::Add { a, b } => {
                    if self.needs(a) && self.needs(b) {
                        accumulate(&mut grads, a, gy.clone());
                        accumulate(&mut grads, b, gy);
                    } else if self.needs(a) {
                        accumulate(&mut grads, a, gy);
                    } else {
                        accumulate(&mut grads, b, gy);
                    }
                }
                &Op::Concat { a, b } => {
                    let na = self.value(a).len();
                    let mut data = gy.into_data();
                    let tail = data.split_off(na);
                    if self.needs(a) {
                        accumulate(&mut grads, a, Tensor::new(self.value(a).shape().to_vec(), data)?);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, Tensor::new(self.value(b).shape().to_vec(), tail)?);
                    }
                }
                &Op::Upsample2x { x } => {
                    let mut t = gy;
                    for axis in [1, 2, 3] {
                        t = linear_up_axis_adjoint(&t, axis);
                    }
                    accumulate(&mut grads, x, t);
                }
                &Op::UpsampleNearest { x, factor } => {
                    let xv = self.value(x);
                    let [d, h, w] = xv.spatial();
                    let [od, oh, ow] = gy.spatial();
                    let mut dx = Tensor::zeros(xv.shape());
                    for ch in 0..xv.channels() {
                        let src = gy.channel(ch);
                        let dst = dx.channel_mut(ch);
                        for z in 0..od {
                            for yy in 0..oh {
                                let base = ((z / factor) * h + yy / factor) * w;
                                for (xx, &g) in src[(z * oh + yy) * ow..(z * oh + yy + 1) * ow].iter().enumerate() {
                                    dst[base + xx / factor] += g;
                                }
                            }
                        }
                    }
                    let _ = d;
                    accumulate(&mut grads, x, dx);
                }
                &Op::GlobalAvgPool { x } => {
                    let xv = self.value(x);
                    let n = xv.voxels() as f32;
                    let mut dx = Tensor::zeros(xv.shape());
                    for c in 0..xv.channels() {
                        let g = gy.data()[c] / n;
                        dx.channel_mut(c).fill(g);
                    }
                    accumulate(&mut grads, x, dx);
                }
                &Op::ChannelScale { x, gate } => {
                    let (xv, gv) = (self.value(x), self.value(gate));
                    if self.needs(gate) {
                        let dg: Vec<f32> = (0..xv.channels())
                            .map(|c| {
                                xv.channel(c)
                                    .iter()
                                    .zip(gy.channel(c))
                                    .map(|(&a, &b)| (a * b) as f64)
                                    .sum::<f64>() as f32
                            })
                            .collect();
                        accumulate(&mut grads, gate, Tensor::new(gv.shape().to_vec(), dg)?);
                    }
                    if self.needs(x) {
                        let mut dx = gy;
                        for c in 0..xv.channels() {
                            let s = gv.data()[c];
                            dx.channel_mut(c).iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                &Op::Softmax { x } => {
                    let p = &node.value;
                    let c = p.channels();
                    let n = p.voxels();
                    let mut dx = gy;
                    for i in 0..n {
                        let dot: f32 = (0..c).map(|k| p.data()[k * n + i] * dx.data()[k * n + i]).sum();
                        for k in 0..c {
                            let j = k * n + i;
                            dx.data_mut()[j] = p.data()[j] * (dx.data()[j] - dot);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
            }
        }
        Ok(pg)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn softmax_channels(x: &Tensor) -> Tensor {
    let c = x.channels();
    let n = x.voxels();
    let mut y = x.clone();
    let d = y.data_mut();
    for i in 0..n {
        let m = (0..c).map(|k| d[k * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0f32;
        for k in 0..c {
            let e = (d[k * n + i] - m).exp();
            d[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            d[k * n + i] /= s;
        }
    }
    y
}

/// Doubles `axis` (1 = D, 2 = H, 3 = W) with linear weights 3/4, 1/4.
fn linear_up_axis(t: &Tensor, axis: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    shape[axis] = 2 * n;
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (t.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..n {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let s = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
            let sl = &src[(o * n + lo) * inner..(o * n + lo + 1) * inner];
            let sh = &src[(o * n + hi) * inner..(o * n + hi + 1) * inner];
            let base = (o * 2 * n + 2 * i) * inner;
            for k in 0..inner {
                dst[base + k] = 0.75 * s[k] + 0.25 * sl[k];
                dst[base + inner + k] = 0.75 * s[k] + 0.25 * sh[k];
            }
        }
    }
    out
}

fn linear_up_axis_adjoint(g: &Tensor, axis: usize) -> Tensor {
    let mut shape = g.shape().to_vec();
    let n = shape[axis] / 2;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    shape[axis] = n;
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (g.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..n {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let base = (o * 2 * n + 2 * i) * inner;
            for k in 0..inner {
                let (ge, go) = (src[base + k], src[base + inner + k]);
                dst[(o * n + i) * inner + k] += 0.75 * (ge + go);
                dst[(o * n + lo) * inner + k] += 0.25 * ge;
                dst[(o * n + hi) * inner + k] += 0.25 * go;
            }
        }
    }
    out
}
