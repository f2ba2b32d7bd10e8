//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op applied to its [`Var`] handles. Ops whose
//! inputs do not require gradients (or every op, on an inference graph) keep
//! only their value, so the same model code serves training and streaming
//! inference.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;

use super::kernels::{self, Conv2dGeom, Tap};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::pqmf::{self, PrototypeFilter, SubbandSignal};

type BackFn = Box<dyn Fn(&[f32], &[Arc<Tensor>], &Tensor) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f32]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Vec<f32> {
        self.get(v)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; v.numel()])
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Graph that only evaluates.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Trainable input (gradient tracked when the graph allows it).
    pub fn param(&self, value: &Arc<Tensor>) -> Var<'_> {
        self.leaf(Arc::clone(value), true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    /// Input that gradients should reach (for tests and gradient probes).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    fn push<'g, F>(&'g self, value: Tensor, parents: &[Var<'g>], back: F) -> Var<'g>
    where
        F: Fn(&[f32], &[Arc<Tensor>], &Tensor) -> Vec<Option<Vec<f32>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            back: if requires_grad { Some(Box::new(back)) } else { None },
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let shape = loss.shape();
        if loss.numel() != 1 {
            return Err(Error::NotScalarLoss(shape));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_from(&self, out: Var<'_>, seed: Vec<f32>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[out.id].requires_grad {
            return Err(Error::GraphDetached);
        }
        if seed.len() != nodes[out.id].value.numel() {
            return Err(Error::shape("backward_from", "seed length differs from output"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[out.id] = Some(seed);
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let parents: Vec<Arc<Tensor>> = node
                    .parents
                    .iter()
                    .map(|&p| Arc::clone(&nodes[p].value))
                    .collect();
                let pg = back(&g, &parents, &node.value);
                for (&p, pgrad) in node.parents.iter().zip(pg) {
                    let Some(pgrad) = pgrad else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pgrad).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(pgrad),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn map_unary<'g>(x: Var<'g>, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Var<'g> {
    let v = x.value();
    let data = v.data.iter().map(|&a| f(a)).collect();
    let out = Tensor::new(v.shape.clone(), data).expect("shape preserved");
    x.graph.push(out, &[x], move |g, p, y| {
        let gx = g
            .iter()
            .zip(&p[0].data)
            .zip(&y.data)
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(gx)]
    })
}

fn two_d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a [C, T] tensor, got {s:?}"))),
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f32 {
        self.value().data[0]
    }

    fn binary(self, other: Var<'g>, op: &'static str, f: impl Fn(f32, f32) -> f32, back: impl Fn(&[f32], &[f32], &[f32]) -> (Vec<f32>, Vec<f32>) + 'static) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(op, &a, &b)?;
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape.clone(), data)?;
        Ok(self.graph.push(out, &[self, other], move |g, p, _| {
            let (ga, gb) = back(g, &p[0].data, &p[1].data);
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g.to_vec(), g.to_vec()))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| {
            (g.to_vec(), g.iter().map(|v| -v).collect())
        })
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| {
            (
                g.iter().zip(b).map(|(g, b)| g * b).collect(),
                g.iter().zip(a).map(|(g, a)| g * a).collect(),
            )
        })
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        map_unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f32) -> Var<'g> {
        map_unary(self, move |x| x + s, |_, _| 1.0)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        map_unary(self, |x| 1.0 - x, |_, _| -1.0)
    }

    pub fn abs(self) -> Var<'g> {
        map_unary(self, f32::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn square(self) -> Var<'g> {
        map_unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        map_unary(self, f32::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// `ln(max(x, floor))`; no gradient below the floor.
    pub fn log_clamped(self, floor: f32) -> Var<'g> {
        map_unary(self, move |x| x.max(floor).ln(), move |x, _| if x > floor { 1.0 / x } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'g> {
        map_unary(self, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        map_unary(self, kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'g> {
        map_unary(self, move |x| if x >= 0.0 { x } else { slope * x }, move |x, _| if x >= 0.0 { 1.0 } else { slope })
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(self) -> Var<'g> {
        let v = self.value();
        let s: f64 = v.data.iter().map(|&x| x as f64).sum();
        let n = v.numel();
        self.graph.push(Tensor::scalar(s as f32), &[self], move |g, _, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.numel().max(1) as f32;
        self.sum().scale(1.0 / n)
    }

    /// `tanh(a) * sigmoid(b)`.
    pub fn gated(self, b: Var<'g>) -> Result<Var<'g>> {
        self.binary(
            b,
            "gated",
            |a, b| a.tanh() * kernels::sigmoid(b),
            |g, a, b| {
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for ((&g, &a), &b) in g.iter().zip(a).zip(b) {
                    let (ta, sb) = (a.tanh(), kernels::sigmoid(b));
                    ga.push(g * (1.0 - ta * ta) * sb);
                    gb.push(g * ta * sb * (1.0 - sb));
                }
                (ga, gb)
            },
        )
    }

    /// Rows `start..start+n` of a `[C, T]` tensor.
    pub fn rows(self, start: usize, n: usize) -> Result<Var<'g>> {
        let v = self.value();
        let (c, t) = two_d("rows", &v)?;
        if start + n > c {
            return Err(Error::shape("rows", format!("rows {start}..{} of {c}", start + n)));
        }
        let out = Tensor::new(vec![n, t], v.data[start * t..(start + n) * t].to_vec())?;
        Ok(self.graph.push(out, &[self], move |g, _, _| {
            let mut gx = vec![0.0; c * t];
            gx[start * t..(start + n) * t].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Columns `start..start+n` of a `[C, T]` tensor.
    pub fn cols(self, start: usize, n: usize) -> Result<Var<'g>> {
        let v = self.value();
        let (c, t) = two_d("cols", &v)?;
        if start + n > t {
            return Err(Error::shape("cols", format!("cols {start}..{} of {t}", start + n)));
        }
        let mut data = Vec::with_capacity(c * n);
        for r in 0..c {
            data.extend_from_slice(&v.data[r * t + start..r * t + start + n]);
        }
        Ok(self.graph.push(Tensor::new(vec![c, n], data)?, &[self], move |g, _, _| {
            let mut gx = vec![0.0; c * t];
            for r in 0..c {
                gx[r * t + start..r * t + start + n].copy_from_slice(&g[r * n..(r + 1) * n]);
            }
            vec![Some(gx)]
        }))
    }

    /// Same data viewed under another shape.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let out = Tensor::new(shape.to_vec(), v.data.clone())?;
        Ok(self.graph.push(out, &[self], |g, _, _| vec![Some(g.to_vec())]))
    }

    /// Per-channel causal depthwise convolution; `w` is `[C, K]`.
    pub fn depthwise(self, w: Var<'g>, hist: Option<&[f32]>) -> Result<Var<'g>> {
        let (xv, wv) = (self.value(), w.value());
        let (c, t) = two_d("depthwise", &xv)?;
        let (wc, k) = two_d("depthwise", &wv)?;
        if wc != c {
            return Err(Error::shape("depthwise", format!("{c} channels vs kernel rows {wc}")));
        }
        let hist = own_hist("depthwise", hist, c * (k - 1))?;
        let y = kernels::depthwise_fwd(&xv.data, &hist, &wv.data, c, t, k);
        Ok(self.graph.push(Tensor::new(vec![c, t], y)?, &[self, w], move |g, p, _| {
            let (gx, gw) = kernels::depthwise_bwd(g, &p[0].data, &hist, &p[1].data, c, t, k);
            vec![Some(gx), Some(gw)]
        }))
    }

    /// `w x + b` with `w` shaped `[Co, Ci]`; `self` is `[Ci, T]`.
    pub fn pointwise(self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (ci, t) = two_d("pointwise", &xv)?;
        let (co, wci) = two_d("pointwise", &wv)?;
        if wci != ci || bv.numel() != co {
            return Err(Error::shape(
                "pointwise",
                format!("input {:?}, weight {:?}, bias {:?}", xv.shape, wv.shape, bv.shape),
            ));
        }
        let y = kernels::pointwise_fwd(&xv.data, &wv.data, &bv.data, ci, co, t);
        Ok(self.graph.push(Tensor::new(vec![co, t], y)?, &[self, w, b], move |g, p, _| {
            let (gx, gw, gb) = kernels::pointwise_bwd(g, &p[0].data, &p[1].data, ci, co, t);
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// Causal full convolution, `w` shaped `[Co, Ci, K]`.
    pub fn conv1d(self, w: Var<'g>, b: Var<'g>, hist: Option<&[f32]>) -> Result<Var<'g>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (ci, t) = two_d("conv1d", &xv)?;
        let [co, wci, k] = wv.shape[..] else {
            return Err(Error::shape("conv1d", format!("kernel shape {:?}", wv.shape)));
        };
        if wci != ci || bv.numel() != co {
            return Err(Error::shape("conv1d", format!("input {:?}, weight {:?}", xv.shape, wv.shape)));
        }
        let hist = own_hist("conv1d", hist, ci * (k - 1))?;
        let y = kernels::conv_fwd(&xv.data, &hist, &wv.data, &bv.data, ci, co, t, k);
        Ok(self.graph.push(Tensor::new(vec![co, t], y)?, &[self, w, b], move |g, p, _| {
            let (gx, gw, gb) = kernels::conv_bwd(g, &p[0].data, &hist, &p[1].data, ci, co, t, k);
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// Normalizes each time step over channels (no affine).
    pub fn channel_normalize(self) -> Result<Var<'g>> {
        let xv = self.value();
        let (c, t) = two_d("channel_norm", &xv)?;
        let (z, inv) = kernels::channel_norm_fwd(&xv.data, c, t);
        Ok(self.graph.push(Tensor::new(vec![c, t], z)?, &[self], move |g, _, y| {
            vec![Some(kernels::channel_norm_bwd(g, &y.data, &inv, c, t))]
        }))
    }

    /// `scale[c] * x[c, t] + shift[c]`.
    pub fn channel_affine(self, scale: Var<'g>, shift: Var<'g>) -> Result<Var<'g>> {
        let (xv, sv, bv) = (self.value(), scale.value(), shift.value());
        let (c, t) = two_d("channel_affine", &xv)?;
        if sv.numel() != c || bv.numel() != c {
            return Err(Error::shape("channel_affine", format!("{c} channels, scale {:?}", sv.shape)));
        }
        let mut y = vec![0.0f32; c * t];
        for ch in 0..c {
            for ti in 0..t {
                y[ch * t + ti] = sv.data[ch] * xv.data[ch * t + ti] + bv.data[ch];
            }
        }
        Ok(self.graph.push(Tensor::new(vec![c, t], y)?, &[self, scale, shift], move |g, p, _| {
            let (x, s) = (&p[0].data, &p[1].data);
            let mut gx = vec![0.0; c * t];
            let mut gs = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                for ti in 0..t {
                    let i = ch * t + ti;
                    gx[i] = g[i] * s[ch];
                    gs[ch] += g[i] * x[i];
                    gb[ch] += g[i];
                }
            }
            vec![Some(gx), Some(gs), Some(gb)]
        }))
    }

    fn resample(self, op: &'static str, taps: Vec<Tap>, hist: Vec<f32>) -> Result<Var<'g>> {
        let xv = self.value();
        let (c, t) = two_d(op, &xv)?;
        let n = taps.len();
        let y = kernels::resample_fwd(&xv.data, &hist, &taps, c, t);
        Ok(self.graph.push(Tensor::new(vec![c, n], y)?, &[self], move |g, _, _| {
            vec![Some(kernels::resample_bwd(g, &taps, c, t))]
        }))
    }

    /// Linear resampling by `num/den` on the aligned grid (edge hold).
    pub fn interp_linear(self, num: usize, den: usize) -> Result<Var<'g>> {
        let (c, t) = two_d("interp", &self.value())?;
        let taps = kernels::aligned_taps(t, num, den).ok_or(Error::NonIntegralOutputLength { len: t, num, den })?;
        self.resample("interp", taps, vec![0.0; c])
    }

    /// Linear upsampling by `num/den >= 1` on the causal grid; `hist` is the
    /// column preceding `self`.
    pub fn interp_causal(self, num: usize, den: usize, hist: Option<&[f32]>) -> Result<Var<'g>> {
        let (c, t) = two_d("interp_causal", &self.value())?;
        let taps = kernels::causal_taps(t, num, den).ok_or(Error::NonIntegralOutputLength { len: t, num, den })?;
        let hist = own_hist("interp_causal", hist, c)?;
        self.resample("interp_causal", taps, hist)
    }

    /// Repeats every column `r` times.
    pub fn nearest_up(self, r: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let (c, t) = two_d("nearest_up", &xv)?;
        let y = kernels::nearest_up_fwd(&xv.data, c, t, r);
        Ok(self.graph.push(Tensor::new(vec![c, t * r], y)?, &[self], move |g, _, _| {
            vec![Some(kernels::nearest_up_bwd(g, c, t, r))]
        }))
    }

    /// 4-bit scalar quantizer with a straight-through backward pass through
    /// the `tanh` bounding. Returns the dequantized values and the indices.
    pub fn quantize_st(self) -> (Var<'g>, Vec<u8>) {
        let xv = self.value();
        let mut idx = Vec::with_capacity(xv.numel());
        let data = xv
            .data
            .iter()
            .map(|&z| {
                let (i, dq) = quantize_scalar(z);
                idx.push(i);
                dq
            })
            .collect();
        let out = Tensor::new(xv.shape.clone(), data).expect("shape preserved");
        let v = self.graph.push(out, &[self], |g, p, _| {
            let gx = g
                .iter()
                .zip(&p[0].data)
                .map(|(&g, &z)| {
                    let t = z.tanh();
                    g * (1.0 - t * t)
                })
                .collect();
            vec![Some(gx)]
        });
        (v, idx)
    }

    /// 2-D convolution over a `[Ci, H, W]` map with weights `[Co, Ci, KH, KW]`.
    pub fn conv2d(self, w: Var<'g>, b: Var<'g>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var<'g>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (&[ci, h, wd], &[co, wci, kh, kw]) = (&xv.shape[..], &wv.shape[..]) else {
            return Err(Error::shape("conv2d", format!("input {:?}, weight {:?}", xv.shape, wv.shape)));
        };
        if wci != ci || bv.numel() != co || h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return Err(Error::shape("conv2d", format!("input {:?}, weight {:?}", xv.shape, wv.shape)));
        }
        let geom = Conv2dGeom {
            ci,
            co,
            h,
            w: wd,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        let y = kernels::conv2d_fwd(&xv.data, &wv.data, &bv.data, &geom);
        let out = Tensor::new(vec![co, geom.out_h(), geom.out_w()], y)?;
        Ok(self.graph.push(out, &[self, w, b], move |g, p, _| {
            let (gx, gw, gb) = kernels::conv2d_bwd(g, &p[0].data, &p[1].data, &geom);
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// PQMF synthesis of a `[N, T]` subband tensor into `[N * T]` samples,
    /// starting from zero filter state.
    pub fn pqmf_synthesis(self, proto: &PrototypeFilter) -> Result<Var<'g>> {
        let xv = self.value();
        let (n, t) = two_d("pqmf_synthesis", &xv)?;
        if n != proto.num_bands {
            return Err(Error::BandCountMismatch {
                expected: proto.num_bands,
                actual: n,
            });
        }
        let sb = SubbandSignal {
            num_bands: n,
            len: t,
            data: xv.data.clone(),
            subband_rate: pqmf::SUBBAND_RATE,
        };
        let y = pqmf::synthesis(&sb, proto)?.samples;
        let filters = proto.synthesis_filters().to_vec();
        Ok(self.graph.push(Tensor::new(vec![n * t], y)?, &[self], move |g, _, _| {
            // y[m] = sum_k sum_j f_k[m - jN] s_k[j]  =>  ds_k[j] = sum_l f_k[l] g[jN + l].
            let mut gs = vec![0.0f32; n * t];
            for (k, f) in filters.iter().enumerate() {
                for j in 0..t {
                    let base = j * n;
                    let mut acc = 0.0f32;
                    for (l, &c) in f.iter().enumerate() {
                        match g.get(base + l) {
                            Some(&gv) => acc += c * gv,
                            None => break,
                        }
                    }
                    gs[k * t + j] = acc;
                }
            }
            vec![Some(gs)]
        }))
    }

    /// Complex STFT of a 1-D signal as a `[2, bins, frames]` tensor holding
    /// real and imaginary parts. Frames start at multiples of `hop`; no padding.
    pub fn stft(self, window: usize, hop: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let len = xv.numel();
        if len < window {
            return Err(Error::shape("stft", format!("{len} samples < window {window}")));
        }
        let win = hann(window);
        let (re, im, bins, frames) = stft_complex(&xv.data, &win, hop);
        let mut data = re;
        data.extend(im);
        let out = Tensor::new(vec![2, bins, frames], data)?;
        Ok(self.graph.push(out, &[self], move |g, _, _| {
            let mut planner = FftPlanner::<f32>::new();
            let ifft = planner.plan_fft_inverse(window);
            let mut gx = vec![0.0f32; len];
            let mut buf = vec![Complex32::new(0.0, 0.0); window];
            for f in 0..frames {
                buf.iter_mut().for_each(|b| *b = Complex32::new(0.0, 0.0));
                for k in 0..bins {
                    buf[k] = Complex32::new(g[k * frames + f], g[(bins + k) * frames + f]);
                }
                ifft.process(&mut buf);
                let start = f * hop;
                for (n, b) in buf.iter().enumerate() {
                    gx[start + n] += win[n] * b.re;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `sqrt(re^2 + im^2)` of a `[2, bins, frames]` STFT tensor.
    pub fn complex_magnitude(self) -> Result<Var<'g>> {
        let xv = self.value();
        let [2, bins, frames] = xv.shape[..] else {
            return Err(Error::shape("complex_magnitude", format!("{:?}", xv.shape)));
        };
        let n = bins * frames;
        let (re, im) = xv.data.split_at(n);
        let mag = re.iter().zip(im).map(|(a, b)| (a * a + b * b).sqrt()).collect();
        Ok(self.graph.push(Tensor::new(vec![bins, frames], mag)?, &[self], move |g, p, y| {
            let (re, im) = p[0].data.split_at(n);
            let mut gx = vec![0.0f32; 2 * n];
            for i in 0..n {
                let m = y.data[i];
                if m > 0.0 {
                    gx[i] = g[i] * re[i] / m;
                    gx[n + i] = g[i] * im[i] / m;
                }
            }
            vec![Some(gx)]
        }))
    }
}

fn own_hist(op: &'static str, hist: Option<&[f32]>, len: usize) -> Result<Vec<f32>> {
    match hist {
        None => Ok(vec![0.0; len]),
        Some(h) if h.len() == len => Ok(h.to_vec()),
        Some(h) => Err(Error::shape(op, format!("history of {} values, expected {len}", h.len()))),
    }
}

/// Concatenates `[C_i, T]` tensors along channels.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let t = two_d("concat_rows", &vals[0])?.1;
    let mut rows = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for v in &vals {
        let (c, vt) = two_d("concat_rows", v)?;
        if vt != t {
            return Err(Error::shape("concat_rows", format!("lengths {t} and {vt}")));
        }
        rows.push(c);
        data.extend_from_slice(&v.data);
    }
    let total: usize = rows.iter().sum();
    Ok(first.graph.push(Tensor::new(vec![total, t], data)?, parts, move |g, _, _| {
        let mut off = 0;
        rows.iter()
            .map(|&c| {
                let s = g[off * t..(off + c) * t].to_vec();
                off += c;
                Some(s)
            })
            .collect()
    }))
}

/// Concatenates `[C, T_i]` tensors along time.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let c = two_d("concat_cols", &vals[0])?.0;
    let mut lens = Vec::with_capacity(parts.len());
    for v in &vals {
        let (vc, vt) = two_d("concat_cols", v)?;
        if vc != c {
            return Err(Error::shape("concat_cols", format!("channels {c} and {vc}")));
        }
        lens.push(vt);
    }
    let total: usize = lens.iter().sum();
    let mut data = vec![0.0f32; c * total];
    let mut off = 0;
    for (v, &l) in vals.iter().zip(&lens) {
        for r in 0..c {
            data[r * total + off..r * total + off + l].copy_from_slice(&v.data[r * l..(r + 1) * l]);
        }
        off += l;
    }
    Ok(first.graph.push(Tensor::new(vec![c, total], data)?, parts, move |g, _, _| {
        let mut off = 0;
        lens.iter()
            .map(|&l| {
                let mut s = Vec::with_capacity(c * l);
                for r in 0..c {
                    s.extend_from_slice(&g[r * total + off..r * total + off + l]);
                }
                off += l;
                Some(s)
            })
            .collect()
    }))
}

/// Scalar quantizer used by the side-info bottleneck: `tanh` bound, 16
/// uniform levels on [-1, 1], ties rounded away from zero.
pub fn quantize_scalar(z: f32) -> (u8, f32) {
    let b = z.tanh();
    let i = (((b + 1.0) / 2.0) * 15.0).round().clamp(0.0, 15.0) as u8;
    (i, dequantize(i))
}

pub fn dequantize(index: u8) -> f32 {
    2.0 * index as f32 / 15.0 - 1.0
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()) as f32)
        .collect()
}

/// Real and imaginary STFT parts, each `[bins, frames]` row-major.
pub fn stft_complex(x: &[f32], win: &[f32], hop: usize) -> (Vec<f32>, Vec<f32>, usize, usize) {
    let window = win.len();
    let bins = window / 2 + 1;
    let frames = if x.len() < window { 0 } else { 1 + (x.len() - window) / hop };
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(window);
    let mut re = vec![0.0f32; bins * frames];
    let mut im = vec![0.0f32; bins * frames];
    let mut buf = vec![Complex32::new(0.0, 0.0); window];
    for f in 0..frames {
        let seg = &x[f * hop..f * hop + window];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(win) {
            *b = Complex32::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            re[k * frames + f] = buf[k].re;
            im[k * frames + f] = buf[k].im;
        }
    }
    (re, im, bins, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_the_input() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.input(Tensor::new(vec![3], vec![0.3, 0.1, 0.7]).unwrap());
        let loss = w.mul(x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let g = Graph::new();
        let w = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w.tanh()), Err(Error::NotScalarLoss(_))));
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(c.sum()), Err(Error::GraphDetached)));
    }

    #[test]
    fn inference_graph_keeps_no_closures() {
        let g = Graph::inference();
        let w = g.input(Tensor::zeros(&[2]));
        assert!(!w.tanh().requires_grad());
    }

    #[test]
    fn quantizer_mapping() {
        assert_eq!(quantize_scalar(0.0), (8, dequantize(8)));
        assert!((dequantize(8) - 0.0667).abs() < 1e-4);
        assert_eq!(quantize_scalar(10.0), (15, 1.0));
        assert_eq!(quantize_scalar(-10.0), (0, -1.0));
    }
}
