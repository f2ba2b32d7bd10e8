//! Named layers evaluated on a [`Graph`], with optional streaming state.

use std::cell::RefCell;
use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::kernels;
use super::state::StreamState;
use super::tensor::Tensor;
use super::weights::WeightStore;
use crate::error::{Error, Result};

/// Evaluation context: parameters from a [`WeightStore`] wrapped lazily as
/// graph leaves, plus the stream state when running frame by frame.
pub struct Ctx<'a, 'g> {
    pub graph: &'g Graph,
    store: &'a WeightStore,
    params: RefCell<HashMap<String, Var<'g>>>,
    state: Option<&'a mut StreamState>,
}

impl<'a, 'g> Ctx<'a, 'g> {
    pub fn new(graph: &'g Graph, store: &'a WeightStore, state: Option<&'a mut StreamState>) -> Self {
        Self {
            graph,
            store,
            params: RefCell::new(HashMap::new()),
            state,
        }
    }

    pub fn streaming(&self) -> bool {
        self.state.is_some()
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(*v);
        }
        let v = self.graph.param(self.store.get(name)?);
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for parameter `name` instead of the stored tensor.
    pub fn bind(&self, name: &str, v: Var<'g>) {
        self.params.borrow_mut().insert(name.to_string(), v);
    }

    fn param_value(&self, name: &str) -> Result<std::sync::Arc<Tensor>> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(v.value());
        }
        Ok(self.store.get(name)?.clone())
    }

    /// Every parameter touched so far, by name.
    pub fn touched_params(&self) -> HashMap<String, Var<'g>> {
        self.params.borrow().clone()
    }

    fn history(&self, layer: &str) -> Result<Option<Vec<f32>>> {
        match &self.state {
            Some(st) => Ok(Some(st.get(layer)?.to_vec())),
            None => Ok(None),
        }
    }

    fn advance(&mut self, layer: &str, x: &Tensor) -> Result<()> {
        if let Some(st) = self.state.as_deref_mut() {
            let (c, t) = x.dims2();
            st.push_columns(layer, &x.data, c, t)?;
        }
        Ok(())
    }

    /// Causal depthwise (kernel 7) followed by pointwise mixing.
    pub fn dsconv(&mut self, layer: &str, x: Var<'g>) -> Result<Var<'g>> {
        let hist = self.history(layer)?;
        let dw = self.param(&format!("{layer}.dw"))?;
        let pw = self.param(&format!("{layer}.pw"))?;
        let b = self.param(&format!("{layer}.b"))?;
        let y = x.depthwise(dw, hist.as_deref())?.pointwise(pw, b)?;
        self.advance(layer, &x.value())?;
        Ok(y)
    }

    pub fn conv1d(&mut self, layer: &str, x: Var<'g>) -> Result<Var<'g>> {
        let hist = self.history(layer)?;
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        let y = x.conv1d(w, b, hist.as_deref())?;
        self.advance(layer, &x.value())?;
        Ok(y)
    }

    /// 1x1 convolution or, on a `[D, 1]` column, a linear layer.
    pub fn pointwise(&self, layer: &str, x: Var<'g>) -> Result<Var<'g>> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        x.pointwise(w, b)
    }

    pub fn channel_norm(&self, layer: &str, x: Var<'g>) -> Result<Var<'g>> {
        let scale = self.param(&format!("{layer}.scale"))?;
        let shift = self.param(&format!("{layer}.shift"))?;
        x.channel_normalize()?.channel_affine(scale, shift)
    }

    /// Causal linear upsampling by `num/den`, carrying one column of history.
    pub fn upsample(&mut self, layer: &str, x: Var<'g>, num: usize, den: usize) -> Result<Var<'g>> {
        let hist = self.history(layer)?;
        let y = x.interp_causal(num, den, hist.as_deref())?;
        self.advance(layer, &x.value())?;
        Ok(y)
    }

    /// Depthwise-separable convolution of sample-repeated conditioning.
    ///
    /// `cond` is `[C, F]` (one column per frame) repeated `r` times. On an
    /// inference graph only the first `min(r, K)` columns of each frame are
    /// computed; the rest repeat column `K - 1`, whose window lies entirely
    /// inside the frame. The result is identical to convolving the repeated
    /// signal.
    pub fn cond_dsconv(&mut self, layer: &str, cond: Var<'g>, r: usize) -> Result<Var<'g>> {
        let u = cond.nearest_up(r)?;
        if self.graph.grad_enabled() {
            return self.dsconv(layer, u);
        }
        let hist = self.history(layer)?;
        let dw = self.param_value(&format!("{layer}.dw"))?;
        let pw = self.param_value(&format!("{layer}.pw"))?;
        let b = self.param_value(&format!("{layer}.b"))?;
        let uv = u.value();
        let y = fused_cond_dsconv(&uv, hist.as_deref(), &dw.data, &pw.data, &b.data, pw.shape[0], dw.shape[1], r)?;
        self.advance(layer, &uv)?;
        Ok(self.graph.constant(y))
    }

    /// One GRU step on `[D, 1]` input and `[H, 1]` hidden state
    /// (gate order reset, update, candidate).
    pub fn gru_step(&self, layer: &str, x: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
        let w_ih = self.param(&format!("{layer}.w_ih"))?;
        let w_hh = self.param(&format!("{layer}.w_hh"))?;
        let b_ih = self.param(&format!("{layer}.b_ih"))?;
        let b_hh = self.param(&format!("{layer}.b_hh"))?;
        gru_cell(x, h, w_ih, w_hh, b_ih, b_hh)
    }

    pub fn state_mut(&mut self) -> Option<&mut StreamState> {
        self.state.as_deref_mut()
    }
}

pub fn gru_cell<'g>(x: Var<'g>, h: Var<'g>, w_ih: Var<'g>, w_hh: Var<'g>, b_ih: Var<'g>, b_hh: Var<'g>) -> Result<Var<'g>> {
    let hs = h.shape()[0];
    let gi = x.pointwise(w_ih, b_ih)?;
    let gh = h.pointwise(w_hh, b_hh)?;
    if gi.shape()[0] != 3 * hs {
        return Err(Error::shape("gru_step", format!("gates {:?} for hidden {hs}", gi.shape())));
    }
    let r = gi.rows(0, hs)?.add(gh.rows(0, hs)?)?.sigmoid();
    let z = gi.rows(hs, hs)?.add(gh.rows(hs, hs)?)?.sigmoid();
    let n = gi.rows(2 * hs, hs)?.add(r.mul(gh.rows(2 * hs, hs)?)?)?.tanh();
    z.one_minus().mul(n)?.add(z.mul(h)?)
}

/// Evaluates the repeated-conditioning convolution on distinct columns only.
#[allow(clippy::too_many_arguments)]
pub fn fused_cond_dsconv(u: &Tensor, hist: Option<&[f32]>, dw: &[f32], pw: &[f32], b: &[f32], co: usize, k: usize, r: usize) -> Result<Tensor> {
    let (ci, t) = u.dims2();
    if r == 0 || t % r != 0 {
        return Err(Error::shape("cond_dsconv", format!("{t} columns not a multiple of {r}")));
    }
    let h = k - 1;
    let zero = vec![0.0f32; ci * h];
    let hist = hist.unwrap_or(&zero);
    if hist.len() != ci * h {
        return Err(Error::shape("cond_dsconv", "history size"));
    }
    let frames = t / r;
    let d = r.min(k);
    // Gather the distinct columns of every frame (with their left context).
    let mut out = vec![0.0f32; co * t];
    for f in 0..frames {
        let start = f * r;
        // Left context for column `start`: previous h columns of [hist | u].
        let mut ctx = vec![0.0f32; ci * h];
        for c in 0..ci {
            for j in 0..h {
                let idx = start + j;
                ctx[c * h + j] = if idx < h { hist[c * h + idx] } else { u.data[c * t + idx - h] };
            }
        }
        let mut seg = vec![0.0f32; ci * d];
        for c in 0..ci {
            seg[c * d..(c + 1) * d].copy_from_slice(&u.data[c * t + start..c * t + start + d]);
        }
        let dwv = kernels::depthwise_fwd(&seg, &ctx, dw, ci, d, k);
        let y = kernels::pointwise_fwd(&dwv, pw, b, ci, co, d);
        for o in 0..co {
            for j in 0..r {
                out[o * t + start + j] = y[o * d + j.min(d - 1)];
            }
        }
    }
    Tensor::new(vec![co, t], out)
}
