//! Layer primitives shared by every module: linear maps, MLPs, layer norm,
//! scaled dot-product attention and the GRU cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Unary, Var};
use super::params::{fan_in_uniform, ParamId, ParamStore};
use super::NumArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// tanh approximation; smooth, which matters for finite-difference checks
    Gelu,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::Gelu => Unary::Gelu,
        }
    }

    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        g.unary(x, self.unary())
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}/weight"), fan_in_uniform(rng, in_dim, out_dim));
        let bias = bias.then(|| store.add(format!("{name}/bias"), NumArray::zeros(&[1, out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    widths: Vec<usize>,
    layers: Vec<Linear>,
    pub activation: Activation,
    /// Whether the activation also follows the last layer.
    pub activate_output: bool,
}

impl MlpParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        activate_output: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}/{i}"), w[0], w[1], true, rng))
            .collect();
        Self { widths: widths.to_vec(), layers, activation, activate_output }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c) = g.dims(x);
        if c != self.in_dim() {
            return Err(Error::dim(format!(
                "mlp input last axis is {c}, first layer width is {}",
                self.in_dim()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last || self.activate_output {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}

/// Row-wise layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}/gain"), NumArray::full(&[1, dim], 1.0));
        let bias = store.add(format!("{name}/bias"), NumArray::zeros(&[1, dim]));
        Self { gain, bias, dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(g.dims(x).1, self.dim, "layer norm width");
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(n, gain);
        g.add(y, bias)
    }
}

/// Scaled dot-product attention, `softmax(q k^T / sqrt(d) + bias) v`.
/// Returns the attended values and the attention weights.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>) -> (Var, Var) {
    let d = g.dims(q).1;
    let logits = g.matmul_nt(q, k);
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        logits = g.add(logits, b);
    }
    let weights = g.softmax_rows(logits);
    (g.matmul(weights, v), weights)
}

/// GRU cell with shared weights across rows. Gate convention:
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// h~ = tanh(x Wh + (r * h) Uh + bh)
/// h' = z * h + (1 - z) * h~
/// ```
///
/// so with every weight and bias at zero, `h' = 0.5 * h`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = |gate: &str, rows: usize, rng: &mut dyn rand::RngCore| {
            store.add(format!("{name}/{gate}"), fan_in_uniform(rng, rows, hidden_dim))
        };
        let w_z = w("w_z", input_dim, rng);
        let u_z = w("u_z", hidden_dim, rng);
        let w_r = w("w_r", input_dim, rng);
        let u_r = w("u_r", hidden_dim, rng);
        let w_h = w("w_h", input_dim, rng);
        let u_h = w("u_h", hidden_dim, rng);
        let b_z = store.add(format!("{name}/b_z"), NumArray::zeros(&[1, hidden_dim]));
        let b_r = store.add(format!("{name}/b_r"), NumArray::zeros(&[1, hidden_dim]));
        let b_h = store.add(format!("{name}/b_h"), NumArray::zeros(&[1, hidden_dim]));
        Self { input_dim, hidden_dim, w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h }
    }

    fn gate_preact(&self, g: &mut Graph, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Var {
        let w = g.param(w);
        let u = g.param(u);
        let b = g.param(b);
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let s = g.add(xw, hu);
        g.add(s, b)
    }

    /// One step for a batch of rows: `x: [M, input_dim]`, `h: [M, hidden_dim]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let (mx, dx) = g.dims(x);
        let (mh, dh) = g.dims(h);
        if dx != self.input_dim || dh != self.hidden_dim || mx != mh {
            return Err(Error::dim(format!(
                "gru step: x is {mx}x{dx}, h is {mh}x{dh}, cell expects input {} and hidden {}",
                self.input_dim, self.hidden_dim
            )));
        }
        let z = self.gate_preact(g, x, h, self.w_z, self.u_z, self.b_z);
        let z = g.sigmoid(z);
        let r = self.gate_preact(g, x, h, self.w_r, self.u_r, self.b_r);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let cand = self.gate_preact(g, x, rh, self.w_h, self.u_h, self.b_h);
        let cand = g.tanh(cand);
        let diff = g.sub(h, cand);
        let zd = g.mul(z, diff);
        Ok(g.add(cand, zd))
    }
}

/// Evaluates an MLP on `x` (any leading shape, last axis = input width).
pub fn mlp_forward(store: &ParamStore, params: &MlpParams, x: &NumArray) -> Result<NumArray> {
    let mut g = Graph::new(store);
    let rows = x.rows();
    let xv = g.input(x.clone());
    let y = params.forward(&mut g, xv)?;
    let mut shape = x.shape().to_vec();
    match shape.last_mut() {
        Some(last) => *last = params.out_dim(),
        None => shape = vec![params.out_dim()],
    }
    let out = g.value(y).clone();
    debug_assert_eq!(out.rows(), rows);
    out.reshape(shape)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &NumArray) -> Result<NumArray> {
    if let Some(v) = x.data().iter().find(|v| v.is_nan()) {
        return Err(Error::NumericDomain(format!("softmax input contains {v}")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let y = g.softmax_rows(xv);
    g.value(y).clone().reshape(x.shape().to_vec())
}

/// One GRU step on plain arrays. `x` and `h` may be vectors or `[M, *]` batches.
pub fn gru_step(store: &ParamStore, params: &GruParams, x: &NumArray, h: &NumArray) -> Result<NumArray> {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let hv = g.input(h.clone());
    let y = params.step(&mut g, xv, hv)?;
    g.value(y).clone().reshape(h.shape().to_vec())
}
