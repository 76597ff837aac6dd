//! Per-point radar encoding: attribute normalisation, a learned scattering
//! descriptor, a scalar reliability gate and the gated point embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, MlpParams, NumArray, ParamStore, Var};
use crate::scene_sim::RadarPoint;

/// Normalised `[x, y, z, v, compressed rcs]`.
pub type AttributeVector = [f64; 5];

pub const ATTR_DIM: usize = 5;

/// `sign(r) * ln(1 + |r|)`
pub fn compress_rcs(r: f64) -> f64 {
    r.signum() * r.abs().ln_1p()
}

/// Dataset-level per-channel mean and scale for the attribute vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; ATTR_DIM],
    pub scale: [f64; ATTR_DIM],
}

impl Default for NormStats {
    fn default() -> Self {
        Self::identity()
    }
}

fn raw_attrs(p: &RadarPoint) -> [f64; ATTR_DIM] {
    [p.x, p.y, p.z, p.v, compress_rcs(p.rcs)]
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; ATTR_DIM], scale: [1.0; ATTR_DIM] }
    }

    /// Sample mean and standard deviation per channel. Constant channels get
    /// scale 1 so they map to zero rather than blowing up.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a RadarPoint>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; ATTR_DIM];
        let mut sq = [0.0; ATTR_DIM];
        let rows: Vec<[f64; ATTR_DIM]> = points.into_iter().map(raw_attrs).collect();
        for r in &rows {
            n += 1;
            for c in 0..ATTR_DIM {
                sum[c] += r[c];
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / n as f64);
        for r in &rows {
            for c in 0..ATTR_DIM {
                sq[c] += (r[c] - mean[c]).powi(2);
            }
        }
        let scale = std::array::from_fn(|c| {
            let sd = (sq[c] / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        Self { mean, scale }
    }

    pub fn validate(&self) -> Result<()> {
        let bad: Vec<String> = (0..ATTR_DIM)
            .filter(|&c| !(self.scale[c] > 0.0 && self.scale[c].is_finite() && self.mean[c].is_finite()))
            .map(|c| format!("norm_stats.scale[{c}]"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn apply(&self, p: &RadarPoint) -> AttributeVector {
        let r = raw_attrs(p);
        std::array::from_fn(|c| (r[c] - self.mean[c]) / self.scale[c])
    }
}

pub fn normalize_frame(points: &[RadarPoint], stats: &NormStats) -> Result<Vec<AttributeVector>> {
    stats.validate()?;
    Ok(points.iter().map(|p| stats.apply(p)).collect())
}

/// Stacks attribute vectors into an `[N, 5]` array.
pub fn attrs_to_array(attrs: &[AttributeVector]) -> NumArray {
    NumArray::matrix(attrs.len(), ATTR_DIM, attrs.iter().flat_map(|a| a.iter().copied()).collect())
}

#[derive(Clone, Debug)]
pub struct PirParams {
    pub mapper: MlpParams,
    pub gate: MlpParams,
    pub embed: MlpParams,
}

#[derive(Clone, Copy, Debug)]
pub struct PirVars {
    pub s: Var,
    /// `[N, 1]`
    pub g: Var,
    pub f0: Var,
    pub f0_gated: Var,
}

impl PirParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scatter_dim: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(scatter_dim >= 1);
        let act = Activation::Gelu;
        let cat = ATTR_DIM + scatter_dim;
        let mapper = MlpParams::new(store, &format!("{name}/mapper"), &[ATTR_DIM, hidden, scatter_dim], act, false, rng);
        let gate = MlpParams::new(store, &format!("{name}/gate"), &[cat, hidden, 1], act, false, rng);
        let embed = MlpParams::new(store, &format!("{name}/embed"), &[cat, embed_dim, embed_dim], act, false, rng);
        Self { mapper, gate, embed }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.out_dim()
    }

    /// `attrs: [N, 5]`. With `gated = false` the gate is still evaluated for
    /// inspection but `f0_gated = f0`.
    pub fn forward(&self, g: &mut Graph, attrs: Var, gated: bool) -> Result<PirVars> {
        let s = self.mapper.forward(g, attrs)?;
        let cat = g.concat_cols(&[attrs, s]);
        let logit = self.gate.forward(g, cat)?;
        let gate = g.sigmoid(logit);
        let f0 = self.embed.forward(g, cat)?;
        let f0_gated = if gated { g.mul(f0, gate) } else { f0 };
        Ok(PirVars { s, g: gate, f0, f0_gated })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PirOutput {
    pub s: Vec<f64>,
    pub g: f64,
    pub f0: Vec<f64>,
    pub f0_gated: Vec<f64>,
}

pub fn pir_forward(store: &ParamStore, params: &PirParams, attrs: &[AttributeVector]) -> Result<Vec<PirOutput>> {
    if attrs.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(store);
    let a = g.input(attrs_to_array(attrs));
    let v = params.forward(&mut g, a, true)?;
    let (s, gate, f0, fg) = (g.value(v.s), g.value(v.g), g.value(v.f0), g.value(v.f0_gated));
    Ok((0..attrs.len())
        .map(|i| PirOutput {
            s: s.row(i).to_vec(),
            g: gate.data()[i],
            f0: f0.row(i).to_vec(),
            f0_gated: fg.row(i).to_vec(),
        })
        .collect())
}
