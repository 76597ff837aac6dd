//! Small multi-scale image encoder. Each level is a 3x3, stride-2, zero-padded
//! convolution, so level `l + 1` has `ceil(H_l / 2)` rows. Tokens of every
//! level are flattened row-major and stacked, with a sinusoidal encoding of
//! each cell's ground-plane centre plus a learned per-level embedding.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::GATHER_ZERO;
use crate::numerics::{params, Activation, Graph, Linear, NumArray, ParamId, ParamStore, Var};
use crate::scene_sim::pixel_center;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub size: usize,
    pub levels: usize,
    pub channels: usize,
    pub activation: Activation,
    /// `false` gives a purely linear stack (no activation after convolutions)
    pub activate: bool,
    pub bias: bool,
    /// ground-plane half extent covered by the raster, metres
    pub half_extent: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            size: 64,
            levels: 3,
            channels: 64,
            activation: Activation::Relu,
            activate: true,
            bias: true,
            half_extent: 24.0,
        }
    }
}

impl ImageConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.size < 2 {
            bad.push("image.size".into());
        }
        if self.levels < 1 {
            bad.push("image.levels".into());
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            bad.push("image.channels".into());
        }
        if !(self.half_extent > 0.0) {
            bad.push("image.half_extent".into());
        }
        bad
    }

    /// Side length of every level.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut s = self.size;
        (0..self.levels)
            .map(|_| {
                s = s.div_ceil(2);
                s
            })
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.level_sizes().iter().map(|s| s * s).sum()
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoderParams {
    pub convs: Vec<Linear>,
    /// `[levels, channels]`
    pub level_embed: ParamId,
    pub config: ImageConfig,
}

impl ImageEncoderParams {
    pub fn new(store: &mut ParamStore, name: &str, config: &ImageConfig, rng: &mut impl Rng) -> Self {
        let mut cin = 1;
        let convs = (0..config.levels)
            .map(|l| {
                let c = Linear::new(store, &format!("{name}/conv{l}"), 9 * cin, config.channels, config.bias, rng);
                cin = config.channels;
                c
            })
            .collect();
        let level_embed = store.add(
            format!("{name}/level_embed"),
            params::normal(rng, config.levels, config.channels, 0.1),
        );
        Self { convs, level_embed, config: config.clone() }
    }
}

/// im2col index for a 3x3 stride-2 convolution with zero padding on an
/// `h x w x c` map stored as `[h * w, c]`. Columns are ordered `(ky, kx, c)`.
pub fn conv_index(h: usize, w: usize, c: usize) -> (Arc<[u32]>, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(ho * wo * 9 * c);
    for r in 0..ho {
        for q in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (ir, iq) = ((2 * r + ky) as isize - 1, (2 * q + kx) as isize - 1);
                    let inside = ir >= 0 && iq >= 0 && (ir as usize) < h && (iq as usize) < w;
                    for ch in 0..c {
                        idx.push(if inside { ((ir as usize * w + iq as usize) * c + ch) as u32 } else { GATHER_ZERO });
                    }
                }
            }
        }
    }
    (idx.into(), ho, wo)
}

/// Sinusoidal encoding of ground-plane `(x, y)`: the first half of the
/// channels encode `x`, the second `y`, each as sin/cos pairs on a geometric
/// ladder from a quarter-wave over the half extent up to the finest cell.
pub fn sinusoidal_position(x: f64, y: f64, channels: usize, half_extent: f64, finest_cell: f64) -> Vec<f64> {
    let pairs = channels / 4;
    let lo = std::f64::consts::PI / (2.0 * half_extent);
    let hi = (std::f64::consts::PI / finest_cell).max(lo);
    let freq = |k: usize| if pairs > 1 { lo * (hi / lo).powf(k as f64 / (pairs - 1) as f64) } else { lo };
    let mut out = Vec::with_capacity(channels);
    for coord in [x, y] {
        for k in 0..pairs {
            let a = coord * freq(k);
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Fixed sinusoidal part of the token encodings, `[tokens, channels]`.
pub fn position_table(config: &ImageConfig) -> NumArray {
    let sizes = config.level_sizes();
    let finest = 2.0 * config.half_extent / sizes[0] as f64;
    let mut data = Vec::with_capacity(config.token_count() * config.channels);
    for &s in &sizes {
        for r in 0..s {
            for c in 0..s {
                let (x, y) = pixel_center(config.half_extent, s, r as f64, c as f64);
                data.extend(sinusoidal_position(x, y, config.channels, config.half_extent, finest));
            }
        }
    }
    NumArray::matrix(config.token_count(), config.channels, data)
}

#[derive(Clone, Debug)]
pub struct ImageFeatureVars {
    /// `[H_l * W_l, C]` per level
    pub levels: Vec<Var>,
    pub tokens: Var,
    pub positions: Var,
}

fn level_rows(sizes: &[usize]) -> Vec<usize> {
    sizes.iter().enumerate().flat_map(|(l, s)| std::iter::repeat_n(l, s * s)).collect()
}

impl ImageEncoderParams {
    /// `image: [H, W]`; `pos_table` from [`position_table`] (passed in so a
    /// caller can build it once).
    pub fn forward(&self, g: &mut Graph, image: &NumArray, pos_table: &NumArray) -> Result<ImageFeatureVars> {
        let cfg = &self.config;
        if image.shape() != [cfg.size, cfg.size] {
            return Err(Error::dim(format!(
                "image is {:?}, encoder expects [{}, {}]",
                image.shape(),
                cfg.size,
                cfg.size
            )));
        }
        let mut h = g.input(NumArray::matrix(cfg.size * cfg.size, 1, image.data().to_vec()));
        let (mut hh, mut ww, mut c) = (cfg.size, cfg.size, 1);
        let mut levels = Vec::with_capacity(cfg.levels);
        for conv in &self.convs {
            let (idx, ho, wo) = conv_index(hh, ww, c);
            let cols = g.gather(h, idx, ho * wo, 9 * c);
            h = conv.forward(g, cols);
            if cfg.activate {
                h = cfg.activation.apply(g, h);
            }
            levels.push(h);
            (hh, ww, c) = (ho, wo, cfg.channels);
        }
        let tokens = if levels.len() == 1 { levels[0] } else { g.concat_rows(&levels) };
        let table = g.input(pos_table.clone());
        let emb = g.param(self.level_embed);
        let emb = g.select_rows(emb, &level_rows(&cfg.level_sizes()));
        let positions = g.add(table, emb);
        Ok(ImageFeatureVars { levels, tokens, positions })
    }
}

/// Encoded image: per-level maps `[H_l, W_l, C]`, flat tokens and encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub levels: Vec<NumArray>,
    pub tokens: NumArray,
    pub positions: NumArray,
}

pub fn image_encode(store: &ParamStore, params: &ImageEncoderParams, image: &NumArray) -> Result<ImageFeatures> {
    let mut g = Graph::new(store);
    let v = params.forward(&mut g, image, &position_table(&params.config))?;
    let sizes = params.config.level_sizes();
    let c = params.config.channels;
    let levels = v
        .levels
        .iter()
        .zip(&sizes)
        .map(|(&l, &s)| g.value(l).clone().reshape(vec![s, s, c]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageFeatures { levels, tokens: g.value(v.tokens).clone(), positions: g.value(v.positions).clone() })
}

/// Splits flat tokens back into `[H_l, W_l, C]` maps.
pub fn unflatten(tokens: &NumArray, config: &ImageConfig) -> Result<Vec<NumArray>> {
    let c = tokens.cols();
    let mut start = 0;
    config
        .level_sizes()
        .iter()
        .map(|&s| {
            let n = s * s * c;
            let part = tokens.data().get(start..start + n).ok_or_else(|| Error::dim("too few tokens"))?.to_vec();
            start += n;
            NumArray::new(vec![s, s, c], part)
        })
        .collect()
}
