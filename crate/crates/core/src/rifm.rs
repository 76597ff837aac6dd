//! Query-level radar/image fusion. Each learned object query attends once over
//! the radar tokens and once over the image tokens; the two read-outs are
//! concatenated and mixed by an MLP.

use std::cmp::Ordering;

use rand::Rng;

use crate::backbone::RadarTokens;
use crate::error::{Error, Result};
use crate::image::{ImageFeatureVars, ImageFeatures};
use crate::numerics::{attention, params, Activation, Graph, LayerNormParams, Linear, MlpParams, NumArray, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct RadarCross {
    pub norm_query: LayerNormParams,
    pub norm_tokens: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// token position (scaled) -> key offset
    pub position: MlpParams,
}

#[derive(Clone, Debug)]
pub struct ImageCross {
    pub norm_query: LayerNormParams,
    pub norm_tokens: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

#[derive(Clone, Debug)]
pub struct RifmParams {
    /// `[M, C_q]`
    pub queries: ParamId,
    pub radar: Option<RadarCross>,
    pub image: ImageCross,
    pub fuse: MlpParams,
    pub query_dim: usize,
    /// radar positions are divided by this before the position MLP
    pub position_scale: f64,
}

impl RifmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_queries: usize,
        query_dim: usize,
        radar_dim: Option<usize>,
        image_dim: usize,
        position_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let act = Activation::Gelu;
        let queries = store.add(format!("{name}/queries"), params::normal(rng, num_queries, query_dim, 1.0));
        let radar = radar_dim.map(|cr| RadarCross {
            norm_query: LayerNormParams::new(store, &format!("{name}/radar/norm_query"), query_dim),
            norm_tokens: LayerNormParams::new(store, &format!("{name}/radar/norm_tokens"), cr),
            query: Linear::new(store, &format!("{name}/radar/query"), query_dim, query_dim, true, rng),
            key: Linear::new(store, &format!("{name}/radar/key"), cr, query_dim, true, rng),
            value: Linear::new(store, &format!("{name}/radar/value"), cr, query_dim, true, rng),
            position: MlpParams::new(
                store,
                &format!("{name}/radar/position"),
                &[3, query_dim, query_dim, query_dim],
                act,
                false,
                rng,
            ),
        });
        let image = ImageCross {
            norm_query: LayerNormParams::new(store, &format!("{name}/image/norm_query"), query_dim),
            norm_tokens: LayerNormParams::new(store, &format!("{name}/image/norm_tokens"), image_dim),
            query: Linear::new(store, &format!("{name}/image/query"), query_dim, query_dim, true, rng),
            key: Linear::new(store, &format!("{name}/image/key"), image_dim, query_dim, true, rng),
            value: Linear::new(store, &format!("{name}/image/value"), image_dim, query_dim, true, rng),
        };
        let fuse = MlpParams::new(store, &format!("{name}/fuse"), &[2 * query_dim, query_dim, query_dim], act, false, rng);
        Self { queries, radar, image, fuse, query_dim, position_scale }
    }

    pub fn num_queries(&self, store: &ParamStore) -> usize {
        store.get(self.queries).rows()
    }
}

/// Radar token set of one frame inside a graph.
#[derive(Clone, Debug)]
pub struct RadarTokenVars {
    /// `[N, C_r]`
    pub tokens: Var,
    /// `[N, 3]`
    pub positions: NumArray,
}

#[derive(Clone, Debug)]
pub struct RifmVars {
    pub fused: Var,
    pub radar_readout: Var,
    pub image_readout: Var,
    /// `[M, N]` radar attention over canonically ordered tokens, if any
    pub radar_weights: Option<Var>,
    pub image_weights: Var,
}

fn row_order(values: &NumArray, positions: &NumArray) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.rows()).collect();
    let cmp_rows = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
    };
    idx.sort_by(|&i, &j| cmp_rows(values.row(i), values.row(j)).then(cmp_rows(positions.row(i), positions.row(j))));
    idx
}

impl RifmParams {
    /// Fused queries `[M, C_q]`. `radar = None` (empty frame or radar branch
    /// disabled) gives a zero radar read-out.
    pub fn forward(&self, g: &mut Graph, radar: Option<&RadarTokenVars>, image: &ImageFeatureVars) -> Result<RifmVars> {
        let q = g.param(self.queries);
        let (m, _) = g.dims(q);

        let (radar_readout, radar_weights) = match (radar, &self.radar) {
            (Some(rt), Some(p)) if rt.positions.rows() > 0 => {
                // canonical key order makes the aggregation bitwise order-free
                let order = row_order(g.value(rt.tokens), &rt.positions);
                let tokens = g.select_rows(rt.tokens, &order);
                let pos_rows: Vec<f64> = order.iter().flat_map(|&i| rt.positions.row(i).to_vec()).collect();
                let pos = g.input(NumArray::matrix(order.len(), 3, pos_rows));
                let pos = g.scale(pos, 1.0 / self.position_scale);

                let qn = p.norm_query.forward(g, q);
                let qq = p.query.forward(g, qn);
                let tn = p.norm_tokens.forward(g, tokens);
                let k = p.key.forward(g, tn);
                let pe = p.position.forward(g, pos)?;
                let k = g.add(k, pe);
                let v = p.value.forward(g, tn);
                let (out, w) = attention(g, qq, k, v, None);
                (out, Some(w))
            }
            _ => (g.input(NumArray::zeros(&[m, self.query_dim])), None),
        };

        let p = &self.image;
        let qn = p.norm_query.forward(g, q);
        let qq = p.query.forward(g, qn);
        let tn = p.norm_tokens.forward(g, image.tokens);
        let x = g.add(tn, image.positions);
        let k = p.key.forward(g, x);
        let v = p.value.forward(g, x);
        let (image_readout, image_weights) = attention(g, qq, k, v, None);

        let cat = g.concat_cols(&[radar_readout, image_readout]);
        let fused = self.fuse.forward(g, cat)?;
        Ok(RifmVars { fused, radar_readout, image_readout, radar_weights, image_weights })
    }
}

/// Array-level fusion of one frame.
pub fn rifm_fuse(store: &ParamStore, params: &RifmParams, radar: &RadarTokens, image: &ImageFeatures) -> Result<NumArray> {
    if image.tokens.shape() != image.positions.shape() {
        return Err(Error::dim("image tokens and encodings differ in shape"));
    }
    let mut g = Graph::new(store);
    let rt = (!radar.is_empty()).then(|| RadarTokenVars { tokens: g.input(radar.tokens.clone()), positions: radar.positions.clone() });
    let iv = ImageFeatureVars {
        levels: Vec::new(),
        tokens: g.input(image.tokens.clone()),
        positions: g.input(image.positions.clone()),
    };
    let out = params.forward(&mut g, rt.as_ref(), &iv)?;
    Ok(g.value(out.fused).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CQ: usize = 4;
    const CR: usize = 3;
    const CI: usize = 4;

    fn setup(seed: u64, m: usize) -> (ParamStore, RifmParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RifmParams::new(&mut store, "rifm", m, CQ, Some(CR), CI, 10.0, &mut rng);
        (store, p)
    }

    fn rows(n: usize, c: usize, rng: &mut ChaCha8Rng, scale: f64) -> NumArray {
        NumArray::matrix(n, c, (0..n * c).map(|_| rng.random_range(-scale..scale)).collect())
    }

    fn inputs(n: usize, t: usize, seed: u64) -> (RadarTokens, ImageFeatures) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radar = RadarTokens { tokens: rows(n, CR, &mut rng, 1.0), positions: rows(n, 3, &mut rng, 20.0), gates: vec![0.5; n] };
        let image = ImageFeatures { levels: vec![], tokens: rows(t, CI, &mut rng, 1.0), positions: rows(t, CI, &mut rng, 1.0) };
        (radar, image)
    }

    #[test]
    fn matches_scalar_oracle() {
        let (store, p) = setup(1, 2);
        let (radar, image) = inputs(3, 4, 2);
        let out = rifm_fuse(&store, &p, &radar, &image).unwrap();
        let expect = oracle::rifm_fuse(&store, &p, &radar, &image);
        for m in 0..2 {
            assert!(oracle::max_abs(out.row(m), &expect[m]) <= 1e-12);
        }
    }

    #[test]
    fn single_token_reads_its_value() {
        let (store, p) = setup(3, 3);
        let (radar, image) = inputs(1, 5, 4);
        let mut g = Graph::new(&store);
        let rt = RadarTokenVars { tokens: g.input(radar.tokens.clone()), positions: radar.positions.clone() };
        let iv = ImageFeatureVars { levels: vec![], tokens: g.input(image.tokens.clone()), positions: g.input(image.positions.clone()) };
        let out = p.forward(&mut g, Some(&rt), &iv).unwrap();
        let rc = p.radar.as_ref().unwrap();
        let v = oracle::linear(&store, &rc.value, &oracle::layer_norm(&store, &rc.norm_tokens, radar.tokens.row(0)));
        for m in 0..3 {
            assert!(oracle::max_abs(g.value(out.radar_readout).row(m), &v) <= 1e-12);
        }
        for w in [out.radar_weights.unwrap(), out.image_weights] {
            for r in 0..3 {
                assert!((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn empty_radar_fuses_image_only() {
        let (store, p) = setup(5, 2);
        let (radar, image) = inputs(0, 4, 6);
        let out = rifm_fuse(&store, &p, &radar, &image).unwrap();
        let expect = oracle::rifm_fuse(&store, &p, &radar, &image);
        for m in 0..2 {
            assert!(oracle::max_abs(out.row(m), &expect[m]) <= 1e-12);
        }
    }

    #[test]
    fn radar_token_permutation_is_exactly_invariant() {
        let (store, p) = setup(7, 3);
        let (radar, image) = inputs(6, 5, 8);
        let perm = [3, 5, 0, 2, 4, 1];
        let permuted = RadarTokens {
            tokens: NumArray::matrix(6, CR, perm.iter().flat_map(|&i| radar.tokens.row(i).to_vec()).collect()),
            positions: NumArray::matrix(6, 3, perm.iter().flat_map(|&i| radar.positions.row(i).to_vec()).collect()),
            gates: vec![0.5; 6],
        };
        assert_eq!(rifm_fuse(&store, &p, &radar, &image).unwrap(), rifm_fuse(&store, &p, &permuted, &image).unwrap());
    }

    #[test]
    fn swapping_queries_swaps_rows() {
        let (mut store, p) = setup(9, 3);
        let (radar, image) = inputs(4, 5, 10);
        let a = rifm_fuse(&store, &p, &radar, &image).unwrap();
        let q = store.get_mut(p.queries);
        let (r0, r2) = (q.row(0).to_vec(), q.row(2).to_vec());
        q.data_mut()[..CQ].copy_from_slice(&r2);
        q.data_mut()[2 * CQ..].copy_from_slice(&r0);
        let b = rifm_fuse(&store, &p, &radar, &image).unwrap();
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn fusion_gradients() {
        let (store, p) = setup(11, 2);
        let (radar, image) = inputs(3, 4, 12);
        let report = grad_check(&store, None, 1e-5, |g| {
            let rt = RadarTokenVars { tokens: g.input(radar.tokens.clone()), positions: radar.positions.clone() };
            let iv = ImageFeatureVars { levels: vec![], tokens: g.input(image.tokens.clone()), positions: g.input(image.positions.clone()) };
            let out = p.forward(g, Some(&rt), &iv)?;
            Ok(g.sum(out.fused))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
