//! Dual-stream radar feature extractor.
//!
//! The local stream is an edge convolution over a kNN graph whose metric mixes
//! position, Doppler and RCS similarity. The global stream is a stack of
//! pre-norm Transformer blocks whose attention logits are penalised by the
//! squared point distance. The two streams meet through a pooled global
//! summary added to the local features, then a per-point projection.
//!
//! Points are processed in a canonical order (lexicographic on their raw
//! attributes) and outputs are mapped back, so permuting the input permutes the
//! output bit for bit.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{
    attention, Activation, Graph, LayerNormParams, Linear, MlpParams, NumArray, ParamId, ParamStore, Var,
};
use crate::pir::{AttributeVector, PirOutput, ATTR_DIM};
use crate::scene_sim::RadarPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalStreamConfig {
    pub k: usize,
    /// weight on squared Doppler difference, (m/s)^-2
    pub lambda_v: f64,
    /// weight on squared RCS difference
    pub lambda_r: f64,
    pub layers: usize,
    pub width: usize,
    /// use normalised attributes instead of raw units in the kNN metric
    pub knn_normalized: bool,
    /// additionally scale edge features by the neighbour's gate
    pub gate_edges: bool,
}

impl Default for LocalStreamConfig {
    fn default() -> Self {
        Self { k: 8, lambda_v: 1.0, lambda_r: 0.1, layers: 2, width: 32, knn_normalized: false, gate_edges: false }
    }
}

impl LocalStreamConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.k < 1 {
            bad.push("local.k".into());
        }
        if !(self.lambda_v >= 0.0) {
            bad.push("local.lambda_v".into());
        }
        if !(self.lambda_r >= 0.0) {
            bad.push("local.lambda_r".into());
        }
        if self.layers < 1 {
            bad.push("local.layers".into());
        }
        if self.width < 1 {
            bad.push("local.width".into());
        }
        bad
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub local: LocalStreamConfig,
    pub sasa_blocks: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// radar token width
    pub out_dim: usize,
    /// initial decay, decoded value of softplus(beta_raw)
    pub beta_init: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            local: LocalStreamConfig::default(),
            sasa_blocks: 2,
            heads: 1,
            ffn_width: 64,
            out_dim: 64,
            beta_init: 0.01,
        }
    }
}

impl BackboneConfig {
    pub fn problems(&self, embed_dim: usize) -> Vec<String> {
        let mut bad = self.local.problems();
        if self.heads == 0 || embed_dim % self.heads != 0 {
            bad.push("backbone.heads".into());
        }
        if self.out_dim == 0 {
            bad.push("backbone.out_dim".into());
        }
        if !(self.beta_init > 0.0) {
            bad.push("backbone.beta_init".into());
        }
        bad
    }
}

fn weighted_d2(a: &[f64; 5], b: &[f64; 5], cfg: &LocalStreamConfig) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    let dv = a[3] - b[3];
    let dr = a[4] - b[4];
    dx * dx + dy * dy + dz * dz + cfg.lambda_v * dv * dv + cfg.lambda_r * dr * dr
}

/// For each point, the `k` other points with the smallest weighted squared
/// distance, ties broken by smaller index. Fewer than `k` others returns all.
pub fn physics_knn(points: &[RadarPoint], attrs: &[AttributeVector], cfg: &LocalStreamConfig) -> Vec<Vec<usize>> {
    let feats: Vec<[f64; 5]> = if cfg.knn_normalized {
        attrs.to_vec()
    } else {
        points.iter().map(|p| [p.x, p.y, p.z, p.v, p.rcs]).collect()
    };
    let n = feats.len();
    let k = cfg.k.min(n.saturating_sub(1));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // bounded insertion into an ascending (d2, index) list
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = weighted_d2(&feats[i], &feats[j], cfg);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, bj)| bd < d || (bd == d && bj < j));
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        out.push(best.into_iter().map(|(_, j)| j).collect());
    }
    out
}

#[derive(Clone, Debug)]
pub struct LocalStreamParams {
    /// one edge function per layer: `[2 * C_in + 5] -> C_loc`, activated
    pub edge: Vec<MlpParams>,
}

impl LocalStreamParams {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, cfg: &LocalStreamConfig, rng: &mut impl Rng) -> Self {
        let mut edge = Vec::with_capacity(cfg.layers);
        let mut c = in_dim;
        for s in 0..cfg.layers {
            edge.push(MlpParams::new(
                store,
                &format!("{name}/edge{s}"),
                &[2 * c + ATTR_DIM, cfg.width],
                Activation::Gelu,
                true,
                rng,
            ));
            c = cfg.width;
        }
        Self { edge }
    }

    pub fn out_dim(&self) -> usize {
        self.edge.last().map_or(0, MlpParams::out_dim)
    }
}

/// Edge aggregation: per layer, `max_j phi([f_i, f_j, a_j - a_i])` over the
/// neighbours of `i`; a point without neighbours uses a self-edge.
///
/// `gates` (`[N, 1]`) scales each edge feature by the neighbour's gate.
pub fn local_stream(
    g: &mut Graph,
    f: Var,
    attrs: &[AttributeVector],
    neighbors: &[Vec<usize>],
    params: &LocalStreamParams,
    gates: Option<Var>,
) -> Result<Var> {
    let n = attrs.len();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let js: &[usize] = if neighbors[i].is_empty() { std::slice::from_ref(&i) } else { &neighbors[i] };
        let start = src.len();
        for &j in js {
            src.push(i);
            dst.push(j);
        }
        groups.push((start..src.len()).collect::<Vec<_>>());
    }
    let deltas: Vec<f64> = src
        .iter()
        .zip(&dst)
        .flat_map(|(&i, &j)| (0..ATTR_DIM).map(move |c| attrs[j][c] - attrs[i][c]))
        .collect();
    let deltas = g.input(NumArray::matrix(src.len(), ATTR_DIM, deltas));
    let edge_gates = gates.map(|gv| g.select_rows(gv, &dst));

    let mut h = f;
    for phi in &params.edge {
        let fi = g.select_rows(h, &src);
        let fj = g.select_rows(h, &dst);
        let cat = g.concat_cols(&[fi, fj, deltas]);
        let mut e = phi.forward(g, cat)?;
        if let Some(eg) = edge_gates {
            e = g.mul(e, eg);
        }
        h = g.group_max(e, &groups);
    }
    Ok(h)
}

/// Pre-norm Transformer block with distance-decayed attention logits
/// `q k^T / sqrt(d_k) - beta * D^2`.
#[derive(Clone, Debug)]
pub struct SasaBlock {
    pub norm1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub beta_raw: ParamId,
    pub out: Linear,
    pub norm2: LayerNormParams,
    pub ffn: MlpParams,
    pub heads: usize,
}

/// `ln(exp(y) - 1)`, the softplus preimage.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl SasaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ffn_width: usize,
        heads: usize,
        beta_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "heads must divide the token width");
        Self {
            norm1: LayerNormParams::new(store, &format!("{name}/norm1"), dim),
            query: Linear::new(store, &format!("{name}/query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}/key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}/value"), dim, dim, true, rng),
            beta_raw: store.add(format!("{name}/beta_raw"), NumArray::scalar(inverse_softplus(beta_init))),
            out: Linear::new(store, &format!("{name}/out"), dim, dim, true, rng),
            norm2: LayerNormParams::new(store, &format!("{name}/norm2"), dim),
            ffn: MlpParams::new(store, &format!("{name}/ffn"), &[dim, ffn_width, dim], Activation::Gelu, false, rng),
            heads,
        }
    }

    /// `x: [N, C]`; `d2`: constant `[N, N]` squared distances, or `None` for
    /// plain self-attention. Returns the block output and per-head weights.
    pub fn forward(&self, g: &mut Graph, x: Var, d2: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let y = self.norm1.forward(g, x);
        let q = self.query.forward(g, y);
        let k = self.key.forward(g, y);
        let v = self.value.forward(g, y);
        let bias = d2.map(|d2| {
            let raw = g.param(self.beta_raw);
            let beta = g.softplus(raw);
            let decay = g.mul(d2, beta);
            g.scale(decay, -1.0)
        });
        let dk = self.query.out_dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dk, dk), g.slice_cols(k, h * dk, dk), g.slice_cols(v, h * dk, dk))
            };
            let (o, w) = attention(g, qh, kh, vh, bias);
            outs.push(o);
            weights.push(w);
        }
        let att = if self.heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let att = self.out.forward(g, att);
        let x = g.add(x, att);
        let y = self.norm2.forward(g, x);
        let y = self.ffn.forward(g, y)?;
        Ok((g.add(x, y), weights))
    }
}

/// Squared pairwise Euclidean distances of `[N, 3]` positions.
pub fn squared_distances(positions: &[[f64; 3]]) -> NumArray {
    let n = positions.len();
    let mut d = Vec::with_capacity(n * n);
    for a in positions {
        for b in positions {
            let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
            d.push(dx * dx + dy * dy + dz * dz);
        }
    }
    NumArray::matrix(n, n, d)
}

#[derive(Clone, Debug)]
pub struct GlobalStreamParams {
    pub blocks: Vec<SasaBlock>,
    /// pooled global summary -> local width
    pub context: MlpParams,
}

#[derive(Clone, Debug)]
pub struct RadarBackboneParams {
    pub local: LocalStreamParams,
    pub global: Option<GlobalStreamParams>,
    pub proj: Linear,
}

impl RadarBackboneParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        cfg: &BackboneConfig,
        sasa: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let local = LocalStreamParams::new(store, &format!("{name}/local"), embed_dim, &cfg.local, rng);
        let c_loc = local.out_dim();
        let global = sasa.then(|| GlobalStreamParams {
            blocks: (0..cfg.sasa_blocks)
                .map(|b| {
                    SasaBlock::new(store, &format!("{name}/sasa{b}"), embed_dim, cfg.ffn_width, cfg.heads, cfg.beta_init, rng)
                })
                .collect(),
            context: MlpParams::new(
                store,
                &format!("{name}/context"),
                &[embed_dim, c_loc, c_loc],
                Activation::Gelu,
                false,
                rng,
            ),
        });
        let proj_in = if sasa { c_loc + embed_dim } else { c_loc };
        let proj = Linear::new(store, &format!("{name}/proj"), proj_in, cfg.out_dim, true, rng);
        Self { local, global, proj }
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim
    }
}

fn point_order(a: &RadarPoint, b: &RadarPoint) -> Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
        .then(a.v.total_cmp(&b.v))
        .then(a.rcs.total_cmp(&b.rcs))
}

/// Indices sorting `points` canonically (stable, so exact duplicates keep
/// input order; they are interchangeable anyway).
pub fn canonical_order(points: &[RadarPoint]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&i, &j| point_order(&points[i], &points[j]));
    idx
}

/// Runs both streams on gated embeddings `f: [N, C]` (rows aligned with
/// `points`/`attrs`). Returns `[N, C_r]` tokens in input order, or `None`
/// for an empty frame.
pub fn backbone_graph(
    g: &mut Graph,
    params: &RadarBackboneParams,
    cfg: &BackboneConfig,
    f: Var,
    points: &[RadarPoint],
    attrs: &[AttributeVector],
    gates: Option<Var>,
) -> Result<Option<Var>> {
    let n = points.len();
    if n == 0 {
        return Ok(None);
    }
    let order = canonical_order(points);
    let identity = order.iter().enumerate().all(|(k, &i)| k == i);
    let (f, gates, pts, attrs) = if identity {
        (f, gates, points.to_vec(), attrs.to_vec())
    } else {
        (
            g.select_rows(f, &order),
            gates.map(|gv| g.select_rows(gv, &order)),
            order.iter().map(|&i| points[i]).collect::<Vec<_>>(),
            order.iter().map(|&i| attrs[i]).collect::<Vec<_>>(),
        )
    };

    let neighbors = physics_knn(&pts, &attrs, &cfg.local);
    let edge_gates = if cfg.local.gate_edges { gates } else { None };
    let loc = local_stream(g, f, &attrs, &neighbors, &params.local, edge_gates)?;

    let fused = match &params.global {
        Some(global) => {
            let positions: Vec<[f64; 3]> = pts.iter().map(RadarPoint::position).collect();
            let d2 = g.input(squared_distances(&positions));
            let mut h = f;
            for block in &global.blocks {
                h = block.forward(g, h, Some(d2))?.0;
            }
            let pooled = g.mean_rows(h);
            let ctx = global.context.forward(g, pooled)?;
            let loc = g.add(loc, ctx);
            g.concat_cols(&[loc, h])
        }
        None => loc,
    };
    let tokens = params.proj.forward(g, fused);
    if identity {
        return Ok(Some(tokens));
    }
    let mut inverse = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k;
    }
    Ok(Some(g.select_rows(tokens, &inverse)))
}

/// Radar tokens of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarTokens {
    /// `[N, C_r]`
    pub tokens: NumArray,
    /// `[N, 3]` compensated coordinates
    pub positions: NumArray,
    /// `[N]`
    pub gates: Vec<f64>,
}

impl RadarTokens {
    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }
}

pub fn positions_array(points: &[RadarPoint]) -> NumArray {
    NumArray::matrix(points.len(), 3, points.iter().flat_map(|p| p.position()).collect())
}

/// Array-level entry point: PIR outputs and their points in, tokens out.
pub fn radar_backbone_forward(
    store: &ParamStore,
    params: &RadarBackboneParams,
    cfg: &BackboneConfig,
    pir_out: &[PirOutput],
    points: &[RadarPoint],
    attrs: &[AttributeVector],
) -> Result<RadarTokens> {
    let n = points.len();
    assert_eq!(pir_out.len(), n, "one PIR output per point");
    let positions = positions_array(points);
    let gates: Vec<f64> = pir_out.iter().map(|o| o.g).collect();
    if n == 0 {
        return Ok(RadarTokens { tokens: NumArray::zeros(&[0, params.out_dim()]), positions, gates });
    }
    let mut g = Graph::new(store);
    let c = pir_out[0].f0_gated.len();
    let f = g.input(NumArray::matrix(n, c, pir_out.iter().flat_map(|o| o.f0_gated.iter().copied()).collect()));
    let gv = g.input(NumArray::matrix(n, 1, gates.clone()));
    let tokens = backbone_graph(&mut g, params, cfg, f, points, attrs, Some(gv))?.expect("non-empty frame");
    Ok(RadarTokens { tokens: g.value(tokens).clone(), positions, gates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::oracle;
    use crate::pir::{attrs_to_array, normalize_frame, pir_forward, NormStats, PirParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<RadarPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                RadarPoint::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.5..30.0),
                )
            })
            .collect()
    }

    #[test]
    fn knn_euclidean_reduction_on_a_line() {
        let pts: Vec<_> = [0.0, 1.0, 3.0, 6.0, 10.0]
            .iter()
            .map(|&x| RadarPoint::new(x, 0.0, 0.0, x * 7.0, 100.0 - x))
            .collect();
        let cfg = LocalStreamConfig { k: 2, lambda_v: 0.0, lambda_r: 0.0, ..Default::default() };
        let nn = physics_knn(&pts, &[], &cfg);
        assert_eq!(nn, vec![vec![1, 2], vec![0, 2], vec![1, 0], vec![2, 4], vec![3, 2]]);
    }

    #[test]
    fn knn_clamps_to_available_points() {
        let pts = random_points(2, 1);
        let cfg = LocalStreamConfig { k: 3, ..Default::default() };
        assert_eq!(physics_knn(&pts, &[], &cfg), vec![vec![1], vec![0]]);
        assert_eq!(physics_knn(&pts[..1], &[], &cfg), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let pts = random_points(50, 100 + trial);
            let cfg = LocalStreamConfig {
                k: rng.random_range(1..12),
                lambda_v: rng.random_range(0.0..3.0),
                lambda_r: rng.random_range(0.0..0.5),
                ..Default::default()
            };
            assert_eq!(physics_knn(&pts, &[], &cfg), oracle::knn(&pts, &cfg));
        }
        // exact ties resolve to the smaller index
        let pts: Vec<_> = [-1.0, 1.0, 0.0].iter().map(|&x| RadarPoint::new(x, 0.0, 0.0, 0.0, 1.0)).collect();
        let cfg = LocalStreamConfig { k: 1, ..Default::default() };
        assert_eq!(physics_knn(&pts, &[], &cfg)[2], vec![0]);
    }

    struct Fixture {
        store: ParamStore,
        pir: PirParams,
        backbone: RadarBackboneParams,
        cfg: BackboneConfig,
    }

    fn fixture(seed: u64, sasa: bool) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig {
            local: LocalStreamConfig { k: 2, width: 6, ..Default::default() },
            ffn_width: 8,
            out_dim: 5,
            heads: 2,
            ..Default::default()
        };
        let pir = PirParams::new(&mut store, "pir", 3, 4, 6, &mut rng);
        let backbone = RadarBackboneParams::new(&mut store, "radar", 4, &cfg, sasa, &mut rng);
        Fixture { store, pir, backbone, cfg }
    }

    fn run(fx: &Fixture, pts: &[RadarPoint]) -> RadarTokens {
        let attrs = normalize_frame(pts, &NormStats::fit(pts)).unwrap();
        let pir = pir_forward(&fx.store, &fx.pir, &attrs).unwrap();
        radar_backbone_forward(&fx.store, &fx.backbone, &fx.cfg, &pir, pts, &attrs).unwrap()
    }

    fn random_rows(n: usize, c: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn rows_input(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.input(NumArray::matrix(rows.len(), rows[0].len(), rows.concat()))
    }

    #[test]
    fn local_stream_matches_scalar_oracle() {
        let fx = fixture(3, true);
        let pts = random_points(6, 4);
        let attrs = normalize_frame(&pts, &NormStats::fit(&pts)).unwrap();
        let nn = physics_knn(&pts, &attrs, &fx.cfg.local);
        let f = random_rows(6, 4, 5);
        let mut g = Graph::new(&fx.store);
        let fv = rows_input(&mut g, &f);
        let out = local_stream(&mut g, fv, &attrs, &nn, &fx.backbone.local, None).unwrap();
        let expect = oracle::local_stream(&fx.store, &fx.backbone.local, &f, &attrs, &nn);
        for i in 0..6 {
            assert!(oracle::max_abs(g.value(out).row(i), &expect[i]) <= 1e-12);
        }
    }

    #[test]
    fn singleton_uses_self_edge() {
        let fx = fixture(6, true);
        let attrs = [[0.3, -0.2, 0.1, 0.5, -1.0]];
        let f = random_rows(1, 4, 7);
        let mut g = Graph::new(&fx.store);
        let fv = rows_input(&mut g, &f);
        let out = local_stream(&mut g, fv, &attrs, &[vec![]], &fx.backbone.local, None).unwrap();
        let mut h = f[0].clone();
        for phi in &fx.backbone.local.edge {
            h = oracle::mlp(&fx.store, phi, &oracle::concat(&[&h, &h, &[0.0; 5]]));
        }
        assert!(oracle::max_abs(g.value(out).row(0), &h) <= 1e-12);
    }

    #[test]
    fn identical_points_get_identical_features() {
        let fx = fixture(8, true);
        let p = RadarPoint::new(1.0, 2.0, 0.5, 0.3, 4.0);
        let out = run(&fx, &[p, p]);
        assert_eq!(out.tokens.row(0), out.tokens.row(1));
    }

    #[test]
    fn local_deltas_are_translation_invariant() {
        let fx = fixture(9, false);
        let attrs: Vec<AttributeVector> = (0..5).map(|i| [i as f64 * 0.7, -0.3 * i as f64, 0.1, 0.2 * i as f64, 0.5]).collect();
        let shifted: Vec<AttributeVector> =
            attrs.iter().map(|a| [a[0] + 3.0, a[1] - 2.0, a[2] + 0.5, a[3], a[4]]).collect();
        let nn = vec![vec![1, 2], vec![0, 2], vec![1, 3], vec![2, 4], vec![3, 2]];
        let f = random_rows(5, 4, 10);
        let eval = |a: &[AttributeVector]| {
            let mut g = Graph::new(&fx.store);
            let fv = rows_input(&mut g, &f);
            let out = local_stream(&mut g, fv, a, &nn, &fx.backbone.local, None).unwrap();
            g.value(out).clone()
        };
        assert!(eval(&attrs).max_abs_diff(&eval(&shifted)) < 1e-12);
    }

    fn sasa_eval(store: &ParamStore, b: &SasaBlock, x: &[Vec<f64>], pos: &[[f64; 3]], decay: bool) -> (NumArray, Vec<NumArray>) {
        let mut g = Graph::new(store);
        let xv = rows_input(&mut g, x);
        let d2 = decay.then(|| g.input(squared_distances(pos)));
        let (out, w) = b.forward(&mut g, xv, d2).unwrap();
        (g.value(out).clone(), w.iter().map(|&w| g.value(w).clone()).collect())
    }

    fn random_positions(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..1.0)]).collect()
    }

    fn block(seed: u64, beta: f64) -> (ParamStore, SasaBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = SasaBlock::new(&mut store, "b", 4, 8, 2, beta, &mut rng);
        (store, b)
    }

    #[test]
    fn sasa_matches_scalar_oracle() {
        let (store, b) = block(11, 0.3);
        let x = random_rows(4, 4, 12);
        let pos = random_positions(4, 13);
        let (out, w) = sasa_eval(&store, &b, &x, &pos, true);
        let (eo, ew) = oracle::sasa_block(&store, &b, &x, &pos);
        for i in 0..4 {
            assert!(oracle::max_abs(out.row(i), &eo[i]) <= 1e-12);
            for h in 0..2 {
                assert!(oracle::max_abs(w[h].row(i), &ew[h][i]) <= 1e-12);
                assert!((w[h].row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sasa_reduces_to_plain_attention() {
        let (mut store, b) = block(14, 0.3);
        let x = random_rows(5, 4, 15);
        let pos = random_positions(5, 16);
        store.get_mut(b.beta_raw).data_mut()[0] = -40.0;
        let (a, _) = sasa_eval(&store, &b, &x, &pos, true);
        let (p, _) = sasa_eval(&store, &b, &x, &pos, false);
        assert!(a.max_abs_diff(&p) < 1e-6);

        store.get_mut(b.beta_raw).data_mut()[0] = 2.0;
        let same = vec![[1.0, -2.0, 0.5]; 5];
        let (a, _) = sasa_eval(&store, &b, &x, &same, true);
        let (p, _) = sasa_eval(&store, &b, &x, &same, false);
        assert_eq!(a, p);
    }

    #[test]
    fn moving_a_point_away_lowers_attention_onto_it() {
        let (store, b) = block(17, 0.2);
        let x = random_rows(4, 4, 18);
        let pos = random_positions(4, 19);
        let (_, near) = sasa_eval(&store, &b, &x, &pos, true);
        let mut far = pos.clone();
        far[2][0] += 5.0;
        let (_, moved) = sasa_eval(&store, &b, &x, &far, true);
        for h in 0..2 {
            for i in [0, 1, 3] {
                assert!(moved[h].get(i, 2) < near[h].get(i, 2));
            }
        }
    }

    #[test]
    fn empty_and_singleton_frames() {
        let fx = fixture(20, true);
        let empty = run(&fx, &[]);
        assert!(empty.is_empty());
        assert_eq!(empty.tokens.shape(), &[0, 5]);
        let one = run(&fx, &random_points(1, 21));
        assert_eq!(one.tokens.shape(), &[1, 5]);
        assert!(one.tokens.is_finite());
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        for sasa in [true, false] {
            let fx = fixture(22, sasa);
            let pts = random_points(8, 23);
            let perm = [5, 2, 7, 0, 3, 6, 1, 4];
            let permuted: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
            let stats = NormStats::fit(&pts);
            let eval = |p: &[RadarPoint]| {
                let attrs = normalize_frame(p, &stats).unwrap();
                let pir = pir_forward(&fx.store, &fx.pir, &attrs).unwrap();
                radar_backbone_forward(&fx.store, &fx.backbone, &fx.cfg, &pir, p, &attrs).unwrap()
            };
            let a = eval(&pts);
            let b = eval(&permuted);
            for (k, &i) in perm.iter().enumerate() {
                assert_eq!(b.tokens.row(k), a.tokens.row(i));
            }
        }
    }

    #[test]
    fn backbone_gradients() {
        let fx = fixture(24, true);
        let pts = random_points(5, 25);
        let attrs = normalize_frame(&pts, &NormStats::fit(&pts)).unwrap();
        let a = attrs_to_array(&attrs);
        let report = grad_check(&fx.store, None, 1e-5, |g| {
            let av = g.input(a.clone());
            let pv = fx.pir.forward(g, av, true)?;
            let t = backbone_graph(g, &fx.backbone, &fx.cfg, pv.f0_gated, &pts, &attrs, Some(pv.g))?.unwrap();
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
