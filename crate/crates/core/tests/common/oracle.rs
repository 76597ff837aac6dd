//! Plain scalar-loop reference evaluations used to pin the graph
//! implementations. Deliberately written without the graph or gemm kernels.
#![allow(dead_code)]

use physfusion::backbone::{squared_distances, LocalStreamConfig, LocalStreamParams, RadarTokens, SasaBlock};
use physfusion::image::ImageFeatures;
use physfusion::numerics::{Activation, GruParams, LayerNormParams, Linear, MlpParams, NumArray, ParamStore};
use physfusion::pir::AttributeVector;
use physfusion::rifm::RifmParams;
use physfusion::scene_sim::RadarPoint;
use physfusion::setpred::assignment_cost;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), l.in_dim);
    let w = store.get(l.weight).data();
    let mut out = vec![0.0; l.out_dim];
    for (o, out_o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, xi) in x.iter().enumerate() {
            s += xi * w[i * l.out_dim + o];
        }
        if let Some(b) = l.bias {
            s += store.get(b).data()[o];
        }
        *out_o = s;
    }
    out
}

pub fn mlp(store: &ParamStore, p: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = p.layers().len();
    for (i, l) in p.layers().iter().enumerate() {
        h = linear(store, l, &h);
        if i + 1 < n || p.activate_output {
            h = h.into_iter().map(|v| act(p.activation, v)).collect();
        }
    }
    h
}

pub fn layer_norm(store: &ParamStore, p: &LayerNormParams, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    let gain = store.get(p.gain).data();
    let bias = store.get(p.bias).data();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * gain[i] + bias[i]).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Single-head scaled dot-product attention, one query row at a time.
/// `bias[i][j]` is added to the logits. Returns (outputs, weights).
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], bias: Option<&[Vec<f64>]>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q[0].len() as f64;
    let mut outs = Vec::new();
    let mut ws = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let logits: Vec<f64> = k
            .iter()
            .enumerate()
            .map(|(j, kj)| dot(qi, kj) / d.sqrt() + bias.map_or(0.0, |b| b[i][j]))
            .collect();
        let w = softmax(&logits);
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += wj * vc;
            }
        }
        outs.push(o);
        ws.push(w);
    }
    (outs, ws)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn knn(points: &[RadarPoint], cfg: &LocalStreamConfig) -> Vec<Vec<usize>> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let mut c: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let (a, b) = (&points[i], &points[j]);
                    let d = (a.x - b.x).powi(2)
                        + (a.y - b.y).powi(2)
                        + (a.z - b.z).powi(2)
                        + cfg.lambda_v * (a.v - b.v).powi(2)
                        + cfg.lambda_r * (a.rcs - b.rcs).powi(2);
                    (d, j)
                })
                .collect();
            c.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            c.into_iter().take(cfg.k).map(|(_, j)| j).collect()
        })
        .collect()
}

pub fn local_stream(
    store: &ParamStore,
    params: &LocalStreamParams,
    f: &[Vec<f64>],
    attrs: &[AttributeVector],
    nn: &[Vec<usize>],
) -> Vec<Vec<f64>> {
    let mut h = f.to_vec();
    for phi in &params.edge {
        let mut next = Vec::new();
        for i in 0..h.len() {
            let js = if nn[i].is_empty() { vec![i] } else { nn[i].clone() };
            let mut best: Option<Vec<f64>> = None;
            for j in js {
                let d: Vec<f64> = (0..5).map(|c| attrs[j][c] - attrs[i][c]).collect();
                let e = mlp(store, phi, &concat(&[&h[i], &h[j], &d]));
                best = Some(match best {
                    None => e,
                    Some(b) => b.iter().zip(&e).map(|(x, y)| x.max(*y)).collect(),
                });
            }
            next.push(best.unwrap());
        }
        h = next;
    }
    h
}

pub fn sasa_block(store: &ParamStore, b: &SasaBlock, x: &[Vec<f64>], pos: &[[f64; 3]]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let beta = softplus(store.get(b.beta_raw).data()[0]);
    let d2 = squared_distances(pos);
    let n = x.len();
    let bias: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| -beta * d2.get(i, j)).collect()).collect();
    let y: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(store, &b.norm1, r)).collect();
    let q: Vec<Vec<f64>> = y.iter().map(|r| linear(store, &b.query, r)).collect();
    let k: Vec<Vec<f64>> = y.iter().map(|r| linear(store, &b.key, r)).collect();
    let v: Vec<Vec<f64>> = y.iter().map(|r| linear(store, &b.value, r)).collect();
    let dk = q[0].len() / b.heads;
    let mut att = vec![Vec::new(); n];
    let mut weights = Vec::new();
    for h in 0..b.heads {
        let cut = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[h * dk..(h + 1) * dk].to_vec()).collect::<Vec<_>>();
        let (o, w) = attention(&cut(&q), &cut(&k), &cut(&v), Some(&bias));
        for i in 0..n {
            att[i].extend_from_slice(&o[i]);
        }
        weights.push(w);
    }
    let out = (0..n)
        .map(|i| {
            let x1 = add(&x[i], &linear(store, &b.out, &att[i]));
            let y2 = layer_norm(store, &b.norm2, &x1);
            add(&x1, &mlp(store, &b.ffn, &y2))
        })
        .collect();
    (out, weights)
}

pub fn gru_step(store: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let lin = |w, u, b, hh: &[f64]| -> Vec<f64> {
        let (w, u, b): (&NumArray, &NumArray, &NumArray) = (store.get(w), store.get(u), store.get(b));
        (0..p.hidden_dim)
            .map(|o| {
                let mut s = b.data()[o];
                for (i, xi) in x.iter().enumerate() {
                    s += xi * w.get(i, o);
                }
                for (i, hi) in hh.iter().enumerate() {
                    s += hi * u.get(i, o);
                }
                s
            })
            .collect()
    };
    let z: Vec<f64> = lin(p.w_z, p.u_z, p.b_z, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = lin(p.w_r, p.u_r, p.b_r, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = lin(p.w_h, p.u_h, p.b_h, &rh).into_iter().map(f64::tanh).collect();
    (0..p.hidden_dim).map(|i| z[i] * h[i] + (1.0 - z[i]) * c[i]).collect()
}

pub fn box_decode(raw: &[f64], e: f64, s: f64) -> Vec<f64> {
    let n = (raw[4] * raw[4] + raw[5] * raw[5] + 1e-12).sqrt();
    vec![e * raw[0], e * raw[1], s * softplus(raw[2]), s * softplus(raw[3]), raw[4] / n, raw[5] / n]
}

pub fn rifm_radar_readout(store: &ParamStore, p: &RifmParams, radar: &RadarTokens) -> Vec<Vec<f64>> {
    let rc = p.radar.as_ref().unwrap();
    let qs = store.get(p.queries);
    let q: Vec<Vec<f64>> = (0..qs.rows())
        .map(|i| linear(store, &rc.query, &layer_norm(store, &rc.norm_query, qs.row(i))))
        .collect();
    if radar.is_empty() {
        return vec![vec![0.0; p.query_dim]; qs.rows()];
    }
    let tn: Vec<Vec<f64>> = (0..radar.len()).map(|j| layer_norm(store, &rc.norm_tokens, radar.tokens.row(j))).collect();
    let k: Vec<Vec<f64>> = (0..radar.len())
        .map(|j| {
            let pos: Vec<f64> = radar.positions.row(j).iter().map(|v| v / p.position_scale).collect();
            add(&linear(store, &rc.key, &tn[j]), &mlp(store, &rc.position, &pos))
        })
        .collect();
    let v: Vec<Vec<f64>> = tn.iter().map(|t| linear(store, &rc.value, t)).collect();
    attention(&q, &k, &v, None).0
}

pub fn rifm_fuse(store: &ParamStore, p: &RifmParams, radar: &RadarTokens, image: &ImageFeatures) -> Vec<Vec<f64>> {
    let qs = store.get(p.queries);
    let ic = &p.image;
    let q: Vec<Vec<f64>> = (0..qs.rows())
        .map(|i| linear(store, &ic.query, &layer_norm(store, &ic.norm_query, qs.row(i))))
        .collect();
    let x: Vec<Vec<f64>> = (0..image.tokens.rows())
        .map(|j| add(&layer_norm(store, &ic.norm_tokens, image.tokens.row(j)), image.positions.row(j)))
        .collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| linear(store, &ic.key, r)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| linear(store, &ic.value, r)).collect();
    let qi = attention(&q, &k, &v, None).0;
    let qr = rifm_radar_readout(store, p, radar);
    (0..qs.rows()).map(|m| mlp(store, &p.fuse, &concat(&[&qr[m], &qi[m]]))).collect()
}

/// Exhaustive minimum over every injection of the smaller side, summed in
/// row order like `assignment_cost`.
pub fn min_assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let transpose = rows > cols;
    let (small, large) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut best = f64::INFINITY;
    let mut picked = Vec::new();
    let mut used = vec![false; large];
    fn rec(
        small: usize,
        large: usize,
        transpose: bool,
        cost: &[Vec<f64>],
        used: &mut [bool],
        picked: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if picked.len() == small {
            let mut pairs: Vec<(usize, usize)> =
                picked.iter().enumerate().map(|(s, &l)| if transpose { (l, s) } else { (s, l) }).collect();
            pairs.sort_unstable();
            *best = best.min(assignment_cost(cost, &pairs));
            return;
        }
        for c in 0..large {
            if !used[c] {
                used[c] = true;
                picked.push(c);
                rec(small, large, transpose, cost, used, picked, best);
                picked.pop();
                used[c] = false;
            }
        }
    }
    rec(small, large, transpose, cost, &mut used, &mut picked, &mut best);
    best
}
