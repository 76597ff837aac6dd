//! Temporal query aggregation and detection heads.
//!
//! Fused queries of a window are fed oldest first through one GRU cell shared
//! by every query and every step, starting from a zero hidden state. Each step
//! adds a sinusoidal encoding of the window-relative index, and can append an
//! embedding of the ego motion since the previous frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, GruParams, MlpParams, NumArray, ParamStore, Unary, Var};

/// `[T, dim]` table, `pe[t, 2i] = sin(t / 10000^(2i/dim))`, `pe[t, 2i+1] = cos(..)`.
pub fn time_encoding(len: usize, dim: usize) -> NumArray {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let a = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(if c % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    NumArray::matrix(len, dim, data)
}

#[derive(Clone, Debug)]
pub struct TqaParams {
    pub gru: GruParams,
    /// `(d_theta, d_x, d_y)` -> `C_q`, concatenated to the GRU input
    pub ego: Option<MlpParams>,
    pub query_dim: usize,
}

impl TqaParams {
    pub fn new(store: &mut ParamStore, name: &str, query_dim: usize, hidden: usize, ego: bool, rng: &mut impl Rng) -> Self {
        let ego = ego.then(|| {
            MlpParams::new(store, &format!("{name}/ego"), &[3, query_dim, query_dim], Activation::Gelu, false, rng)
        });
        let input = if ego.is_some() { 2 * query_dim } else { query_dim };
        let gru = GruParams::new(store, &format!("{name}/gru"), input, hidden, rng);
        Self { gru, ego, query_dim }
    }

    /// Hidden state after every step, oldest first. `ego_motion[t]` is the
    /// pose of frame `t - 1` relative to frame `t` (zeros for `t = 0`); it is
    /// ignored when the ego embedding is off.
    pub fn forward(&self, g: &mut Graph, fused: &[Var], ego_motion: &[[f64; 3]], time_table: &NumArray) -> Result<Vec<Var>> {
        if fused.is_empty() {
            return Err(Error::Usage("temporal aggregation over an empty window".into()));
        }
        if time_table.rows() < fused.len() || time_table.cols() != self.query_dim {
            return Err(Error::dim(format!(
                "time table {:?} cannot encode {} steps of width {}",
                time_table.shape(),
                fused.len(),
                self.query_dim
            )));
        }
        let (m, _) = g.dims(fused[0]);
        let mut h = g.input(NumArray::zeros(&[m, self.gru.hidden_dim]));
        let mut states = Vec::with_capacity(fused.len());
        for (t, &q) in fused.iter().enumerate() {
            if g.dims(q) != (m, self.query_dim) {
                return Err(Error::dim(format!("step {t}: fused queries are {:?}", g.dims(q))));
            }
            let pe = g.input(NumArray::matrix(1, self.query_dim, time_table.row(t).to_vec()));
            let mut x = g.add(q, pe);
            if let Some(ego) = &self.ego {
                let e = g.input(NumArray::matrix(1, 3, ego_motion[t].to_vec()));
                let e = ego.forward(g, e)?;
                let e = g.repeat_row(e, m);
                x = g.concat_cols(&[x, e]);
            }
            h = self.gru.step(g, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Array-level aggregation without ego embedding: final hidden state `[M, D_h]`.
pub fn tqa_aggregate(store: &ParamStore, gru: &GruParams, fused: &[NumArray], time_table: &NumArray) -> Result<NumArray> {
    let params = TqaParams { gru: gru.clone(), ego: None, query_dim: gru.input_dim };
    let mut g = Graph::new(store);
    let vars: Vec<Var> = fused.iter().map(|f| g.input(f.clone())).collect();
    let states = params.forward(&mut g, &vars, &vec![[0.0; 3]; fused.len()], time_table)?;
    Ok(g.value(*states.last().expect("non-empty")).clone())
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `D_h -> K + 1` logits, last index is background
    pub cls: MlpParams,
    /// `D_h -> 6` raw box outputs
    pub boxes: MlpParams,
    pub half_extent: f64,
    pub size_scale: f64,
}

/// Decoded box layout: `[cx, cy, l, w, sin, cos]`.
pub const BOX_DIM: usize = 6;

impl HeadParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        num_classes: usize,
        half_extent: f64,
        size_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let act = Activation::Gelu;
        Self {
            cls: MlpParams::new(store, &format!("{name}/cls"), &[input, input, num_classes + 1], act, false, rng),
            boxes: MlpParams::new(store, &format!("{name}/box"), &[input, input, BOX_DIM], act, false, rng),
            half_extent,
            size_scale,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_dim() - 1
    }

    /// Logits `[M, K + 1]` and decoded boxes `[M, 6]`.
    pub fn forward(&self, g: &mut Graph, q: Var) -> Result<(Var, Var)> {
        let logits = self.cls.forward(g, q)?;
        let raw = self.boxes.forward(g, q)?;
        let centre = g.slice_cols(raw, 0, 2);
        let centre = g.scale(centre, self.half_extent);
        let size = g.slice_cols(raw, 2, 2);
        let size = g.softplus(size);
        let size = g.scale(size, self.size_scale);
        let dir = g.slice_cols(raw, 4, 2);
        let sq = g.unary(dir, Unary::Square);
        let norm = g.sum_cols(sq);
        let norm = g.affine(norm, 1.0, 1e-12);
        let norm = g.unary(norm, Unary::Sqrt);
        let dir = g.div(dir, norm);
        Ok((logits, g.concat_cols(&[centre, size, dir])))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub logits: Vec<f64>,
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub sin: f64,
    pub cos: f64,
}

impl Detection {
    pub fn from_rows(logits: &[f64], b: &[f64]) -> Self {
        Self { logits: logits.to_vec(), cx: b[0], cy: b[1], l: b[2], w: b[3], sin: b[4], cos: b[5] }
    }

    pub fn heading(&self) -> f64 {
        self.sin.atan2(self.cos)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Most likely foreground class and its probability.
    pub fn best_class(&self) -> (usize, f64) {
        let p = self.probabilities();
        let k = p.len() - 1;
        (0..k).map(|c| (c, p[c])).fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }
}

pub fn detections_from(logits: &NumArray, boxes: &NumArray) -> Vec<Detection> {
    (0..logits.rows()).map(|m| Detection::from_rows(logits.row(m), boxes.row(m))).collect()
}

pub fn detect(store: &ParamStore, head: &HeadParams, q: &NumArray) -> Result<Vec<Detection>> {
    let mut g = Graph::new(store);
    let qv = g.input(q.clone());
    let (l, b) = head.forward(&mut g, qv)?;
    Ok(detections_from(g.value(l), g.value(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, rng: &mut ChaCha8Rng) -> NumArray {
        NumArray::matrix(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn gru(seed: u64, d: usize) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GruParams::new(&mut store, "gru", d, d, &mut rng);
        (store, p)
    }

    #[test]
    fn single_frame_window() {
        let (store, p) = gru(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(3, 4, &mut rng);
        let table = time_encoding(1, 4);
        let out = tqa_aggregate(&store, &p, &[q.clone()], &table).unwrap();
        for m in 0..3 {
            let x = oracle::add(q.row(m), table.row(0));
            assert!(oracle::max_abs(out.row(m), &oracle::gru_step(&store, &p, &x, &[0.0; 4])) <= 1e-12);
        }
    }

    #[test]
    fn zero_weights_keep_zero_state() {
        let (mut store, p) = gru(3, 4);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq: Vec<_> = (0..3).map(|_| random(2, 4, &mut rng)).collect();
        let out = tqa_aggregate(&store, &p, &seq, &time_encoding(3, 4)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_unrolled_oracle() {
        let (store, p) = gru(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq: Vec<_> = (0..3).map(|_| random(2, 4, &mut rng)).collect();
        let table = time_encoding(3, 4);
        let out = tqa_aggregate(&store, &p, &seq, &table).unwrap();
        for m in 0..2 {
            let mut h = vec![0.0; 4];
            for t in 0..3 {
                h = oracle::gru_step(&store, &p, &oracle::add(seq[t].row(m), table.row(t)), &h);
            }
            assert!(oracle::max_abs(out.row(m), &h) <= 1e-12);
        }
    }

    #[test]
    fn empty_window_and_bad_dims() {
        let (store, p) = gru(7, 4);
        assert!(matches!(tqa_aggregate(&store, &p, &[], &time_encoding(1, 4)), Err(Error::Usage(_))));
        let bad = NumArray::zeros(&[2, 3]);
        assert!(matches!(tqa_aggregate(&store, &p, &[bad], &time_encoding(1, 4)), Err(Error::Dimension(_))));
    }

    fn head(seed: u64) -> (ParamStore, HeadParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = HeadParams::new(&mut store, "head", 4, 3, 24.0, 5.0, &mut rng);
        (store, h)
    }

    #[test]
    fn constant_head_decodes_bias() {
        let (mut store, h) = head(8);
        for mlp in [&h.cls, &h.boxes] {
            for l in mlp.layers() {
                store.get_mut(l.weight).data_mut().fill(0.0);
            }
        }
        let bias = h.boxes.layers()[1].bias.unwrap();
        store.get_mut(bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.0, -50.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dets = detect(&store, &h, &random(4, 4, &mut rng)).unwrap();
        let expect = oracle::box_decode(&[0.1, -0.2, 0.0, -50.0, 3.0, 4.0], 24.0, 5.0);
        for d in &dets {
            assert_eq!(d, &dets[0]);
            assert!(oracle::max_abs(&[d.cx, d.cy, d.l, d.w, d.sin, d.cos], &expect) <= 1e-12);
            assert!(d.w > 0.0);
        }
    }

    #[test]
    fn head_matches_oracle_and_codomain() {
        let (store, h) = head(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random(5, 4, &mut rng).map(|v| 30.0 * v);
        let dets = detect(&store, &h, &q).unwrap();
        for (m, d) in dets.iter().enumerate() {
            let raw = oracle::mlp(&store, &h.boxes, q.row(m));
            let logits = oracle::mlp(&store, &h.cls, q.row(m));
            assert!(oracle::max_abs(&d.logits, &logits) <= 1e-12);
            let b = oracle::box_decode(&raw, 24.0, 5.0);
            assert!(oracle::max_abs(&[d.cx, d.cy, d.l, d.w, d.sin, d.cos], &b) <= 1e-12);
            assert!(d.l > 0.0 && d.w > 0.0);
            assert!(((d.sin * d.sin + d.cos * d.cos).sqrt() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn aggregation_and_head_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tqa = TqaParams::new(&mut store, "tqa", 4, 4, true, &mut rng);
        let h = HeadParams::new(&mut store, "head", 4, 2, 24.0, 5.0, &mut rng);
        let seq: Vec<_> = (0..2).map(|_| random(2, 4, &mut rng)).collect();
        let table = time_encoding(2, 4);
        let ego = [[0.0; 3], [0.05, 0.4, -0.1]];
        let report = grad_check(&store, None, 1e-5, |g| {
            let vars: Vec<Var> = seq.iter().map(|s| g.input(s.clone())).collect();
            let states = tqa.forward(g, &vars, &ego, &table)?;
            let (l, b) = h.forward(g, *states.last().unwrap())?;
            let s1 = g.sum(l);
            let b = g.scale(b, 0.1);
            let s2 = g.sum(b);
            Ok(g.add(s1, s2))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
