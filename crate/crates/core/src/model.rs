//! End-to-end window forward pass: ego compensation, radar and image
//! encoding per frame, query fusion, temporal aggregation and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_graph, positions_array, BackboneConfig, RadarBackboneParams};
use crate::error::{Error, Result};
use crate::image::{position_table, ImageConfig, ImageEncoderParams};
use crate::numerics::{Activation, Graph, MlpParams, NumArray, ParamStore, Var};
use crate::pir::{attrs_to_array, normalize_frame, NormStats, PirParams, ATTR_DIM};
use crate::rifm::{RadarTokenVars, RifmParams};
use crate::scene_sim::{compensate_frame, RadarPoint, SceneSample, NUM_CLASSES};
use crate::setpred::{loss_graph, match_detections, LossVars, LossWeights, MatchResult};
use crate::tqa::{detections_from, time_encoding, Detection, HeadParams, TqaParams};

/// Module switches used by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// radar tokens reach the fusion stage at all
    pub radar: bool,
    /// physics-informed embedding; off gives an ungated MLP on the raw attributes
    pub pir: bool,
    /// global attention stream; off leaves the local stream only
    pub sasa: bool,
    pub gate: bool,
    /// recurrent aggregation; off detects from each frame's fused queries
    pub tqa: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { radar: true, pir: true, sasa: true, gate: true, tqa: true }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Self { radar: false, pir: false, sasa: false, gate: false, tqa: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub scatter_dim: usize,
    pub pir_hidden: usize,
    pub backbone: BackboneConfig,
    pub image: ImageConfig,
    pub queries: usize,
    pub query_dim: usize,
    pub num_classes: usize,
    /// metres per unit of softplus output in the size decoder
    pub size_scale: f64,
    pub ego_embedding: bool,
    /// window length T
    pub history: usize,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            scatter_dim: 8,
            pir_hidden: 32,
            backbone: BackboneConfig::default(),
            image: ImageConfig::default(),
            queries: 16,
            query_dim: 64,
            num_classes: NUM_CLASSES,
            size_scale: 5.0,
            ego_embedding: true,
            history: 3,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = self.backbone.problems(self.embed_dim);
        bad.extend(self.image.problems());
        let positive = [
            ("model.embed_dim", self.embed_dim),
            ("model.scatter_dim", self.scatter_dim),
            ("model.pir_hidden", self.pir_hidden),
            ("model.queries", self.queries),
            ("model.query_dim", self.query_dim),
            ("model.num_classes", self.num_classes),
            ("model.history", self.history),
        ];
        bad.extend(positive.iter().filter(|(_, v)| *v == 0).map(|(n, _)| n.to_string()));
        if !(self.size_scale > 0.0) {
            bad.push("model.size_scale".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad))
        }
    }

    pub fn half_extent(&self) -> f64 {
        self.image.half_extent
    }
}

#[derive(Clone, Debug)]
pub enum RadarEmbedding {
    Pir(PirParams),
    Raw(MlpParams),
}

#[derive(Clone, Debug)]
pub struct RadarBranch {
    pub embedding: RadarEmbedding,
    pub backbone: RadarBackboneParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub radar: Option<RadarBranch>,
    pub image: ImageEncoderParams,
    pub rifm: RifmParams,
    /// shared by every query and every step
    pub tqa: Option<TqaParams>,
    pub head: HeadParams,
    pub pos_table: NumArray,
}

impl Model {
    /// Parameters are drawn in a fixed order from a ChaCha stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = config.toggles;
        let radar = t.radar.then(|| {
            let embedding = if t.pir {
                RadarEmbedding::Pir(PirParams::new(
                    &mut store,
                    "pir",
                    config.scatter_dim,
                    config.embed_dim,
                    config.pir_hidden,
                    &mut rng,
                ))
            } else {
                RadarEmbedding::Raw(MlpParams::new(
                    &mut store,
                    "raw_embed",
                    &[ATTR_DIM, config.embed_dim, config.embed_dim],
                    Activation::Gelu,
                    false,
                    &mut rng,
                ))
            };
            let backbone =
                RadarBackboneParams::new(&mut store, "backbone", config.embed_dim, &config.backbone, t.sasa, &mut rng);
            RadarBranch { embedding, backbone }
        });
        let image = ImageEncoderParams::new(&mut store, "image", &config.image, &mut rng);
        let rifm = RifmParams::new(
            &mut store,
            "rifm",
            config.queries,
            config.query_dim,
            radar.as_ref().map(|r| r.backbone.out_dim()),
            config.image.channels,
            config.half_extent(),
            &mut rng,
        );
        let tqa = t.tqa.then(|| {
            TqaParams::new(&mut store, "tqa", config.query_dim, config.query_dim, config.ego_embedding, &mut rng)
        });
        let head = HeadParams::new(
            &mut store,
            "head",
            config.query_dim,
            config.num_classes,
            config.half_extent(),
            config.size_scale,
            &mut rng,
        );
        let pos_table = position_table(&config.image);
        Ok(Self { config, store, radar, image, rifm, tqa, head, pos_table })
    }

    pub fn num_queries(&self) -> usize {
        self.config.queries
    }
}

/// Per-frame radar values kept for inspection.
#[derive(Clone, Debug)]
pub struct FrameRadar {
    /// compensated to the latest ego pose
    pub points: Vec<RadarPoint>,
    /// `[N, 1]`, present when the physics-informed embedding runs
    pub gates: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct WindowVars {
    /// `[M, K + 1]` on the final frame
    pub logits: Var,
    /// `[M, 6]` decoded boxes on the final frame
    pub boxes: Var,
    /// heads applied to the state one step earlier, when the window has one
    pub prev: Option<(Var, Var)>,
    /// fused queries per frame, oldest first
    pub fused: Vec<Var>,
    pub radar: Vec<FrameRadar>,
}

/// Ego motion fed to the temporal stage: pose of frame `t - 1` in frame `t`.
pub fn ego_motion(window: &[SceneSample]) -> Vec<[f64; 3]> {
    (0..window.len())
        .map(|t| if t == 0 { [0.0; 3] } else { window[t - 1].ego.relative_to(&window[t].ego) })
        .collect()
}

/// Builds the whole window computation inside `g`. Frames are ordered oldest
/// first; the last one is the reference for compensation and supervision.
pub fn forward_window(g: &mut Graph, model: &Model, window: &[SceneSample], norm: &NormStats) -> Result<WindowVars> {
    let Some(latest) = window.last() else {
        return Err(Error::Usage("empty window".into()));
    };
    let cfg = &model.config;
    let mut fused = Vec::with_capacity(window.len());
    let mut radar_frames = Vec::with_capacity(window.len());
    for sample in window {
        let points = compensate_frame(&sample.points, &sample.ego, &latest.ego);
        let mut gates = None;
        let radar = match &model.radar {
            Some(branch) if !points.is_empty() => {
                let attrs = normalize_frame(&points, norm)?;
                let a = g.input(attrs_to_array(&attrs));
                let f = match &branch.embedding {
                    RadarEmbedding::Pir(pir) => {
                        let v = pir.forward(g, a, cfg.toggles.gate)?;
                        gates = Some(v.g);
                        v.f0_gated
                    }
                    RadarEmbedding::Raw(mlp) => mlp.forward(g, a)?,
                };
                backbone_graph(g, &branch.backbone, &cfg.backbone, f, &points, &attrs, gates)?
                    .map(|tokens| RadarTokenVars { tokens, positions: positions_array(&points) })
            }
            _ => None,
        };
        let image = model.image.forward(g, &sample.image, &model.pos_table)?;
        fused.push(model.rifm.forward(g, radar.as_ref(), &image)?.fused);
        radar_frames.push(FrameRadar { points, gates });
    }

    let states = match &model.tqa {
        Some(tqa) => tqa.forward(g, &fused, &ego_motion(window), &time_encoding(window.len(), cfg.query_dim))?,
        None => fused.clone(),
    };
    let last = states.len() - 1;
    let (logits, boxes) = model.head.forward(g, states[last])?;
    let prev = if last > 0 { Some(model.head.forward(g, states[last - 1])?) } else { None };
    Ok(WindowVars { logits, boxes, prev, fused, radar: radar_frames })
}

/// Array-level results of one window.
#[derive(Clone, Debug)]
pub struct WindowOutput {
    pub detections: Vec<Detection>,
    pub prev_detections: Option<Vec<Detection>>,
    /// fused queries per frame, oldest first
    pub fused: Vec<NumArray>,
    /// `(rcs, gate)` of every point of every frame that produced gates
    pub gate_samples: Vec<(f64, f64)>,
}

pub fn run_window(model: &Model, window: &[SceneSample], norm: &NormStats) -> Result<WindowOutput> {
    let mut g = Graph::new(&model.store);
    let v = forward_window(&mut g, model, window, norm)?;
    let detections = detections_from(g.value(v.logits), g.value(v.boxes));
    let prev_detections = v.prev.map(|(l, b)| detections_from(g.value(l), g.value(b)));
    let fused = v.fused.iter().map(|&f| g.value(f).clone()).collect();
    let mut gate_samples = Vec::new();
    for frame in &v.radar {
        if let Some(gv) = frame.gates {
            gate_samples.extend(frame.points.iter().zip(g.value(gv).data()).map(|(p, &gate)| (p.rcs, gate)));
        }
    }
    Ok(WindowOutput { detections, prev_detections, fused, gate_samples })
}

/// Forward pass, matching against the final frame's truths, and the loss.
pub fn window_loss(
    g: &mut Graph,
    model: &Model,
    window: &[SceneSample],
    norm: &NormStats,
    weights: &LossWeights,
) -> Result<(LossVars, MatchResult)> {
    let v = forward_window(g, model, window, norm)?;
    let truths = &window.last().expect("non-empty window").truths;
    let detections = detections_from(g.value(v.logits), g.value(v.boxes));
    let matching = match_detections(&detections, truths, weights);
    let loss = loss_graph(g, v.logits, v.boxes, v.prev.map(|p| p.1), truths, &matching, weights)?;
    Ok((loss, matching))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::radar_backbone_forward;
    use crate::image::image_encode;
    use crate::numerics::{grad_check, gru_step, mlp_forward};
    use crate::pir::pir_forward;
    use crate::rifm::rifm_fuse;
    use crate::scene_sim::{generate_sequence, EgoPose, SimConfig};
    use crate::tqa::detect;
    use crate::diagnostics::{micro_config, micro_window};

    pub(crate) fn small_config() -> ModelConfig {
        let mut c = ModelConfig {
            embed_dim: 8,
            scatter_dim: 4,
            pir_hidden: 8,
            queries: 4,
            query_dim: 8,
            history: 2,
            ..ModelConfig::default()
        };
        c.backbone.local.k = 3;
        c.backbone.local.width = 8;
        c.backbone.local.layers = 1;
        c.backbone.sasa_blocks = 1;
        c.backbone.ffn_width = 8;
        c.backbone.out_dim = 8;
        c.image.size = 16;
        c.image.levels = 2;
        c.image.channels = 8;
        c
    }

    fn sequence(frames: usize, seed: u64) -> Vec<SceneSample> {
        let sim = SimConfig { frames, image_size: 16, clutter_rate: 4.0, ..SimConfig::default() };
        generate_sequence(&sim, seed).unwrap()
    }

    fn stats(samples: &[SceneSample]) -> NormStats {
        NormStats::fit(samples.iter().flat_map(|s| s.points.iter()))
    }

    #[test]
    fn single_frame_equals_stage_composition() {
        let model = Model::new(small_config(), 1).unwrap();
        let seq = sequence(3, 2);
        let norm = stats(&seq);
        let window = &seq[1..2];
        let out = run_window(&model, window, &norm).unwrap();

        let sample = &window[0];
        let branch = model.radar.as_ref().unwrap();
        let RadarEmbedding::Pir(pir) = &branch.embedding else { panic!("pir expected") };
        let attrs = normalize_frame(&sample.points, &norm).unwrap();
        let pir_out = pir_forward(&model.store, pir, &attrs).unwrap();
        let tokens =
            radar_backbone_forward(&model.store, &branch.backbone, &model.config.backbone, &pir_out, &sample.points, &attrs)
                .unwrap();
        let image = image_encode(&model.store, &model.image, &sample.image).unwrap();
        let fused = rifm_fuse(&model.store, &model.rifm, &tokens, &image).unwrap();
        assert_eq!(fused, out.fused[0]);

        let tqa = model.tqa.as_ref().unwrap();
        let ego = mlp_forward(&model.store, tqa.ego.as_ref().unwrap(), &NumArray::zeros(&[1, 3])).unwrap();
        let pe = time_encoding(1, 8);
        let mut x = Vec::new();
        for m in 0..4 {
            x.extend(fused.row(m).iter().zip(pe.row(0)).map(|(a, b)| a + b));
            x.extend_from_slice(ego.row(0));
        }
        let h = gru_step(&model.store, &tqa.gru, &NumArray::matrix(4, 16, x), &NumArray::zeros(&[4, 8])).unwrap();
        assert_eq!(detect(&model.store, &model.head, &h).unwrap(), out.detections);
        assert!(out.prev_detections.is_none());
    }

    #[test]
    fn duplicated_frame_matches_two_step_unroll() {
        let model = Model::new(small_config(), 3).unwrap();
        let seq = sequence(1, 4);
        let norm = stats(&seq);
        let window = vec![seq[0].clone(), seq[0].clone()];
        let out = run_window(&model, &window, &norm).unwrap();
        assert_eq!(out.fused[0], out.fused[1]);

        let tqa = model.tqa.as_ref().unwrap();
        let ego = mlp_forward(&model.store, tqa.ego.as_ref().unwrap(), &NumArray::zeros(&[1, 3])).unwrap();
        let pe = time_encoding(2, 8);
        let mut h = NumArray::zeros(&[4, 8]);
        let mut hist = Vec::new();
        for t in 0..2 {
            let mut x = Vec::new();
            for m in 0..4 {
                x.extend(out.fused[t].row(m).iter().zip(pe.row(t)).map(|(a, b)| a + b));
                x.extend_from_slice(ego.row(0));
            }
            h = gru_step(&model.store, &tqa.gru, &NumArray::matrix(4, 16, x), &h).unwrap();
            hist.push(h.clone());
        }
        assert_eq!(detect(&model.store, &model.head, &hist[1]).unwrap(), out.detections);
        assert_eq!(detect(&model.store, &model.head, &hist[0]).unwrap(), out.prev_detections.unwrap());
    }

    #[test]
    fn empty_middle_frame_completes() {
        let mut config = small_config();
        config.history = 3;
        let model = Model::new(config, 5).unwrap();
        let mut seq = sequence(3, 6);
        let norm = stats(&seq);
        seq[1].points.clear();
        let out = run_window(&model, &seq, &norm).unwrap();
        assert_eq!(out.detections.len(), 4);
        assert!(out.detections.iter().all(|d| d.l > 0.0 && d.w > 0.0));
    }

    #[test]
    fn empty_window_is_usage_error() {
        let model = Model::new(small_config(), 5).unwrap();
        assert!(matches!(run_window(&model, &[], &NormStats::identity()), Err(Error::Usage(_))));
    }

    #[test]
    fn frames_outside_window_do_not_matter() {
        let model = Model::new(small_config(), 7).unwrap();
        let seq = sequence(4, 8);
        let norm = stats(&seq);
        let before = run_window(&model, &seq[1..3], &norm).unwrap();
        let mut changed = seq.clone();
        changed[3].points.iter_mut().for_each(|p| p.x += 3.0);
        changed[3].image.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        changed[0].points.clear();
        let after = run_window(&model, &changed[1..3], &norm).unwrap();
        assert_eq!(before.detections, after.detections);
    }

    #[test]
    fn global_rigid_motion_leaves_outputs_unchanged() {
        let model = Model::new(small_config(), 9).unwrap();
        let seq = sequence(2, 10);
        let norm = stats(&seq);
        let base = run_window(&model, &seq, &norm).unwrap();
        // points live in sensor frames, so moving the world moves only the poses
        let (phi, dx, dy) = (0.7f64, 13.0, -4.5);
        let (s, c) = phi.sin_cos();
        let moved: Vec<SceneSample> = seq
            .iter()
            .map(|smp| {
                let e = smp.ego;
                let ego = EgoPose::new(e.theta + phi, c * e.tx - s * e.ty + dx, s * e.tx + c * e.ty + dy, e.t);
                SceneSample { ego, ..smp.clone() }
            })
            .collect();
        let out = run_window(&model, &moved, &norm).unwrap();
        for (a, b) in base.detections.iter().zip(&out.detections) {
            let diff = a.logits.iter().zip(&b.logits).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9);
            for (x, y) in [(a.cx, b.cx), (a.cy, b.cy), (a.l, b.l), (a.w, b.w), (a.sin, b.sin), (a.cos, b.cos)] {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_toggles_off_ignores_radar() {
        let config = ModelConfig { toggles: Toggles::all_off(), history: 1, ..small_config() };
        let model = Model::new(config, 11).unwrap();
        assert!(model.radar.is_none() && model.tqa.is_none());
        let seq = sequence(1, 12);
        let norm = stats(&seq);
        let a = run_window(&model, &seq, &norm).unwrap();
        let mut other = seq.clone();
        other[0].points.iter_mut().for_each(|p| p.rcs *= 7.0);
        let b = run_window(&model, &other, &norm).unwrap();
        assert_eq!(a.detections, b.detections);
    }

    #[test]
    fn each_toggle_builds_and_runs() {
        let seq = sequence(2, 13);
        let norm = stats(&seq);
        for flip in 0..5 {
            let mut t = Toggles::default();
            match flip {
                0 => t.radar = false,
                1 => t.pir = false,
                2 => t.sasa = false,
                3 => t.gate = false,
                _ => t.tqa = false,
            }
            let model = Model::new(ModelConfig { toggles: t, ..small_config() }, 1).unwrap();
            let out = run_window(&model, &seq, &norm).unwrap();
            assert_eq!(out.detections.len(), 4);
            assert!(out.prev_detections.is_some());
            let gates_expected = t.radar && t.pir;
            assert_eq!(!out.gate_samples.is_empty(), gates_expected);
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = Model::new(small_config(), 21).unwrap();
        let b = Model::new(small_config(), 21).unwrap();
        assert!(a.store.iter().zip(b.store.iter()).all(|(x, y)| x.1 == y.1 && x.2 == y.2));
        assert!(Model::new(ModelConfig { history: 0, ..small_config() }, 0).is_err());
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let model = Model::new(micro_config(), 17).unwrap();
        let window = micro_window();
        let norm = stats(&window);
        let w = LossWeights::default();
        let matching = {
            let mut g = Graph::new(&model.store);
            window_loss(&mut g, &model, &window, &norm, &w).unwrap().1
        };
        let report = grad_check(&model.store, None, 1e-6, |g| {
            let v = forward_window(g, &model, &window, &norm)?;
            let (_, prev_boxes) = v.prev.unwrap();
            Ok(loss_graph(g, v.logits, v.boxes, Some(prev_boxes), &window[1].truths, &matching, &w)?.total)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
