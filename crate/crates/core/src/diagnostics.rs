//! Registered finite-difference micro-instances: the PIR embedding alone, the
//! radar branch (embedding plus backbone), and the full window loss.

use serde::{Deserialize, Serialize};

use crate::backbone::backbone_graph;
use crate::error::{Error, Result};
use crate::model::{forward_window, window_loss, Model, ModelConfig, RadarEmbedding};
use crate::numerics::{grad_check, Activation, GradCheckReport, Graph, NumArray, ParamId, Unary};
use crate::pir::{attrs_to_array, normalize_frame, NormStats};
use crate::scene_sim::{EgoPose, GroundTruthBox, RadarPoint, SceneSample};
use crate::setpred::{loss_graph, LossWeights};

/// Two points per frame, two queries, a 4x4 image and a two-frame window.
pub fn micro_config() -> ModelConfig {
    let mut c = ModelConfig {
        embed_dim: 4,
        scatter_dim: 2,
        pir_hidden: 3,
        queries: 2,
        query_dim: 4,
        history: 2,
        ..ModelConfig::default()
    };
    c.backbone.local.k = 1;
    c.backbone.local.width = 4;
    c.backbone.local.layers = 1;
    c.backbone.sasa_blocks = 1;
    c.backbone.ffn_width = 4;
    c.backbone.out_dim = 4;
    c.backbone.beta_init = 0.05;
    c.image.size = 4;
    c.image.levels = 1;
    c.image.channels = 4;
    c.image.activation = Activation::Gelu;
    c
}

pub fn micro_window() -> Vec<SceneSample> {
    let image = |k: f64| NumArray::matrix(4, 4, (0..16).map(|i| 0.1 + 0.05 * ((i as f64 + k) % 7.0)).collect());
    let truth = GroundTruthBox { cls: 1, cx: 3.0, cy: -2.0, l: 7.0, w: 3.0, theta: 0.4 };
    vec![
        SceneSample {
            t: 0,
            points: vec![RadarPoint::new(2.5, -1.8, 0.4, 0.3, 6.0), RadarPoint::new(-5.0, 7.0, 0.1, -0.8, 1.5)],
            image: image(0.0),
            ego: EgoPose::new(0.0, 0.0, 0.0, 0),
            truths: vec![truth],
        },
        SceneSample {
            t: 1,
            points: vec![RadarPoint::new(2.2, -2.1, 0.5, 0.2, 9.0), RadarPoint::new(-4.3, 6.1, -0.2, -0.6, 2.5)],
            image: image(3.0),
            ego: EgoPose::new(0.02, 0.5, 0.01, 1),
            truths: vec![truth],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub checked: usize,
    pub worst_param: Option<String>,
    pub passed: bool,
}

fn prefixed(model: &Model, prefixes: &[&str]) -> Vec<ParamId> {
    model.store.ids().filter(|&id| prefixes.iter().any(|p| model.store.name(id).starts_with(p))).collect()
}

/// Runs the three micro-instances; layer-level checks use the tighter
/// threshold, the end-to-end loss the looser one.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let model = Model::new(micro_config(), seed)?;
    let window = micro_window();
    let norm = NormStats::fit(window.iter().flat_map(|s| s.points.iter()));
    let branch = model.radar.as_ref().ok_or_else(|| Error::Usage("micro model has no radar branch".into()))?;
    let RadarEmbedding::Pir(pir) = &branch.embedding else {
        return Err(Error::Usage("micro model has no physics-informed embedding".into()));
    };
    let points = &window[1].points;
    let attrs = normalize_frame(points, &norm)?;
    let attr_array = attrs_to_array(&attrs);
    let entry = |name: &str, threshold: f64, r: GradCheckReport| GradCheckEntry {
        name: name.into(),
        max_rel_err: r.max_rel_err,
        threshold,
        checked: r.checked,
        worst_param: r.worst_param,
        passed: r.max_rel_err < threshold,
    };

    let pir_ids = prefixed(&model, &["pir/"]);
    let pir_report = grad_check(&model.store, Some(&pir_ids), 1e-5, |g| {
        let a = g.input(attr_array.clone());
        let v = pir.forward(g, a, true)?;
        let s = g.sum(v.f0_gated);
        let gs = g.sum(v.g);
        Ok(g.add(s, gs))
    })?;

    let radar_ids = prefixed(&model, &["pir/", "backbone/"]);
    let backbone_report = grad_check(&model.store, Some(&radar_ids), 1e-5, |g| {
        let a = g.input(attr_array.clone());
        let v = pir.forward(g, a, true)?;
        let tokens = backbone_graph(g, &branch.backbone, &model.config.backbone, v.f0_gated, points, &attrs, Some(v.g))?
            .ok_or_else(|| Error::Usage("micro frame produced no tokens".into()))?;
        let sq = g.unary(tokens, Unary::Square);
        Ok(g.sum(sq))
    })?;

    let weights = LossWeights::default();
    let matching = {
        let mut g = Graph::new(&model.store);
        window_loss(&mut g, &model, &window, &norm, &weights)?.1
    };
    let full_report = grad_check(&model.store, None, 1e-6, |g| {
        let v = forward_window(g, &model, &window, &norm)?;
        let prev = v.prev.map(|p| p.1);
        Ok(loss_graph(g, v.logits, v.boxes, prev, &window[1].truths, &matching, &weights)?.total)
    })?;

    Ok(vec![
        entry("pir", 1e-4, pir_report),
        entry("backbone", 1e-4, backbone_report),
        entry("full_pipeline", 1e-3, full_report),
    ])
}
