//! Toggle-grid experiments: train each variant on a seeded synthetic split
//! and report AP on held-out windows.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Toggles;
use crate::scene_sim::{generate_sequence, SceneSample, SimConfig};
use crate::train::{evaluate, gate_dump, RunConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
    pub history: usize,
    /// train and evaluate on the clutter-heavy simulator setting
    pub clutter_heavy: bool,
}

impl Variant {
    pub fn new(name: &str, toggles: Toggles, history: usize, clutter_heavy: bool) -> Self {
        Self { name: name.into(), toggles, history, clutter_heavy }
    }
}

/// Module-level grid: image only, then radar, PIR, SASA and temporal
/// aggregation switched on cumulatively.
pub fn module_grid() -> Vec<Variant> {
    vec![
        Variant::new("image_only", Toggles::all_off(), 1, false),
        Variant::new("radar", Toggles { radar: true, ..Toggles::all_off() }, 1, false),
        Variant::new("radar_pir", Toggles { radar: true, pir: true, gate: true, ..Toggles::all_off() }, 1, false),
        Variant::new("radar_pir_sasa", Toggles { tqa: false, ..Toggles::default() }, 1, false),
        Variant::new("full_t1", Toggles::default(), 1, false),
        Variant::new("full_t3", Toggles::default(), 3, false),
    ]
}

/// Gate x temporal-aggregation x history grid on the clutter-heavy setting.
pub fn gate_tqa_grid() -> Vec<Variant> {
    let t = |gate: bool, tqa: bool| Toggles { gate, tqa, ..Toggles::default() };
    vec![
        Variant::new("single_frame", t(false, false), 1, true),
        Variant::new("gate", t(true, false), 1, true),
        Variant::new("tqa_t1", t(false, true), 1, true),
        Variant::new("tqa_t3", t(false, true), 3, true),
        Variant::new("gate_tqa_t1", t(true, true), 1, true),
        Variant::new("gate_tqa_t3", t(true, true), 3, true),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
}

/// Independent sequences for training and evaluation; sequence `i` of the
/// training part uses seed `seed * 1000 + i`, evaluation continues from 500.
pub fn make_split(sim: &SimConfig, seed: u64, train_sequences: usize, eval_sequences: usize) -> Result<Split> {
    let gen = |offset: u64, n: usize| -> Result<Vec<SceneSample>> {
        let mut out = Vec::new();
        for i in 0..n as u64 {
            out.extend(generate_sequence(sim, seed * 1000 + offset + i)?);
        }
        Ok(out)
    };
    Ok(Split { train: gen(0, train_sequences)?, eval: gen(500, eval_sequences)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub target_mean: f64,
    pub outlier_mean: f64,
    pub target_points: usize,
    pub outlier_points: usize,
}

/// Mean gate of points inside a truth box (with `margin`) versus the rest.
pub fn gate_stats(samples: &[(f64, f64, bool)]) -> Option<GateStats> {
    let (mut ts, mut tn, mut os, mut on) = (0.0, 0usize, 0.0, 0usize);
    for &(_, g, inside) in samples {
        if inside {
            ts += g;
            tn += 1;
        } else {
            os += g;
            on += 1;
        }
    }
    (tn > 0 && on > 0).then(|| GateStats {
        target_mean: ts / tn as f64,
        outlier_mean: os / on as f64,
        target_points: tn,
        outlier_points: on,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub seed: u64,
    pub history: usize,
    pub map50: f64,
    pub map50_95: f64,
    /// on the first training frames, to separate fitting from generalisation
    pub train_map50: f64,
    pub final_loss: f64,
    pub gate: Option<GateStats>,
}

/// Trains `variant` on `split.train` from `base` (model seed = `seed`) and
/// evaluates on `split.eval`.
pub fn run_variant(base: &RunConfig, variant: &Variant, seed: u64, split: &Split) -> Result<VariantResult> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.toggles = variant.toggles;
    cfg.model.history = variant.history;
    if variant.clutter_heavy {
        cfg.sim = SimConfig { clutter_rate: SimConfig::clutter_heavy().clutter_rate, ..cfg.sim };
    }
    let mut trainer = Trainer::new(cfg, &split.train)?;
    let log = trainer.fit(&split.train, |_| Ok(()))?;
    let tail = &log[log.len().saturating_sub(10)..];
    let final_loss = tail.iter().map(|l| l.total).sum::<f64>() / tail.len().max(1) as f64;
    let report = evaluate(&trainer.model, &trainer.norm, &split.eval)?;
    let seen = &split.train[..split.train.len().min(split.eval.len())];
    let train_map50 = evaluate(&trainer.model, &trainer.norm, seen)?.map50;
    let gate = gate_stats(&gate_dump(&trainer.model, &trainer.norm, &split.eval, 0.5)?);
    Ok(VariantResult {
        name: variant.name.clone(),
        seed,
        history: variant.history,
        map50: report.map50,
        map50_95: report.map50_95,
        train_map50,
        final_loss,
        gate,
    })
}

/// Runs every variant for seeds `0..seeds`. Clutter-heavy variants get their
/// own split drawn at the heavy clutter rate; `report` sees each result as it
/// finishes.
pub fn run_grid(
    base: &RunConfig,
    variants: &[Variant],
    seeds: u64,
    train_sequences: usize,
    eval_sequences: usize,
    mut report: impl FnMut(&VariantResult),
) -> Result<Vec<VariantResult>> {
    let heavy_sim = SimConfig { clutter_rate: SimConfig::clutter_heavy().clutter_rate, ..base.sim.clone() };
    let mut out = Vec::with_capacity(variants.len() * seeds as usize);
    for seed in 0..seeds {
        let normal = variants
            .iter()
            .any(|v| !v.clutter_heavy)
            .then(|| make_split(&base.sim, seed, train_sequences, eval_sequences))
            .transpose()?;
        let heavy = variants
            .iter()
            .any(|v| v.clutter_heavy)
            .then(|| make_split(&heavy_sim, seed, train_sequences, eval_sequences))
            .transpose()?;
        for v in variants {
            let split = if v.clutter_heavy { heavy.as_ref() } else { normal.as_ref() };
            let r = run_variant(base, v, seed, split.expect("split drawn for every variant kind"))?;
            report(&r);
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seeds: usize,
    pub mean_map50: f64,
    pub mean_map50_95: f64,
}

/// Per-variant means, in first-appearance order.
pub fn summarize(results: &[VariantResult]) -> Vec<Summary> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let rs: Vec<&VariantResult> = results.iter().filter(|r| r.name == n).collect();
            let k = rs.len() as f64;
            Summary {
                name: n.to_string(),
                seeds: rs.len(),
                mean_map50: rs.iter().map(|r| r.map50).sum::<f64>() / k,
                mean_map50_95: rs.iter().map(|r| r.map50_95).sum::<f64>() / k,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_distinct_names() {
        for grid in [module_grid(), gate_tqa_grid()] {
            let mut names: Vec<_> = grid.iter().map(|v| v.name.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), grid.len());
        }
        assert_eq!(module_grid()[0].toggles, Toggles::all_off());
    }

    #[test]
    fn gate_stats_split_by_membership() {
        let s = gate_stats(&[(1.0, 0.2, false), (5.0, 0.8, true), (2.0, 0.4, false)]).unwrap();
        assert!((s.outlier_mean - 0.3).abs() < 1e-15);
        assert_eq!((s.target_mean, s.target_points, s.outlier_points), (0.8, 1, 2));
        assert!(gate_stats(&[(1.0, 0.2, false)]).is_none());
    }

    #[test]
    fn summary_averages_over_seeds() {
        let r = |name: &str, seed, map50| VariantResult {
            name: name.into(),
            seed,
            history: 1,
            map50,
            map50_95: map50 / 2.0,
            train_map50: 0.0,
            final_loss: 0.0,
            gate: None,
        };
        let s = summarize(&[r("a", 0, 10.0), r("b", 0, 1.0), r("a", 1, 20.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].name.as_str(), s[0].seeds, s[0].mean_map50, s[0].mean_map50_95), ("a", 2, 15.0, 7.5));
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let sim = SimConfig { frames: 2, image_size: 8, ..SimConfig::default() };
        let a = make_split(&sim, 1, 2, 1).unwrap();
        let b = make_split(&sim, 1, 2, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.eval.len()), (4, 2));
        assert_ne!(a.train[0], a.eval[0]);
    }
}
