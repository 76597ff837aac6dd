//! Deterministic synthetic maritime scenes.
//!
//! A sequence is a list of [`SceneSample`]s. Targets drift on smooth
//! constant-turn-rate trajectories in a world frame while the ego platform
//! moves underneath them. Every sample is expressed in that frame's ego
//! (sensor) coordinates: radar points, truth boxes and a top-down grayscale
//! raster sharing the radar ground plane.
//!
//! Target returns come in Poisson clusters with log-normal RCS; clutter is
//! scattered uniformly with RCS drawn from a log-normal/Pareto mixture, so the
//! pooled clutter reflectivity is much heavier tailed than the target one.

mod io;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NumArray;

pub use io::{read_dataset, write_dataset, Dataset, FORMAT_VERSION};

/// Number of synthetic object classes.
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// radial Doppler velocity, m/s
    pub v: f64,
    pub rcs: f64,
}

impl RadarPoint {
    pub fn new(x: f64, y: f64, z: f64, v: f64, rcs: f64) -> Self {
        Self { x, y, z, v, rcs }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Planar rigid transform from an ego frame into the world frame at frame `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EgoPose {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
    pub t: usize,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl EgoPose {
    pub fn new(theta: f64, tx: f64, ty: f64, t: usize) -> Self {
        Self { theta: wrap_angle(theta), tx, ty, t }
    }

    pub fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * x - s * y + self.tx, s * x + c * y + self.ty)
    }

    pub fn from_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.tx, y - self.ty);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Pose of `self` expressed in the coordinates of `reference`:
    /// `(delta_theta, delta_x, delta_y)`.
    pub fn relative_to(&self, reference: &EgoPose) -> [f64; 3] {
        let (x, y) = reference.from_world(self.tx, self.ty);
        [wrap_angle(self.theta - reference.theta), x, y]
    }
}

/// Re-expresses points measured in `from`'s ego frame in `to`'s ego frame.
///
/// Only coordinates move; Doppler and RCS are carried unchanged.
pub fn compensate_frame(points: &[RadarPoint], from: &EgoPose, to: &EgoPose) -> Vec<RadarPoint> {
    if from.theta == to.theta && from.tx == to.tx && from.ty == to.ty {
        return points.to_vec();
    }
    points
        .iter()
        .map(|p| {
            let (wx, wy) = from.to_world(p.x, p.y);
            let (x, y) = to.from_world(wx, wy);
            RadarPoint { x, y, ..*p }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub cls: usize,
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub theta: f64,
}

impl GroundTruthBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.w > 0.0) {
            return Err(Error::Validation(format!(
                "box size must be positive, got l={} w={}",
                self.l, self.w
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.theta.is_finite()) {
            return Err(Error::Validation("box has non-finite fields".into()));
        }
        Ok(())
    }

    /// Whether a ground-plane point lies inside the oriented footprint.
    pub fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 + margin && v.abs() <= self.w / 2.0 + margin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub t: usize,
    pub points: Vec<RadarPoint>,
    /// `[H, W]` grayscale raster in `[0, 1]`; row 0 is the `+y` edge, column 0 the `-x` edge.
    pub image: NumArray,
    pub ego: EgoPose,
    pub truths: Vec<GroundTruthBox>,
}

/// Per-class shape, reflectivity and motion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// median of the log-normal RCS
    pub rcs_median: f64,
    pub speed: (f64, f64),
    pub mean_returns: f64,
    pub brightness: f64,
}

pub const CLASSES: [ClassSpec; NUM_CLASSES] = [
    // buoy-like
    ClassSpec {
        length: 3.0,
        width: 3.0,
        height: 1.5,
        rcs_median: 2.0,
        speed: (0.0, 0.3),
        mean_returns: 3.0,
        brightness: 0.55,
    },
    // small boat
    ClassSpec {
        length: 7.0,
        width: 3.0,
        height: 2.0,
        rcs_median: 8.0,
        speed: (1.0, 3.0),
        mean_returns: 5.0,
        brightness: 0.7,
    },
    // ship
    ClassSpec {
        length: 14.0,
        width: 5.0,
        height: 4.0,
        rcs_median: 30.0,
        speed: (1.5, 4.0),
        mean_returns: 8.0,
        brightness: 0.85,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub frames: usize,
    pub targets: usize,
    /// mean clutter returns per frame
    pub clutter_rate: f64,
    /// probability that a target produces no returns in a frame
    pub dropout: f64,
    pub dt: f64,
    /// sensing area is `|x|, |y| <= half_extent` in ego coordinates
    pub half_extent: f64,
    pub image_size: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub static_targets: bool,
    pub position_noise: f64,
    pub doppler_noise: f64,
    pub target_rcs_sigma: f64,
    pub clutter_lognormal_mu: f64,
    pub clutter_lognormal_sigma: f64,
    pub clutter_pareto_weight: f64,
    pub clutter_pareto_scale: f64,
    pub clutter_pareto_alpha: f64,
    pub clutter_doppler_std: f64,
    pub image_background: f64,
    pub image_noise: f64,
    /// per-target per-frame visual contrast is drawn from `[image_contrast_min, 1]`
    pub image_contrast_min: f64,
    /// probability that a pixel carries a specular glint
    pub glint_rate: f64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub min_separation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            targets: 3,
            clutter_rate: 12.0,
            dropout: 0.1,
            dt: 0.5,
            half_extent: 24.0,
            image_size: 64,
            z_min: -1.0,
            z_max: 5.0,
            static_targets: false,
            position_noise: 0.15,
            doppler_noise: 0.1,
            target_rcs_sigma: 0.35,
            clutter_lognormal_mu: 0.0,
            clutter_lognormal_sigma: 0.8,
            clutter_pareto_weight: 0.2,
            clutter_pareto_scale: 5.0,
            clutter_pareto_alpha: 2.5,
            clutter_doppler_std: 0.6,
            image_background: 0.1,
            image_noise: 0.05,
            image_contrast_min: 0.35,
            glint_rate: 0.01,
            ego_speed: 1.0,
            ego_yaw_rate: 0.02,
            min_separation: 4.0,
        }
    }
}

impl SimConfig {
    /// Heavier clutter used for gate ablations.
    pub fn clutter_heavy() -> Self {
        Self { clutter_rate: 40.0, ..Self::default() }
    }

    /// Empty, static, noise-free world with the given number of targets.
    pub fn quiet(targets: usize) -> Self {
        Self {
            targets,
            clutter_rate: 0.0,
            dropout: 0.0,
            static_targets: true,
            position_noise: 0.0,
            doppler_noise: 0.0,
            image_noise: 0.0,
            glint_rate: 0.0,
            ego_speed: 0.0,
            ego_yaw_rate: 0.0,
            image_contrast_min: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, name: &str| {
            if !ok {
                bad.push(name.to_string());
            }
        };
        check(self.frames >= 1, "frames");
        check(self.clutter_rate >= 0.0 && self.clutter_rate.is_finite(), "clutter_rate");
        check((0.0..=1.0).contains(&self.dropout), "dropout");
        check(self.dt > 0.0 && self.dt.is_finite(), "dt");
        check(self.half_extent > 0.0 && self.half_extent.is_finite(), "half_extent");
        check(self.image_size >= 8, "image_size");
        check(self.z_min < self.z_max, "z_min/z_max");
        check(self.position_noise >= 0.0, "position_noise");
        check(self.doppler_noise >= 0.0, "doppler_noise");
        check(self.target_rcs_sigma >= 0.0, "target_rcs_sigma");
        check(self.clutter_lognormal_sigma >= 0.0, "clutter_lognormal_sigma");
        check((0.0..=1.0).contains(&self.clutter_pareto_weight), "clutter_pareto_weight");
        check(self.clutter_pareto_scale > 0.0, "clutter_pareto_scale");
        check(self.clutter_pareto_alpha > 1.0, "clutter_pareto_alpha");
        check(self.clutter_doppler_std >= 0.0, "clutter_doppler_std");
        check((0.0..=1.0).contains(&self.image_background), "image_background");
        check(self.image_noise >= 0.0, "image_noise");
        check((0.0..=1.0).contains(&self.image_contrast_min), "image_contrast_min");
        check((0.0..=1.0).contains(&self.glint_rate), "glint_rate");
        check(self.min_separation >= 0.0, "min_separation");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.half_extent / self.image_size as f64
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_extent && y.abs() <= self.half_extent
    }
}

/// Ground-plane coordinates of the centre of pixel `(row, col)` for a raster
/// covering `|x|, |y| <= half_extent` with `size x size` cells.
pub fn pixel_center(half_extent: f64, size: usize, row: f64, col: f64) -> (f64, f64) {
    let cell = 2.0 * half_extent / size as f64;
    (-half_extent + (col + 0.5) * cell, half_extent - (row + 0.5) * cell)
}

/// Closed-form moments of a reflectivity distribution. Infinite entries mean
/// the corresponding moment does not exist.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RcsMoments {
    pub mean: f64,
    pub variance: f64,
    pub excess_kurtosis: f64,
}

fn lognormal_raw(mu: f64, sigma: f64, k: f64) -> f64 {
    (k * mu + 0.5 * k * k * sigma * sigma).exp()
}

fn pareto_raw(scale: f64, alpha: f64, k: f64) -> f64 {
    if alpha > k {
        alpha * scale.powf(k) / (alpha - k)
    } else {
        f64::INFINITY
    }
}

fn moments_from_raw(m: [f64; 4]) -> RcsMoments {
    let [m1, m2, m3, m4] = m;
    let variance = m2 - m1 * m1;
    let excess_kurtosis = if m4.is_finite() && m3.is_finite() {
        let c4 = m4 - 4.0 * m3 * m1 + 6.0 * m2 * m1 * m1 - 3.0 * m1.powi(4);
        c4 / (variance * variance) - 3.0
    } else {
        f64::INFINITY
    };
    RcsMoments { mean: m1, variance, excess_kurtosis }
}

/// Moments of the configured clutter RCS mixture.
pub fn clutter_rcs_moments(cfg: &SimConfig) -> RcsMoments {
    let w = cfg.clutter_pareto_weight;
    let raw = [1.0, 2.0, 3.0, 4.0].map(|k| {
        let ln = lognormal_raw(cfg.clutter_lognormal_mu, cfg.clutter_lognormal_sigma, k);
        let pa = if w > 0.0 { pareto_raw(cfg.clutter_pareto_scale, cfg.clutter_pareto_alpha, k) } else { 0.0 };
        (1.0 - w) * ln + w * pa
    });
    moments_from_raw(raw)
}

/// Moments of the pooled target RCS when classes are equally likely.
pub fn target_rcs_moments(cfg: &SimConfig) -> RcsMoments {
    let raw = [1.0, 2.0, 3.0, 4.0].map(|k| {
        CLASSES
            .iter()
            .map(|c| lognormal_raw(c.rcs_median.ln(), cfg.target_rcs_sigma, k))
            .sum::<f64>()
            / NUM_CLASSES as f64
    });
    moments_from_raw(raw)
}

/// Sample excess kurtosis (population form).
pub fn excess_kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

#[derive(Clone, Debug)]
struct Target {
    cls: usize,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    turn_rate: f64,
    length: f64,
    width: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a sequence of `config.frames` samples. Identical `(config, seed)`
/// pairs give bit-identical sequences.
pub fn generate_sequence(config: &SimConfig, seed: u64) -> Result<Vec<SceneSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = config.half_extent;

    let mut targets: Vec<Target> = Vec::with_capacity(config.targets);
    for _ in 0..config.targets {
        let cls = rng.random_range(0..NUM_CLASSES);
        let spec = CLASSES[cls];
        let jitter = rng.random_range(0.9..1.1);
        let (length, width) = (spec.length * jitter, spec.width * jitter);
        let radius = 0.5 * length.hypot(width);
        let lim = (0.8 * e - radius).max(0.0);
        let mut pos = (0.0, 0.0);
        for _ in 0..200 {
            pos = (rng.random_range(-lim..=lim), rng.random_range(-lim..=lim));
            let clear = targets.iter().all(|o| {
                let r_other = 0.5 * o.length.hypot(o.width);
                (o.x - pos.0).hypot(o.y - pos.1) >= radius + r_other + config.min_separation
            });
            if clear {
                break;
            }
        }
        let heading = rng.random_range(-PI..PI);
        let (speed, turn_rate) = if config.static_targets {
            (0.0, 0.0)
        } else {
            (rng.random_range(spec.speed.0..=spec.speed.1), rng.random_range(-0.05..=0.05))
        };
        targets.push(Target { cls, x: pos.0, y: pos.1, heading, speed, turn_rate, length, width });
    }

    let ego_theta0 = if config.ego_speed == 0.0 && config.ego_yaw_rate == 0.0 {
        0.0
    } else {
        rng.random_range(-PI..PI)
    };
    let normal = |sd: f64| Normal::new(0.0, sd).expect("non-negative std");
    let pos_noise = normal(config.position_noise);
    let dop_noise = normal(config.doppler_noise);
    let clutter_dop = normal(config.clutter_doppler_std);
    let pix_noise = normal(config.image_noise);
    let target_rcs = LogNormal::new(0.0, config.target_rcs_sigma).expect("valid sigma");
    let clutter_ln =
        LogNormal::new(config.clutter_lognormal_mu, config.clutter_lognormal_sigma).expect("valid sigma");
    let clutter_count = (config.clutter_rate > 0.0)
        .then(|| Poisson::new(config.clutter_rate).expect("positive rate"));

    let size = config.image_size;
    let mut samples = Vec::with_capacity(config.frames);
    let (mut ego_x, mut ego_y, mut ego_theta) = (0.0, 0.0, ego_theta0);

    for t in 0..config.frames {
        if t > 0 {
            for tg in targets.iter_mut() {
                tg.heading = wrap_angle(tg.heading + tg.turn_rate * config.dt);
                tg.x += tg.speed * config.dt * tg.heading.cos();
                tg.y += tg.speed * config.dt * tg.heading.sin();
            }
            ego_theta = wrap_angle(ego_theta + config.ego_yaw_rate * config.dt);
            ego_x += config.ego_speed * config.dt * ego_theta.cos();
            ego_y += config.ego_speed * config.dt * ego_theta.sin();
        }
        let ego = EgoPose::new(ego_theta, ego_x, ego_y, t);
        let ego_vel = (config.ego_speed * ego_theta.cos(), config.ego_speed * ego_theta.sin());

        let mut truths = Vec::new();
        let mut points = Vec::new();
        let mut contrasts = Vec::new();
        for tg in &targets {
            let (cx, cy) = ego.from_world(tg.x, tg.y);
            if !config.contains(cx, cy) {
                continue;
            }
            let gt = GroundTruthBox {
                cls: tg.cls,
                cx,
                cy,
                l: tg.length,
                w: tg.width,
                theta: wrap_angle(tg.heading - ego.theta),
            };
            truths.push(gt);
            contrasts.push(rng.random_range(config.image_contrast_min..=1.0));

            let spec = CLASSES[tg.cls];
            let dropped = config.dropout > 0.0 && rng.random_bool(config.dropout);
            if dropped {
                continue;
            }
            // a surviving cluster always has at least one return
            let extra = if spec.mean_returns > 1.0 {
                Poisson::new(spec.mean_returns - 1.0).expect("positive").sample(&mut rng) as usize
            } else {
                0
            };
            let rel_vx = tg.speed * tg.heading.cos() - ego_vel.0;
            let rel_vy = tg.speed * tg.heading.sin() - ego_vel.1;
            let (s, c) = ego.theta.sin_cos();
            let (vx, vy) = (c * rel_vx + s * rel_vy, -s * rel_vx + c * rel_vy);
            let (hs, hc) = gt.theta.sin_cos();
            for _ in 0..1 + extra {
                let u = rng.random_range(-0.5..=0.5) * gt.l;
                let w = rng.random_range(-0.5..=0.5) * gt.w;
                let x = cx + hc * u - hs * w + pos_noise.sample(&mut rng);
                let y = cy + hs * u + hc * w + pos_noise.sample(&mut rng);
                let z = rng.random_range(0.0..=spec.height).clamp(config.z_min, config.z_max);
                let range = x.hypot(y).max(1e-6);
                let v = (vx * x + vy * y) / range + dop_noise.sample(&mut rng);
                let rcs = spec.rcs_median * target_rcs.sample(&mut rng);
                points.push(RadarPoint { x, y, z, v, rcs });
            }
        }

        if let Some(pois) = &clutter_count {
            let n = pois.sample(&mut rng) as usize;
            for _ in 0..n {
                let x = rng.random_range(-e..=e);
                let y = rng.random_range(-e..=e);
                let z = (0.2 * pos_noise_unit(&mut rng)).clamp(config.z_min, config.z_max);
                let range = x.hypot(y).max(1e-6);
                // static water surface seen from the moving ego, plus wave motion
                let (s, c) = ego.theta.sin_cos();
                let (vx, vy) = (-(c * ego_vel.0 + s * ego_vel.1), -(-s * ego_vel.0 + c * ego_vel.1));
                let v = (vx * x + vy * y) / range + clutter_dop.sample(&mut rng);
                let rcs = if config.clutter_pareto_weight > 0.0 && rng.random_bool(config.clutter_pareto_weight) {
                    let u: f64 = rng.random_range(f64::EPSILON..1.0);
                    config.clutter_pareto_scale * u.powf(-1.0 / config.clutter_pareto_alpha)
                } else {
                    clutter_ln.sample(&mut rng)
                };
                points.push(RadarPoint { x, y, z, v, rcs });
            }
        }

        let image = render_image(config, &truths, &contrasts, &mut rng, &pix_noise, size);
        samples.push(SceneSample { t, points, image, ego, truths });
    }
    Ok(samples)
}

fn pos_noise_unit(rng: &mut impl Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn render_image(
    config: &SimConfig,
    truths: &[GroundTruthBox],
    contrasts: &[f64],
    rng: &mut impl Rng,
    noise: &Normal<f64>,
    size: usize,
) -> NumArray {
    const EDGE: f64 = 0.3;
    let mut data = vec![config.image_background; size * size];
    for (gt, &contrast) in truths.iter().zip(contrasts) {
        let amp = CLASSES[gt.cls].brightness * contrast;
        let (s, c) = gt.theta.sin_cos();
        for row in 0..size {
            for col in 0..size {
                let (x, y) = pixel_center(config.half_extent, size, row as f64, col as f64);
                let (dx, dy) = (x - gt.cx, y - gt.cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let inside = sigmoid((gt.l / 2.0 - u.abs()) / EDGE) * sigmoid((gt.w / 2.0 - v.abs()) / EDGE);
                data[row * size + col] += amp * inside;
            }
        }
    }
    for px in data.iter_mut() {
        if config.image_noise > 0.0 {
            *px += noise.sample(rng);
        }
        if config.glint_rate > 0.0 && rng.random_bool(config.glint_rate) {
            *px += 0.35;
        }
        *px = px.clamp(0.0, 1.0);
    }
    NumArray::matrix(size, size, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_world() {
        let cfg = SimConfig { targets: 0, clutter_rate: 0.0, frames: 4, ..SimConfig::default() };
        let seq = generate_sequence(&cfg, 3).unwrap();
        assert_eq!(seq.len(), 4);
        for s in &seq {
            assert!(s.points.is_empty());
            assert!(s.truths.is_empty());
            assert_eq!(s.image.shape(), &[64, 64]);
            // noise only: no pixel far above background + glint + a few sigma
            assert!(s.image.data().iter().all(|&p| p < cfg.image_background + 0.35 + 0.3));
        }
    }

    #[test]
    fn static_world_keeps_target_fixed() {
        let cfg = SimConfig { frames: 6, ..SimConfig::quiet(1) };
        let seq = generate_sequence(&cfg, 11).unwrap();
        let first = seq[0].truths[0];
        for s in &seq {
            assert_eq!(s.truths.len(), 1);
            assert_eq!(s.truths[0], first);
            let inside = s.points.iter().filter(|p| first.contains(p.x, p.y, 1e-9)).count();
            assert!(inside >= 1);
            assert_eq!(inside, s.points.len());
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SimConfig { frames: 5, ..SimConfig::default() };
        assert_eq!(generate_sequence(&cfg, 42).unwrap(), generate_sequence(&cfg, 42).unwrap());
        assert_ne!(generate_sequence(&cfg, 42).unwrap(), generate_sequence(&cfg, 43).unwrap());
    }

    #[test]
    fn truths_stay_inside_area() {
        let cfg = SimConfig { frames: 60, targets: 5, ..SimConfig::default() };
        for seed in 0..5 {
            for s in generate_sequence(&cfg, seed).unwrap() {
                for b in &s.truths {
                    assert!(cfg.contains(b.cx, b.cy));
                    assert!(b.l > 0.0 && b.w > 0.0);
                    assert!(b.theta > -PI && b.theta <= PI);
                }
                for p in &s.points {
                    assert!(p.z >= cfg.z_min && p.z <= cfg.z_max);
                }
            }
        }
    }

    #[test]
    fn invalid_config_lists_fields() {
        let cfg = SimConfig { frames: 0, clutter_rate: -1.0, ..SimConfig::default() };
        match generate_sequence(&cfg, 0) {
            Err(Error::Config(fields)) => {
                assert!(fields.contains(&"frames".to_string()));
                assert!(fields.contains(&"clutter_rate".to_string()));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn dropout_thins_some_frame() {
        let cfg = SimConfig { frames: 50, dropout: 0.1, clutter_rate: 0.0, ..SimConfig::default() };
        let seq = generate_sequence(&cfg, 9).unwrap();
        let thinned = seq.iter().any(|s| {
            s.truths.iter().any(|b| !s.points.iter().any(|p| b.contains(p.x, p.y, 1.0)))
        });
        assert!(thinned);
    }

    #[test]
    fn compensation_sign_convention() {
        let pts = vec![RadarPoint::new(1.0, 2.0, 0.5, -0.3, 4.0)];
        let from = EgoPose::new(0.0, 0.0, 0.0, 0);
        let to = EgoPose::new(0.0, 5.0, 0.0, 1);
        let out = compensate_frame(&pts, &from, &to);
        assert_eq!(out[0], RadarPoint::new(-4.0, 2.0, 0.5, -0.3, 4.0));
        assert_eq!(compensate_frame(&pts, &to, &to), pts);
    }

    #[test]
    fn compensation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = EgoPose::new(rng.random_range(-PI..PI), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0);
            let b = EgoPose::new(rng.random_range(-PI..PI), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 1);
            let pts: Vec<_> = (0..10)
                .map(|_| RadarPoint::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 1.0, 0.2, 3.0))
                .collect();
            let back = compensate_frame(&compensate_frame(&pts, &a, &b), &b, &a);
            for (p, q) in pts.iter().zip(&back) {
                assert!((p.x - q.x).abs() < 1e-10 && (p.y - q.y).abs() < 1e-10);
                assert_eq!((p.z, p.v, p.rcs), (q.z, q.v, q.rcs));
            }
        }
    }

    #[test]
    fn closed_form_moments_for_pure_lognormal() {
        let cfg = SimConfig { clutter_pareto_weight: 0.0, clutter_lognormal_sigma: 0.5, ..SimConfig::default() };
        let m = clutter_rcs_moments(&cfg);
        let s2 = 0.25f64;
        let expected = s2.exp().powi(4) + 2.0 * s2.exp().powi(3) + 3.0 * s2.exp().powi(2) - 6.0;
        assert!((m.excess_kurtosis - expected).abs() < 1e-9);
        assert!(clutter_rcs_moments(&SimConfig::default()).excess_kurtosis.is_infinite());
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
    }
}
