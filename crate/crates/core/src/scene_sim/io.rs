//! JSON Lines dataset files: a header line followed by one sample per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EgoPose, GroundTruthBox, RadarPoint, SceneSample, SimConfig};
use crate::error::{Error, Result};
use crate::numerics::NumArray;

pub const FORMAT_VERSION: u32 = 1;

/// A dataset file in memory. Samples whose `t` restarts at zero begin a new
/// sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn new(config: SimConfig, samples: Vec<SceneSample>) -> Self {
        Self { config, samples }
    }

    /// Splits the flat sample list into sequences at every `t == 0`.
    pub fn sequences(&self) -> Vec<&[SceneSample]> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..self.samples.len() {
            if self.samples[i].t == 0 {
                out.push(&self.samples[start..i]);
                start = i;
            }
        }
        if start < self.samples.len() {
            out.push(&self.samples[start..]);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: SimConfig,
}

#[derive(Serialize, Deserialize)]
struct EgoRecord {
    theta: f64,
    tx: f64,
    ty: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    t: usize,
    points: Vec<[f64; 5]>,
    image: Vec<f64>,
    ego: EgoRecord,
    truths: Vec<GroundTruthBox>,
}

impl SampleRecord {
    fn from_sample(s: &SceneSample) -> Self {
        Self {
            t: s.t,
            points: s.points.iter().map(|p| [p.x, p.y, p.z, p.v, p.rcs]).collect(),
            image: s.image.data().to_vec(),
            ego: EgoRecord { theta: s.ego.theta, tx: s.ego.tx, ty: s.ego.ty },
            truths: s.truths.clone(),
        }
    }

    fn into_sample(self, size: usize) -> std::result::Result<SceneSample, String> {
        if self.image.len() != size * size {
            return Err(format!("image has {} values, expected {}", self.image.len(), size * size));
        }
        Ok(SceneSample {
            t: self.t,
            points: self.points.iter().map(|a| RadarPoint::new(a[0], a[1], a[2], a[3], a[4])).collect(),
            image: NumArray::matrix(size, size, self.image),
            // stored verbatim: no re-wrapping, so the round trip is exact
            ego: EgoPose { theta: self.ego.theta, tx: self.ego.tx, ty: self.ego.ty, t: self.t },
            truths: self.truths,
        })
    }
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header { format_version: FORMAT_VERSION, config: dataset.config.clone() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        if s.image.shape() != [dataset.config.image_size, dataset.config.image_size] {
            return Err(Error::dim(format!(
                "sample t={} image shape {:?} does not match image_size {}",
                s.t,
                s.image.shape(),
                dataset.config.image_size
            )));
        }
        serde_json::to_writer(&mut w, &SampleRecord::from_sample(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
            let found = value.get("format_version").and_then(serde_json::Value::as_u64);
            match found {
                Some(v) if v == FORMAT_VERSION as u64 => {}
                Some(v) => return Err(Error::FormatVersion { found: v, expected: FORMAT_VERSION as u64 }),
                None => {
                    return Err(Error::Parse { line: 1, message: "header lacks format_version".into() })
                }
            }
            serde_json::from_value(value).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        }
        None => return Err(Error::Parse { line: 1, message: "empty dataset file".into() }),
    };
    header.config.validate()?;
    let size = header.config.image_size;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let sample = rec.into_sample(size).map_err(|message| Error::Parse { line: lineno, message })?;
        samples.push(sample);
    }
    Ok(Dataset { config: header.config, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::generate_sequence;

    fn fnv(bytes: &[u8]) -> u64 {
        bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = SimConfig { frames: 4, ..SimConfig::default() };
        let mut samples = generate_sequence(&cfg, 1).unwrap();
        samples.extend(generate_sequence(&cfg, 2).unwrap());
        samples[0].points.push(RadarPoint::new(-0.0, 1e-300, f64::MIN_POSITIVE, 0.1 + 0.2, 1.0 / 3.0));
        let ds = Dataset::new(cfg, samples);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.sequences().len(), 2);
        let p = back.samples[0].points.last().unwrap();
        assert!(p.x == 0.0 && p.x.is_sign_negative());
        let a = fnv(&std::fs::read(&path).unwrap());
        let b = fnv(&std::fs::read(&path).unwrap());
        assert_eq!(a, b);
        let path2 = dir.path().join("e.jsonl");
        write_dataset(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cfg = SimConfig { frames: 2, image_size: 8, ..SimConfig::default() };
        let ds = Dataset::new(cfg.clone(), generate_sequence(&cfg, 0).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"t\": 2, \"points\": oops}\n");
        std::fs::write(&path, &text).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"format_version\": 7, \"config\": {}}\n").unwrap();
        match read_dataset(&path) {
            Err(Error::FormatVersion { found, expected }) => assert_eq!((found, expected), (7, 1)),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
