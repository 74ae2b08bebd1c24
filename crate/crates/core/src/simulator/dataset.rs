//! Dataset file format and generation.
//!
//! Line-delimited records, one frame per line:
//!
//! ```text
//! # beamflow-dataset v1 m=32 fps=7 config=2c2b6a3cf30bd7a4
//! s0000,12,0.5125,0.431,0.0312,0.0278,17
//! ```
//!
//! Fields are `seq_id,frame,xc,yc,w,h,beam`. The single header line
//! carries the codebook size, the frame rate, and a hash of the
//! generator configuration. Floats are written with Rust's shortest
//! round-trip formatting, so write/read is exact.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::simulator::codebook::dft_codebook;
use crate::simulator::scene::{CameraModel, Frame, TrajectoryConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const FORMAT_TAG: &str = "# beamflow-dataset v1";

/// Parsed header line of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub codebook_size: usize,
    pub fps: f64,
    pub config_hash: String,
}

impl DatasetHeader {
    pub fn to_line(&self) -> String {
        format!(
            "{FORMAT_TAG} m={} fps={} config={}",
            self.codebook_size, self.fps, self.config_hash
        )
    }

    pub fn parse(line: &str) -> Result<DatasetHeader> {
        let rest = line
            .strip_prefix(FORMAT_TAG)
            .ok_or_else(|| Error::data(format!("line 1: expected header `{FORMAT_TAG} ...`")))?;
        let mut m = None;
        let mut fps = None;
        let mut config = None;
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::data(format!("line 1: malformed header field `{field}`")))?;
            match key {
                "m" => {
                    m = Some(value.parse::<usize>().map_err(|_| {
                        Error::data(format!("line 1: bad codebook size `{value}`"))
                    })?)
                }
                "fps" => {
                    fps = Some(
                        value
                            .parse::<f64>()
                            .map_err(|_| Error::data(format!("line 1: bad fps `{value}`")))?,
                    )
                }
                "config" => config = Some(value.to_string()),
                _ => return Err(Error::data(format!("line 1: unknown header field `{key}`"))),
            }
        }
        Ok(DatasetHeader {
            codebook_size: m.ok_or_else(|| Error::data("line 1: header missing m="))?,
            fps: fps.ok_or_else(|| Error::data("line 1: header missing fps="))?,
            config_hash: config.ok_or_else(|| Error::data("line 1: header missing config="))?,
        })
    }
}

pub fn frame_to_line(f: &Frame) -> Result<String> {
    if f.seq_id.contains(',') || f.seq_id.contains('\n') || f.seq_id.is_empty() {
        return Err(Error::data(format!("unwritable seq_id `{}`", f.seq_id)));
    }
    Ok(format!(
        "{},{},{},{},{},{},{}",
        f.seq_id, f.frame_idx, f.bbox[0], f.bbox[1], f.bbox[2], f.bbox[3], f.beam
    ))
}

/// Parse one record line; `lineno` is 1-based for error messages.
pub fn frame_from_line(line: &str, lineno: usize) -> Result<Frame> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != 7 {
        return Err(Error::data(format!(
            "line {lineno}: expected 7 comma-separated fields, got {}",
            parts.len()
        )));
    }
    let seq_id = parts[0].to_string();
    if seq_id.is_empty() {
        return Err(Error::data(format!("line {lineno}: empty seq_id")));
    }
    let frame_idx: usize = parts[1]
        .parse()
        .map_err(|_| Error::data(format!("line {lineno}: bad frame index `{}`", parts[1])))?;
    let mut bbox = [0.0f64; 4];
    for (i, raw) in parts[2..6].iter().enumerate() {
        bbox[i] = raw
            .parse()
            .map_err(|_| Error::data(format!("line {lineno}: bad bbox value `{raw}`")))?;
    }
    let beam: i64 = parts[6]
        .parse()
        .map_err(|_| Error::data(format!("line {lineno}: bad beam index `{}`", parts[6])))?;
    if beam < 0 {
        return Err(Error::data(format!("line {lineno}: negative beam index {beam}")));
    }
    Ok(Frame {
        seq_id,
        frame_idx,
        bbox,
        beam: beam as usize,
    })
}

/// Everything the generator needs; hashed into the dataset header.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub antennas: usize,
    pub codebook_size: usize,
    /// Metadata only: the narrowband label geometry does not use it.
    pub carrier_hz: f64,
    pub sequences: usize,
    pub camera: CameraModel,
    pub trajectories: Vec<TrajectoryConfig>,
    pub jitter: JitterConfig,
}

/// Per-sequence randomization applied to the trajectory templates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    /// Speed multiplier drawn from U(1-s, 1+s).
    pub speed: f64,
    /// Lateral offset drawn from U(-l, l), meters.
    pub lateral: f64,
    /// Start shift along the travel direction, drawn from U(0, a) meters;
    /// staggers which part of the pass each sequence covers.
    pub along: f64,
    /// Reverse travel direction with probability 1/2.
    pub flip_direction: bool,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            speed: 0.15,
            lateral: 1.0,
            along: 0.0,
            flip_direction: true,
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            antennas: 32,
            codebook_size: 32,
            carrier_hz: 60e9,
            sequences: 30,
            camera: CameraModel::default(),
            trajectories: vec![TrajectoryConfig {
                motion: crate::simulator::scene::MotionModel::ConstantVelocity,
                start: [-35.0, 15.0],
                end: [35.0, 15.0],
                speed: 6.0,
                fps: 7.0,
                frames: 80,
                p_flip: 0.0,
            }],
            jitter: JitterConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::config("no trajectory templates configured"));
        }
        for t in &self.trajectories {
            t.validate()?;
        }
        self.camera.validate()?;
        if self.sequences == 0 {
            return Err(Error::config("sequences must be >= 1"));
        }
        Ok(())
    }

    pub fn fps(&self) -> f64 {
        self.trajectories[0].fps
    }
}

/// Short hex digest of a serializable config.
pub fn config_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub sequences: usize,
    pub frames: usize,
    pub header: DatasetHeader,
}

/// Draw one jittered trajectory from a template.
fn jitter_trajectory(template: &TrajectoryConfig, jitter: &JitterConfig, rng: &mut Rng) -> TrajectoryConfig {
    let mut t = *template;
    if jitter.speed > 0.0 {
        t.speed *= rng.range(1.0 - jitter.speed, 1.0 + jitter.speed);
    }
    if jitter.lateral > 0.0 {
        let dy = rng.range(-jitter.lateral, jitter.lateral);
        t.start[1] += dy;
        t.end[1] += dy;
    }
    if jitter.along > 0.0 {
        let shift = rng.range(0.0, jitter.along);
        let dx = t.end[0] - t.start[0];
        let dy = t.end[1] - t.start[1];
        let len = (dx * dx + dy * dy).sqrt();
        t.start[0] += shift * dx / len;
        t.start[1] += shift * dy / len;
    }
    if jitter.flip_direction && rng.chance(0.5) {
        std::mem::swap(&mut t.start, &mut t.end);
    }
    t
}

/// Simulate `cfg.sequences` passes and write them as one dataset file.
pub fn generate_dataset(cfg: &SimConfig, rng: &Rng, out_path: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    let cb = dft_codebook(cfg.antennas, cfg.codebook_size)?;
    let header = DatasetHeader {
        codebook_size: cfg.codebook_size,
        fps: cfg.fps(),
        config_hash: config_hash(cfg),
    };

    let file = File::create(out_path).map_err(|e| {
        Error::data(format!("cannot write dataset {}: {e}", out_path.display()))
    })?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", header.to_line())?;

    let mut total_frames = 0;
    for i in 0..cfg.sequences {
        let template = &cfg.trajectories[i % cfg.trajectories.len()];
        let mut seq_rng = rng.child_indexed("simulate", i as u64);
        let tcfg = jitter_trajectory(template, &cfg.jitter, &mut seq_rng);
        let seq_id = format!("s{i:04}");
        let frames = simulate_sequence(&seq_id, &tcfg, &cfg.camera, &cb, &mut seq_rng)?;
        for f in &frames {
            writeln!(w, "{}", frame_to_line(f)?)?;
        }
        total_frames += frames.len();
    }
    w.flush()?;
    Ok(DatasetSummary {
        sequences: cfg.sequences,
        frames: total_frames,
        header,
    })
}

use crate::simulator::scene::simulate_sequence;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trips() {
        let h = DatasetHeader {
            codebook_size: 32,
            fps: 7.0,
            config_hash: "deadbeef01234567".into(),
        };
        assert_eq!(DatasetHeader::parse(&h.to_line()).unwrap(), h);
        assert!(DatasetHeader::parse("s0,0,0,0,0,0,1").is_err());
    }

    #[test]
    fn frame_line_round_trips() {
        let f = Frame {
            seq_id: "s0003".into(),
            frame_idx: 41,
            bbox: [0.125, 0.5, 1.0 / 3.0, 0.0625],
            beam: 31,
        };
        let line = frame_to_line(&f).unwrap();
        assert_eq!(frame_from_line(&line, 2).unwrap(), f);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = frame_from_line("s0,нет,0,0,0,0,1", 17).unwrap_err();
        assert!(err.to_string().contains("line 17"), "{err}");
        let err = frame_from_line("s0,1,0,0,0,0", 3).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn generated_file_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimConfig {
            sequences: 3,
            ..SimConfig::default()
        };
        let p1 = dir.path().join("a.ds");
        let p2 = dir.path().join("b.ds");
        generate_dataset(&cfg, &Rng::new(5), &p1).unwrap();
        generate_dataset(&cfg, &Rng::new(5), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let p3 = dir.path().join("c.ds");
        generate_dataset(&cfg, &Rng::new(6), &p3).unwrap();
        assert_ne!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let cfg = SimConfig::default();
        let err = generate_dataset(&cfg, &Rng::new(1), Path::new("/no/such/dir/x.ds")).unwrap_err();
        assert!(err.to_string().contains("cannot write"));
    }
}
