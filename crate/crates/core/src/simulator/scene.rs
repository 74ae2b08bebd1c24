//! Synthetic V2I scenes: a vehicle crossing the field of view of an
//! RSU-mounted camera and antenna array.
//!
//! World frame: the RSU sits at the origin with its linear array along
//! the x axis; the road runs at positive y. The camera shares the RSU
//! pole and looks along +y. Beam labels come from the noiseless
//! geometric line-of-sight channel; boxes come from a pinhole projection
//! of the vehicle's extent, clipped to the image and normalized to
//! [0, 1].

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::simulator::codebook::{optimal_beam, steering_from_sin, BeamCodebook};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MotionModel {
    ConstantVelocity,
    ConstantAcceleration {
        /// m/s^2 along the travel direction.
        accel: f64,
    },
    SinusoidalWeave {
        /// Lateral amplitude, meters.
        amplitude: f64,
        /// Full weave period, seconds.
        period_s: f64,
    },
}

/// One vehicle pass. Travel runs from `start` toward `end` (ground-plane
/// meters) at `speed` m/s, sampled at `fps` for `frames` frames.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub motion: MotionModel,
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub speed: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub frames: usize,
    /// Probability of flipping a label to a neighboring beam index.
    #[serde(default)]
    pub p_flip: f64,
}

fn default_fps() -> f64 {
    7.0
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fps <= 0.0 {
            return Err(Error::config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frames == 0 {
            return Err(Error::config("trajectory with zero frames"));
        }
        if !(0.0..1.0).contains(&self.p_flip) {
            return Err(Error::config(format!("p_flip {} outside [0, 1)", self.p_flip)));
        }
        if self.start == self.end {
            return Err(Error::config("trajectory start equals end"));
        }
        Ok(())
    }

    /// Ground-plane position at frame index `t`.
    pub fn position(&self, t: usize) -> [f64; 2] {
        let time = t as f64 / self.fps;
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        let len = (dx * dx + dy * dy).sqrt();
        let dir = [dx / len, dy / len];
        let along = match self.motion {
            MotionModel::ConstantVelocity => self.speed * time,
            MotionModel::ConstantAcceleration { accel } => {
                self.speed * time + 0.5 * accel * time * time
            }
            MotionModel::SinusoidalWeave { .. } => self.speed * time,
        };
        let lateral = match self.motion {
            MotionModel::SinusoidalWeave { amplitude, period_s } => {
                amplitude * (2.0 * std::f64::consts::PI * time / period_s).sin()
            }
            _ => 0.0,
        };
        // left-hand normal of the travel direction
        let normal = [-dir[1], dir[0]];
        [
            self.start[0] + dir[0] * along + normal[0] * lateral,
            self.start[1] + dir[1] * along + normal[1] * lateral,
        ]
    }
}

/// RSU-mounted pinhole camera plus the vehicle's physical extent.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Focal length in pixels (square pixels).
    pub focal: f64,
    /// Principal point, pixels.
    pub cx: f64,
    pub cy: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Camera height above ground, meters.
    pub height: f64,
    /// Vehicle extent along the road and vertically, meters.
    pub vehicle_length: f64,
    pub vehicle_height: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            focal: 250.0,
            cx: 640.0,
            cy: 360.0,
            image_width: 1280.0,
            image_height: 720.0,
            height: 5.0,
            vehicle_length: 4.5,
            vehicle_height: 1.6,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.focal <= 0.0 {
            return Err(Error::config(format!("focal must be positive, got {}", self.focal)));
        }
        if self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        Ok(())
    }

    /// Project the vehicle at ground position `[x, y]` into a clipped,
    /// normalized bounding box. `None` when nothing is visible.
    pub fn project(&self, pos: [f64; 2]) -> Option<[f64; 4]> {
        let [x, y] = pos;
        if y <= 0.1 {
            return None; // behind or on top of the camera
        }
        let half = self.vehicle_length / 2.0;
        let u0 = self.focal * (x - half) / y + self.cx;
        let u1 = self.focal * (x + half) / y + self.cx;
        // image v grows downward; ground (z=0) projects below the horizon
        let v_top = self.focal * (self.height - self.vehicle_height) / y + self.cy;
        let v_bot = self.focal * self.height / y + self.cy;

        let u_lo = u0.min(u1).max(0.0);
        let u_hi = u0.max(u1).min(self.image_width);
        let v_lo = v_top.min(v_bot).max(0.0);
        let v_hi = v_top.max(v_bot).min(self.image_height);
        if u_hi - u_lo <= 0.0 || v_hi - v_lo <= 0.0 {
            return None;
        }
        Some([
            (u_lo + u_hi) / 2.0 / self.image_width,
            (v_lo + v_hi) / 2.0 / self.image_height,
            (u_hi - u_lo) / self.image_width,
            (v_hi - v_lo) / self.image_height,
        ])
    }
}

/// One dataset record: a normalized bounding box and its beam label.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub seq_id: String,
    pub frame_idx: usize,
    /// [x_center, y_center, width, height], all in [0, 1].
    pub bbox: [f64; 4],
    pub beam: usize,
}

/// Geometric line-of-sight channel toward a ground position.
#[derive(Clone, Debug)]
pub struct ChannelSample {
    pub h: Vec<Complex64>,
    /// Angle from array broadside, radians.
    pub angle: f64,
    pub gain: Complex64,
    pub noise_power: Option<f64>,
    pub symbol_power: Option<f64>,
}

/// Free-space wavelength at 60 GHz; only the label-irrelevant channel
/// phase depends on it.
const WAVELENGTH_M: f64 = 0.005;

/// Line-of-sight channel from an RSU array at height `rsu_height` to a
/// vehicle center at `pos` (ground plane) and height `vehicle_z`.
pub fn los_channel(pos: [f64; 2], rsu_height: f64, vehicle_z: f64, antennas: usize) -> ChannelSample {
    let dx = pos[0];
    let dy = pos[1];
    let dz = vehicle_z - rsu_height;
    let r = (dx * dx + dy * dy + dz * dz).sqrt().max(1e-6);
    let sin_theta = dx / r;
    let gain = Complex64::from_polar(
        1.0 / r,
        -2.0 * std::f64::consts::PI * r / WAVELENGTH_M,
    );
    let h = steering_from_sin(sin_theta, antennas)
        .into_iter()
        .map(|v| v * gain)
        .collect();
    ChannelSample {
        h,
        angle: sin_theta.asin(),
        gain,
        noise_power: None,
        symbol_power: Some(1.0),
    }
}

/// Flip a beam index to a random neighbor, staying inside [0, size).
fn flip_neighbor(beam: usize, size: usize, rng: &mut Rng) -> usize {
    if size == 1 {
        return beam;
    }
    if beam == 0 {
        1
    } else if beam == size - 1 {
        size - 2
    } else if rng.chance(0.5) {
        beam + 1
    } else {
        beam - 1
    }
}

/// Simulate one pass: per frame, position -> channel -> optimal beam
/// label and position -> projected box. Frames where the vehicle is not
/// visible are dropped; the result is the longest contiguous visible run.
pub fn simulate_sequence(
    seq_id: &str,
    tcfg: &TrajectoryConfig,
    cam: &CameraModel,
    cb: &BeamCodebook,
    rng: &mut Rng,
) -> Result<Vec<Frame>> {
    tcfg.validate()?;
    cam.validate()?;
    let vehicle_z = cam.vehicle_height / 2.0;

    let mut frames: Vec<Frame> = Vec::with_capacity(tcfg.frames);
    let mut runs: Vec<(usize, usize)> = Vec::new(); // (start index in `frames`, len)
    let mut current: Option<(usize, usize)> = None;
    for t in 0..tcfg.frames {
        let pos = tcfg.position(t);
        let Some(bbox) = cam.project(pos) else {
            if let Some(run) = current.take() {
                runs.push(run);
            }
            continue;
        };
        let channel = los_channel(pos, cam.height, vehicle_z, cb.antennas());
        let mut beam = optimal_beam(&channel.h, cb)?;
        if tcfg.p_flip > 0.0 && rng.chance(tcfg.p_flip) {
            beam = flip_neighbor(beam, cb.size(), rng);
        }
        frames.push(Frame {
            seq_id: seq_id.to_string(),
            frame_idx: t,
            bbox,
            beam,
        });
        current = Some(match current {
            Some((s, l)) => (s, l + 1),
            None => (frames.len() - 1, 1),
        });
    }
    if let Some(run) = current.take() {
        runs.push(run);
    }
    let Some(&(start, len)) = runs.iter().max_by_key(|&&(_, l)| l) else {
        return Err(Error::data(format!(
            "empty sequence: vehicle never visible in {seq_id}"
        )));
    };
    Ok(frames[start..start + len].to_vec())
}
