//! DFT beam codebook over a uniform linear array.
//!
//! Beams sit on a uniform grid in sin(theta): sin(theta_m) = -1 + (2m-1)/M
//! for m = 1..M. Each beamforming vector is unit norm by construction.
//! Indices are 0-based throughout the crate.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use num_complex::Complex64;

/// A set of `M` unit-norm steering vectors over an `N`-element array.
#[derive(Clone, Debug)]
pub struct BeamCodebook {
    antennas: usize,
    beams: Vec<Vec<Complex64>>,
    /// Steering angle of each beam, radians.
    beam_angles: Vec<f64>,
}

/// Array response for a plane wave with direction cosine `sin_theta`
/// along the array axis (half-wavelength element spacing).
pub fn steering_from_sin(sin_theta: f64, antennas: usize) -> Vec<Complex64> {
    (0..antennas)
        .map(|n| Complex64::from_polar(1.0, -std::f64::consts::PI * n as f64 * sin_theta))
        .collect()
}

/// Array response at a physical angle (radians from broadside).
pub fn steering_vector(angle: f64, antennas: usize) -> Vec<Complex64> {
    steering_from_sin(angle.sin(), antennas)
}

/// Build the DFT codebook: w_m[n] = exp(-j pi n sin(theta_m)) / sqrt(N).
pub fn dft_codebook(antennas: usize, size: usize) -> Result<BeamCodebook> {
    if antennas == 0 || size == 0 {
        return Err(Error::config(format!(
            "codebook needs antennas >= 1 and size >= 1 (got {antennas}, {size})"
        )));
    }
    let norm = 1.0 / (antennas as f64).sqrt();
    let mut beams = Vec::with_capacity(size);
    let mut beam_angles = Vec::with_capacity(size);
    for m in 1..=size {
        let sin_theta = -1.0 + (2.0 * m as f64 - 1.0) / size as f64;
        beam_angles.push(sin_theta.asin());
        beams.push(
            steering_from_sin(sin_theta, antennas)
                .into_iter()
                .map(|v| v * norm)
                .collect(),
        );
    }
    Ok(BeamCodebook {
        antennas,
        beams,
        beam_angles,
    })
}

impl BeamCodebook {
    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn size(&self) -> usize {
        self.beams.len()
    }

    pub fn beam(&self, m: usize) -> &[Complex64] {
        &self.beams[m]
    }

    pub fn beam_angle(&self, m: usize) -> f64 {
        self.beam_angles[m]
    }

    /// Beam direction as a sin(theta) grid value.
    pub fn beam_sin(&self, m: usize) -> f64 {
        self.beam_angles[m].sin()
    }
}

/// h^H w.
fn inner(h: &[Complex64], w: &[Complex64]) -> Complex64 {
    h.iter().zip(w).map(|(a, b)| a.conj() * b).sum()
}

/// Beamformed receive power |h^H w|^2.
pub fn beam_power(h: &[Complex64], w: &[Complex64]) -> f64 {
    inner(h, w).norm_sqr()
}

/// Index of the codebook beam maximizing instantaneous receive power.
/// Ties break toward the lowest index.
pub fn optimal_beam(h: &[Complex64], cb: &BeamCodebook) -> Result<usize> {
    if h.len() != cb.antennas {
        return Err(Error::shape(format!(
            "channel of length {} against an {}-antenna codebook",
            h.len(),
            cb.antennas
        )));
    }
    let mut best = 0;
    let mut best_power = beam_power(h, &cb.beams[0]);
    for m in 1..cb.size() {
        let p = beam_power(h, &cb.beams[m]);
        if p > best_power {
            best = m;
            best_power = p;
        }
    }
    Ok(best)
}

/// One receive-power measurement with a unit-power symbol and optional
/// complex Gaussian noise of the given power.
pub fn measure_power(
    h: &[Complex64],
    w: &[Complex64],
    noise_power: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if h.len() != w.len() {
        return Err(Error::shape(format!(
            "measure_power over lengths {} and {}",
            h.len(),
            w.len()
        )));
    }
    if noise_power < 0.0 {
        return Err(Error::config(format!("negative noise power {noise_power}")));
    }
    let signal = inner(h, w);
    if noise_power == 0.0 {
        return Ok(signal.norm_sqr());
    }
    let s = (noise_power / 2.0).sqrt();
    let noise = Complex64::new(s * rng.normal(), s * rng.normal());
    Ok((signal + noise).norm_sqr())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beams_are_unit_norm_and_distinct() {
        let cb = dft_codebook(16, 32).unwrap();
        for m in 0..cb.size() {
            let norm: f64 = cb.beam(m).iter().map(|v| v.norm_sqr()).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        for m in 1..cb.size() {
            assert!(cb.beam_sin(m) > cb.beam_sin(m - 1));
        }
    }

    #[test]
    fn square_codebook_gram_is_diagonally_dominant() {
        let n = 16;
        let cb = dft_codebook(n, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let g = inner(cb.beam(i), cb.beam(j)).norm();
                if i == j {
                    assert!((g - 1.0).abs() < 1e-12);
                } else {
                    assert!(g < 1.0 - 1e-6, "|G[{i},{j}]| = {g}");
                }
            }
        }
    }

    #[test]
    fn zero_sizes_are_errors() {
        assert!(dft_codebook(0, 8).is_err());
        assert!(dft_codebook(8, 0).is_err());
    }

    #[test]
    fn broadside_steering_is_all_ones() {
        let a = steering_vector(0.0, 8);
        for v in a {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn steering_conjugate_symmetry() {
        let a = steering_vector(0.4, 8);
        let b = steering_vector(-0.4, 8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y.conj()).norm() < 1e-12);
        }
    }

    #[test]
    fn beam_matches_itself() {
        let cb = dft_codebook(32, 32).unwrap();
        let h: Vec<Complex64> = cb.beam(5).to_vec();
        assert_eq!(optimal_beam(&h, &cb).unwrap(), 5);
    }

    #[test]
    fn optimal_beam_is_scale_and_phase_invariant() {
        let cb = dft_codebook(32, 32).unwrap();
        let rot = Complex64::from_polar(3.0, 1.234);
        let h: Vec<Complex64> = cb.beam(17).iter().map(|v| v * rot).collect();
        assert_eq!(optimal_beam(&h, &cb).unwrap(), 17);
    }

    #[test]
    fn grid_angle_maps_to_its_beam() {
        let cb = dft_codebook(24, 16).unwrap();
        for m in 0..cb.size() {
            let h = steering_from_sin(cb.beam_sin(m), cb.antennas());
            assert_eq!(optimal_beam(&h, &cb).unwrap(), m);
        }
    }

    #[test]
    fn matches_brute_force_power_scan() {
        let cb = dft_codebook(16, 32).unwrap();
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let h: Vec<Complex64> = (0..16)
                .map(|_| Complex64::new(rng.normal(), rng.normal()))
                .collect();
            let naive = (0..cb.size())
                .map(|m| beam_power(&h, cb.beam(m)))
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (m, p)| {
                    if p > acc.1 {
                        (m, p)
                    } else {
                        acc
                    }
                })
                .0;
            assert_eq!(optimal_beam(&h, &cb).unwrap(), naive);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let cb = dft_codebook(16, 8).unwrap();
        let h = vec![Complex64::new(1.0, 0.0); 15];
        assert!(optimal_beam(&h, &cb).is_err());
    }

    #[test]
    fn noiseless_power_is_exact() {
        let cb = dft_codebook(8, 8).unwrap();
        let mut rng = Rng::new(2);
        let w: Vec<Complex64> = cb.beam(3).to_vec();
        assert!((measure_power(&w, &w, 0.0, &mut rng).unwrap() - 1.0).abs() < 1e-12);

        let h = steering_vector(0.2, 8);
        let exact = beam_power(&h, &w);
        assert_eq!(measure_power(&h, &w, 0.0, &mut rng).unwrap(), exact);
        assert!(measure_power(&h, &w, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noisy_power_matches_expectation() {
        let cb = dft_codebook(8, 8).unwrap();
        let h = steering_vector(0.1, 8);
        let w = cb.beam(4);
        let sigma2 = 0.3;
        let n = 100_000;
        let mut rng = Rng::new(5);
        let mean = (0..n)
            .map(|_| measure_power(&h, w, sigma2, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let expect = beam_power(&h, w) + sigma2;
        // |r|^2 has variance sigma^2 (sigma^2 + 2|s|^2); 5-sigma band on the mean
        let var = sigma2 * (sigma2 + 2.0 * beam_power(&h, w));
        let band = 5.0 * (var / n as f64).sqrt();
        assert!(
            (mean - expect).abs() < band,
            "mean {mean} expect {expect} band {band}"
        );
    }
}
