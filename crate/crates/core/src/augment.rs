//! Image transforms: center rotation and the procedural corruption bank
//! used for robustness evaluation.
//!
//! All transforms take and return flat row-major square images with pixels
//! in [0,1] and are pure functions of their inputs (plus an explicit seed
//! where randomness is involved), so evaluation sweeps can run cells in any
//! order or in parallel without changing results.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn square_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "image is not square: {len} pixels"
        )));
    }
    Ok(side)
}

/// Rotates a square image about its center by `angle` radians, bilinear
/// interpolation, zero fill outside the source. Angle 0.0 is the exact
/// identity (bitwise), not a resampled one.
pub fn rotate_image(img: &[f64], angle: f64) -> Result<Vec<f64>> {
    let side = square_side(img.len())?;
    if angle == 0.0 {
        return Ok(img.to_vec());
    }
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        for col in 0..side {
            let dx = col as f64 - c;
            let dy = r as f64 - c;
            // inverse map: where in the source does this output pixel come from
            let sx = c + dx * cos + dy * sin;
            let sy = c - dx * sin + dy * cos;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = 0.0;
            for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let px = x0 + ox;
                    let py = y0 + oy;
                    if px >= 0.0 && py >= 0.0 && (px as usize) < side && (py as usize) < side {
                        acc += wx * wy * img[py as usize * side + px as usize];
                    }
                }
            }
            out[r * side + col] = acc;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind: {s}")))
    }
}

pub const N_SEVERITIES: usize = 5;

// Severity parameter tables, index = severity - 1. Each is monotone in
// effect strength (blur radius and pixelate block repeat at neighboring
// severities on small images, which keeps the effect monotone, not strict).
const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.20];
const SHOT_PEAK: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_P: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
const BOX_RADIUS: [usize; 5] = [1, 1, 2, 2, 3];
const MOTION_LEN: [usize; 5] = [2, 3, 4, 5, 6];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.60, 0.45, 0.30, 0.15];
const BRIGHTNESS_DELTA: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];
const PIXELATE_FRACTION: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.7];

/// Applies one corruption at a severity in 1..=5. Deterministic given the
/// seed; output clipped to [0,1]. Geometric kinds (blurs, pixelate) need a
/// square image, the pointwise kinds accept any length.
pub fn corrupt(img: &[f64], kind: CorruptionKind, severity: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_with_rng(img, kind, severity, &mut rng)
}

fn corrupt_with_rng(
    img: &[f64],
    kind: CorruptionKind,
    severity: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if !(1..=N_SEVERITIES).contains(&severity) {
        return Err(Error::InvalidArgument(format!(
            "severity must be in 1..=5, got {severity}"
        )));
    }
    let s = severity - 1;
    let clip = |v: f64| v.clamp(0.0, 1.0);
    let out = match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, GAUSSIAN_SIGMA[s]).expect("table sigma is positive");
            img.iter().map(|&v| clip(v + normal.sample(rng))).collect()
        }
        CorruptionKind::ShotNoise => {
            let peak = SHOT_PEAK[s];
            img.iter()
                .map(|&v| {
                    let lambda = v * peak;
                    if lambda <= 0.0 {
                        return 0.0;
                    }
                    let draw: f64 = Poisson::new(lambda).expect("lambda is positive").sample(rng);
                    clip(draw / peak)
                })
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_P[s];
            img.iter()
                .map(|&v| {
                    if rng.random::<f64>() < p {
                        if rng.random::<f64>() < 0.5 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::BoxBlur => {
            let side = square_side(img.len())?;
            let k = BOX_RADIUS[s] as isize;
            let mut out = vec![0.0; img.len()];
            for r in 0..side as isize {
                for c in 0..side as isize {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dr in -k..=k {
                        for dc in -k..=k {
                            let (rr, cc) = (r + dr, c + dc);
                            if rr >= 0 && cc >= 0 && rr < side as isize && cc < side as isize {
                                acc += img[(rr * side as isize + cc) as usize];
                                n += 1.0;
                            }
                        }
                    }
                    out[(r * side as isize + c) as usize] = acc / n;
                }
            }
            out
        }
        CorruptionKind::MotionBlur => {
            let side = square_side(img.len())? as isize;
            let len = MOTION_LEN[s];
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            let (sin, cos) = phi.sin_cos();
            let taps: Vec<(isize, isize)> = (0..len)
                .map(|t| {
                    let t = t as f64;
                    ((t * sin).round() as isize, (t * cos).round() as isize)
                })
                .collect();
            let mut out = vec![0.0; img.len()];
            for r in 0..side {
                for c in 0..side {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for &(dr, dc) in &taps {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < side && cc < side {
                            acc += img[(rr * side + cc) as usize];
                            n += 1.0;
                        }
                    }
                    out[(r * side + c) as usize] = if n > 0.0 { acc / n } else { 0.0 };
                }
            }
            out
        }
        CorruptionKind::Contrast => {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let f = CONTRAST_FACTOR[s];
            img.iter().map(|&v| clip(mean + f * (v - mean))).collect()
        }
        CorruptionKind::Brightness => {
            let d = BRIGHTNESS_DELTA[s];
            img.iter().map(|&v| clip(v + d)).collect()
        }
        CorruptionKind::Pixelate => {
            let side = square_side(img.len())?;
            let block = ((side as f64 * PIXELATE_FRACTION[s]).ceil() as usize).max(1);
            let mut out = vec![0.0; img.len()];
            for br in (0..side).step_by(block) {
                for bc in (0..side).step_by(block) {
                    let r_end = (br + block).min(side);
                    let c_end = (bc + block).min(side);
                    let mut acc = 0.0;
                    for r in br..r_end {
                        for c in bc..c_end {
                            acc += img[r * side + c];
                        }
                    }
                    let mean = acc / ((r_end - br) * (c_end - bc)) as f64;
                    for r in br..r_end {
                        for c in bc..c_end {
                            out[r * side + c] = mean;
                        }
                    }
                }
            }
            out
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_angle_rotation_is_bitwise_identity() {
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        assert_eq!(rotate_image(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn rotation_rejects_non_square_images() {
        assert!(rotate_image(&[0.0; 6], 0.3).is_err());
        assert!(rotate_image(&[], 0.3).is_err());
    }

    #[test]
    fn half_turn_preserves_a_symmetric_cross() {
        // 3x3 cross, invariant under 180 degrees.
        let img = vec![0.0, 1.0, 0.0, 1.0, 0.5, 1.0, 0.0, 1.0, 0.0];
        let rot = rotate_image(&img, std::f64::consts::PI).unwrap();
        for (a, b) in rot.iter().zip(&img) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Independent pixel-by-pixel reference with explicit corner weights.
    fn rotate_oracle(img: &[f64], side: usize, angle: f64) -> Vec<f64> {
        let c = (side as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; img.len()];
        let sample = |x: f64, y: f64| -> f64 {
            if x < 0.0 || y < 0.0 || x as usize >= side || y as usize >= side {
                0.0
            } else {
                img[y as usize * side + x as usize]
            }
        };
        for r in 0..side {
            for col in 0..side {
                let dx = col as f64 - c;
                let dy = r as f64 - c;
                let sx = c + dx * angle.cos() + dy * angle.sin();
                let sy = c - dx * angle.sin() + dy * angle.cos();
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                out[r * side + col] = (1.0 - fx) * (1.0 - fy) * sample(x0, y0)
                    + fx * (1.0 - fy) * sample(x0 + 1.0, y0)
                    + (1.0 - fx) * fy * sample(x0, y0 + 1.0)
                    + fx * fy * sample(x0 + 1.0, y0 + 1.0);
            }
        }
        out
    }

    #[test]
    fn quarter_turn_matches_reference_on_asymmetric_pattern() {
        let img = vec![1.0, 0.0, 0.0, 0.0];
        let rot = rotate_image(&img, std::f64::consts::FRAC_PI_2).unwrap();
        let want = rotate_oracle(&img, 2, std::f64::consts::FRAC_PI_2);
        for (a, b) in rot.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // the lit corner moves to a different corner, no mass is invented
        assert!(rot.iter().sum::<f64>() <= 1.0 + 1e-9);
        assert!((rot.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        assert!(rot != img);
    }

    #[test]
    fn arbitrary_angles_match_reference() {
        let mut img = vec![0.0; 49];
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 / 10.0;
        }
        for angle in [0.3, 1.1, 2.0, 4.5, -0.7] {
            let rot = rotate_image(&img, angle).unwrap();
            let want = rotate_oracle(&img, 7, angle);
            for (a, b) in rot.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corruption_is_deterministic_given_seed() {
        let img: Vec<f64> = (0..25).map(|i| (i as f64 + 1.0) / 26.0).collect();
        for kind in CorruptionKind::ALL {
            let a = corrupt(&img, kind, 3, 99).unwrap();
            let b = corrupt(&img, kind, 3, 99).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn brightness_adds_exactly_delta_to_a_dark_image() {
        let img = vec![0.0; 9];
        for (s, d) in BRIGHTNESS_DELTA.iter().enumerate() {
            let out = corrupt(&img, CorruptionKind::Brightness, s + 1, 0).unwrap();
            assert!(out.iter().all(|v| v == d));
        }
    }

    #[test]
    fn blurs_leave_constant_images_unchanged() {
        let img = vec![0.4; 36];
        for kind in [CorruptionKind::BoxBlur, CorruptionKind::MotionBlur] {
            for severity in 1..=5 {
                let out = corrupt(&img, kind, severity, 7).unwrap();
                for v in &out {
                    assert!((v - 0.4).abs() < 1e-12, "{kind} severity {severity}");
                }
            }
        }
    }

    #[test]
    fn contrast_shrinks_deviation_from_the_mean() {
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let mean = img.iter().sum::<f64>() / 16.0;
        let spread = |v: &[f64]| v.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        let mut prev = spread(&img);
        for severity in 1..=5 {
            let out = corrupt(&img, CorruptionKind::Contrast, severity, 0).unwrap();
            let s = spread(&out);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn shot_noise_keeps_black_pixels_black() {
        let mut img = vec![0.0; 16];
        img[5] = 0.9;
        let out = corrupt(&img, CorruptionKind::ShotNoise, 5, 3).unwrap();
        for (i, v) in out.iter().enumerate() {
            if i != 5 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn impulse_flip_rate_tracks_the_severity_parameter() {
        let img = vec![0.5; 10_000];
        for (s, p) in IMPULSE_P.iter().enumerate() {
            let out = corrupt(&img, CorruptionKind::ImpulseNoise, s + 1, 11).unwrap();
            let flipped = out.iter().filter(|&&v| v != 0.5).count() as f64 / 10_000.0;
            // binomial 3 sigma around p
            let tol = 3.0 * (p * (1.0 - p) / 10_000.0).sqrt();
            assert!((flipped - p).abs() < tol, "p={p} got {flipped}");
        }
    }

    #[test]
    fn gaussian_noise_magnitude_grows_with_severity() {
        let img = vec![0.5; 4096];
        let mut prev = 0.0;
        for severity in 1..=5 {
            let out = corrupt(&img, CorruptionKind::GaussianNoise, severity, 21).unwrap();
            let mse = out.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / 4096.0;
            assert!(mse > prev, "severity {severity}");
            prev = mse;
        }
    }

    #[test]
    fn pixelate_fills_blocks_with_their_mean() {
        // severity 5 on a 4x4 image: block = ceil(4 * 0.7) = 3, so the
        // top-left 3x3 block is constant at its mean.
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let out = corrupt(&img, CorruptionKind::Pixelate, 5, 0).unwrap();
        let mean: f64 = [0, 1, 2, 4, 5, 6, 8, 9, 10]
            .iter()
            .map(|&i| img[i])
            .sum::<f64>()
            / 9.0;
        for &i in &[0, 1, 2, 4, 5, 6, 8, 9, 10] {
            assert!((out[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn severity_out_of_range_is_rejected() {
        let img = vec![0.5; 16];
        assert!(corrupt(&img, CorruptionKind::GaussianNoise, 0, 0).is_err());
        assert!(corrupt(&img, CorruptionKind::GaussianNoise, 6, 0).is_err());
    }

    #[test]
    fn kind_names_round_trip_and_reject_unknowns() {
        for kind in CorruptionKind::ALL {
            assert_eq!(kind.name().parse::<CorruptionKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{kind}\""));
        }
        assert!("salt".parse::<CorruptionKind>().is_err());
        let err = "fog".parse::<CorruptionKind>().unwrap_err();
        assert!(err.to_string().contains("unknown corruption kind"));
    }

    proptest! {
        #[test]
        fn corrupted_pixels_stay_in_unit_range(
            img in proptest::collection::vec(0.0f64..=1.0, 25),
            severity in 1usize..=5,
            seed in 0u64..1000,
        ) {
            for kind in CorruptionKind::ALL {
                let out = corrupt(&img, kind, severity, seed).unwrap();
                prop_assert_eq!(out.len(), img.len());
                prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn rotated_pixels_stay_in_unit_range(
            img in proptest::collection::vec(0.0f64..=1.0, 36),
            angle in -7.0f64..7.0,
        ) {
            let out = rotate_image(&img, angle).unwrap();
            prop_assert!(out.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
    }
}
