//! Synthetic 25-joint action corpus for desk-scale experiments.
//!
//! Each class moves five body chains (arms, legs, torso) with its own
//! oscillation amplitude, frequency and phase, on top of a class-specific
//! static posture offset. Samples add random speed, amplitude, phase, body
//! scale, heading and sensor noise.

use super::graph::NTU_JOINTS;
use super::io::Dataset;
use super::sequence::SkeletonSequence;
use crate::error::{Result, ScdError};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

const TEMPLATE: [[f64; 3]; NTU_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.3, 0.0],
    [0.0, 0.55, 0.0],
    [0.0, 0.7, 0.0],
    [-0.18, 0.5, 0.0],
    [-0.2, 0.25, 0.0],
    [-0.2, 0.02, 0.0],
    [-0.2, -0.05, 0.0],
    [0.18, 0.5, 0.0],
    [0.2, 0.25, 0.0],
    [0.2, 0.02, 0.0],
    [0.2, -0.05, 0.0],
    [-0.1, -0.02, 0.0],
    [-0.1, -0.45, 0.0],
    [-0.1, -0.85, 0.0],
    [-0.1, -0.9, 0.1],
    [0.1, -0.02, 0.0],
    [0.1, -0.45, 0.0],
    [0.1, -0.85, 0.0],
    [0.1, -0.9, 0.1],
    [0.0, 0.5, 0.0],
    [-0.2, -0.12, 0.0],
    [-0.17, -0.07, 0.03],
    [0.2, -0.12, 0.0],
    [0.17, -0.07, 0.03],
];

/// Joint chains with per-joint motion weights (distal joints move more).
const CHAINS: [&[(usize, f64)]; 5] = [
    &[(4, 0.2), (5, 0.5), (6, 0.8), (7, 1.0), (21, 1.0), (22, 1.0)],
    &[(8, 0.2), (9, 0.5), (10, 0.8), (11, 1.0), (23, 1.0), (24, 1.0)],
    &[(12, 0.1), (13, 0.5), (14, 0.9), (15, 1.0)],
    &[(16, 0.1), (17, 0.5), (18, 0.9), (19, 1.0)],
    &[(1, 0.3), (20, 0.6), (2, 0.8), (3, 1.0)],
];

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    #[serde(default = "default_min_frames")]
    pub min_frames: usize,
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Spread of the per-sample chain offsets and gains.
    #[serde(default = "default_style")]
    pub style: f64,
}

fn default_min_frames() -> usize {
    48
}
fn default_max_frames() -> usize {
    96
}
fn default_noise() -> f64 {
    0.01
}
fn default_style() -> f64 {
    0.25
}

impl SyntheticParams {
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Self {
        SyntheticParams {
            classes,
            per_class,
            seed,
            min_frames: default_min_frames(),
            max_frames: default_max_frames(),
            noise: default_noise(),
            style: default_style(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(ScdError::config("classes", "need at least 2 classes"));
        }
        if self.per_class < 1 {
            return Err(ScdError::config("per_class", "need at least 1 sample per class"));
        }
        if self.min_frames < 1 || self.min_frames > self.max_frames {
            return Err(ScdError::config("min_frames", "need 1 <= min_frames <= max_frames"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(ScdError::config("noise", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.style) {
            return Err(ScdError::config("style", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

struct ChainMotion {
    amplitude: [f64; 3],
    offset: [f64; 3],
    frequency: f64,
    phase: f64,
}

fn uniform3(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    [
        rng.random_range(-r..r),
        rng.random_range(-r..r),
        rng.random_range(-r..r),
    ]
}

/// Generates `classes * per_class` labelled sequences, class-major order.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let motions: Vec<Vec<ChainMotion>> = (0..params.classes)
        .map(|_| {
            CHAINS
                .iter()
                .map(|_| ChainMotion {
                    amplitude: uniform3(&mut rng, 0.3),
                    offset: uniform3(&mut rng, 0.15),
                    frequency: rng.random_range(0.5..3.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, params.noise).expect("valid std");
    let mut ds = Dataset::default();
    for (label, class) in motions.iter().enumerate() {
        for k in 0..params.per_class {
            let t = rng.random_range(params.min_frames..=params.max_frames);
            let amp = rng.random_range(0.7..1.3);
            let speed = rng.random_range(0.9..1.1);
            let jitter = rng.random_range(-0.5..0.5);
            let scale = rng.random_range(0.9..1.1);
            let yaw: f64 = rng.random_range(-PI / 12.0..PI / 12.0);
            let (sy, cy) = yaw.sin_cos();
            // per-sample style: each chain gets its own posture shift, gain and phase lag
            let style: Vec<([f64; 3], f64, f64)> = CHAINS
                .iter()
                .map(|_| {
                    let shift = uniform3(&mut rng, 0.3 * params.style);
                    let gain = rng.random_range(1.0 - params.style..1.0 + params.style);
                    let lag = rng.random_range(-PI * params.style..PI * params.style);
                    (shift, gain, lag)
                })
                .collect();

            let mut vals = Array4::<f32>::zeros((3, t, NTU_JOINTS, 1));
            for ti in 0..t {
                let mut pose = TEMPLATE;
                let phase_t = 2.0 * PI * ti as f64 / t as f64;
                for ((chain, m), (shift, gain, lag)) in CHAINS.iter().zip(class).zip(&style) {
                    let osc = (m.frequency * speed * phase_t + m.phase + jitter + lag).sin() * amp * gain;
                    for &(j, w) in chain.iter() {
                        for c in 0..3 {
                            pose[j][c] += w * (m.offset[c] + shift[c] + m.amplitude[c] * osc);
                        }
                    }
                }
                for (j, p) in pose.iter().enumerate() {
                    let x = p[0] * scale;
                    let y = p[1] * scale;
                    let z = p[2] * scale;
                    let xr = cy * x + sy * z;
                    let zr = -sy * x + cy * z;
                    vals[[0, ti, j, 0]] = (xr + noise.sample(&mut rng)) as f32;
                    vals[[1, ti, j, 0]] = (y + noise.sample(&mut rng)) as f32;
                    vals[[2, ti, j, 0]] = (zr + noise.sample(&mut rng)) as f32;
                }
            }
            let seq = SkeletonSequence::new(vals, Some(label as u32))?.normalized(0);
            ds.samples.push(seq);
            ds.subjects.push((k % 5) as u32);
            ds.views.push(0);
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::io::encode_sample;

    /// Time- and person-averaged coordinates, `C*V` values.
    fn time_average(seq: &SkeletonSequence) -> Vec<f64> {
        let (c, t, v, _) = seq.values().dim();
        let mut out = vec![0.0; c * v];
        for ci in 0..c {
            for vi in 0..v {
                let s: f64 = (0..t).map(|ti| seq.values()[[ci, ti, vi, 0]] as f64).sum();
                out[ci * v + vi] = s / t as f64;
            }
        }
        out
    }

    #[test]
    fn cardinality_and_balance() {
        let ds = generate_synthetic(&SyntheticParams::new(10, 20, 3)).unwrap();
        assert_eq!(ds.len(), 200);
        for c in 0..10 {
            assert_eq!(ds.samples.iter().filter(|s| s.label() == Some(c)).count(), 20);
        }
        assert!(ds.samples.iter().all(|s| s.values().dim().0 == 3 && s.joints() == 25));
    }

    #[test]
    fn same_seed_same_bytes() {
        let p = SyntheticParams::new(3, 4, 42);
        let a = generate_synthetic(&p).unwrap();
        let b = generate_synthetic(&p).unwrap();
        let bytes = |d: &Dataset| d.samples.iter().flat_map(encode_sample).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_synthetic(&SyntheticParams::new(3, 4, 43)).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn rejects_single_class() {
        assert!(matches!(
            generate_synthetic(&SyntheticParams::new(1, 5, 0)),
            Err(ScdError::Config { .. })
        ));
    }

    #[test]
    fn two_classes_nearest_centroid_separable() {
        for seed in 0..3 {
            let ds = generate_synthetic(&SyntheticParams::new(2, 50, seed)).unwrap();
            let feats: Vec<Vec<f64>> = ds.samples.iter().map(time_average).collect();
            let labels: Vec<u32> = ds.samples.iter().map(|s| s.label().unwrap()).collect();
            let dim = feats[0].len();
            let mut centroids = vec![vec![0.0; dim]; 2];
            for (f, &l) in feats.iter().zip(&labels) {
                for d in 0..dim {
                    centroids[l as usize][d] += f[d] / 50.0;
                }
            }
            let correct = feats
                .iter()
                .zip(&labels)
                .filter(|(f, &l)| {
                    let dist = |c: &Vec<f64>| c.iter().zip(f.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let pred = if dist(&centroids[0]) <= dist(&centroids[1]) { 0 } else { 1 };
                    pred == l
                })
                .count();
            assert!(correct as f64 / 100.0 >= 0.95, "seed {seed}: {correct}/100");
        }
    }
}
