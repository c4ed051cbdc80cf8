//! Augmentations for skeleton sequences: rotation, flip, shear, and the
//! structure-guided spatial and cube temporal masks, composed stochastically.

use crate::error::{Result, ScdError};
use crate::skeleton::{SkeletonGraph, SkeletonSequence};
use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default maximum absolute rotation angle per axis.
pub const MAX_ROTATION: f64 = PI / 6.0;
/// Default maximum absolute shear factor.
pub const MAX_SHEAR: f64 = 0.5;

fn default_max_angle() -> f64 {
    MAX_ROTATION
}
fn default_max_factor() -> f64 {
    MAX_SHEAR
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialMaskParams {
    /// Exponent of the adjacency power used to spread each seed.
    pub n: u32,
    pub num_seeds: usize,
    /// Number of joints zeroed.
    pub k: usize,
}

impl Default for SpatialMaskParams {
    fn default() -> Self {
        SpatialMaskParams { n: 2, num_seeds: 5, k: 8 }
    }
}

impl SpatialMaskParams {
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.n < 1 {
            return Err(ScdError::config("spatial_mask.n", "must be >= 1"));
        }
        if self.num_seeds < 1 {
            return Err(ScdError::config("spatial_mask.num_seeds", "must be >= 1"));
        }
        if self.k < 1 || self.k > joints {
            return Err(ScdError::config(
                "spatial_mask.k",
                format!("must be in [1, {joints}], got {}", self.k),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalMaskParams {
    /// Number of equal-length cubes the frames are split into.
    pub s: usize,
    /// Number of cubes zeroed.
    pub r: usize,
}

impl Default for TemporalMaskParams {
    fn default() -> Self {
        TemporalMaskParams { s: 16, r: 6 }
    }
}

impl TemporalMaskParams {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.s == 0 || frames % self.s != 0 {
            return Err(ScdError::config(
                "temporal_mask.s",
                format!("{} does not divide frame count {frames}", self.s),
            ));
        }
        if self.r > self.s {
            return Err(ScdError::config("temporal_mask.r", format!("{} exceeds s = {}", self.r, self.s)));
        }
        Ok(())
    }
}

/// Per-joint response `flag_j = sum over seeds i of D[i, j]` with `D = P^n`.
pub fn mask_flags(power: &Array2<i64>, seeds: &[usize]) -> Vec<i64> {
    let v = power.ncols();
    let mut flag = vec![0i64; v];
    for &i in seeds {
        for (j, f) in flag.iter_mut().enumerate() {
            *f += power[[i, j]];
        }
    }
    flag
}

/// The `k` joints with the largest flag; ties go to the higher joint index.
pub fn top_k_joints(flag: &[i64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..flag.len()).collect();
    order.sort_by_key(|&j| (flag[j], j));
    let mut picked = order[order.len() - k..].to_vec();
    picked.sort_unstable();
    picked
}

/// Draws seeds (with replacement) and returns the joints to mask.
pub fn select_masked_joints<R: Rng + ?Sized>(
    graph: &SkeletonGraph,
    params: &SpatialMaskParams,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let v = graph.num_joints();
    params.validate(v)?;
    let power = graph.power(params.n)?;
    let seeds: Vec<usize> = (0..params.num_seeds).map(|_| rng.random_range(0..v)).collect();
    Ok(top_k_joints(&mask_flags(&power, &seeds), params.k))
}

/// Zeroes the given joints across every channel, frame and person.
pub fn zero_joints(x: &SkeletonSequence, joints: &[usize]) -> SkeletonSequence {
    let mut out = x.values().clone();
    for &j in joints {
        out.slice_mut(s![.., .., j, ..]).fill(0.0);
    }
    x.map_values(out)
}

pub fn spatial_mask<R: Rng + ?Sized>(
    x: &SkeletonSequence,
    graph: &SkeletonGraph,
    params: &SpatialMaskParams,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    if graph.num_joints() != x.joints() {
        return Err(ScdError::Shape(format!(
            "graph has {} joints, sequence has {}",
            graph.num_joints(),
            x.joints()
        )));
    }
    let joints = select_masked_joints(graph, params, rng)?;
    Ok(zero_joints(x, &joints))
}

/// Picks `r` distinct cube indices out of `s`.
pub fn select_masked_cubes<R: Rng + ?Sized>(params: &TemporalMaskParams, rng: &mut R) -> Vec<usize> {
    let mut cubes = rand::seq::index::sample(rng, params.s, params.r).into_vec();
    cubes.sort_unstable();
    cubes
}

/// Zeroes every frame inside the given cubes.
pub fn zero_cubes(x: &SkeletonSequence, s: usize, cubes: &[usize]) -> SkeletonSequence {
    let len = x.frames() / s;
    let mut out = x.values().clone();
    for &c in cubes {
        out.slice_mut(s![.., c * len..(c + 1) * len, .., ..]).fill(0.0);
    }
    x.map_values(out)
}

pub fn temporal_mask<R: Rng + ?Sized>(
    x: &SkeletonSequence,
    params: &TemporalMaskParams,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    params.validate(x.frames())?;
    let cubes = select_masked_cubes(params, rng);
    Ok(zero_cubes(x, params.s, &cubes))
}

/// `R = Rz(c) * Ry(b) * Rx(a)`.
pub fn rotation_matrix(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Applies `x' = M x` to every joint vector. Only the leading `C x C` block
/// of `m` is used.
pub fn apply_linear(x: &SkeletonSequence, m: &[[f64; 3]; 3]) -> SkeletonSequence {
    let c = x.channels();
    let src = x.values();
    let mut out = Array4::<f32>::zeros(src.raw_dim());
    for i in 0..c {
        let mut dst = out.index_axis_mut(Axis(0), i);
        for k in 0..c {
            let w = m[i][k] as f32;
            if w != 0.0 {
                dst.scaled_add(w, &src.index_axis(Axis(0), k));
            }
        }
    }
    x.map_values(out)
}

/// One random rotation: three axis angles for 3D, a single in-plane angle
/// for 2D.
pub fn random_rotation<R: Rng + ?Sized>(channels: usize, max_angle: f64, rng: &mut R) -> [[f64; 3]; 3] {
    if channels == 2 {
        let c = rng.random_range(-max_angle..=max_angle);
        rotation_matrix(0.0, 0.0, c)
    } else {
        let a = rng.random_range(-max_angle..=max_angle);
        let b = rng.random_range(-max_angle..=max_angle);
        let c = rng.random_range(-max_angle..=max_angle);
        rotation_matrix(a, b, c)
    }
}

/// Unit diagonal with off-diagonal factors in `[-max_factor, max_factor]`.
pub fn random_shear<R: Rng + ?Sized>(channels: usize, max_factor: f64, rng: &mut R) -> [[f64; 3]; 3] {
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (i, row) in m.iter_mut().enumerate().take(channels) {
        for (j, v) in row.iter_mut().enumerate().take(channels) {
            if i != j {
                *v = rng.random_range(-max_factor..=max_factor);
            }
        }
    }
    m
}

pub fn rotate<R: Rng + ?Sized>(x: &SkeletonSequence, max_angle: f64, rng: &mut R) -> SkeletonSequence {
    let m = random_rotation(x.channels(), max_angle, rng);
    apply_linear(x, &m)
}

pub fn shear<R: Rng + ?Sized>(x: &SkeletonSequence, max_factor: f64, rng: &mut R) -> SkeletonSequence {
    let m = random_shear(x.channels(), max_factor, rng);
    apply_linear(x, &m)
}

/// Mirrors the body: swaps left/right joints and negates the x coordinate.
/// Deterministic; the RNG is unused.
pub fn flip(x: &SkeletonSequence, graph: &SkeletonGraph) -> SkeletonSequence {
    let mut out = x.values().clone();
    for &(a, b) in graph.flip_pairs() {
        let va = x.values().slice(s![.., .., a, ..]).to_owned();
        let vb = x.values().slice(s![.., .., b, ..]).to_owned();
        out.slice_mut(s![.., .., a, ..]).assign(&vb);
        out.slice_mut(s![.., .., b, ..]).assign(&va);
    }
    out.index_axis_mut(Axis(0), 0).mapv_inplace(|v| -v);
    x.map_values(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Rotate {
        #[serde(default = "default_max_angle")]
        max_angle: f64,
    },
    Flip,
    Shear {
        #[serde(default = "default_max_factor")]
        max_factor: f64,
    },
    SpatialMask(SpatialMaskParams),
    TemporalMask(TemporalMaskParams),
}

impl Transform {
    pub fn is_mask(&self) -> bool {
        matches!(self, Transform::SpatialMask(_) | Transform::TemporalMask(_))
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        x: &SkeletonSequence,
        graph: &SkeletonGraph,
        rng: &mut R,
    ) -> Result<SkeletonSequence> {
        match self {
            Transform::Rotate { max_angle } => Ok(rotate(x, *max_angle, rng)),
            Transform::Flip => Ok(flip(x, graph)),
            Transform::Shear { max_factor } => Ok(shear(x, *max_factor, rng)),
            Transform::SpatialMask(p) => spatial_mask(x, graph, p, rng),
            Transform::TemporalMask(p) => temporal_mask(x, p, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentStep {
    #[serde(flatten)]
    pub transform: Transform,
    pub p: f64,
}

/// Ordered transforms, each firing independently with probability `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentPipeline {
    pub steps: Vec<AugmentStep>,
}

impl Default for AugmentPipeline {
    /// Rotate, flip, shear, spatial mask, temporal mask; each at `p = 0.5`.
    fn default() -> Self {
        let step = |transform| AugmentStep { transform, p: 0.5 };
        AugmentPipeline {
            steps: vec![
                step(Transform::Rotate { max_angle: MAX_ROTATION }),
                step(Transform::Flip),
                step(Transform::Shear { max_factor: MAX_SHEAR }),
                step(Transform::SpatialMask(SpatialMaskParams::default())),
                step(Transform::TemporalMask(TemporalMaskParams::default())),
            ],
        }
    }
}

impl AugmentPipeline {
    pub fn identity() -> Self {
        AugmentPipeline { steps: Vec::new() }
    }

    /// Replaces the rotation and shear ranges.
    pub fn with_geometry(&self, max_angle: f64, max_factor: f64) -> Self {
        let steps = self
            .steps
            .iter()
            .map(|s| {
                let transform = match s.transform {
                    Transform::Rotate { .. } => Transform::Rotate { max_angle },
                    Transform::Shear { .. } => Transform::Shear { max_factor },
                    t => t,
                };
                AugmentStep { transform, p: s.p }
            })
            .collect();
        AugmentPipeline { steps }
    }

    /// Drops the masking steps, keeping the conventional transforms.
    pub fn without_masks(&self) -> Self {
        AugmentPipeline {
            steps: self.steps.iter().filter(|s| !s.transform.is_mask()).copied().collect(),
        }
    }

    pub fn validate(&self, joints: usize, frames: usize) -> Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            if !(0.0..=1.0).contains(&step.p) {
                return Err(ScdError::config(format!("augment[{i}].p"), "must lie in [0, 1]"));
            }
            match &step.transform {
                Transform::SpatialMask(p) => p.validate(joints)?,
                Transform::TemporalMask(p) => p.validate(frames)?,
                Transform::Rotate { max_angle } if !(0.0..=PI).contains(max_angle) => {
                    return Err(ScdError::config(format!("augment[{i}].max_angle"), "must lie in [0, pi]"));
                }
                Transform::Shear { max_factor } if !(*max_factor >= 0.0 && max_factor.is_finite()) => {
                    return Err(ScdError::config(format!("augment[{i}].max_factor"), "must be finite and >= 0"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Applies the pipeline; also returns which steps fired. A coin is only
    /// drawn for `0 < p < 1`.
    pub fn compose_traced<R: Rng + ?Sized>(
        &self,
        x: &SkeletonSequence,
        graph: &SkeletonGraph,
        rng: &mut R,
    ) -> Result<(SkeletonSequence, Vec<bool>)> {
        let mut cur = x.clone();
        let mut fired = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let fire = if step.p >= 1.0 {
                true
            } else if step.p <= 0.0 {
                false
            } else {
                rng.random::<f64>() < step.p
            };
            if fire {
                cur = step.transform.apply(&cur, graph, rng)?;
            }
            fired.push(fire);
        }
        Ok((cur, fired))
    }

    pub fn compose<R: Rng + ?Sized>(
        &self,
        x: &SkeletonSequence,
        graph: &SkeletonGraph,
        rng: &mut R,
    ) -> Result<SkeletonSequence> {
        self.compose_traced(x, graph, rng).map(|(s, _)| s)
    }
}
