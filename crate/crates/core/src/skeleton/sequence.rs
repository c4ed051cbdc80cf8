use super::graph::SkeletonGraph;
use crate::error::{Result, ScdError};
use ndarray::{s, Array4, Axis};
use rand::Rng;
use std::str::FromStr;

/// Joint coordinates laid out `[C, T, V, M]`: channels, frames, joints,
/// persons.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    values: Array4<f32>,
    label: Option<u32>,
}

impl SkeletonSequence {
    pub fn new(values: Array4<f32>, label: Option<u32>) -> Result<Self> {
        let (c, t, v, m) = values.dim();
        if c != 2 && c != 3 {
            return Err(ScdError::Shape(format!("coordinate dim must be 2 or 3, got {c}")));
        }
        if t == 0 || v == 0 || m == 0 {
            return Err(ScdError::Shape(format!("empty sequence dims ({c}, {t}, {v}, {m})")));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(ScdError::Shape("sequence contains non-finite values".into()));
        }
        Ok(SkeletonSequence { values, label })
    }

    pub fn values(&self) -> &Array4<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f32> {
        self.values
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn joints(&self) -> usize {
        self.values.dim().2
    }

    pub fn persons(&self) -> usize {
        self.values.dim().3
    }

    /// Same label, new values of possibly different frame count.
    pub(crate) fn map_values(&self, values: Array4<f32>) -> Self {
        SkeletonSequence {
            values,
            label: self.label,
        }
    }

    /// Translates every present person so that the first frame's root joint
    /// of the first person sits at the origin. All-zero (absent) persons are
    /// left untouched.
    pub fn normalized(&self, root: usize) -> Self {
        let mut out = self.values.clone();
        let (c, _, _, m) = out.dim();
        let origin: Vec<f32> = (0..c).map(|ci| self.values[[ci, 0, root, 0]]).collect();
        for p in 0..m {
            let present = self
                .values
                .index_axis(Axis(3), p)
                .iter()
                .any(|&x| x != 0.0);
            if !present {
                continue;
            }
            for (ci, o) in origin.iter().enumerate() {
                out.slice_mut(s![ci, .., .., p]).mapv_inplace(|x| x - o);
            }
        }
        self.map_values(out)
    }

    /// Pads or truncates the person axis to `m`, zero-filling new persons.
    pub fn with_persons(&self, m: usize) -> Self {
        let (c, t, v, have) = self.values.dim();
        let mut out = Array4::<f32>::zeros((c, t, v, m));
        let keep = have.min(m);
        out.slice_mut(s![.., .., .., ..keep])
            .assign(&self.values.slice(s![.., .., .., ..keep]));
        self.map_values(out)
    }
}

/// Source frame indices for [`sample_frames`]. Sorted ascending; drawn
/// without replacement when the sequence is long enough, with replacement
/// otherwise.
pub fn frame_indices<R: Rng + ?Sized>(t_raw: usize, t_out: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = if t_raw >= t_out {
        rand::seq::index::sample(rng, t_raw, t_out).into_vec()
    } else {
        (0..t_out).map(|_| rng.random_range(0..t_raw)).collect()
    };
    idx.sort_unstable();
    idx
}

/// Resamples a sequence to exactly `t_out` frames.
pub fn sample_frames<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    t_out: usize,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    if t_out == 0 {
        return Err(ScdError::config("frames", "output frame count must be >= 1"));
    }
    let idx = frame_indices(seq.frames(), t_out, rng);
    Ok(seq.map_values(seq.values.select(Axis(1), &idx)))
}

/// Input representation derived from raw joint positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Joint,
    Motion,
    Bone,
}

impl FromStr for View {
    type Err = ScdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(View::Joint),
            "motion" => Ok(View::Motion),
            "bone" => Ok(View::Bone),
            other => Err(ScdError::config("view", format!("unknown view `{other}`"))),
        }
    }
}

/// Joint: identity. Motion: `x[t+1] - x[t]` with a zero last frame.
/// Bone: child minus parent per tree edge, zero at the root.
pub fn derive_view(seq: &SkeletonSequence, view: View, graph: &SkeletonGraph) -> Result<SkeletonSequence> {
    match view {
        View::Joint => Ok(seq.clone()),
        View::Motion => {
            let x = seq.values();
            let t = x.dim().1;
            let mut out = Array4::<f32>::zeros(x.raw_dim());
            if t > 1 {
                let diff = &x.slice(s![.., 1.., .., ..]) - &x.slice(s![.., ..t - 1, .., ..]);
                out.slice_mut(s![.., ..t - 1, .., ..]).assign(&diff);
            }
            Ok(seq.map_values(out))
        }
        View::Bone => {
            if graph.num_joints() != seq.joints() {
                return Err(ScdError::Shape(format!(
                    "graph has {} joints, sequence has {}",
                    graph.num_joints(),
                    seq.joints()
                )));
            }
            let x = seq.values();
            let mut out = Array4::<f32>::zeros(x.raw_dim());
            for (child, parent) in graph.parents().into_iter().enumerate() {
                if let Some(p) = parent {
                    let bone = &x.slice(s![.., .., child, ..]) - &x.slice(s![.., .., p, ..]);
                    out.slice_mut(s![.., .., child, ..]).assign(&bone);
                }
            }
            Ok(seq.map_values(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::graph::PartitionStrategy;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, t: usize, v: usize, m: usize) -> SkeletonSequence {
        let vals = Array4::from_shape_fn((c, t, v, m), |(a, b, d, e)| {
            (a * 1000 + b * 100 + d * 10 + e) as f32
        });
        SkeletonSequence::new(vals, Some(1)).unwrap()
    }

    #[test]
    fn rejects_invalid_dims_and_values() {
        assert!(SkeletonSequence::new(Array4::zeros((5, 2, 2, 1)), None).is_err());
        assert!(SkeletonSequence::new(Array4::zeros((3, 0, 2, 1)), None).is_err());
        let mut v = Array4::<f32>::zeros((3, 2, 2, 1));
        v[[0, 0, 0, 0]] = f32::NAN;
        assert!(SkeletonSequence::new(v, None).is_err());
    }

    #[test]
    fn exact_length_sampling_is_identity() {
        let seq = ramp(3, 64, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_frames(&seq, 64, &mut rng).unwrap(), seq);
    }

    #[test]
    fn long_sequences_sample_strictly_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = frame_indices(300, 64, &mut rng);
        assert_eq!(idx.len(), 64);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 300));
    }

    #[test]
    fn short_sequences_repeat_frames() {
        let seq = ramp(3, 10, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = sample_frames(&seq, 64, &mut rng).unwrap();
        assert_eq!(out.frames(), 64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let idx = frame_indices(10, 64, &mut rng);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert!(idx.windows(2).any(|w| w[0] == w[1]));
        for (t, &src) in idx.iter().enumerate() {
            assert_eq!(out.values()[[0, t, 1, 0]], seq.values()[[0, src, 1, 0]]);
        }
    }

    #[test]
    fn zero_frames_rejected() {
        let seq = ramp(3, 4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_frames(&seq, 0, &mut rng).is_err());
    }

    #[test]
    fn motion_of_constant_is_zero() {
        let seq = SkeletonSequence::new(Array4::from_elem((3, 7, 5, 1), 2.5), None).unwrap();
        let g = SkeletonGraph::from_edges(5, &[(0, 1)], PartitionStrategy::Uniform, 0).unwrap();
        let m = derive_view(&seq, View::Motion, &g).unwrap();
        assert!(m.values().iter().all(|&x| x == 0.0));
        assert_eq!(derive_view(&seq, View::Joint, &g).unwrap(), seq);
    }

    #[test]
    fn bone_of_two_joint_chain() {
        let mut vals = Array4::<f32>::zeros((3, 4, 2, 1));
        for t in 0..4 {
            for c in 0..3 {
                vals[[c, t, 0, 0]] = (t * 3 + c) as f32 * 0.1;
            }
            vals[[0, t, 1, 0]] = vals[[0, t, 0, 0]] + 1.0;
            vals[[1, t, 1, 0]] = vals[[1, t, 0, 0]];
            vals[[2, t, 1, 0]] = vals[[2, t, 0, 0]];
        }
        let seq = SkeletonSequence::new(vals, None).unwrap();
        let g = SkeletonGraph::from_edges(2, &[(0, 1)], PartitionStrategy::Uniform, 0).unwrap();
        let b = derive_view(&seq, View::Bone, &g).unwrap();
        for t in 0..4 {
            let child: Vec<f32> = (0..3).map(|c| b.values()[[c, t, 1, 0]]).collect();
            let root: Vec<f32> = (0..3).map(|c| b.values()[[c, t, 0, 0]]).collect();
            assert!((child[0] - 1.0).abs() < 1e-6 && child[1] == 0.0 && child[2] == 0.0);
            assert_eq!(root, vec![0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn unknown_view_is_config_error() {
        assert!(matches!("skeleton".parse::<View>(), Err(ScdError::Config { .. })));
        assert_eq!("bone".parse::<View>().unwrap(), View::Bone);
    }

    #[test]
    fn normalization_moves_first_root_to_origin() {
        let seq = ramp(3, 5, 4, 2).with_persons(3);
        let n = seq.normalized(2);
        for c in 0..3 {
            assert_eq!(n.values()[[c, 0, 2, 0]], 0.0);
        }
        assert!(n.values().slice(s![.., .., .., 2]).iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn sampling_preserves_non_time_dims(t_raw in 1usize..40, t_out in 1usize..40, seed in any::<u64>()) {
            let seq = ramp(2, t_raw, 3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = sample_frames(&seq, t_out, &mut rng).unwrap();
            prop_assert_eq!(out.values().dim(), (2, t_out, 3, 2));
        }

        #[test]
        fn motion_of_reversed_is_negated_shift(t in 3usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals = Array4::from_shape_fn((3, t, 2, 1), |_| rng.random_range(-1.0f32..1.0));
            let seq = SkeletonSequence::new(vals.clone(), None).unwrap();
            let mut rev = vals.clone();
            rev.invert_axis(Axis(1));
            let rseq = SkeletonSequence::new(rev, None).unwrap();
            let g = SkeletonGraph::from_edges(2, &[(0, 1)], PartitionStrategy::Uniform, 0).unwrap();
            let m = derive_view(&seq, View::Motion, &g).unwrap();
            let rm = derive_view(&rseq, View::Motion, &g).unwrap();
            // rm[t'] = x[T-2-t'] - x[T-1-t'] = -m[T-2-t']
            for tp in 0..t - 1 {
                for c in 0..3 {
                    for v in 0..2 {
                        let a = rm.values()[[c, tp, v, 0]];
                        let b = -m.values()[[c, t - 2 - tp, v, 0]];
                        prop_assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
