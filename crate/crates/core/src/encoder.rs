//! Dual-path decoupling encoder.
//!
//! A stack of graph-convolution blocks extracts spatiotemporal features
//! `Y: [N, T, V, C1]`. The spatial path reshapes them into `V` joint tokens of
//! width `T*C1`, the temporal path into `T` frame tokens of width `V*C1`. Each
//! token stream is embedded to `C2`, refined by self-attention layers and
//! max-pooled into one clue vector (`z_s`, `z_t`).
//!
//! Internally activations are channels-last: `[batch, frames, joints, channels]`.

use crate::autograd::{Real, Var};
use crate::error::{Result, ScdError};
use crate::nn::{init_batch_norm, init_layer_norm, init_linear, Forward, ParamStore};
use crate::skeleton::{SkeletonGraph, SkeletonSequence};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Coordinate channels of the input (2 or 3).
    pub in_channels: usize,
    /// Frames per sample after sampling.
    pub frames: usize,
    pub joints: usize,
    /// Output channels of each graph-convolution block; the last entry is
    /// the intermediate width `C1`.
    pub gcn_channels: Vec<usize>,
    /// Odd temporal kernel length of each block.
    pub temporal_kernel: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    /// Token width `C2` after embedding; also the clue vector width.
    pub model_dim: usize,
    /// Hidden width of the attention block's feed-forward network.
    pub ffn_dim: usize,
    /// Share one extractor between both paths instead of one per path.
    #[serde(default)]
    pub shared_extractor: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            frames: 64,
            joints: 25,
            gcn_channels: vec![64, 256, 64],
            temporal_kernel: 9,
            transformer_layers: 1,
            heads: 8,
            model_dim: 2048,
            ffn_dim: 2048,
            shared_extractor: false,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used by tests and the tiny profile.
    pub fn tiny() -> Self {
        EncoderConfig {
            in_channels: 3,
            frames: 16,
            joints: 25,
            gcn_channels: vec![8, 16, 8],
            temporal_kernel: 3,
            transformer_layers: 1,
            heads: 2,
            model_dim: 32,
            ffn_dim: 64,
            shared_extractor: false,
        }
    }

    /// `C1`.
    pub fn intermediate_dim(&self) -> usize {
        *self.gcn_channels.last().unwrap_or(&0)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(ScdError::config(format!("encoder.{f}"), r));
        if self.in_channels != 2 && self.in_channels != 3 {
            return bad("in_channels", "must be 2 or 3");
        }
        if self.frames == 0 || self.joints == 0 {
            return bad("frames", "frames and joints must be >= 1");
        }
        if self.gcn_channels.is_empty() || self.gcn_channels.contains(&0) {
            return bad("gcn_channels", "need at least one block, all widths >= 1");
        }
        if self.temporal_kernel % 2 == 0 {
            return bad("temporal_kernel", "must be odd");
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return bad("heads", "model_dim must be a positive multiple of heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim", "must be >= 1");
        }
        Ok(())
    }

    fn extractor_prefix(&self, path: Path) -> &'static str {
        if self.shared_extractor {
            "enc.ext"
        } else {
            match path {
                Path::Spatial => "enc.s.ext",
                Path::Temporal => "enc.t.ext",
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    Spatial,
    Temporal,
}

impl Path {
    fn prefix(self) -> &'static str {
        match self {
            Path::Spatial => "enc.s",
            Path::Temporal => "enc.t",
        }
    }
}

fn init_extractor<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    subsets: usize,
    rng: &mut R,
) {
    let mut cin = cfg.in_channels;
    for (l, &cout) in cfg.gcn_channels.iter().enumerate() {
        let p = format!("{prefix}.l{l}");
        init_linear(store, &format!("{p}.gcn"), subsets * cin, cout, rng);
        init_batch_norm(store, &format!("{p}.bn1"), cout);
        init_linear(store, &format!("{p}.tcn"), cfg.temporal_kernel * cout, cout, rng);
        init_batch_norm(store, &format!("{p}.bn2"), cout);
        if l > 0 && cin != cout {
            init_linear(store, &format!("{p}.res"), cin, cout, rng);
            init_batch_norm(store, &format!("{p}.resbn"), cout);
        }
        cin = cout;
    }
}

fn init_refiner<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.model_dim;
    for l in 0..cfg.transformer_layers {
        let p = format!("{prefix}.attn{l}");
        for proj in ["q", "k", "v", "wm"] {
            init_linear(store, &format!("{p}.{proj}"), d, d, rng);
        }
        init_layer_norm(store, &format!("{p}.ln"), d);
        init_linear(store, &format!("{p}.ffn1"), d, cfg.ffn_dim, rng);
        init_linear(store, &format!("{p}.ffn2"), cfg.ffn_dim, d, rng);
    }
}

/// Fresh encoder parameters for `graph`.
pub fn init_encoder<F: Real, R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    graph: &SkeletonGraph,
    rng: &mut R,
) -> Result<ParamStore<F>> {
    cfg.validate()?;
    if graph.num_joints() != cfg.joints {
        return Err(ScdError::Shape(format!(
            "graph has {} joints, encoder expects {}",
            graph.num_joints(),
            cfg.joints
        )));
    }
    let mut store = ParamStore::new();
    let k = graph.num_subsets();
    if cfg.shared_extractor {
        init_extractor(&mut store, "enc.ext", cfg, k, rng);
    } else {
        init_extractor(&mut store, "enc.s.ext", cfg, k, rng);
        init_extractor(&mut store, "enc.t.ext", cfg, k, rng);
    }
    let c1 = cfg.intermediate_dim();
    let d = cfg.model_dim;
    init_linear(&mut store, "enc.s.embed1", cfg.frames * c1, d, rng);
    init_linear(&mut store, "enc.s.embed2", d, d, rng);
    init_linear(&mut store, "enc.t.embed1", cfg.joints * c1, d, rng);
    init_linear(&mut store, "enc.t.embed2", d, d, rng);
    init_refiner(&mut store, "enc.s.refine", cfg, rng);
    init_refiner(&mut store, "enc.t.refine", cfg, rng);
    Ok(store)
}

/// Stacks samples into a `[N*M, T, V, C]` tensor (sample-major, then person).
pub fn batch_tensor<F: Real>(samples: &[&SkeletonSequence], cfg: &EncoderConfig) -> Result<(ArrayD<F>, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| ScdError::Shape("empty batch".into()))?;
    let m = first.persons();
    let (c, t, v) = (cfg.in_channels, cfg.frames, cfg.joints);
    let mut data = Vec::with_capacity(samples.len() * m * t * v * c);
    for s in samples {
        let (sc, st, sv, sm) = s.values().dim();
        if (sc, st, sv, sm) != (c, t, v, m) {
            return Err(ScdError::Shape(format!(
                "sample dims ({sc}, {st}, {sv}, {sm}) do not match encoder ({c}, {t}, {v}, {m})"
            )));
        }
        let x = s.values();
        for p in 0..m {
            for ti in 0..t {
                for vi in 0..v {
                    for ci in 0..c {
                        data.push(F::lit(x[[ci, ti, vi, p]] as f64));
                    }
                }
            }
        }
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&[samples.len() * m, t, v, c]), data).unwrap();
    Ok((arr, m))
}

/// Spatial graph convolution over `[B, T, V, Cin]`:
/// `y[b,t,i] = sum_k sum_j A_k[i,j] x[b,t,j] W_k + bias`, with `A_k` the
/// normalized subset matrices and `W` stacked as `[K*Cin, Cout]`.
pub fn graph_conv<F: Real>(fw: &mut Forward<'_, F>, x: Var, subsets: &[Array2<f64>], prefix: &str) -> Var {
    let s = fw.tape.shape(x).to_vec();
    let (b, t, v, c) = (s[0], s[1], s[2], s[3]);
    let k = subsets.len();
    let mut stack = Array2::<F>::zeros((k * v, v));
    for (ki, a) in subsets.iter().enumerate() {
        for i in 0..v {
            for j in 0..v {
                stack[[ki * v + i, j]] = F::lit(a[[i, j]]);
            }
        }
    }
    let a = fw.tape.constant(stack.into_dyn());
    let xp = fw.tape.permute(x, &[2, 0, 1, 3]);
    let xp = fw.tape.reshape(xp, &[v, b * t * c]);
    let agg = fw.tape.matmul(a, xp);
    let agg = fw.tape.reshape(agg, &[k, v, b, t, c]);
    let agg = fw.tape.permute(agg, &[2, 3, 1, 0, 4]);
    let agg = fw.tape.reshape(agg, &[b, t, v, k * c]);
    fw.linear(agg, prefix)
}

/// Temporal convolution along frames with zero padding, kernel stored as
/// `[K*C, Cout]`.
pub fn temporal_conv<F: Real>(fw: &mut Forward<'_, F>, x: Var, kernel: usize, prefix: &str) -> Var {
    let u = fw.tape.temporal_unfold(x, kernel);
    fw.linear(u, prefix)
}

/// Graph-convolution feature extractor: `[B, T, V, Cin] -> [B, T, V, C1]`.
pub fn gcn_extract<F: Real>(
    fw: &mut Forward<'_, F>,
    x: Var,
    cfg: &EncoderConfig,
    subsets: &[Array2<f64>],
    prefix: &str,
) -> Var {
    let mut h = x;
    let mut cin = cfg.in_channels;
    for (l, &cout) in cfg.gcn_channels.iter().enumerate() {
        let p = format!("{prefix}.l{l}");
        let input = h;
        let y = graph_conv(fw, input, subsets, &format!("{p}.gcn"));
        let y = fw.batch_norm(y, &format!("{p}.bn1"));
        let y = fw.tape.relu(y);
        let y = temporal_conv(fw, y, cfg.temporal_kernel, &format!("{p}.tcn"));
        let mut y = fw.batch_norm(y, &format!("{p}.bn2"));
        if l > 0 {
            let res = if cin == cout {
                input
            } else {
                let r = fw.linear(input, &format!("{p}.res"));
                fw.batch_norm(r, &format!("{p}.resbn"))
            };
            y = fw.tape.add(y, res);
        }
        h = fw.tape.relu(y);
        cin = cout;
    }
    h
}

/// Averages the person axis out of `[N*M, T, V, C]`.
fn fold_persons<F: Real>(fw: &mut Forward<'_, F>, y: Var, persons: usize) -> Var {
    if persons == 1 {
        return y;
    }
    let s = fw.tape.shape(y).to_vec();
    let r = fw.tape.reshape(y, &[s[0] / persons, persons, s[1], s[2], s[3]]);
    fw.tape.mean_axis(r, 1)
}

/// `[N, T, V, C1] -> [N, V, C2]`: joint tokens of width `T*C1`, then
/// `W2 relu(W1 y + B1) + B2`.
pub fn decouple_spatial<F: Real>(fw: &mut Forward<'_, F>, y: Var) -> Var {
    let s = fw.tape.shape(y).to_vec();
    let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
    let tokens = fw.tape.permute(y, &[0, 2, 1, 3]);
    let tokens = fw.tape.reshape(tokens, &[n, v, t * c]);
    embed(fw, tokens, "enc.s")
}

/// `[N, T, V, C1] -> [N, T, C2]`: frame tokens of width `V*C1`.
pub fn decouple_temporal<F: Real>(fw: &mut Forward<'_, F>, y: Var) -> Var {
    let s = fw.tape.shape(y).to_vec();
    let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
    let tokens = fw.tape.reshape(y, &[n, t, v * c]);
    embed(fw, tokens, "enc.t")
}

fn embed<F: Real>(fw: &mut Forward<'_, F>, tokens: Var, prefix: &str) -> Var {
    let h = fw.linear(tokens, &format!("{prefix}.embed1"));
    let h = fw.tape.relu(h);
    fw.linear(h, &format!("{prefix}.embed2"))
}

/// Multi-head self-attention with head merge and input residual on
/// `[N, L, D]`.
pub fn self_attention<F: Real>(fw: &mut Forward<'_, F>, x: Var, heads: usize, prefix: &str) -> Var {
    let s = fw.tape.shape(x).to_vec();
    let (n, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let q = fw.linear(x, &format!("{prefix}.q"));
    let k = fw.linear(x, &format!("{prefix}.k"));
    let v = fw.linear(x, &format!("{prefix}.v"));
    let split = |fw: &mut Forward<'_, F>, a: Var, axes: &[usize], tail: [usize; 2]| {
        let a = fw.tape.reshape(a, &[n, l, heads, dh]);
        let a = fw.tape.permute(a, axes);
        fw.tape.reshape(a, &[n * heads, tail[0], tail[1]])
    };
    let qh = split(fw, q, &[0, 2, 1, 3], [l, dh]);
    let kt = split(fw, k, &[0, 2, 3, 1], [dh, l]);
    let vh = split(fw, v, &[0, 2, 1, 3], [l, dh]);
    let scores = fw.tape.batch_matmul(qh, kt);
    let scores = fw.tape.scale(scores, F::one() / F::lit(dh as f64).sqrt());
    let attn = fw.tape.softmax(scores);
    let ctx = fw.tape.batch_matmul(attn, vh);
    let ctx = fw.tape.reshape(ctx, &[n, heads, l, dh]);
    let ctx = fw.tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = fw.tape.reshape(ctx, &[n, l, d]);
    let merged = fw.linear(ctx, &format!("{prefix}.wm"));
    fw.tape.add(merged, x)
}

/// Attention layers followed by token-wise max pooling: `[N, L, D] -> [N, D]`.
///
/// Each layer: `Z = WM[heads] + X`, then `X' = FFN(LN(Z)) + Z`.
pub fn refine<F: Real>(fw: &mut Forward<'_, F>, tokens: Var, cfg: &EncoderConfig, prefix: &str) -> Var {
    let mut x = tokens;
    for l in 0..cfg.transformer_layers {
        let p = format!("{prefix}.attn{l}");
        let z = self_attention(fw, x, cfg.heads, &p);
        let h = fw.layer_norm(z, &format!("{p}.ln"));
        let h = fw.linear(h, &format!("{p}.ffn1"));
        let h = fw.tape.relu(h);
        let h = fw.linear(h, &format!("{p}.ffn2"));
        x = fw.tape.add(h, z);
    }
    fw.tape.max_axis(x, 1)
}

/// Clue vectors from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Clues {
    /// `[N, C2]`
    pub z_s: Var,
    /// `[N, C2]`
    pub z_t: Var,
}

/// Runs both paths on a `[N*M, T, V, C]` input.
pub fn encode<F: Real>(
    fw: &mut Forward<'_, F>,
    x: Var,
    persons: usize,
    cfg: &EncoderConfig,
    subsets: &[Array2<f64>],
) -> Clues {
    let ys = gcn_extract(fw, x, cfg, subsets, cfg.extractor_prefix(Path::Spatial));
    let ys = fold_persons(fw, ys, persons);
    let yt = if cfg.shared_extractor {
        ys
    } else {
        let yt = gcn_extract(fw, x, cfg, subsets, cfg.extractor_prefix(Path::Temporal));
        fold_persons(fw, yt, persons)
    };
    let ts = decouple_spatial(fw, ys);
    let tt = decouple_temporal(fw, yt);
    let z_s = refine(fw, ts, cfg, &format!("{}.refine", Path::Spatial.prefix()));
    let z_t = refine(fw, tt, cfg, &format!("{}.refine", Path::Temporal.prefix()));
    Clues { z_s, z_t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamKind};
    use crate::skeleton::PartitionStrategy;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn ntu_samples(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<SkeletonSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = Array4::from_shape_fn((cfg.in_channels, cfg.frames, cfg.joints, 1), |_| {
                    rng.random_range(-1.0f32..1.0)
                });
                SkeletonSequence::new(v, None).unwrap()
            })
            .collect()
    }

    fn run_encode(
        cfg: &EncoderConfig,
        graph: &SkeletonGraph,
        store: &ParamStore<f64>,
        samples: &[SkeletonSequence],
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let refs: Vec<&SkeletonSequence> = samples.iter().collect();
        let (x, m) = batch_tensor::<f64>(&refs, cfg).unwrap();
        let mut fw = Forward::new(store, Mode::Train, false);
        let xv = fw.tape.constant(x);
        let c = encode(&mut fw, xv, m, cfg, &graph.subset_matrices());
        (fw.tape.value(c.z_s).clone(), fw.tape.value(c.z_t).clone())
    }

    #[test]
    fn default_config_stage_shapes() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.intermediate_dim(), 64);
        assert_eq!(cfg.frames * cfg.intermediate_dim(), 4096);
        assert_eq!(cfg.joints * cfg.intermediate_dim(), 1600);
        let g = SkeletonGraph::ntu();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = init_encoder::<f32, _>(&cfg, &g, &mut rng).unwrap();
        assert_eq!(store.value("enc.s.ext.l0.gcn.w").shape(), &[3 * 3, 64]);
        assert_eq!(store.value("enc.s.ext.l1.gcn.w").shape(), &[3 * 64, 256]);
        assert_eq!(store.value("enc.s.ext.l2.tcn.w").shape(), &[9 * 64, 64]);
        assert_eq!(store.value("enc.s.embed1.w").shape(), &[4096, 2048]);
        assert_eq!(store.value("enc.t.embed1.w").shape(), &[1600, 2048]);
        assert_eq!(store.value("enc.t.refine.attn0.q.w").shape(), &[2048, 2048]);
    }

    #[test]
    fn extractor_output_shape_default_config() {
        // One 3x64x25 sample through the default extractor -> 64x64x25.
        let cfg = EncoderConfig::default();
        let g = SkeletonGraph::ntu();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        init_extractor(&mut store, "x", &cfg, g.num_subsets(), &mut rng);
        let mut fw = Forward::new(&store, Mode::Eval, false);
        let xin = fw.tape.constant(ArrayD::from_elem(IxDyn(&[1, 64, 25, 3]), 0.1f32));
        let y = gcn_extract(&mut fw, xin, &cfg, &g.subset_matrices(), "x");
        assert_eq!(fw.tape.shape(y), &[1, 64, 25, 64]);
        let ts = fw.tape.permute(y, &[0, 2, 1, 3]);
        let ts = fw.tape.reshape(ts, &[1, 25, 4096]);
        assert_eq!(fw.tape.shape(ts), &[1, 25, 4096]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let cfg = EncoderConfig::tiny();
        let g = SkeletonGraph::ntu();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = init_encoder::<f64, _>(&cfg, &g, &mut rng).unwrap();
        for (_, p) in store.iter_mut() {
            if p.kind == ParamKind::Bias {
                p.value.fill(0.0);
            }
        }
        let mut fw = Forward::new(&store, Mode::Train, false);
        let x = fw.tape.constant(ArrayD::zeros(IxDyn(&[2, 16, 25, 3])));
        let y = gcn_extract(&mut fw, x, &cfg, &g.subset_matrices(), "enc.s.ext");
        assert_eq!(fw.tape.shape(y), &[2, 16, 25, 8]);
        assert!(fw.tape.value(y).iter().all(|&v| v == 0.0));
        let t = fw.tape.constant(ArrayD::zeros(IxDyn(&[2, 16, 200])));
        let e = embed(&mut fw, t, "enc.t");
        assert!(fw.tape.value(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_conv_is_neighbourhood_average_on_path_graph() {
        // 3-node path, one subset, weight = identity, zero bias: output at
        // each joint is the mean over itself and its neighbours.
        let g = SkeletonGraph::from_edges(3, &[(0, 1), (1, 2)], PartitionStrategy::Uniform, 0).unwrap();
        let mut store = ParamStore::<f64>::new();
        store.insert("gc.w", Array2::<f64>::eye(2).into_dyn(), ParamKind::Weight);
        store.insert("gc.b", ArrayD::zeros(IxDyn(&[2])), ParamKind::Bias);
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 2]), vec![1.0, 10.0, 4.0, 40.0, 7.0, 70.0]).unwrap();
        let mut fw = Forward::new(&store, Mode::Train, false);
        let xv = fw.tape.constant(x);
        let y = graph_conv(&mut fw, xv, &g.subset_matrices(), "gc");
        let out: Vec<f64> = fw.tape.value(y).iter().cloned().collect();
        let expect = [
            (1.0 + 4.0) / 2.0,
            (10.0 + 40.0) / 2.0,
            (1.0 + 4.0 + 7.0) / 3.0,
            (10.0 + 40.0 + 70.0) / 3.0,
            (4.0 + 7.0) / 2.0,
            (40.0 + 70.0) / 2.0,
        ];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // identity temporal kernel leaves it unchanged
        let mut tstore = ParamStore::<f64>::new();
        let mut w = ArrayD::zeros(IxDyn(&[3 * 2, 2]));
        w[[2, 0]] = 1.0;
        w[[3, 1]] = 1.0;
        tstore.insert("tc.w", w, ParamKind::Weight);
        tstore.insert("tc.b", ArrayD::zeros(IxDyn(&[2])), ParamKind::Bias);
        let mut fw2 = Forward::new(&tstore, Mode::Train, false);
        let yv = fw2.tape.constant(fw.tape.value(y).clone());
        let z = temporal_conv(&mut fw2, yv, 3, "tc");
        assert_eq!(fw2.tape.value(z), fw.tape.value(y));
    }

    #[test]
    fn spatial_decoupling_matches_dense_oracle() {
        // V=4, C1=2, T=3, C2=5
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_arr(&mut rng, &[1, 3, 4, 2]);
        let mut store = ParamStore::<f64>::new();
        init_linear(&mut store, "enc.s.embed1", 6, 5, &mut rng);
        init_linear(&mut store, "enc.s.embed2", 5, 5, &mut rng);
        init_linear(&mut store, "enc.t.embed1", 8, 5, &mut rng);
        init_linear(&mut store, "enc.t.embed2", 5, 5, &mut rng);
        let mut fw = Forward::new(&store, Mode::Train, false);
        let yv = fw.tape.constant(y.clone());
        let ys = decouple_spatial(&mut fw, yv);
        let yt = decouple_temporal(&mut fw, yv);
        assert_eq!(fw.tape.shape(ys), &[1, 4, 5]);
        assert_eq!(fw.tape.shape(yt), &[1, 3, 5]);

        let dense = |tok: &[f64], p: &str| -> Vec<f64> {
            let w1 = store.value(&format!("{p}.embed1.w"));
            let b1 = store.value(&format!("{p}.embed1.b"));
            let w2 = store.value(&format!("{p}.embed2.w"));
            let b2 = store.value(&format!("{p}.embed2.b"));
            let h: Vec<f64> = (0..5)
                .map(|o| (b1[[o]] + (0..tok.len()).map(|i| tok[i] * w1[[i, o]]).sum::<f64>()).max(0.0))
                .collect();
            (0..5).map(|o| b2[[o]] + (0..5).map(|i| h[i] * w2[[i, o]]).sum::<f64>()).collect()
        };
        for v in 0..4 {
            let tok: Vec<f64> = (0..3).flat_map(|t| (0..2).map(move |c| (t, c))).map(|(t, c)| y[[0, t, v, c]]).collect();
            let expect = dense(&tok, "enc.s");
            for o in 0..5 {
                assert!((fw.tape.value(ys)[[0, v, o]] - expect[o]).abs() < 1e-12);
            }
        }
        for t in 0..3 {
            let tok: Vec<f64> = (0..4).flat_map(|v| (0..2).map(move |c| (v, c))).map(|(v, c)| y[[0, t, v, c]]).collect();
            let expect = dense(&tok, "enc.t");
            for o in 0..5 {
                assert!((fw.tape.value(yt)[[0, t, o]] - expect[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_constant_tokens() {
        let mut store = ParamStore::<f64>::new();
        store.insert("enc.s.embed1.w", ArrayD::zeros(IxDyn(&[6, 3])), ParamKind::Weight);
        store.insert(
            "enc.s.embed1.b",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap(),
            ParamKind::Bias,
        );
        store.insert(
            "enc.s.embed2.w",
            ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            ParamKind::Weight,
        );
        store.insert(
            "enc.s.embed2.b",
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.1, 0.2]).unwrap(),
            ParamKind::Bias,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fw = Forward::new(&store, Mode::Train, false);
        let y = fw.tape.constant(rand_arr(&mut rng, &[2, 3, 4, 2]));
        let ys = decouple_spatial(&mut fw, y);
        // W2 relu(b1) + b2 = [1*1 + 5*0.5 + 0.1, 2*1 + 6*0.5 + 0.2]
        for row in fw.tape.value(ys).clone().into_shape_with_order((8, 2)).unwrap().rows() {
            assert!((row[0] - 3.6).abs() < 1e-12 && (row[1] - 5.2).abs() < 1e-12);
        }
    }

    /// Plain-loop multi-head attention block used as an oracle.
    fn attention_oracle(x: &ArrayD<f64>, store: &ParamStore<f64>, p: &str, heads: usize) -> Vec<Vec<f64>> {
        let (l, d) = (x.shape()[1], x.shape()[2]);
        let dh = d / heads;
        let lin = |name: &str, row: &[f64]| -> Vec<f64> {
            let w = store.value(&format!("{p}.{name}.w"));
            let b = store.value(&format!("{p}.{name}.b"));
            (0..w.shape()[1])
                .map(|o| b[[o]] + row.iter().enumerate().map(|(i, v)| v * w[[i, o]]).sum::<f64>())
                .collect()
        };
        let rows: Vec<Vec<f64>> = (0..l).map(|i| (0..d).map(|c| x[[0, i, c]]).collect()).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| lin("q", r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| lin("k", r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| lin("v", r)).collect();
        let mut out = Vec::new();
        for i in 0..l {
            let mut cat = vec![0.0; d];
            for h in 0..heads {
                let sl = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..l)
                    .map(|j| sl.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in sl.clone() {
                    cat[c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
            let merged = lin("wm", &cat);
            out.push(merged.iter().zip(&rows[i]).map(|(a, b)| a + b).collect());
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        for proj in ["q", "k", "v", "wm"] {
            init_linear(&mut store, &format!("a.{proj}"), 4, 4, &mut rng);
        }
        let x = rand_arr(&mut rng, &[1, 3, 4]);
        let mut fw = Forward::new(&store, Mode::Train, false);
        let xv = fw.tape.constant(x.clone());
        let y = self_attention(&mut fw, xv, 2, "a");
        let oracle = attention_oracle(&x, &store, "a", 2);
        for i in 0..3 {
            for c in 0..4 {
                assert!((fw.tape.value(y)[[0, i, c]] - oracle[i][c]).abs() < 1e-5);
            }
        }
    }

    fn refine_store(cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_refiner(&mut store, "r", cfg, &mut rng);
        store
    }

    #[test]
    fn single_token_refine_is_pooled_ffn_path() {
        let cfg = EncoderConfig { model_dim: 4, heads: 2, ffn_dim: 6, ..EncoderConfig::tiny() };
        let store = refine_store(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_arr(&mut rng, &[1, 1, 4]);
        let mut fw = Forward::new(&store, Mode::Train, false);
        let xv = fw.tape.constant(x.clone());
        let z = refine(&mut fw, xv, &cfg, "r");
        // Softmax over a single key is exactly 1, so attention returns v.
        let lin = |name: &str, row: &[f64]| -> Vec<f64> {
            let w = store.value(&format!("r.attn0.{name}.w"));
            let b = store.value(&format!("r.attn0.{name}.b"));
            (0..w.shape()[1])
                .map(|o| b[[o]] + row.iter().enumerate().map(|(i, v)| v * w[[i, o]]).sum::<f64>())
                .collect()
        };
        let row: Vec<f64> = x.iter().cloned().collect();
        let zhat: Vec<f64> = lin("wm", &lin("v", &row)).iter().zip(&row).map(|(a, b)| a + b).collect();
        let mean = zhat.iter().sum::<f64>() / 4.0;
        let var = zhat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let ln: Vec<f64> = zhat.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        let h: Vec<f64> = lin("ffn1", &ln).into_iter().map(|v| v.max(0.0)).collect();
        let out: Vec<f64> = lin("ffn2", &h).iter().zip(&zhat).map(|(a, b)| a + b).collect();
        for c in 0..4 {
            assert!((fw.tape.value(z)[[0, c]] - out[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn refine_is_token_permutation_invariant() {
        let cfg = EncoderConfig { model_dim: 8, heads: 2, ffn_dim: 8, transformer_layers: 2, ..EncoderConfig::tiny() };
        let store = refine_store(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_arr(&mut rng, &[1, 5, 8]);
        let perm = [3, 0, 4, 1, 2];
        let mut xp = x.clone();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                xp[[0, i, c]] = x[[0, p, c]];
            }
        }
        let run = |inp: ArrayD<f64>| {
            let mut fw = Forward::new(&store, Mode::Train, false);
            let v = fw.tape.constant(inp);
            let z = refine(&mut fw, v, &cfg, "r");
            fw.tape.value(z).clone()
        };
        let (a, b) = (run(x), run(xp));
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_shapes_determinism_and_finiteness() {
        let cfg = EncoderConfig::tiny();
        let g = SkeletonGraph::ntu();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let store = init_encoder::<f64, _>(&cfg, &g, &mut rng).unwrap();
        let mut samples = ntu_samples(&cfg, 3, 11);
        for s in samples.iter_mut() {
            *s = s.map_values(s.values().mapv(|v| v * 10.0));
        }
        let (zs, zt) = run_encode(&cfg, &g, &store, &samples);
        assert_eq!(zs.shape(), &[3, 32]);
        assert_eq!(zt.shape(), &[3, 32]);
        assert!(zs.iter().chain(zt.iter()).all(|v| v.is_finite()));
        let (zs2, zt2) = run_encode(&cfg, &g, &store, &samples);
        assert_eq!(zs, zs2);
        assert_eq!(zt, zt2);
    }

    #[test]
    fn two_person_input_is_averaged_after_extraction() {
        let cfg = EncoderConfig::tiny();
        let g = SkeletonGraph::ntu();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let store = init_encoder::<f64, _>(&cfg, &g, &mut rng).unwrap();
        let one = ntu_samples(&cfg, 2, 13);
        let two: Vec<SkeletonSequence> = one
            .iter()
            .map(|s| {
                let mut v = Array4::zeros((3, cfg.frames, 25, 2));
                v.slice_mut(ndarray::s![.., .., .., 0]).assign(&s.values().slice(ndarray::s![.., .., .., 0]));
                v.slice_mut(ndarray::s![.., .., .., 1]).assign(&s.values().slice(ndarray::s![.., .., .., 0]));
                SkeletonSequence::new(v, None).unwrap()
            })
            .collect();
        // Duplicated persons double the rows seen by batch norm but leave
        // batch statistics unchanged, so the averaged features match.
        let (a, _) = run_encode(&cfg, &g, &store, &one);
        let (b, _) = run_encode(&cfg, &g, &store, &two);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            in_channels: 3,
            frames: 8,
            joints: 5,
            gcn_channels: vec![4, 6],
            temporal_kernel: 3,
            transformer_layers: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 16,
            shared_extractor: false,
        };
        let g = SkeletonGraph::from_edges(
            5,
            &[(0, 1), (1, 2), (2, 3), (1, 4)],
            PartitionStrategy::Spatial { center: 1 },
            0,
        )
        .unwrap();
        let subsets = g.subset_matrices();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let store = init_encoder::<f64, _>(&cfg, &g, &mut rng).unwrap();
        let x = rand_arr(&mut rng, &[3, 8, 5, 3]);
        let rs = rand_arr(&mut rng, &[3, 16]);
        let rt = rand_arr(&mut rng, &[3, 16]);
        let loss = |st: &ParamStore<f64>, grad: bool| {
            let mut fw = Forward::new(st, Mode::Train, grad);
            let xv = fw.tape.constant(x.clone());
            let c = encode(&mut fw, xv, 1, &cfg, &subsets);
            let a = fw.tape.constant(rs.clone());
            let b = fw.tape.constant(rt.clone());
            let ps = fw.tape.mul(c.z_s, a);
            let pt = fw.tape.mul(c.z_t, b);
            let l = fw.tape.add(ps, pt);
            let l = fw.tape.sum(l);
            let value = fw.tape.scalar(l);
            let grads = if grad { Some(fw.named_grads(&fw.tape.backward(l))) } else { None };
            (value, grads)
        };
        let (_, grads) = loss(&store, true);
        let grads = grads.unwrap();
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(n, _)| n.clone())
            .collect();
        let h = 1e-4;
        let mut checked = 0;
        let mut pick = ChaCha8Rng::seed_from_u64(21);
        while checked < 20 {
            let name = &names[pick.random_range(0..names.len())];
            let len = store.value(name).len();
            let idx = pick.random_range(0..len);
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().value.as_slice_mut().unwrap()[idx] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            let an = grads.get(name).map(|g| g.as_slice().unwrap()[idx]).unwrap_or(0.0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-3, "{name}[{idx}]: analytic {an} vs numeric {fd}");
            checked += 1;
        }
    }

    #[test]
    fn rejects_mismatched_batch_dims() {
        let cfg = EncoderConfig::tiny();
        let s = SkeletonSequence::new(Array4::zeros((3, 10, 25, 1)), None).unwrap();
        assert!(batch_tensor::<f32>(&[&s], &cfg).is_err());
        let bad = EncoderConfig { heads: 3, ..EncoderConfig::tiny() };
        assert!(matches!(bad.validate(), Err(ScdError::Config { .. })));
    }
}
