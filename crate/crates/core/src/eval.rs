//! Downstream protocols on a pretrained query encoder: linear probe, 1-NN
//! retrieval, fine-tuning, and embedding export.

use crate::config::OptimizerConfig;
use crate::encoder::Clues;
use crate::error::{Result, ScdError};
use crate::nn::{init_linear, update_running_stats, Forward, Mode, ParamStore};
use crate::skeleton::Dataset;
use crate::train::{derive_rng, sgd_step, stream, Model};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

/// Samples per encoder forward during extraction.
const EXTRACT_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Spatial,
    Temporal,
    /// `[z_t, z_s]`
    Concat,
}

impl FromStr for Representation {
    type Err = ScdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Representation::Spatial),
            "temporal" => Ok(Representation::Temporal),
            "concat" => Ok(Representation::Concat),
            other => Err(ScdError::config("representation", format!("unknown representation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `[N, D]`
    pub vectors: Array2<f32>,
    pub labels: Vec<u32>,
    pub split: String,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| *m as usize + 1)
    }
}

fn require_labels(data: &Dataset) -> Result<Vec<u32>> {
    data.samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.label().ok_or_else(|| ScdError::config("dataset", format!("sample {i} has no label"))))
        .collect()
}

fn pick(fw: &mut Forward<'_, f32>, c: Clues, rep: Representation) -> crate::autograd::Var {
    match rep {
        Representation::Spatial => c.z_s,
        Representation::Temporal => c.z_t,
        Representation::Concat => fw.tape.concat_last(c.z_t, c.z_s),
    }
}

/// Frozen, eval-mode embeddings. Frame sampling for sample `i` uses a stream
/// derived from the seed and `i`, so results do not depend on batching.
pub fn extract_embeddings(
    model: &Model,
    params: &ParamStore<f32>,
    data: &Dataset,
    rep: Representation,
    split: &str,
) -> Result<EmbeddingSet> {
    if data.is_empty() {
        return Err(ScdError::config("dataset", "dataset is empty"));
    }
    let labels = require_labels(data)?;
    let enc = &model.cfg.encoder;
    if data.samples[0].joints() != enc.joints || data.samples[0].channels() != enc.in_channels {
        return Err(ScdError::Shape(format!(
            "dataset has C={}, V={}; checkpoint expects C={}, V={}",
            data.samples[0].channels(),
            data.samples[0].joints(),
            enc.in_channels,
            enc.joints
        )));
    }
    let mut rows: Vec<f32> = Vec::new();
    let mut dim = 0;
    for (chunk_i, chunk) in data.samples.chunks(EXTRACT_BATCH).enumerate() {
        let mut seqs = Vec::with_capacity(chunk.len());
        for (j, s) in chunk.iter().enumerate() {
            let idx = (chunk_i * EXTRACT_BATCH + j) as u64;
            let mut rng = derive_rng(model.cfg.seed, &[stream::EVAL, idx]);
            seqs.push(model.prepare(s, None, &mut rng)?);
        }
        let mut fw = Forward::new(params, Mode::Eval, false);
        let c = model.clues(&mut fw, &seqs)?;
        let z = pick(&mut fw, c, rep);
        let v = fw.tape.value(z);
        dim = v.shape()[1];
        rows.extend(v.iter().copied());
    }
    let vectors = Array2::from_shape_vec((labels.len(), dim), rows).unwrap();
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(ScdError::Shape("non-finite embedding".into()));
    }
    Ok(EmbeddingSet {
        vectors,
        labels,
        split: split.to_string(),
    })
}

/// Stratified subset: `round(n_c * fraction)` per class, at least one.
pub fn stratified_subset(labels: &[u32], fraction: f64, seed: u64, tag: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ScdError::config("label_fraction", format!("{fraction} not in (0, 1]")));
    }
    let classes = labels.iter().max().map_or(0, |m| *m as usize + 1);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c as u32).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut derive_rng(seed, &[tag, c as u64]));
        let k = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Stratified train/test split of a labelled dataset.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = require_labels(data)?;
    let test = stratified_subset(&labels, test_fraction, seed, stream::SPLIT)?;
    let mut is_test = vec![false; labels.len()];
    test.iter().for_each(|&i| is_test[i] = true);
    let train = (0..labels.len()).filter(|&i| !is_test[i]).collect();
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: Option<f64>,
}

/// Top-1 and top-5 accuracy from `[N, K]` scores.
pub fn topk_accuracy(scores: &Array2<f32>, labels: &[u32]) -> Accuracy {
    let mut hit1 = 0;
    let mut hit5 = 0;
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let target = row[y as usize];
        // ties rank in index order
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < y as usize))
            .count();
        hit1 += (rank == 0) as usize;
        hit5 += (rank < 5) as usize;
    }
    let n = labels.len().max(1) as f64;
    Accuracy {
        top1: hit1 as f64 / n,
        top5: Some(hit5 as f64 / n),
    }
}

/// Trains one affine layer with softmax cross-entropy on frozen embeddings.
/// Features are standardized with training-set statistics first.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, opt: &OptimizerConfig, seed: u64) -> Result<Accuracy> {
    opt.validate("probe")?;
    if train.is_empty() || test.is_empty() {
        return Err(ScdError::config("probe", "train and test sets must be nonempty"));
    }
    if train.dim() != test.dim() {
        return Err(ScdError::Shape(format!("embedding dims {} vs {}", train.dim(), test.dim())));
    }
    let k = train.num_classes();
    if test.num_classes() > k {
        return Err(ScdError::config(
            "probe",
            format!("test set has {} classes, training set {k}", test.num_classes()),
        ));
    }
    let mean = train.vectors.mean_axis(Axis(0)).unwrap();
    let std = train.vectors.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
    let norm = |x: &Array2<f32>| (x - &mean) / &std;
    let (xtr, xte) = (norm(&train.vectors), norm(&test.vectors));

    let mut params = ParamStore::<f32>::new();
    init_linear(&mut params, "probe", train.dim(), k, &mut derive_rng(seed, &[stream::PROBE, 0]));
    let mut velocity = ParamStore::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opt.epochs {
        order.shuffle(&mut derive_rng(seed, &[stream::PROBE, epoch as u64]));
        let lr = opt.lr_at(epoch);
        for batch in order.chunks(opt.batch_size) {
            let x = xtr.select(Axis(0), batch).into_dyn();
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i] as usize).collect();
            let mut fw = Forward::new(&params, Mode::Train, true);
            let xv = fw.tape.constant(x);
            let logits = fw.linear(xv, "probe");
            let loss = fw.tape.cross_entropy(logits, &y);
            let grads = fw.named_grads(&fw.tape.backward(loss));
            drop(fw);
            sgd_step(&mut params, &mut velocity, &grads, lr, opt);
        }
    }
    let mut fw = Forward::new(&params, Mode::Eval, false);
    let xv = fw.tape.constant(xte.into_dyn());
    let logits = fw.linear(xv, "probe");
    let scores: Array2<f32> = fw.tape.value(logits).clone().into_dimensionality().unwrap();
    Ok(topk_accuracy(&scores, &test.labels))
}

fn l2_rows(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r.mapv_inplace(|v| v / n);
    }
    out
}

/// Index of the most cosine-similar training row for each test row; ties go
/// to the lower index. With `exclude_self`, test row `i` skips train row `i`.
pub fn nearest_neighbours(train: &EmbeddingSet, test: &EmbeddingSet, exclude_self: bool) -> Vec<usize> {
    let (a, b) = (l2_rows(&test.vectors), l2_rows(&train.vectors));
    let sims = a.dot(&b.t());
    sims.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut best = (f32::NEG_INFINITY, usize::MAX);
            for (j, &s) in row.iter().enumerate() {
                if exclude_self && i == j {
                    continue;
                }
                if s > best.0 {
                    best = (s, j);
                }
            }
            best.1
        })
        .collect()
}

/// 1-NN retrieval accuracy under cosine similarity.
pub fn knn_retrieval(train: &EmbeddingSet, test: &EmbeddingSet, exclude_self: bool) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(ScdError::config("retrieval", "train and test sets must be nonempty"));
    }
    if train.dim() != test.dim() {
        return Err(ScdError::Shape(format!("embedding dims {} vs {}", train.dim(), test.dim())));
    }
    let nn = nearest_neighbours(train, test, exclude_self);
    let hits = nn
        .iter()
        .zip(&test.labels)
        .filter(|&(&j, &y)| j != usize::MAX && train.labels[j] == y)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Fine-tunes every encoder parameter plus a classifier on `[z_t, z_s]`.
/// `init` is a pretrained query encoder; `None` trains from scratch.
pub fn finetune(
    model: &Model,
    init: Option<&ParamStore<f32>>,
    train: &Dataset,
    test: &Dataset,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<Accuracy> {
    opt.validate("finetune")?;
    let ytr = require_labels(train)?;
    let yte = require_labels(test)?;
    let k = train.num_classes().max(test.num_classes());
    let mut params = match init {
        Some(p) => p.filtered(&["enc."]),
        None => {
            let mut m = model.clone();
            m.cfg.seed = seed;
            m.init_params()?.filtered(&["enc."])
        }
    };
    let dim = 2 * model.cfg.encoder.model_dim;
    init_linear(&mut params, "cls", dim, k, &mut derive_rng(seed, &[stream::FINETUNE, 0]));
    let mut velocity = ParamStore::new();
    let aug = model.cfg.augment.without_masks();
    for epoch in 1..=opt.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(seed, &[stream::FINETUNE, 1, epoch as u64]));
        let lr = opt.lr_at(epoch);
        for (step, batch) in order.chunks(opt.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let mut rng = derive_rng(seed, &[stream::FINETUNE, 2, epoch as u64, step as u64]);
            let seqs = batch
                .iter()
                .map(|&i| model.prepare(&train.samples[i], Some(&aug), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let y: Vec<usize> = batch.iter().map(|&i| ytr[i] as usize).collect();
            let mut fw = Forward::new(&params, Mode::Train, true);
            let c = model.clues(&mut fw, &seqs)?;
            let z = pick(&mut fw, c, Representation::Concat);
            let logits = fw.linear(z, "cls");
            let loss = fw.tape.cross_entropy(logits, &y);
            if !fw.tape.scalar(loss).is_finite() {
                return Err(ScdError::NonFiniteLoss {
                    epoch,
                    step,
                    batch: batch.to_vec(),
                });
            }
            let grads = fw.named_grads(&fw.tape.backward(loss));
            let stats = fw.batch_stats().to_vec();
            drop(fw);
            sgd_step(&mut params, &mut velocity, &grads, lr, opt);
            update_running_stats(&mut params, &stats);
        }
    }
    let mut scores = Vec::new();
    for (chunk_i, chunk) in test.samples.chunks(EXTRACT_BATCH).enumerate() {
        let seqs = chunk
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let idx = (chunk_i * EXTRACT_BATCH + j) as u64;
                model.prepare(s, None, &mut derive_rng(model.cfg.seed, &[stream::EVAL, idx]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut fw = Forward::new(&params, Mode::Eval, false);
        let c = model.clues(&mut fw, &seqs)?;
        let z = pick(&mut fw, c, Representation::Concat);
        let logits = fw.linear(z, "cls");
        scores.extend(fw.tape.value(logits).iter().copied());
    }
    let scores = Array2::from_shape_vec((yte.len(), k), scores).unwrap();
    Ok(topk_accuracy(&scores, &yte))
}

/// Test-time occlusion: per sample, zeroes `ceil(joint_fraction * V)` random
/// joints over the whole clip and one random block of
/// `ceil(frame_fraction * T)` consecutive frames.
pub fn occlude(data: &Dataset, joint_fraction: f64, frame_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&joint_fraction) || !(0.0..=1.0).contains(&frame_fraction) {
        return Err(ScdError::config("occlusion", "fractions must lie in [0, 1]"));
    }
    let mut out = data.clone();
    for (i, seq) in out.samples.iter_mut().enumerate() {
        let mut rng = derive_rng(seed, &[stream::OCCLUDE, i as u64]);
        let (_, t, v, _) = seq.values().dim();
        let mut x = seq.values().clone();
        let nj = (joint_fraction * v as f64).ceil() as usize;
        for j in rand::seq::index::sample(&mut rng, v, nj.min(v)) {
            x.slice_mut(s![.., .., j, ..]).fill(0.0);
        }
        let nt = ((frame_fraction * t as f64).ceil() as usize).min(t);
        if nt > 0 {
            let start = rng.random_range(0..=t - nt);
            x.slice_mut(s![.., start..start + nt, .., ..]).fill(0.0);
        }
        *seq = seq.map_values(x);
    }
    Ok(out)
}

/// `label,dim0,...,dim{D-1}` with shortest round-trip float formatting.
pub fn embeddings_csv(set: &EmbeddingSet) -> String {
    let mut s = String::from("label");
    for d in 0..set.dim() {
        write!(s, ",dim{d}").unwrap();
    }
    s.push('\n');
    for (row, y) in set.vectors.rows().into_iter().zip(&set.labels) {
        write!(s, "{y}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn export_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    fs::write(path, embeddings_csv(set)).map_err(|e| ScdError::io(path, e))
}

pub fn parse_embeddings_csv(text: &str, path: &Path) -> Result<EmbeddingSet> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ScdError::format(path, "empty file"))?;
    let dim = header.split(',').count() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut f = line.split(',');
        let bad = || ScdError::format(path, format!("malformed row {}", i + 1));
        labels.push(f.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?);
        let row: Vec<f32> = f.map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if row.len() != dim {
            return Err(bad());
        }
        data.extend(row);
    }
    Ok(EmbeddingSet {
        vectors: Array2::from_shape_vec((labels.len(), dim), data).unwrap(),
        labels,
        split: String::new(),
    })
}

/// Results JSON written by the evaluation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub dataset: String,
    pub protocol: String,
    pub top1: f64,
    pub top5: Option<f64>,
    pub config_hash: String,
}

/// Wraps precomputed vectors, e.g. features from another tool.
pub fn embedding_set(vectors: Array2<f32>, labels: Vec<u32>) -> EmbeddingSet {
    EmbeddingSet {
        vectors,
        labels,
        split: String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probe_opt() -> OptimizerConfig {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![],
            lr_decay: 0.1,
            epochs: 30,
            batch_size: 32,
        }
    }

    fn clustered(rng: &mut ChaCha8Rng, per: usize, classes: usize, d: usize, noise: f32) -> EmbeddingSet {
        let mut v = Vec::new();
        let mut y = Vec::new();
        for c in 0..classes {
            for _ in 0..per {
                for j in 0..d {
                    let base = if j == c { 5.0 } else { 0.0 };
                    v.push(base + rng.random_range(-noise..noise));
                }
                y.push(c as u32);
            }
        }
        embedding_set(Array2::from_shape_vec((per * classes, d), v).unwrap(), y)
    }

    #[test]
    fn probe_on_separable_embeddings_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = clustered(&mut rng, 20, 4, 6, 0.5);
        let te = clustered(&mut rng, 10, 4, 6, 0.5);
        let acc = linear_probe(&tr, &te, &probe_opt(), 1).unwrap();
        assert_eq!(acc.top1, 1.0);
        assert_eq!(acc.top5, Some(1.0));
    }

    #[test]
    fn probe_on_shuffled_labels_is_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut tr = clustered(&mut rng, 40, 10, 12, 1.0);
            let mut te = clustered(&mut rng, 20, 10, 12, 1.0);
            tr.labels.shuffle(&mut rng);
            te.labels.shuffle(&mut rng);
            accs.push(linear_probe(&tr, &te, &probe_opt(), seed).unwrap().top1);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() <= 0.03, "mean {mean}");
    }

    #[test]
    fn probe_rejects_extra_test_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = clustered(&mut rng, 5, 2, 4, 0.1);
        let te = clustered(&mut rng, 5, 3, 4, 0.1);
        assert!(matches!(linear_probe(&tr, &te, &probe_opt(), 0), Err(ScdError::Config { .. })));
    }

    fn loo_oracle(set: &EmbeddingSet) -> f64 {
        let n = set.len();
        let mut hits = 0;
        for i in 0..n {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (a, b) = (set.vectors.row(i), set.vectors.row(j));
                let cos = a.dot(&b) as f64 / ((a.dot(&a) as f64).sqrt() * (b.dot(&b) as f64).sqrt());
                if cos > best.0 {
                    best = (cos, j);
                }
            }
            hits += (set.labels[best.1] == set.labels[i]) as usize;
        }
        hits as f64 / n as f64
    }

    proptest! {
        #[test]
        fn retrieval_matches_leave_one_out_oracle(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = clustered(&mut rng, 6, 3, 5, 4.0);
            let acc = knn_retrieval(&set, &set, true).unwrap();
            prop_assert!((acc - loo_oracle(&set)).abs() < 1e-12);
        }

        #[test]
        fn stratified_counts_are_proportional(
            counts in proptest::collection::vec(1usize..40, 2..6),
            frac in 0.01f64..=1.0,
        ) {
            let labels: Vec<u32> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c as u32, n)).collect();
            let idx = stratified_subset(&labels, frac, 3, 9).unwrap();
            for (c, &n) in counts.iter().enumerate() {
                let got = idx.iter().filter(|&&i| labels[i] == c as u32).count() as f64;
                prop_assert!((got - n as f64 * frac).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn retrieval_trivial_cases() {
        let one = embedding_set(Array2::eye(4), vec![0, 1, 2, 3]);
        assert_eq!(knn_retrieval(&one, &one, false).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = embedding_set(Array2::eye(4).mapv(|v: f32| v + rng.random_range(-0.05..0.05)), vec![0, 1, 2, 3]);
        assert_eq!(knn_retrieval(&one, &noisy, false).unwrap(), 1.0);
    }

    #[test]
    fn fraction_bounds() {
        assert!(stratified_subset(&[0, 1], 0.0, 0, 0).is_err());
        assert!(stratified_subset(&[0, 1], 1.5, 0, 0).is_err());
        assert_eq!(stratified_subset(&[0, 1, 1], 1.0, 0, 0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = clustered(&mut rng, 3, 2, 5, 1.0);
        let text = embeddings_csv(&set);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), set.len() + 1);
        assert_eq!(lines[0].split(',').count(), set.dim() + 1);
        let back = parse_embeddings_csv(&text, Path::new("x.csv")).unwrap();
        assert_eq!(back.vectors, set.vectors);
        assert_eq!(back.labels, set.labels);
    }

    #[test]
    fn topk_counts() {
        let s = Array2::from_shape_vec((2, 6), vec![0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let a = topk_accuracy(&s, &[0, 0]);
        assert_eq!(a.top1, 0.5);
        assert_eq!(a.top5, Some(0.5));
    }
}
