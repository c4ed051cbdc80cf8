//! Self-supervised pretraining: two augmented views per sample, a query
//! encoder trained by SGD and a momentum key encoder feeding three queues.

use crate::augment::AugmentPipeline;
use crate::checkpoint::{Container, Record};
use crate::config::{OptimizerConfig, RunConfig};
use crate::contrastive::{cross_domain_loss, init_heads, momentum_update, project, Keys, NegativeQueue, Queues};
use crate::encoder::{batch_tensor, encode, init_encoder, Clues};
use crate::error::{Result, ScdError};
use crate::nn::{update_running_stats, Forward, Mode, ParamKind, ParamStore};
use crate::skeleton::{derive_view, sample_frames, Dataset, SkeletonGraph, SkeletonSequence};
use indexmap::IndexMap;
use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str = "epoch,step,loss,loss_gs,loss_gt,loss_sg,loss_tg,lr";

/// Stream tags mixed into [`derive_rng`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const QUEUE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const STEP: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const FINETUNE: u64 = 8;
    pub const OCCLUDE: u64 = 9;
}

/// Independent ChaCha stream for `(seed, parts...)`.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Configuration plus the derived graph; shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub graph: SkeletonGraph,
    pub subsets: Vec<Array2<f64>>,
}

impl Model {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let graph = cfg.graph.build()?;
        let subsets = graph.subset_matrices();
        Ok(Model { cfg, graph, subsets })
    }

    /// Fresh encoder and projection-head parameters.
    pub fn init_params(&self) -> Result<ParamStore<f32>> {
        let mut rng = derive_rng(self.cfg.seed, &[stream::INIT]);
        let mut store = init_encoder::<f32, _>(&self.cfg.encoder, &self.graph, &mut rng)?;
        init_heads(&mut store, self.cfg.encoder.model_dim, &self.cfg.contrast, &mut rng);
        Ok(store)
    }

    /// Frame sampling, person padding, optional augmentation and view derivation.
    pub fn prepare(
        &self,
        seq: &SkeletonSequence,
        augment: Option<&AugmentPipeline>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SkeletonSequence> {
        let s = sample_frames(seq, self.cfg.encoder.frames, rng)?.with_persons(self.cfg.persons);
        let s = match augment {
            Some(a) => a.compose(&s, &self.graph, rng)?,
            None => s,
        };
        derive_view(&s, self.cfg.view, &self.graph)
    }

    pub fn clues(&self, fw: &mut Forward<'_, f32>, seqs: &[SkeletonSequence]) -> Result<Clues> {
        let refs: Vec<&SkeletonSequence> = seqs.iter().collect();
        let (x, m) = batch_tensor::<f32>(&refs, &self.cfg.encoder)?;
        let xv = fw.tape.constant(x);
        Ok(encode(fw, xv, m, &self.cfg.encoder, &self.subsets))
    }
}

/// SGD with momentum (`v = mu v + g + wd w`, `w -= lr v`); weight decay only
/// on affine weights.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    velocity: &mut ParamStore<f32>,
    grads: &IndexMap<String, ArrayD<f32>>,
    lr: f64,
    opt: &OptimizerConfig,
) {
    let (lr, mu, wd) = (lr as f32, opt.momentum as f32, opt.weight_decay as f32);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        if !p.kind.trainable() {
            continue;
        }
        if velocity.get(name).is_none() {
            velocity.insert(name.clone(), ArrayD::zeros(g.raw_dim()), p.kind);
        }
        let v = &mut velocity.get_mut(name).unwrap().value;
        let decay = if p.kind == ParamKind::Weight { wd } else { 0.0 };
        ndarray::Zip::from(&mut p.value)
            .and(v)
            .and(g)
            .for_each(|w, v, &g| {
                *v = mu * *v + g + decay * *w;
                *w -= lr * *v;
            });
    }
}

/// Everything needed to continue pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    /// Query encoder and heads.
    pub theta: ParamStore<f32>,
    /// Key encoder and heads.
    pub xi: ParamStore<f32>,
    pub velocity: ParamStore<f32>,
    pub queues: Queues<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
}

impl PretrainState {
    pub fn new(model: &Model) -> Result<Self> {
        let theta = model.init_params()?;
        let mut rng = derive_rng(model.cfg.seed, &[stream::QUEUE]);
        let queues = Queues::random(model.cfg.contrast.queue_len, model.cfg.contrast.contrast_dim, &mut rng);
        Ok(PretrainState {
            xi: theta.clone(),
            theta,
            velocity: ParamStore::new(),
            queues,
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_container(&self, cfg: &RunConfig) -> Container {
        let mut c = Container::new(cfg.hash());
        c.push_store("theta", &self.theta);
        c.push_store("xi", &self.xi);
        c.push_store("velocity", &self.velocity);
        for (name, q) in [("s", &self.queues.s), ("t", &self.queues.t), ("g", &self.queues.g)] {
            c.records.push(Record::new(format!("queue/{name}"), ParamKind::Buffer, q.storage().clone().into_dyn()));
            c.records.push(Record::from_u32s(format!("queue_state/{name}"), &[q.cursor() as u32, q.len() as u32]));
        }
        let step = self.step;
        c.records.push(Record::from_u32s(
            "meta",
            &[self.epoch as u32, step as u32, (step >> 32) as u32, cfg.seed as u32, (cfg.seed >> 32) as u32],
        ));
        c
    }

    pub fn from_container(c: &Container, model: &Model) -> Result<Self> {
        let theta = c.store("theta");
        let fresh = model.init_params()?;
        fresh
            .check_compatible(&theta)
            .map_err(|e| ScdError::Checkpoint(format!("encoder does not match configuration: {e}")))?;
        let xi = c.store("xi");
        theta.check_compatible(&xi).map_err(|e| ScdError::Checkpoint(e.to_string()))?;
        let queue = |name: &str| -> Result<NegativeQueue<f32>> {
            let storage: Array2<f32> = c
                .get(&format!("queue/{name}"))?
                .value
                .clone()
                .into_dimensionality()
                .map_err(|e| ScdError::Checkpoint(e.to_string()))?;
            let st = c.get(&format!("queue_state/{name}"))?.as_u32s();
            if st.len() != 2 {
                return Err(ScdError::Checkpoint("queue state needs 2 entries".into()));
            }
            NegativeQueue::from_parts(storage, st[0] as usize, st[1] as usize)
        };
        let meta = c.get("meta")?.as_u32s();
        if meta.len() != 5 {
            return Err(ScdError::Checkpoint("meta record needs 5 entries".into()));
        }
        Ok(PretrainState {
            theta,
            xi,
            velocity: c.store("velocity"),
            queues: Queues {
                s: queue("s")?,
                t: queue("t")?,
                g: queue("g")?,
            },
            epoch: meta[0] as usize,
            step: meta[1] as u64 | (meta[2] as u64) << 32,
        })
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig) -> Result<()> {
        self.to_container(cfg).save(path)
    }

    /// Refuses checkpoints whose embedded hash differs from `model.cfg`.
    pub fn load(path: &Path, model: &Model) -> Result<Self> {
        let c = Container::load(path, Some(&model.cfg.hash()))?;
        Self::from_container(&c, model)
    }
}

/// Loss of one step: weighted total and the four raw terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f32,
    pub terms: [f32; 4],
}

/// Forward of both encoders on prepared views.
pub struct LossEval {
    pub loss: StepLoss,
    pub grads: IndexMap<String, ArrayD<f32>>,
    pub bn_stats: Vec<(String, crate::autograd::BatchStats<f32>)>,
    pub keys: Keys<f32>,
}

/// Computes the loss of query views `xq` against key views `xk`.
pub fn evaluate_loss(
    model: &Model,
    theta: &ParamStore<f32>,
    xi: &ParamStore<f32>,
    queues: &Queues<f32>,
    xq: &[SkeletonSequence],
    xk: &[SkeletonSequence],
    with_grad: bool,
) -> Result<LossEval> {
    let keys = {
        let mut kf = Forward::new(xi, Mode::Train, false);
        let c = model.clues(&mut kf, xk)?;
        let p = project(&mut kf, c);
        Keys::from_tape(&kf.tape, p)
    };
    let mut qf = Forward::new(theta, Mode::Train, with_grad);
    let c = model.clues(&mut qf, xq)?;
    let q = project(&mut qf, c);
    let cc = &model.cfg.contrast;
    let l = cross_domain_loss(&mut qf.tape, q, &keys, queues, cc.lambda, cc.tau)?;
    let loss = StepLoss {
        total: qf.tape.scalar(l.total),
        terms: l.terms.map(|t| qf.tape.scalar(t)),
    };
    let grads = if with_grad && loss.total.is_finite() {
        let g = qf.tape.backward(l.total);
        qf.named_grads(&g)
    } else {
        IndexMap::new()
    };
    Ok(LossEval {
        loss,
        grads,
        bn_stats: qf.batch_stats().to_vec(),
        keys,
    })
}

/// Two independently augmented views of every sample in `batch`.
pub fn make_views(
    model: &Model,
    data: &Dataset,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SkeletonSequence>, Vec<SkeletonSequence>)> {
    let aug = Some(&model.cfg.augment);
    let mut q = Vec::with_capacity(batch.len());
    let mut k = Vec::with_capacity(batch.len());
    for &i in batch {
        q.push(model.prepare(&data.samples[i], aug, rng)?);
        k.push(model.prepare(&data.samples[i], aug, rng)?);
    }
    Ok((q, k))
}

/// One optimization step of epoch `epoch` (1-based) on `batch`.
pub fn train_step(
    model: &Model,
    state: &mut PretrainState,
    data: &Dataset,
    batch: &[usize],
    epoch: usize,
    step_in_epoch: usize,
) -> Result<StepLoss> {
    let mut rng = derive_rng(model.cfg.seed, &[stream::STEP, epoch as u64, step_in_epoch as u64]);
    let (xq, xk) = make_views(model, data, batch, &mut rng)?;
    let ev = evaluate_loss(model, &state.theta, &state.xi, &state.queues, &xq, &xk, true)?;
    if !ev.loss.total.is_finite() {
        return Err(ScdError::NonFiniteLoss {
            epoch,
            step: step_in_epoch,
            batch: batch.to_vec(),
        });
    }
    let lr = model.cfg.pretrain.lr_at(epoch);
    sgd_step(&mut state.theta, &mut state.velocity, &ev.grads, lr, &model.cfg.pretrain);
    update_running_stats(&mut state.theta, &ev.bn_stats);
    momentum_update(&state.theta, &mut state.xi, model.cfg.contrast.momentum)?;
    state.queues.enqueue(&ev.keys)?;
    state.step += 1;
    Ok(ev.loss)
}

/// Shuffled batches for an epoch. A trailing batch of one sample is dropped
/// since batch statistics need at least two.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[stream::SHUFFLE, epoch as u64]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub fn metrics_row(epoch: usize, step: usize, loss: &StepLoss, lr: f64) -> String {
    let t = loss.terms;
    format!("{epoch},{step},{},{},{},{},{},{lr}", loss.total, t[0], t[1], t[2], t[3])
}

/// Runs the next epoch; returns its mean loss and appends CSV rows.
pub fn run_epoch(model: &Model, state: &mut PretrainState, data: &Dataset, metrics: &mut String) -> Result<f64> {
    let epoch = state.epoch + 1;
    let lr = model.cfg.pretrain.lr_at(epoch);
    let batches = epoch_batches(model.cfg.seed, epoch, data.len(), model.cfg.pretrain.batch_size);
    if batches.is_empty() {
        return Err(ScdError::config("pretrain.batch_size", "dataset yields no batch of >= 2 samples"));
    }
    let mut sum = 0.0;
    for (step, batch) in batches.iter().enumerate() {
        let l = train_step(model, state, data, batch, epoch, step)?;
        sum += l.total as f64;
        writeln!(metrics, "{}", metrics_row(epoch, step, &l, lr)).unwrap();
    }
    state.epoch = epoch;
    Ok(sum / batches.len() as f64)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub state: PretrainState,
    /// Mean loss of each epoch run in this call.
    pub epoch_losses: Vec<f64>,
    /// Metrics CSV including header.
    pub metrics: String,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.scdn")
}

/// Trains from `state` (fresh when `None`) to the configured epoch count.
/// With `run_dir`, writes `metrics.csv` and checkpoints every
/// `checkpoint_every` epochs plus the last.
pub fn pretrain(
    model: &Model,
    data: &Dataset,
    state: Option<PretrainState>,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    if data.is_empty() {
        return Err(ScdError::config("dataset", "dataset is empty"));
    }
    let mut state = match state {
        Some(s) => s,
        None => PretrainState::new(model)?,
    };
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut epoch_losses = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| ScdError::io(dir, e))?;
    }
    let total = model.cfg.pretrain.epochs;
    while state.epoch < total {
        let mean = run_epoch(model, &mut state, data, &mut metrics)?;
        epoch_losses.push(mean);
        on_epoch(state.epoch, mean);
        if let Some(dir) = run_dir {
            let p = dir.join("metrics.csv");
            fs::write(&p, &metrics).map_err(|e| ScdError::io(&p, e))?;
            if state.epoch % model.cfg.checkpoint_every == 0 || state.epoch == total {
                let p = dir.join(checkpoint_name(state.epoch));
                state.save(&p, &model.cfg)?;
                checkpoints.push(p);
            }
        }
    }
    Ok(PretrainOutcome {
        state,
        epoch_losses,
        metrics,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSpec;
    use crate::skeleton::{generate_synthetic, SyntheticParams};

    fn small_model(seed: u64) -> (Model, Dataset) {
        let mut cfg = RunConfig::tiny(seed);
        cfg.dataset = DatasetSpec::Synthetic(SyntheticParams::new(3, 6, seed));
        cfg.contrast.queue_len = 32;
        cfg.pretrain.batch_size = 6;
        cfg.pretrain.epochs = 2;
        let data = generate_synthetic(&SyntheticParams::new(3, 6, seed)).unwrap();
        (Model::new(cfg).unwrap(), data)
    }

    fn trainable(s: &ParamStore<f32>) -> Vec<(String, ArrayD<f32>)> {
        s.iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (mut model, data) = small_model(1);
        model.cfg.pretrain.lr = 0.0;
        let mut state = PretrainState::new(&model).unwrap();
        let before = trainable(&state.theta);
        run_epoch(&model, &mut state, &data, &mut String::new()).unwrap();
        assert_eq!(trainable(&state.theta), before);
    }

    #[test]
    fn key_encoder_follows_momentum_rule() {
        let (model, data) = small_model(2);
        let mut state = PretrainState::new(&model).unwrap();
        let xi0 = state.xi.clone();
        train_step(&model, &mut state, &data, &[0, 1, 2, 3], 1, 0).unwrap();
        let m = model.cfg.contrast.momentum;
        let (a, b) = (m as f32, (1.0 - m) as f32);
        for (name, p) in state.xi.iter() {
            let expect = xi0.value(name) * a + state.theta.value(name) * b;
            assert_eq!(p.value, expect, "{name}");
        }
    }

    #[test]
    fn small_step_decreases_loss_on_frozen_batch() {
        let (model, data) = small_model(3);
        let state = PretrainState::new(&model).unwrap();
        let mut rng = derive_rng(9, &[0]);
        let (xq, xk) = make_views(&model, &data, &[0, 4, 8, 12, 16], &mut rng).unwrap();
        let ev = evaluate_loss(&model, &state.theta, &state.xi, &state.queues, &xq, &xk, true).unwrap();
        for lr in [1e-3, 1e-4] {
            let mut theta = state.theta.clone();
            let plain = OptimizerConfig {
                momentum: 0.0,
                weight_decay: 0.0,
                ..model.cfg.pretrain.clone()
            };
            sgd_step(&mut theta, &mut ParamStore::new(), &ev.grads, lr, &plain);
            let after = evaluate_loss(&model, &theta, &state.xi, &state.queues, &xq, &xk, false).unwrap();
            assert!(after.loss.total < ev.loss.total, "lr {lr}: {} !< {}", after.loss.total, ev.loss.total);
        }
    }

    #[test]
    fn weight_decay_only_on_weights() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a.w", ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0), ParamKind::Weight);
        p.insert("a.b", ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0), ParamKind::Bias);
        let grads: IndexMap<String, ArrayD<f32>> = ["a.w", "a.b"]
            .iter()
            .map(|n| (n.to_string(), ArrayD::zeros(ndarray::IxDyn(&[2]))))
            .collect();
        let opt = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::pretrain_default()
        };
        sgd_step(&mut p, &mut ParamStore::new(), &grads, 0.1, &opt);
        assert_eq!(p.value("a.w")[[0]], 1.0 - 0.1 * 0.5);
        assert_eq!(p.value("a.b")[[0]], 1.0);
    }

    #[test]
    fn same_seed_same_metrics_and_checkpoint_continuation() {
        let (model, data) = small_model(4);
        let a = pretrain(&model, &data, None, None, |_, _| {}).unwrap();
        let b = pretrain(&model, &data, None, None, |_, _| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.starts_with(METRICS_HEADER));

        let mut one = model.clone();
        one.cfg.pretrain.epochs = 1;
        let first = pretrain(&one, &data, None, None, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.scdn");
        first.state.save(&path, &model.cfg).unwrap();
        let restored = PretrainState::load(&path, &model).unwrap();
        assert_eq!(restored, first.state);
        let resumed = pretrain(&model, &data, Some(restored), None, |_, _| {}).unwrap();
        assert!((resumed.epoch_losses[0] - a.epoch_losses[1]).abs() < 1e-6);
        assert_eq!(resumed.state, a.state);

        let other = Model::new(RunConfig { seed: 99, ..model.cfg.clone() }).unwrap();
        assert!(matches!(PretrainState::load(&path, &other), Err(ScdError::Checkpoint(_))));
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let (model, data) = small_model(5);
        let mut state = PretrainState::new(&model).unwrap();
        for (_, p) in state.theta.iter_mut() {
            if p.kind == ParamKind::Weight {
                p.value.fill(f32::NAN);
            }
        }
        match train_step(&model, &mut state, &data, &[2, 5], 1, 0) {
            Err(ScdError::NonFiniteLoss { batch, .. }) => assert_eq!(batch, vec![2, 5]),
            other => panic!("expected non-finite loss, got {:?}", other.map(|l| l.total)),
        }
    }
}
