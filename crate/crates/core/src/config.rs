//! Run configuration: one JSON document covering data, augmentation, model,
//! contrast and every optimizer phase.

use crate::augment::AugmentPipeline;
use crate::contrastive::ContrastConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Result, ScdError};
use crate::skeleton::{generate_synthetic, Dataset, PartitionStrategy, SkeletonGraph, SyntheticParams, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Epochs (1-based) from which the rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_lr_decay() -> f64 {
    0.1
}

impl OptimizerConfig {
    /// 450 epochs, lr 0.01 decayed at 350, batch 64, weight decay 1e-4.
    pub fn pretrain_default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![350],
            lr_decay: 0.1,
            epochs: 450,
            batch_size: 64,
        }
    }

    /// Linear evaluation: lr 2, decays at 50 and 70, 80 epochs, batch 1024.
    pub fn probe_default() -> Self {
        OptimizerConfig {
            lr: 2.0,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![50, 70],
            lr_decay: 0.1,
            epochs: 80,
            batch_size: 1024,
        }
    }

    /// Fine-tuning: lr 0.1, batch 32.
    pub fn finetune_default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![50, 70],
            lr_decay: 0.1,
            epochs: 80,
            batch_size: 32,
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |f: &str, r: &str| Err(ScdError::config(format!("{section}.{f}"), r));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be finite and >= 0");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones", "must be strictly ascending");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must lie in (0, 1]");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count() as i32;
        self.lr / (1.0 / self.lr_decay).powi(k)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Default,
    /// Shorter queue and stronger weight decay for corpora of a few
    /// thousand samples.
    SmallCorpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticParams),
    Manifest {
        path: PathBuf,
        #[serde(default)]
        root: usize,
    },
}

impl DatasetSpec {
    /// Relative manifest paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(p) => generate_synthetic(p),
            DatasetSpec::Manifest { path, root } => {
                let p = if path.is_absolute() { path.clone() } else { base.join(path) };
                Dataset::load_manifest(&p, *root).map(|(_, d)| d)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    /// 25-joint body layout.
    #[default]
    Ntu,
    Custom {
        joints: usize,
        edges: Vec<(usize, usize)>,
        /// Partition center; `None` gives a single uniform subset.
        center: Option<usize>,
        #[serde(default)]
        root: usize,
        #[serde(default)]
        flip_pairs: Vec<(usize, usize)>,
    },
}

impl GraphSpec {
    pub fn build(&self) -> Result<SkeletonGraph> {
        match self {
            GraphSpec::Ntu => Ok(SkeletonGraph::ntu()),
            GraphSpec::Custom {
                joints,
                edges,
                center,
                root,
                flip_pairs,
            } => {
                let strategy = match center {
                    Some(c) => PartitionStrategy::Spatial { center: *c },
                    None => PartitionStrategy::Uniform,
                };
                SkeletonGraph::from_edges(*joints, edges, strategy, *root)?.with_flip_pairs(flip_pairs.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub profile: Profile,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Second corpus for transfer fine-tuning.
    #[serde(default)]
    pub transfer_dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub graph: GraphSpec,
    #[serde(default = "default_view")]
    pub view: View,
    /// Persons per sample fed to the encoder (padded or truncated).
    #[serde(default = "default_persons")]
    pub persons: usize,
    pub augment: AugmentPipeline,
    pub encoder: EncoderConfig,
    pub contrast: ContrastConfig,
    pub pretrain: OptimizerConfig,
    pub probe: OptimizerConfig,
    pub finetune: OptimizerConfig,
    /// Fraction of labels kept for semi-supervised fine-tuning.
    #[serde(default = "default_label_fraction")]
    pub label_fraction: f64,
    /// Held-out share of each class used as the test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_view() -> View {
    View::Joint
}
fn default_persons() -> usize {
    1
}
fn default_label_fraction() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_checkpoint_every() -> usize {
    50
}

impl RunConfig {
    /// Full-scale defaults over a synthetic corpus.
    pub fn paper_default(seed: u64) -> Self {
        RunConfig {
            profile: Profile::Default,
            seed,
            dataset: DatasetSpec::Synthetic(SyntheticParams::new(10, 100, seed)),
            transfer_dataset: None,
            graph: GraphSpec::Ntu,
            view: View::Joint,
            persons: 1,
            augment: AugmentPipeline::default(),
            encoder: EncoderConfig::default(),
            contrast: ContrastConfig::default(),
            pretrain: OptimizerConfig::pretrain_default(),
            probe: OptimizerConfig::probe_default(),
            finetune: OptimizerConfig::finetune_default(),
            label_fraction: 0.1,
            test_fraction: 0.2,
            checkpoint_every: 50,
            out_dir: None,
        }
    }

    /// Desk-scale profile: tiny encoder, 30 epochs on 10 x 100 synthetic
    /// samples. Milder rotation/shear, a short queue, a faster key encoder
    /// and batch-normalized heads so a 30-epoch run has a visible signal.
    pub fn tiny(seed: u64) -> Self {
        RunConfig {
            encoder: EncoderConfig::tiny(),
            augment: AugmentPipeline::default().with_geometry(PI / 12.0, 0.25),
            contrast: ContrastConfig {
                momentum: 0.95,
                queue_len: 64,
                head_hidden: Some(64),
                head_batch_norm: true,
                ..ContrastConfig::default()
            },
            pretrain: OptimizerConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
                milestones: vec![25],
                lr_decay: 0.1,
                epochs: 30,
                batch_size: 64,
            },
            probe: OptimizerConfig {
                lr: 0.5,
                momentum: 0.9,
                weight_decay: 0.0,
                milestones: vec![60, 80],
                lr_decay: 0.1,
                epochs: 100,
                batch_size: 64,
            },
            finetune: OptimizerConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                milestones: vec![15],
                lr_decay: 0.1,
                epochs: 20,
                batch_size: 32,
            },
            checkpoint_every: 10,
            ..RunConfig::paper_default(seed)
        }
    }

    /// Parses JSON and applies the profile. Missing or malformed fields map
    /// to [`ScdError::Config`] naming the field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            let field = match msg.split('`').nth(1) {
                Some(name) if msg.starts_with("missing field") => {
                    if path == "." || path.is_empty() {
                        name.to_string()
                    } else {
                        format!("{path}.{name}")
                    }
                }
                _ => path,
            };
            ScdError::config(field, msg)
        })?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScdError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the profile overrides.
    pub fn resolved(mut self) -> Self {
        if self.profile == Profile::SmallCorpus {
            self.contrast.queue_len = 2048;
            self.pretrain.weight_decay = 0.001;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Synthetic(p) = &self.dataset {
            p.validate()?;
        }
        let graph = self.graph.build()?;
        self.encoder.validate()?;
        if graph.num_joints() != self.encoder.joints {
            return Err(ScdError::config(
                "encoder.joints",
                format!("graph has {} joints", graph.num_joints()),
            ));
        }
        self.augment.validate(self.encoder.joints, self.encoder.frames)?;
        self.contrast.validate()?;
        self.pretrain.validate("pretrain")?;
        self.probe.validate("probe")?;
        self.finetune.validate("finetune")?;
        if self.persons == 0 {
            return Err(ScdError::config("persons", "must be >= 1"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(ScdError::config("label_fraction", "must lie in (0, 1]"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ScdError::config("test_fraction", "must lie in (0, 1)"));
        }
        if self.checkpoint_every == 0 {
            return Err(ScdError::config("checkpoint_every", "must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_arithmetic() {
        let o = OptimizerConfig {
            lr: 0.01,
            milestones: vec![2],
            ..OptimizerConfig::pretrain_default()
        };
        assert_eq!(o.lr_at(1), 0.01);
        assert_eq!(o.lr_at(2), 0.001);
        assert_eq!(o.lr_at(9), 0.001);
        let p = OptimizerConfig::probe_default();
        assert_eq!(p.lr_at(49), 2.0);
        assert_eq!(p.lr_at(50), 0.2);
        assert!((p.lr_at(70) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_stable_hash() {
        let cfg = RunConfig::tiny(7);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::tiny(8).hash(), cfg.hash());
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::tiny(1).to_json()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        match RunConfig::from_json(&v.to_string()) {
            Err(ScdError::Config { field, .. }) => assert_eq!(field, "seed"),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::tiny(1).to_json()).unwrap();
        v["encoder"].as_object_mut().unwrap().remove("heads");
        match RunConfig::from_json(&v.to_string()) {
            Err(ScdError::Config { field, .. }) => assert_eq!(field, "encoder.heads"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn small_corpus_profile_overrides() {
        let mut cfg = RunConfig::tiny(1);
        cfg.profile = Profile::SmallCorpus;
        let cfg = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg.contrast.queue_len, 2048);
        assert_eq!(cfg.pretrain.weight_decay, 0.001);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::tiny(1);
        cfg.contrast.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::tiny(1);
        cfg.pretrain.milestones = vec![5, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::tiny(1);
        cfg.label_fraction = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::tiny(1);
        cfg.dataset = DatasetSpec::Synthetic(SyntheticParams::new(1, 10, 0));
        assert!(cfg.validate().is_err());
    }
}
