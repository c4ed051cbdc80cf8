//! Command implementations behind the `scd` binary: pretraining, downstream
//! evaluation and synthetic corpus generation.
//!
//! Output directory: `--out` when given, otherwise
//! `$SCD_RUN_DIR` (or the config's `out_dir`, or `runs`) joined with
//! `{command}-{hash prefix}`.

use crate::checkpoint::Container;
use crate::config::{DatasetSpec, RunConfig};
use crate::error::{Result, ScdError};
use crate::eval::{
    export_embeddings, extract_embeddings, finetune, knn_retrieval, linear_probe, stratified_subset, train_test_split,
    EvalResult, Representation,
};
use crate::skeleton::{generate_synthetic, Dataset, SyntheticParams};
use crate::train::{pretrain, Model, PretrainState};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const RUN_DIR_ENV: &str = "SCD_RUN_DIR";
pub const CONFIG_SNAPSHOT: &str = "config.json";

/// Exit status for a failed command: 2 for bad input (configuration,
/// incompatible checkpoint), 1 for anything that failed while running.
pub fn exit_code(err: &ScdError) -> i32 {
    match err {
        ScdError::Config { .. } | ScdError::Checkpoint(_) => 2,
        _ => 1,
    }
}

/// Loads a config file and pins manifest paths to absolute form, so the
/// snapshot written into a run directory stays loadable from anywhere.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for spec in std::iter::once(&mut cfg.dataset).chain(cfg.transfer_dataset.as_mut()) {
        if let DatasetSpec::Manifest { path: p, .. } = spec {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = fs::canonicalize(&joined).unwrap_or(joined);
            }
        }
    }
    Ok(cfg)
}

fn output_dir(out: Option<&Path>, cfg_out: Option<&Path>, leaf: String) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    let root = std::env::var_os(RUN_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| cfg_out.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(leaf)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ScdError::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct PretrainArgs {
    pub config: PathBuf,
    /// Resume from this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Returns the run directory holding `config.json`, `metrics.csv` and the
/// checkpoints.
pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PathBuf> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let model = Model::new(cfg)?;
    let hash = model.cfg.hash_hex();
    let dir = output_dir(args.out.as_deref(), model.cfg.out_dir.as_deref(), format!("pretrain-{}", &hash[..12]));
    fs::create_dir_all(&dir).map_err(|e| ScdError::io(&dir, e))?;
    write_file(&dir.join(CONFIG_SNAPSHOT), &model.cfg.to_json())?;

    let state = match &args.checkpoint {
        Some(p) => Some(PretrainState::load(p, &model)?),
        None => None,
    };
    let data = model.cfg.dataset.load(Path::new("."))?;
    let total = model.cfg.pretrain.epochs;
    pretrain(&model, &data, state, Some(&dir), |epoch, loss| {
        eprintln!("epoch {epoch}/{total}  loss {loss:.4}");
    })?;
    Ok(dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Probe,
    Retrieval,
    Semi,
    Transfer,
}

impl FromStr for Task {
    type Err = ScdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(Task::Probe),
            "retrieval" => Ok(Task::Retrieval),
            "semi" => Ok(Task::Semi),
            "transfer" => Ok(Task::Transfer),
            other => Err(ScdError::config(
                "task",
                format!("unknown task `{other}` (expected probe, retrieval, semi or transfer)"),
            )),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Probe => "probe",
            Task::Retrieval => "retrieval",
            Task::Semi => "semi",
            Task::Transfer => "transfer",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the `config.json` beside the checkpoint.
    pub config: Option<PathBuf>,
    pub task: String,
    /// Seed for evaluation randomness; the checkpoint is still matched
    /// against the config's own seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn describe(spec: &DatasetSpec) -> String {
    match spec {
        DatasetSpec::Synthetic(p) => format!("synthetic:{}x{}:seed{}", p.classes, p.per_class, p.seed),
        DatasetSpec::Manifest { path, .. } => path.display().to_string(),
    }
}

/// Runs one downstream task and writes `{task}.json` into the output
/// directory; returns the result and the path written.
pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalResult, PathBuf)> {
    let task: Task = args.task.parse()?;
    let cfg_path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(CONFIG_SNAPSHOT),
    };
    let cfg = load_config(&cfg_path)?;
    let container = Container::load(&args.checkpoint, Some(&cfg.hash()))?;
    let config_hash = cfg.hash_hex();
    let mut cfg = cfg;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let model = Model::new(cfg)?;
    let theta = container.store("theta");
    theta
        .check_compatible(&model.init_params()?)
        .map_err(|e| ScdError::Checkpoint(format!("checkpoint does not fit the config: {e}")))?;
    let seed = model.cfg.seed;

    let dir = output_dir(args.out.as_deref(), model.cfg.out_dir.as_deref(), format!("eval-{}", &config_hash[..12]));
    fs::create_dir_all(&dir).map_err(|e| ScdError::io(&dir, e))?;

    let (spec, protocol, top1, top5) = match task {
        Task::Probe | Task::Retrieval => {
            let data = model.cfg.dataset.load(Path::new("."))?;
            let (tr, te) = split(&data, model.cfg.test_fraction, seed)?;
            let etr = extract_embeddings(&model, &theta, &tr, Representation::Concat, "train")?;
            let ete = extract_embeddings(&model, &theta, &te, Representation::Concat, "test")?;
            export_embeddings(&etr, &dir.join("embeddings_train.csv"))?;
            export_embeddings(&ete, &dir.join("embeddings_test.csv"))?;
            if task == Task::Probe {
                let acc = linear_probe(&etr, &ete, &model.cfg.probe, seed)?;
                (&model.cfg.dataset, "linear-probe concat frozen", acc.top1, acc.top5)
            } else {
                let acc = knn_retrieval(&etr, &ete, false)?;
                (&model.cfg.dataset, "1-nn cosine concat frozen", acc, None)
            }
        }
        Task::Semi => {
            let data = model.cfg.dataset.load(Path::new("."))?;
            let (tr, te) = split(&data, model.cfg.test_fraction, seed)?;
            let labels: Vec<u32> = tr.samples.iter().map(|s| s.label().unwrap_or(0)).collect();
            let keep = stratified_subset(&labels, model.cfg.label_fraction, seed, 0)?;
            let acc = finetune(&model, Some(&theta), &tr.subset(&keep), &te, &model.cfg.finetune, seed)?;
            (&model.cfg.dataset, "finetune labelled-fraction", acc.top1, acc.top5)
        }
        Task::Transfer => {
            let spec = model
                .cfg
                .transfer_dataset
                .as_ref()
                .ok_or_else(|| ScdError::config("transfer_dataset", "required for task `transfer`"))?;
            let data = spec.load(Path::new("."))?;
            let (tr, te) = split(&data, model.cfg.test_fraction, seed)?;
            let acc = finetune(&model, Some(&theta), &tr, &te, &model.cfg.finetune, seed)?;
            (spec, "finetune transfer", acc.top1, acc.top5)
        }
    };
    let protocol = if task == Task::Semi {
        format!("{protocol} {}", model.cfg.label_fraction)
    } else {
        protocol.to_string()
    };
    let result = EvalResult {
        task: task.name().to_string(),
        dataset: describe(spec),
        protocol,
        top1,
        top5,
        config_hash,
    };
    let path = dir.join(format!("{}.json", task.name()));
    let json = serde_json::to_string_pretty(&result)?;
    write_file(&path, &json)?;
    Ok((result, path))
}

fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = train_test_split(data, test_fraction, seed)?;
    Ok((data.subset(&a), data.subset(&b)))
}

#[derive(Clone, Debug, Default)]
pub struct GenSynthArgs {
    /// Take the synthetic parameters from this config's dataset.
    pub config: Option<PathBuf>,
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Writes `manifest.tsv` plus one `.skel` file per sample; returns the
/// directory.
pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<PathBuf> {
    let mut params = match &args.config {
        Some(p) => match load_config(p)?.dataset {
            DatasetSpec::Synthetic(s) => s,
            DatasetSpec::Manifest { .. } => {
                return Err(ScdError::config("dataset", "gen-synth needs a synthetic dataset spec"));
            }
        },
        None => SyntheticParams::new(10, 100, 0),
    };
    if let Some(c) = args.classes {
        params.classes = c;
    }
    if let Some(n) = args.per_class {
        params.per_class = n;
    }
    if let Some(s) = args.seed {
        params.seed = s;
    }
    let data = generate_synthetic(&params)?;
    let dir = output_dir(args.out.as_deref(), None, format!("synth-{}x{}-seed{}", params.classes, params.per_class, params.seed));
    data.write_dir(&dir)?;
    Ok(dir)
}
