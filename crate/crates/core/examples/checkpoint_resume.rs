//! Pretrains for a few epochs with per-epoch checkpoints, resumes from the
//! first checkpoint and compares the loss curves.
//!
//!     cargo run --release --example checkpoint_resume

use scd_net::config::{DatasetSpec, RunConfig};
use scd_net::skeleton::SyntheticParams;
use scd_net::train::{checkpoint_name, pretrain, Model, PretrainState};

fn main() -> scd_net::Result<()> {
    let mut cfg = RunConfig::tiny(5);
    cfg.dataset = DatasetSpec::Synthetic(SyntheticParams::new(4, 16, 5));
    cfg.contrast.queue_len = 32;
    cfg.pretrain.epochs = 4;
    cfg.pretrain.batch_size = 16;
    cfg.checkpoint_every = 1;
    let model = Model::new(cfg)?;
    let data = model.cfg.dataset.load(".".as_ref())?;
    let dir = std::env::temp_dir().join("scd_resume_demo");

    let full = pretrain(&model, &data, None, Some(&dir), |e, l| println!("uninterrupted epoch {e}: {l:.6}"))?;
    println!("checkpoints: {}", full.checkpoints.len());

    let state = PretrainState::load(&dir.join(checkpoint_name(1)), &model)?;
    let resumed = pretrain(&model, &data, Some(state), None, |e, l| println!("resumed       epoch {e}: {l:.6}"))?;
    let same = resumed.epoch_losses == full.epoch_losses[1..];
    println!("resumed curve identical: {same}");

    let mut other = model.cfg.clone();
    other.contrast.tau = 0.3;
    match PretrainState::load(&dir.join(checkpoint_name(1)), &Model::new(other)?) {
        Err(e) => println!("different config refused: {e}"),
        Ok(_) => println!("unexpected: checkpoint accepted under a different config"),
    }
    Ok(())
}
