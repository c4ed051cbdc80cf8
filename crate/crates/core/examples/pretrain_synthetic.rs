//! Pretrains the tiny profile on a synthetic corpus, then reports linear-probe
//! and 1-NN retrieval accuracy on a held-out split.
//!
//!     cargo run --release --example pretrain_synthetic -- [seed] [epochs]

use scd_net::config::RunConfig;
use scd_net::eval::{extract_embeddings, knn_retrieval, linear_probe, train_test_split, Representation};
use scd_net::train::{pretrain, Model};
use std::time::Instant;

fn main() -> scd_net::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig::tiny(seed);
    if let Some(e) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.pretrain.epochs = e;
    }
    let model = Model::new(cfg)?;
    let data = model.cfg.dataset.load(".".as_ref())?;
    let (train_idx, test_idx) = train_test_split(&data, model.cfg.test_fraction, seed)?;
    let (train, test) = (data.subset(&train_idx), data.subset(&test_idx));
    println!("{} train / {} test samples", train.len(), test.len());

    let t0 = Instant::now();
    let out = pretrain(&model, &train, None, None, |epoch, loss| {
        println!("epoch {epoch:3}  loss {loss:.4}  ({:.1}s)", t0.elapsed().as_secs_f64());
    })?;

    let theta = &out.state.theta;
    let etr = extract_embeddings(&model, theta, &train, Representation::Concat, "train")?;
    let ete = extract_embeddings(&model, theta, &test, Representation::Concat, "test")?;
    let probe = linear_probe(&etr, &ete, &model.cfg.probe, seed)?;
    let knn = knn_retrieval(&etr, &ete, false)?;
    println!("linear probe top-1 {:.3}  top-5 {:.3}", probe.top1, probe.top5.unwrap_or(0.0));
    println!("1-NN retrieval     {knn:.3}");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
