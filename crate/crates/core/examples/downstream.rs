//! Short pretraining followed by every downstream protocol: linear probe,
//! 1-NN retrieval, fine-tuning on 10% labels (pretrained and from scratch),
//! a probe under test-time occlusion, and embedding export.
//!
//!     cargo run --release --example downstream -- [pretrain_epochs]

use scd_net::config::RunConfig;
use scd_net::eval::*;
use scd_net::train::{pretrain, Model};

fn main() -> scd_net::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut cfg = RunConfig::tiny(1);
    cfg.pretrain.epochs = epochs;
    let model = Model::new(cfg)?;
    let data = model.cfg.dataset.load(".".as_ref())?;
    let (a, b) = train_test_split(&data, model.cfg.test_fraction, 1)?;
    let (train, test) = (data.subset(&a), data.subset(&b));

    let out = pretrain(&model, &train, None, None, |e, l| println!("epoch {e:3} loss {l:.4}"))?;
    let theta = &out.state.theta;

    let etr = extract_embeddings(&model, theta, &train, Representation::Concat, "train")?;
    let ete = extract_embeddings(&model, theta, &test, Representation::Concat, "test")?;
    let probe = linear_probe(&etr, &ete, &model.cfg.probe, 1)?;
    println!("linear probe   top-1 {:.3}  top-5 {:.3}", probe.top1, probe.top5.unwrap_or(f64::NAN));
    println!("1-NN retrieval top-1 {:.3}", knn_retrieval(&etr, &ete, false)?);

    let labels: Vec<u32> = train.samples.iter().filter_map(|s| s.label()).collect();
    let few = train.subset(&stratified_subset(&labels, 0.1, 1, 0)?);
    let tuned = finetune(&model, Some(theta), &few, &test, &model.cfg.finetune, 1)?;
    let scratch = finetune(&model, None, &few, &test, &model.cfg.finetune, 1)?;
    println!("10% labels     pretrained {:.3}  scratch {:.3}", tuned.top1, scratch.top1);

    let occluded = occlude(&test, 0.2, 0.2, 1)?;
    let eocc = extract_embeddings(&model, theta, &occluded, Representation::Concat, "test")?;
    println!("occluded probe top-1 {:.3}", linear_probe(&etr, &eocc, &model.cfg.probe, 1)?.top1);

    let path = std::env::temp_dir().join("scd_embeddings_test.csv");
    export_embeddings(&ete, &path)?;
    println!("wrote {} x {} embeddings to {}", ete.len(), ete.dim(), path.display());
    Ok(())
}
