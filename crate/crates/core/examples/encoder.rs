//! Runs the dual-path encoder and projection heads on a small batch and
//! prints the clue and embedding shapes.
//!
//!     cargo run --example encoder

use scd_net::config::RunConfig;
use scd_net::contrastive::project;
use scd_net::nn::{Forward, Mode};
use scd_net::train::{derive_rng, Model};

fn main() -> scd_net::Result<()> {
    let cfg = RunConfig::tiny(3);
    let model = Model::new(cfg)?;
    let params = model.init_params()?;
    println!("{} parameter tensors, {} scalars", params.len(), params.iter().map(|(_, p)| p.value.len()).sum::<usize>());

    let data = model.cfg.dataset.load(".".as_ref())?;
    let mut rng = derive_rng(model.cfg.seed, &[0]);
    let batch = data.samples[..4]
        .iter()
        .map(|s| model.prepare(s, Some(&model.cfg.augment), &mut rng))
        .collect::<scd_net::Result<Vec<_>>>()?;

    let mut fw = Forward::new(&params, Mode::Eval, false);
    let clues = model.clues(&mut fw, &batch)?;
    println!("z_s {:?}  z_t {:?}", fw.tape.shape(clues.z_s), fw.tape.shape(clues.z_t));
    let q = project(&mut fw, clues);
    for (name, v) in [("q_s", q.s), ("q_t", q.t), ("q_g", q.g)] {
        let rows = fw.tape.value(v).clone();
        let norms: Vec<String> = rows.outer_iter().map(|r| format!("{:.4}", r.iter().map(|x| x * x).sum::<f32>().sqrt())).collect();
        println!("{name} {:?} row norms {}", rows.shape(), norms.join(" "));
    }
    Ok(())
}
