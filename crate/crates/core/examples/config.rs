//! Config profiles, JSON round trip, field-level validation errors and the
//! stable config hash.
//!
//!     cargo run --example config

use scd_net::config::RunConfig;

fn main() -> scd_net::Result<()> {
    let tiny = RunConfig::tiny(0);
    let json = tiny.to_json();
    let back = RunConfig::from_json(&json)?;
    println!("tiny profile: {} bytes of JSON, hash {}", json.len(), back.hash_hex());
    println!("round trip equal: {}", back == tiny);

    let paper = RunConfig::paper_default(0);
    println!(
        "paper profile: C2={}, queue {}, tau {}, {} epochs at lr {}",
        paper.encoder.model_dim, paper.contrast.queue_len, paper.contrast.tau, paper.pretrain.epochs, paper.pretrain.lr
    );

    let mut v: serde_json::Value = serde_json::from_str(&json)?;
    v.as_object_mut().unwrap().remove("seed");
    match RunConfig::from_json(&v.to_string()) {
        Err(e) => println!("missing seed: {e}"),
        Ok(_) => println!("unexpected: accepted"),
    }
    v["seed"] = 0.into();
    v["encoder"]["heads"] = 5.into();
    match RunConfig::from_json(&v.to_string()) {
        Err(e) => println!("bad heads: {e}"),
        Ok(_) => println!("unexpected: accepted"),
    }
    Ok(())
}
