//! Structure-guided spatial masking and cube temporal masking on one clip.
//!
//!     cargo run --example masking -- [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scd_net::augment::{spatial_mask, temporal_mask, SpatialMaskParams, TemporalMaskParams};
use scd_net::skeleton::{generate_synthetic, power_adjacency, sample_frames, SkeletonGraph, SyntheticParams};

fn main() -> scd_net::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let graph = SkeletonGraph::ntu();
    let data = generate_synthetic(&SyntheticParams::new(2, 1, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = sample_frames(&data.samples[0], 64, &mut rng)?;

    let d = power_adjacency(graph.adjacency(), 2)?;
    println!("2-step walks from joint 0: {:?}", d.row(0).to_vec());

    let sp = SpatialMaskParams::default();
    let masked = spatial_mask(&clip, &graph, &sp, &mut rng)?;
    let zeroed: Vec<usize> = (0..clip.joints())
        .filter(|&j| masked.values().slice(ndarray::s![.., .., j, ..]).iter().all(|v| *v == 0.0))
        .collect();
    println!("spatial mask (n={}, seeds={}, k={}) zeroed joints {zeroed:?}", sp.n, sp.num_seeds, sp.k);

    let tp = TemporalMaskParams::default();
    let masked = temporal_mask(&clip, &tp, &mut rng)?;
    let row: String = (0..clip.frames())
        .map(|f| {
            let gone = masked.values().slice(ndarray::s![.., f, .., ..]).iter().all(|v| *v == 0.0);
            if gone { '_' } else { '#' }
        })
        .collect();
    println!("temporal mask (s={}, r={}) frames: {row}", tp.s, tp.r);
    Ok(())
}
