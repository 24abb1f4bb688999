//! Overfits the toy network on a handful of synthetic samples and prints the
//! loss curve and the mean Chamfer distance before and after.
//!
//! ```text
//! cargo run --release -p racomp --example overfit -- [samples] [steps]
//! ```

use std::time::Instant;

use racomp::harness::corpus::{load_split, synth};
use racomp::harness::train::{mean_cd, prepare_samples, TrainState};
use racomp::harness::{choose_references, ReferenceMode, RunConfig};
use racomp::retrieval::{build_index, GeometricEmbedder};

fn main() -> racomp::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(8);
    let steps = args.get(1).copied().unwrap_or(500);

    let dir = std::env::temp_dir().join(format!("racomp-overfit-{}", std::process::id()));
    let mut cfg = RunConfig::toy();
    cfg.batch_size = n;
    synth(&cfg, &dir, true, false)?;
    let (index, _) = build_index(&dir.join("index_manifest.txt"), &GeometricEmbedder)?;
    let samples = load_split(&dir, "train", cfg.model.image_res, n)?;
    let refs = choose_references(&cfg, &index, &samples, ReferenceMode::Retrieved)?;
    let refs: Vec<_> = refs.into_iter().map(|(_, c)| c).collect();

    let mut state = TrainState::new(&cfg)?;
    let data = prepare_samples(&state.net, &samples, &refs)?;
    let before = mean_cd(&state.net, &data)?;
    println!("params {} | untrained mean CD-l2 {before:.5}", state.net.store.num_scalars());
    let t = Instant::now();
    let all: Vec<_> = data.iter().collect();
    for s in 0..steps {
        let parts = state.step(&all, cfg.lr, cfg.precision(), s)?;
        if s % 25 == 0 || s + 1 == steps {
            println!(
                "step {s:4} seed {:.5} output {:.5} ft {:.5} total {:.5} ({:.1}s)",
                parts.seed,
                parts.output,
                parts.ft,
                parts.total,
                t.elapsed().as_secs_f64()
            );
        }
    }
    let after = mean_cd(&state.net, &data)?;
    println!("trained mean CD-l2 {after:.5} ({:.1}% reduction)", 100.0 * (1.0 - after / before));
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
