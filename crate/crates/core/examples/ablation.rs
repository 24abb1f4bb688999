//! Trains the four ablation variants on the toy corpus for several seeds and
//! prints the final validation Chamfer distance of each.
//!
//! ```text
//! cargo run --release -p racomp --example ablation -- [epochs] [replicates] [shapes-per-family] [key=value ...] [only=a,b]
//! ```

use std::time::Instant;

use racomp::harness::corpus::{load_split, synth};
use racomp::harness::train::{mean_cd, prepare_samples, TrainState};
use racomp::harness::{choose_references, ReferenceMode, RunConfig};
use racomp::retrieval::{build_index, GeometricEmbedder};

fn variant(name: &str, base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    let m = &mut cfg.model;
    match name {
        "no-reference" => {
            m.use_reference = false;
            m.use_sacg = false;
            m.progressive_decode = false;
        }
        "reference" => {
            m.use_sacg = false;
            m.progressive_decode = false;
        }
        "reference+gates" => m.progressive_decode = false,
        _ => {}
    }
    cfg
}

fn main() -> racomp::Result<()> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let args: Vec<usize> = raw.iter().filter_map(|a| a.parse().ok()).collect();
    let overrides: Vec<(&str, &str)> = raw.iter().filter_map(|a| a.split_once('=')).collect();
    let epochs = args.first().copied().unwrap_or(30);
    let reps = args.get(1).copied().unwrap_or(5) as u64;
    let per_family = args.get(2).copied();

    let dir = std::env::temp_dir().join(format!("racomp-ablation-{}", std::process::id()));
    let mut base = RunConfig::toy();
    base.epochs = epochs;
    if let Some(n) = per_family {
        base.shapes_per_family = n;
    }
    let mut only: Option<Vec<String>> = None;
    let mut oracle = false;
    for (k, v) in &overrides {
        match *k {
            "only" => only = Some(v.split(',').map(String::from).collect()),
            "oracle" => oracle = *v == "true",
            _ => base.set(k, v)?,
        }
    }
    synth(&base, &dir, true, false)?;
    let (index, _) = build_index(&dir.join("index_manifest.txt"), &GeometricEmbedder)?;
    let train = load_split(&dir, "train", base.model.image_res, 0)?;
    let val = load_split(&dir, "val", base.model.image_res, 0)?;
    let names = ["no-reference", "reference", "reference+gates", "full"];
    let t = Instant::now();
    let mut ordered = 0;
    for seed in 0..reps {
        let mut row = Vec::new();
        for name in names {
            if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
                row.push(f64::NAN);
                continue;
            }
            let mut cfg = variant(name, &base);
            cfg.seed = seed;
            let refs = |s: &[racomp::harness::corpus::Sample]| -> racomp::Result<Vec<_>> {
                if oracle && cfg.model.use_reference {
                    // Upper bound: the sample's own complete shape as reference.
                    return s
                        .iter()
                        .map(|x| Ok(Some(x.gt.select(&racomp::geometry::fps(&x.gt, cfg.ref_points.min(x.gt.len()), 0)?))))
                        .collect();
                }
                Ok(choose_references(&cfg, &index, s, ReferenceMode::Retrieved)?
                    .into_iter()
                    .map(|(_, c)| c)
                    .collect())
            };
            let mut state = TrainState::new(&cfg)?;
            let tr = prepare_samples(&state.net, &train, &refs(&train)?)?;
            let va = prepare_samples(&state.net, &val, &refs(&val)?)?;
            let mut last = None;
            for _ in 0..cfg.epochs {
                last = Some(state.run_epoch(&cfg, &tr)?);
            }
            if let Some(l) = last {
                eprintln!("  {name}: train seed {:.5} output {:.5} ft {:.3}", l.seed, l.output, l.ft);
            }
            row.push(mean_cd(&state.net, &va)?);
        }
        let ok = row.windows(2).all(|w| w[0] >= w[1]);
        ordered += ok as usize;
        println!(
            "seed {seed}: {} {} ({:.0}s)",
            names
                .iter()
                .zip(&row)
                .map(|(n, v)| format!("{n}={v:.5}"))
                .collect::<Vec<_>>()
                .join(" "),
            if ok { "ordered" } else { "not ordered" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("{ordered}/{reps} replicates ordered");
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
