//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! ```text
//! cargo test --release -p racomp --test acceptance            # all nine
//! cargo test --release -p racomp --test acceptance -- 3 6     # a subset
//! ```

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use racomp::data::{depth_raster, occlude, sample_shape, sample_shape_stream, Family, ShapeSpec};
use racomp::encoder::{Modality, TokenSet};
use racomp::geometry::{
    ball_query, chamfer_l2, f_score, fidelity, knn, mmd, PointCloud, SpatialIndex,
};
use racomp::harness::corpus::{load_split, synth, Sample};
use racomp::harness::gradcheck::{gradcheck, tiny_config};
use racomp::harness::run::{cmd_eval, cmd_index_build};
use racomp::harness::train::{mean_cd, prepare_samples, PreparedSample, TrainState};
use racomp::harness::{choose_references, ReferenceMode, RunConfig};
use racomp::model::{ModelConfig, Network, SampleInput};
use racomp::objectives::{ft_loss, gram, seed_target};
use racomp::retrieval::RetrievalIndex;
use racomp::tensor::{Graph, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// 1 ---------------------------------------------------------------------

fn geometry_oracles() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    let instances = 200;
    let mut bad = Vec::new();
    for i in 0..instances {
        let n = r.random_range(1..=512);
        let cloud = if i % 3 == 0 {
            gridded_cloud(&mut r, n)
        } else {
            random_cloud(&mut r, n)
        };
        let tree = SpatialIndex::build(&cloud.points);
        let q = random_cloud(&mut r, 1).points[0];
        let k = r.random_range(1..=n.min(32));
        if knn(&tree, &q, k).unwrap() != brute_knn(&cloud.points, &q, k) {
            bad.push(format!("knn #{i}"));
        }
        let radius = r.random_range(0.05..0.6);
        let max_k = r.random_range(1..=24);
        if ball_query(&tree, &q, radius, max_k).unwrap() != brute_ball(&cloud.points, &q, radius, max_k) {
            bad.push(format!("ball #{i}"));
        }
        let m = r.random_range(1..=512);
        let other = random_cloud(&mut r, m);
        let (fast, slow) = (chamfer_l2(&cloud, &other).unwrap(), brute_chamfer_l2(&cloud, &other));
        if !rel_close(fast, slow, 1e-9) {
            bad.push(format!("chamfer #{i}: {fast} vs {slow}"));
        }
    }
    let elapsed = t.elapsed();
    check(
        bad.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{instances} instances each of knn/ball/chamfer, {} mismatches {:?}, {:.1}s (limit 60s)",
            bad.len(),
            bad.iter().take(3).collect::<Vec<_>>(),
            secs(elapsed)
        ),
    )
}

// 2 ---------------------------------------------------------------------

fn metric_fixed_points() -> Outcome {
    let mut r = rng(2);
    let mut bad = 0;
    let cases = 50;
    for _ in 0..cases {
        let (np, nq) = (r.random_range(1..300), r.random_range(1..300));
        let p = random_cloud(&mut r, np);
        let q = random_cloud(&mut r, nq);
        let others: Vec<PointCloud> = (0..3).map(|_| random_cloud(&mut r, 50)).collect();
        let mut pool = others.clone();
        pool.push(p.clone());
        let ok = chamfer_l2(&p, &p).unwrap() == 0.0
            && f_score(&p, &p, 0.01).unwrap() == 1.0
            && fidelity(&p, &p.concat(&q)).unwrap() == 0.0
            && mmd(&p, &pool).unwrap() == 0.0;
        bad += (!ok) as usize;
    }
    check(bad == 0, format!("{cases} random clouds, {bad} violations (exact)"))
}

// 3 ---------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let report = gradcheck(tiny_config(), 0, None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let failing: Vec<&str> = report.blocks.iter().filter(|b| !b.pass).map(|b| b.name.as_str()).collect();
    check(
        report.passed() && elapsed < Duration::from_secs(300),
        format!(
            "{} blocks, worst relative error {:.2e} (tol 1e-4), failing {failing:?}, {:.1}s (limit 300s)",
            report.blocks.len(),
            report.worst(),
            secs(elapsed)
        ),
    )
}

// 4 ---------------------------------------------------------------------

fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * cols..(i + 1) * cols].to_vec()).collect();
    Tensor::new(vec![perm.len(), cols], data).unwrap()
}

fn tokens(g: &mut Graph, t: &Tensor, m: Modality) -> TokenSet {
    let n = t.shape()[0];
    TokenSet {
        features: g.input(t.clone()),
        anchors: vec![None; n],
        modality: vec![m; n],
    }
}

fn invariance_suite() -> Outcome {
    const PERM: [usize; 7] = [3, 0, 6, 1, 5, 2, 4];
    const INPUT_PERM: [usize; 5] = [4, 2, 0, 3, 1];
    let net = Network::new(tiny_config(), 4).unwrap();
    let (enc, dec, st) = (&net.encoder, &net.decoder, &net.store);
    let d = net.config.d_model;
    let mut r = rng(4);
    let mut g = Graph::new();
    let refs = random_tensor(&mut r, 7, d);
    let input = random_tensor(&mut r, 5, d);
    let ra = tokens(&mut g, &refs, Modality::Reference);
    let rb = tokens(&mut g, &permute_rows(&refs, &PERM), Modality::Reference);
    let ia = tokens(&mut g, &input, Modality::Input);
    let ib = tokens(&mut g, &permute_rows(&input, &INPUT_PERM), Modality::Input);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let ea = enc.shared_encode(&mut g, st, &ra, false).unwrap();
    let eb = enc.shared_encode(&mut g, st, &rb, false).unwrap();
    worst.push(("encoder", permute_rows(g.value(ea.features), &PERM).max_abs_diff(g.value(eb.features))));

    let gp = enc.global_pool(&mut g, st, &ia).unwrap();
    let gpb = enc.global_pool(&mut g, st, &ib).unwrap();
    worst.push(("global_pool", g.value(gp).max_abs_diff(g.value(gpb))));

    let sa = enc.similarity_gate(&mut g, st, &ra, &ia).unwrap();
    let sb = enc.similarity_gate(&mut g, st, &rb, &ia).unwrap();
    let ca = enc.absence_gate(&mut g, st, sa, &ra, gp).unwrap();
    let cb = enc.absence_gate(&mut g, st, sb, &rb, gp).unwrap();
    worst.push(("gate rows", permute_rows(g.value(ca), &PERM).max_abs_diff(g.value(cb))));

    let fa = dec.fuse_global(&mut g, st, gp, Some(&ra)).unwrap();
    let fb = dec.fuse_global(&mut g, st, gp, Some(&rb)).unwrap();
    worst.push(("fuse_global", g.value(fa).max_abs_diff(g.value(fb))));

    let other = g.input(random_tensor(&mut r, 4, d));
    let ga = gram(&mut g, ra.features).unwrap();
    let gb = gram(&mut g, rb.features).unwrap();
    worst.push(("gram", g.value(ga).max_abs_diff(g.value(gb))));
    let la = ft_loss(&mut g, ra.features, other).unwrap();
    let lb = ft_loss(&mut g, rb.features, other).unwrap();
    let (la, lb) = (g.value(la).item(), g.value(lb).item());
    worst.push(("ft gram term", (la - lb).abs() / la.abs().max(1.0)));

    // Reference translation by dyadic offsets must leave the output bit-identical.
    let dyadic = |r: &mut rand_chacha::ChaCha8Rng, n: usize| {
        PointCloud::new((0..n).map(|_| [0, 1, 2].map(|_| r.random_range(-64i32..=64) as f64 / 64.0)).collect())
    };
    let partial = dyadic(&mut r, 60);
    let reference = dyadic(&mut r, 50);
    let image = depth_raster(&partial, 2, net.config.image_res, net.config.image_res).unwrap();
    let run = |reference: &PointCloud| {
        let prep = net
            .prepare(SampleInput {
                partial: &partial,
                image: Some(&image),
                reference: Some(reference),
            })
            .unwrap();
        net.complete(&prep).unwrap()
    };
    let base = run(&reference);
    let translated_equal = [[0.5, -0.25, 1.0], [-3.0, 0.125, 2.0]]
        .into_iter()
        .all(|t| run(&reference.translated(t)) == base);

    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    check(
        max <= 1e-12 && translated_equal,
        format!(
            "max deviation {max:.1e} (tol 1e-12) over {:?}; translated reference bit-identical: {translated_equal}",
            worst.iter().map(|w| w.0).collect::<Vec<_>>()
        ),
    )
}

// 5 ---------------------------------------------------------------------

fn count_contracts() -> Outcome {
    let spec = ShapeSpec::random(Family::Lamp, 1);
    let partial = occlude(&sample_shape_stream(&spec, 200, 1).unwrap(), 0, 50).unwrap();
    let one = PointCloud::new(vec![[0.1, 0.2, 0.3]]);
    let two = PointCloud::new(vec![[0.0; 3], [0.5; 3]]);
    let configs = [
        tiny_config(),
        ModelConfig {
            input_proxies: 500,
            ref_proxies: 500,
            k_geo: 64,
            k_sem: 64,
            gate_neighbors: 64,
            max_k: 1000,
            ..tiny_config()
        },
        ModelConfig {
            progressive_decode: false,
            use_sacg: false,
            group: 1,
            seeds: 3,
            ..tiny_config()
        },
        ModelConfig {
            use_reference: false,
            use_image: false,
            group: 7,
            ..tiny_config()
        },
    ];
    let mut checked = 0;
    let mut bad = Vec::new();
    for (ci, cfg) in configs.iter().enumerate() {
        let net = Network::new(cfg.clone(), 0).unwrap();
        let image = depth_raster(&partial, 0, cfg.image_res, cfg.image_res).unwrap();
        for (p, reference) in [(&partial, Some(&one)), (&two, Some(&partial)), (&one, None), (&partial, Some(&two))] {
            let prep = net
                .prepare(SampleInput {
                    partial: p,
                    image: Some(&image),
                    reference,
                })
                .unwrap();
            let out = net.complete(&prep).unwrap();
            checked += 1;
            if out.dense.len() != cfg.seeds * cfg.group || out.seeds.len() != cfg.seeds {
                bad.push(format!("config {ci}: {} points", out.dense.len()));
            }
        }
    }
    let default = ModelConfig::default();
    let gt = sample_shape(&ShapeSpec::random(Family::Chair, 0), 2048).unwrap();
    let seeds_ok = default.seeds == 512 && seed_target(&gt, default.seeds).unwrap().len() == 512;
    check(
        bad.is_empty() && seeds_ok,
        format!("{checked} completions with M = M0 x k, failures {bad:?}; default seeds 512: {seeds_ok}"),
    )
}

// Shared corpus for the training criteria ----------------------------------

struct Corpus {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    index: RetrievalIndex,
    train: Vec<Sample>,
    val: Vec<Sample>,
}

fn toy_corpus() -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy();
    cfg.corpus = dir.path().join("corpus");
    cfg.index = dir.path().join("index.bin");
    cfg.checkpoints = dir.path().join("ckpt");
    cfg.reports = dir.path().join("reports");
    synth(&cfg, &cfg.corpus, false, false).unwrap();
    let (index, _) = cmd_index_build(&cfg, None, None).unwrap();
    let train = load_split(&cfg.corpus, "train", cfg.model.image_res, 0).unwrap();
    let val = load_split(&cfg.corpus, "val", cfg.model.image_res, 0).unwrap();
    Corpus {
        _dir: dir,
        cfg,
        index,
        train,
        val,
    }
}

fn prepared(cfg: &RunConfig, c: &Corpus, net: &Network, samples: &[Sample]) -> Vec<PreparedSample> {
    let refs: Vec<_> = choose_references(cfg, &c.index, samples, ReferenceMode::Retrieved)
        .unwrap()
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    prepare_samples(net, samples, &refs).unwrap()
}

// 6 ---------------------------------------------------------------------

fn overfit_trajectory(c: &Corpus, steps: usize) -> (f64, f64, Vec<f64>) {
    let mut cfg = c.cfg.clone();
    cfg.batch_size = 8;
    let mut state = TrainState::new(&cfg).unwrap();
    let data = prepared(&cfg, c, &state.net, &c.train[..8]);
    let before = mean_cd(&state.net, &data).unwrap();
    let batch: Vec<&PreparedSample> = data.iter().collect();
    let losses = (0..steps)
        .map(|s| state.step(&batch, cfg.lr, cfg.precision(), s).unwrap().total)
        .collect();
    (before, mean_cd(&state.net, &data).unwrap(), losses)
}

fn overfit(c: &Corpus) -> Outcome {
    let t = Instant::now();
    let (before, after, losses) = overfit_trajectory(c, 500);
    let elapsed = t.elapsed();
    let (_, after_again, losses_again) = overfit_trajectory(c, 500);
    let reduction = 1.0 - after / before;
    let identical = losses.iter().map(|x| x.to_bits()).eq(losses_again.iter().map(|x| x.to_bits()))
        && after.to_bits() == after_again.to_bits();
    check(
        reduction >= 0.8 && elapsed < Duration::from_secs(900) && identical,
        format!(
            "8 samples, 500 steps: mean CD-l2 {before:.5} -> {after:.5} ({:.1}% reduction, need 80%), \
             {:.0}s (limit 900s), rerun bit-identical: {identical}",
            100.0 * reduction,
            secs(elapsed)
        ),
    )
}

// 7 ---------------------------------------------------------------------

const VARIANTS: [&str; 4] = ["no-reference", "reference, gates off", "reference + SACG, one-stage", "full progressive"];

fn variant(i: usize, base: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let m = &mut cfg.model;
    m.use_reference = i >= 1;
    m.use_sacg = i >= 2;
    m.progressive_decode = i >= 3;
    cfg
}

fn train_variant(c: &Corpus, cfg: &RunConfig) -> (Network, f64) {
    let mut state = TrainState::new(cfg).unwrap();
    let tr = prepared(cfg, c, &state.net, &c.train);
    let va = prepared(cfg, c, &state.net, &c.val);
    for _ in 0..cfg.epochs {
        state.run_epoch(cfg, &tr).unwrap();
    }
    let cd = mean_cd(&state.net, &va).unwrap();
    (state.net, cd)
}

fn ablation(c: &Corpus, full_seed0: &mut Option<Network>) -> Outcome {
    let t = Instant::now();
    let mut ordered = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let mut cds = Vec::new();
        for i in 0..VARIANTS.len() {
            let (net, cd) = train_variant(c, &variant(i, &c.cfg, seed));
            if seed == 0 && i == 3 {
                *full_seed0 = Some(net);
            }
            cds.push(cd);
        }
        let ok = cds.windows(2).all(|w| w[0] >= w[1]);
        ordered += ok as usize;
        println!(
            "    seed {seed}: {} -> {}",
            cds.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join(" / "),
            if ok { "ordered" } else { "not ordered" }
        );
        rows.push(cds);
    }
    let means: Vec<f64> = (0..VARIANTS.len())
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
        .collect();
    check(
        ordered >= 4,
        format!(
            "validation CD-l2 ordered {} in {ordered}/5 seeds (need 4); means {} over {} epochs, {:.0}s",
            VARIANTS.join(" >= "),
            means.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join(" / "),
            c.cfg.epochs,
            secs(t.elapsed())
        ),
    )
}

fn full_model(c: &Corpus, cached: &mut Option<Network>) -> Network {
    if cached.is_none() {
        *cached = Some(train_variant(c, &variant(3, &c.cfg, 0)).0);
    }
    cached.clone().unwrap()
}

// 8 ---------------------------------------------------------------------

fn irrelevant_reference(c: &Corpus, net: &Network) -> Outcome {
    let matched = cmd_eval(&c.cfg, Some(net), "test", ReferenceMode::Retrieved).map_err(|e| e.to_string())?;
    let swapped = cmd_eval(&c.cfg, Some(net), "test", ReferenceMode::Irrelevant).map_err(|e| e.to_string())?;
    let other_category = swapped
        .records
        .iter()
        .all(|r| r.reference.as_deref().and_then(|id| c.index.get(id)).and_then(|x| x.category.as_deref()) != Some(r.category.as_str()));
    let ratio = swapped.average.cd_l2_x1000 / matched.average.cd_l2_x1000;
    let finite = matched.all_finite() && swapped.all_finite();
    check(
        ratio < 2.0 && finite && other_category,
        format!(
            "test CD-l2 x1000 matched {:.3}, irrelevant {:.3}, ratio {ratio:.3} (limit 2); all finite: {finite}; \
             every swapped reference from another category: {other_category}",
            matched.average.cd_l2_x1000, swapped.average.cd_l2_x1000
        ),
    )
}

// 9 ---------------------------------------------------------------------

fn keys(line: &str) -> BTreeSet<String> {
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v.as_object().unwrap().keys().cloned().collect()
}

fn sparse_protocol(c: &Corpus, net: &Network) -> Outcome {
    let dense = cmd_eval(&c.cfg, Some(net), "test", ReferenceMode::Retrieved).map_err(|e| e.to_string())?;
    let sparse = cmd_eval(&c.cfg, Some(net), "test_sparse", ReferenceMode::Retrieved).map_err(|e| e.to_string())?;
    let (a, b) = (dense.to_jsonl(), sparse.to_jsonl());
    let schema = |text: &str| -> Vec<BTreeSet<String>> {
        let lines: Vec<&str> = text.lines().collect();
        vec![keys(lines[0]), keys(lines[lines.len() - 1])]
    };
    let same_schema = schema(&a) == schema(&b) && dense.count == sparse.count;
    let path: PathBuf = c.cfg.reports.join("test_sparse_retrieved.jsonl");
    sparse.write_jsonl(&path).map_err(|e| e.to_string())?;
    let written = Path::new(&path).exists();
    let degradation = sparse.average.cd_l2_x1000 / dense.average.cd_l2_x1000 - 1.0;
    check(
        same_schema && written && sparse.all_finite(),
        format!(
            "{} sparse samples ({} points + noise), same report schema: {same_schema}; CD-l2 x1000 {:.3} -> {:.3} \
             ({:+.1}% relative degradation, reported only)",
            sparse.count,
            c.cfg.sparse_points,
            dense.average.cd_l2_x1000,
            sparse.average.cd_l2_x1000,
            100.0 * degradation
        ),
    )
}

// -----------------------------------------------------------------------

const NAMES: [&str; 9] = [
    "geometry oracles",
    "metric fixed points",
    "gradient suite",
    "invariance suite",
    "count contracts",
    "overfit",
    "ablation direction",
    "irrelevant-reference robustness",
    "sparse/noisy protocol",
];

fn selection() -> Vec<usize> {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let numbers: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).filter(|n| (1..=9).contains(n)).collect();
    if !numbers.is_empty() {
        numbers
    } else if args.is_empty() || args.iter().any(|a| "acceptance".contains(a.as_str())) {
        (1..=9).collect()
    } else {
        // A name filter meant for other test targets.
        Vec::new()
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let chosen = selection();
    let mut corpus: Option<Corpus> = None;
    let mut full: Option<Network> = None;
    let mut failed = 0;
    for &n in &chosen {
        let t = Instant::now();
        let needs_corpus = n >= 6;
        if needs_corpus && corpus.is_none() {
            corpus = Some(toy_corpus());
        }
        let outcome = match n {
            1 => geometry_oracles(),
            2 => metric_fixed_points(),
            3 => gradient_suite(),
            4 => invariance_suite(),
            5 => count_contracts(),
            6 => overfit(corpus.as_ref().unwrap()),
            7 => ablation(corpus.as_ref().unwrap(), &mut full),
            8 => {
                let c = corpus.as_ref().unwrap();
                irrelevant_reference(c, &full_model(c, &mut full))
            }
            9 => {
                let c = corpus.as_ref().unwrap();
                sparse_protocol(c, &full_model(c, &mut full))
            }
            _ => unreachable!(),
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!("[{tag}] criterion {n} {}: {detail} [{:.1}s]", NAMES[n - 1], secs(t.elapsed()));
    }
    if chosen.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("acceptance: {} passed, {failed} failed", chosen.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
