mod common;

use common::*;
use rand::Rng;
use racomp::data::{depth_raster, occlude, sample_shape, sample_shape_stream, Family, ShapeSpec};
use racomp::decoder::{Decoder, DecoderConfig};
use racomp::encoder::{Encoder, EncoderConfig, Modality, TokenSet};
use racomp::geometry::PointCloud;
use racomp::harness::gradcheck::tiny_config;
use racomp::model::{ModelConfig, Network, SampleInput};
use racomp::objectives::{ft_loss, gram, seed_target};
use racomp::tensor::{Graph, ParamStore, Tensor};

fn enc_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        d_global: 12,
        blocks: 2,
        heads: 2,
        patch: 4,
        image_channels: 1,
        gate_neighbors: 3,
    }
}

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

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max diff {d:e}");
}

const PERM: [usize; 7] = [3, 0, 6, 1, 5, 2, 4];

#[test]
fn shared_encoder_is_permutation_equivariant_without_positions() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, enc_config(), &mut r).unwrap();
    let x = random_tensor(&mut r, 7, 8);
    let mut g = Graph::new();
    let a = tokens(&mut g, &x, Modality::Input);
    let b = tokens(&mut g, &permute_rows(&x, &PERM), Modality::Input);
    let ya = enc.shared_encode(&mut g, &store, &a, false).unwrap();
    let yb = enc.shared_encode(&mut g, &store, &b, false).unwrap();
    assert_close(&permute_rows(g.value(ya.features), &PERM), g.value(yb.features), 1e-12);
}

#[test]
fn gate_rows_follow_reference_tokens_and_pooling_ignores_order() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, enc_config(), &mut r).unwrap();
    let dec = Decoder::new(
        &mut store,
        DecoderConfig {
            d_model: 8,
            d_global: 12,
            seeds: 4,
            group: 2,
            rounds: 1,
            k_geo: 2,
            k_sem: 2,
            progressive: true,
        },
        &mut r,
    )
    .unwrap();
    let refs = random_tensor(&mut r, 7, 8);
    let input = random_tensor(&mut r, 5, 8);
    let mut g = Graph::new();
    let inp = tokens(&mut g, &input, Modality::Input);
    let inp_perm = tokens(&mut g, &permute_rows(&input, &[4, 2, 0, 3, 1]), Modality::Input);
    let ra = tokens(&mut g, &refs, Modality::Reference);
    let rb = tokens(&mut g, &permute_rows(&refs, &PERM), Modality::Reference);

    let gp = enc.global_pool(&mut g, &store, &inp).unwrap();
    let gp_perm = enc.global_pool(&mut g, &store, &inp_perm).unwrap();
    assert_close(g.value(gp), g.value(gp_perm), 1e-12);

    let sa = enc.similarity_gate(&mut g, &store, &ra, &inp).unwrap();
    let sb = enc.similarity_gate(&mut g, &store, &rb, &inp).unwrap();
    assert_close(&permute_rows(g.value(sa), &PERM), g.value(sb), 1e-12);
    let ca = enc.absence_gate(&mut g, &store, sa, &ra, gp).unwrap();
    let cb = enc.absence_gate(&mut g, &store, sb, &rb, gp).unwrap();
    assert_close(&permute_rows(g.value(ca), &PERM), g.value(cb), 1e-12);
    assert!(g.value(ca).data().iter().all(|&c| c > 0.0 && c < 1.0));

    let fa = dec.fuse_global(&mut g, &store, gp, Some(&ra)).unwrap();
    let fb = dec.fuse_global(&mut g, &store, gp, Some(&rb)).unwrap();
    assert_close(g.value(fa), g.value(fb), 1e-12);
}

#[test]
fn gram_term_ignores_token_order() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, 7, 4);
    let b = random_tensor(&mut r, 5, 4);
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b));
    let vp = g.input(permute_rows(&a, &PERM));
    let ga = gram(&mut g, va).unwrap();
    let gpm = gram(&mut g, vp).unwrap();
    assert_close(g.value(ga), g.value(gpm), 1e-12);
    let l1 = ft_loss(&mut g, va, vb).unwrap();
    let l2 = ft_loss(&mut g, vp, vb).unwrap();
    assert!(rel_close(g.value(l1).item(), g.value(l2).item(), 1e-12));
    let same = ft_loss(&mut g, va, va).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
}

fn dyadic_cloud(r: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [0, 1, 2].map(|_| r.random_range(-64i32..=64) as f64 / 64.0))
            .collect(),
    )
}

#[test]
fn translating_the_reference_leaves_the_completion_unchanged() {
    let mut r = rng(4);
    let net = Network::new(tiny_config(), 9).unwrap();
    let partial = dyadic_cloud(&mut r, 60);
    let reference = dyadic_cloud(&mut r, 50);
    let image = depth_raster(&partial, 2, 8, 8).unwrap();
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
    for t in [[0.5, -0.25, 1.0], [-3.0, 0.125, 2.0]] {
        assert_eq!(run(&reference.translated(t)), base);
    }
}

#[test]
fn output_count_is_seeds_times_group_on_degenerate_inputs() {
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
            ..tiny_config()
        },
    ];
    for cfg in configs {
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
            assert_eq!(out.dense.len(), cfg.seeds * cfg.group);
            assert_eq!(out.seeds.len(), cfg.seeds);
            assert!(out.dense.is_finite());
        }
    }
}

#[test]
fn default_seed_count_matches_downsampled_truth() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.seeds, 512);
    let gt = sample_shape(&ShapeSpec::random(Family::Chair, 0), 2048).unwrap();
    assert_eq!(seed_target(&gt, cfg.seeds).unwrap().len(), 512);
    assert_eq!(cfg.output_points(), 2048);
}

#[test]
fn disabling_gates_passes_reference_features_through() {
    let cfg = ModelConfig {
        use_sacg: false,
        ..tiny_config()
    };
    let net = Network::new(cfg, 0).unwrap();
    let spec = ShapeSpec::random(Family::Chair, 3);
    let partial = occlude(&sample_shape_stream(&spec, 160, 1).unwrap(), 1, 40).unwrap();
    let reference = sample_shape(&ShapeSpec::random(Family::Chair, 4), 40).unwrap();
    let prep = net
        .prepare(SampleInput {
            partial: &partial,
            image: None,
            reference: Some(&reference),
        })
        .unwrap();
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, &prep).unwrap();
    assert!(fwd.gates.is_none() && fwd.similarity.is_none());
    let raw = fwd.reference_tokens.unwrap().features;
    let gated = fwd.gated_reference.unwrap().features;
    assert_eq!(g.value(raw), g.value(gated));
}

#[test]
fn completion_is_deterministic_and_checkpoints_restore_it() {
    let net = Network::new(tiny_config(), 5).unwrap();
    let spec = ShapeSpec::random(Family::Box, 5);
    let partial = occlude(&sample_shape_stream(&spec, 160, 1).unwrap(), 4, 40).unwrap();
    let prep = net
        .prepare(SampleInput {
            partial: &partial,
            image: None,
            reference: None,
        })
        .unwrap();
    let a = net.complete(&prep).unwrap();
    assert_eq!(a, net.complete(&prep).unwrap());
    let restored = Network::from_checkpoint(&net.to_checkpoint(), Some(&tiny_config())).unwrap();
    assert_eq!(a, restored.complete(&prep).unwrap());
}
