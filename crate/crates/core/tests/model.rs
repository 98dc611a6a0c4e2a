mod common;

use common::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samcd::data::ChangeLabel;
use samcd::model::{
    adapt_level, build_fusion, fuse_topdown, load_external_pyramid, write_pyramid, Adaptor, EncoderSpec,
    FeaturePyramid, LevelSet, StubEncoder,
};
use samcd::nn::ParamStore;
use samcd::semantic::{
    attention_change_head, change_embedding, change_supervision_loss, extract_latent, tempered_softmax,
    temporal_constraint_loss, AttentionHead, ChangeEmbedding, SemanticEmbedding,
};
use samcd::tensor::{Graph, Var};
use samcd::{ChangeModel, Error, ModelConfig, SamCd, SemanticLatent};

/// conv1x1 -> batch-statistics normalization -> ReLU, written out with loops.
fn adaptor_oracle(x: &Array4<f64>, w: &ArrayD<f64>, gamma: &ArrayD<f64>, beta: &ArrayD<f64>) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let co = w.shape()[0];
    let mut y = Array4::<f64>::zeros((n, co, h, wd));
    for b in 0..n {
        for o in 0..co {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += w[[o, ci, 0, 0]] * x[[b, ci, i, j]];
                    }
                    y[[b, o, i, j]] = acc;
                }
            }
        }
    }
    let m = (n * h * wd) as f64;
    for o in 0..co {
        let plane = y.slice(s![.., o, .., ..]);
        let mean = plane.sum() / m;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + 1e-5).sqrt();
        y.slice_mut(s![.., o, .., ..])
            .mapv_inplace(|v| (gamma[[o]] * (v - mean) * inv + beta[[o]]).max(0.0));
    }
    y
}

#[test]
fn adaptor_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let a = Adaptor::new(&mut store, 2, 7, 5, &mut rng).unwrap();
    store.value_mut(a.block.bn.gamma).assign(&Array1::linspace(0.5, 1.5, 5).into_dyn());
    store.value_mut(a.block.bn.beta).assign(&Array1::linspace(-0.2, 0.2, 5).into_dyn());
    let x = randn4((3, 7, 4, 5), 1);
    let mut g = Graph::new(true);
    let xv = g.constant(x.clone());
    let y = adapt_level(&mut g, &store, &a, xv).unwrap();
    let expected = adaptor_oracle(
        &x,
        store.value(a.block.conv.weight),
        store.value(a.block.bn.gamma),
        store.value(a.block.bn.beta),
    );
    let got = g.value4(y);
    for (u, v) in got.iter().zip(expected.iter()) {
        assert!((u - v).abs() < 1e-10, "{u} vs {v}");
    }
}

#[test]
fn adaptor_shapes_and_degenerate_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let a = Adaptor::new(&mut store, 4, 128, 64, &mut rng).unwrap();
    let mut g = Graph::new(true);
    let x = g.constant(randn4((2, 128, 8, 8), 2));
    let y = adapt_level(&mut g, &store, &a, x).unwrap();
    assert_eq!(g.shape4(y), (2, 64, 8, 8));
    assert!(g.value(y).iter().all(|&v| v >= 0.0));

    let zero = g.constant(Array4::zeros((2, 128, 8, 8)));
    let y = adapt_level(&mut g, &store, &a, zero).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let wrong = g.constant(Array4::zeros((2, 64, 8, 8)));
    assert!(matches!(adapt_level(&mut g, &store, &a, wrong), Err(Error::Dimension(_))));
}

fn adapted_maps(g: &mut Graph<f64>, width: usize, size: usize) -> Vec<(usize, Var)> {
    (1..=4)
        .map(|l| {
            let side = size >> (l + 1);
            (l, g.constant(randn4((2, width, side, side), l as u64).mapv(f64::abs)))
        })
        .collect()
}

#[test]
fn fusion_of_all_levels_lands_at_quarter_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let blocks = build_fusion(&mut store, LevelSet::ALL, 8, &mut rng).unwrap();
    let mut g = Graph::new(true);
    let maps = adapted_maps(&mut g, 8, 256);
    let fused = fuse_topdown(&mut g, &store, &blocks, &maps, LevelSet::ALL).unwrap();
    assert_eq!(g.shape4(fused.finest()), (2, 8, 64, 64));
    assert_eq!(g.shape4(fused.concat), (2, 32, 64, 64));
    assert_eq!(fused.states.iter().map(|s| s.0).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
}

#[test]
fn single_coarse_level_passes_through() {
    let only4 = LevelSet::new(&[4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let blocks = build_fusion(&mut store, only4, 8, &mut rng).unwrap();
    assert!(blocks.is_empty());
    let mut g = Graph::new(true);
    let maps = adapted_maps(&mut g, 8, 256);
    let fused = fuse_topdown(&mut g, &store, &blocks, &maps[3..], only4).unwrap();
    assert_eq!(g.value(fused.concat), g.value(maps[3].1));
}

#[test]
fn three_and_four_level_fusion_share_the_finest_shape() {
    let mut g = Graph::new(true);
    let maps = adapted_maps(&mut g, 4, 128);
    let mut shapes = Vec::new();
    for set in [LevelSet::new(&[1, 2, 3]).unwrap(), LevelSet::ALL] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let blocks = build_fusion(&mut store, set, 4, &mut rng).unwrap();
        let active: Vec<_> = maps.iter().filter(|(l, _)| set.contains(*l)).copied().collect();
        let fused = fuse_topdown(&mut g, &store, &blocks, &active, set).unwrap();
        shapes.push((g.shape4(fused.finest()), g.shape4(fused.concat).1));
    }
    assert_eq!(shapes[0].0, shapes[1].0);
    assert_eq!(shapes[0].0, (2, 4, 32, 32));
    assert_eq!((shapes[0].1, shapes[1].1), (12, 16));
}

#[test]
fn every_ablation_subset_builds_and_runs() {
    let images = Array4::<f32>::from_shape_fn((2, 3, 64, 64), |(b, c, y, x)| ((b + c + y * x) % 7) as f32 / 7.0);
    for set in LevelSet::ablation_grid() {
        let config = ModelConfig { levels: set, ..tiny_config() };
        let model = SamCd::<f32>::new(config).unwrap();
        let p = model.predict_probability(images.slice(s![0, .., .., ..]), images.slice(s![1, .., .., ..])).unwrap();
        assert_eq!(p.dim(), (64, 64), "levels {set}");
    }
}

#[test]
fn latent_shapes_and_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let embed = SemanticEmbedding::new(&mut store, 192, 8, &mut rng).unwrap();
    let mut g = Graph::new(false);
    let x = g.constant(randn4((1, 192, 64, 64), 6));
    let fused = samcd::model::AdaptedFeatures { states: vec![(1, x)], concat: x, width: 64 };
    let latent = extract_latent(&mut g, &store, &embed, &fused).unwrap();
    assert_eq!(g.shape4(latent), (1, 8, 64, 64));

    let zero = g.constant(Array4::zeros((1, 192, 4, 4)));
    let fused = samcd::model::AdaptedFeatures { states: vec![(1, zero)], concat: zero, width: 64 };
    let latent = extract_latent(&mut g, &store, &embed, &fused).unwrap();
    assert!(g.value(latent).iter().all(|&v| v == 0.0));
    assert!(matches!(SemanticEmbedding::new(&mut store, 4, 1, &mut rng), Err(Error::Config(_))));
}

#[test]
fn softmax_sums_to_one_over_the_temperature_sweep() {
    let values = randn4((1, 8, 6, 6), 7).index_axis_move(Axis(0), 0) * 4.0;
    let latent = SemanticLatent::new(values).unwrap();
    for t in 1..=5 {
        let p = tempered_softmax(&latent, t as f64).unwrap();
        for lane in p.values().lanes(Axis(0)) {
            assert!((lane.sum() - 1.0).abs() < 1e-6);
            assert!(lane.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn head_shapes_and_neutral_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let head = AttentionHead::new(&mut store, 8, 128, &mut rng).unwrap();
    store.value_mut(head.gate.weight).fill(0.0);
    store.value_mut(head.gate.bias.unwrap()).fill(0.0);
    let mut g = Graph::new(false);
    let l1 = g.constant(randn4((1, 8, 64, 64), 1));
    let l2 = g.constant(randn4((1, 8, 64, 64), 2));
    let fc = g.constant(randn4((1, 128, 64, 64), 3));
    let out = attention_change_head(&mut g, &store, &head, l1, l2, fc, (256, 256)).unwrap();
    assert_eq!(g.shape4(out.gate), (1, 128, 64, 64));
    assert!(g.value(out.gate).iter().all(|&v| v == 0.5));
    assert_eq!(g.shape4(out.probability), (1, 1, 256, 256));
    assert!(g.value(out.probability).iter().all(|&v| (0.0..=1.0).contains(&v)));

    let small = g.constant(randn4((1, 128, 32, 32), 4));
    assert!(matches!(
        attention_change_head(&mut g, &store, &head, l1, l2, small, (256, 256)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn gate_lies_strictly_inside_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let head = AttentionHead::new(&mut store, 4, 6, &mut rng).unwrap();
    let mut g = Graph::new(false);
    let l1 = g.constant(randn4((1, 4, 8, 8), 1));
    let l2 = g.constant(randn4((1, 4, 8, 8), 2));
    let fc = g.constant(randn4((1, 6, 8, 8), 3));
    let out = attention_change_head(&mut g, &store, &head, l1, l2, fc, (32, 32)).unwrap();
    assert!(g.value(out.gate).iter().all(|&v| v > 0.0 && v < 1.0));
}

fn change_output(store: &ParamStore<f64>, emb: &ChangeEmbedding, a: &Array4<f64>, b: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let mut g = Graph::new(true);
    let f1 = g.constant(a.clone());
    let f2 = g.constant(b.clone());
    let out = change_embedding(&mut g, store, emb, f1, f2).unwrap();
    let joined = g.concat_channels(&[f1, f2]).unwrap();
    let projected = emb.projection.forward(&mut g, store, joined).unwrap();
    (g.value4(out).to_owned(), g.value4(projected).to_owned())
}

#[test]
fn change_embedding_shape_identity_and_nonlinearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let emb = ChangeEmbedding::new(&mut store, 192, 32, 6, &mut rng).unwrap();
    assert_eq!(emb.blocks.len(), 6);
    let a = randn4((1, 192, 64, 64), 11);
    let b = randn4((1, 192, 64, 64), 12);
    let (out, _) = change_output(&store, &emb, &a, &b);
    assert_eq!(out.dim(), (1, 32, 64, 64));

    let doubled = change_output(&store, &emb, &(&a * 2.0), &(&b * 2.0)).0;
    let max_dev = (&doubled - &(&out * 2.0)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_dev > 1e-3, "output scaled linearly (max deviation {max_dev})");

    emb.zero_residual_branches(&mut store);
    let (out, projected) = change_output(&store, &emb, &a, &b);
    assert_eq!(out, projected);

    let mut g = Graph::new(true);
    let f1 = g.constant(a);
    let f2 = g.constant(randn4((1, 192, 32, 32), 13));
    assert!(matches!(change_embedding(&mut g, &store, &emb, f1, f2), Err(Error::Dimension(_))));
}

#[test]
fn supervision_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = Array2::from_shape_simple_fn((9, 7), || rand::Rng::random::<f64>(&mut rng));
    let changed = Array2::from_shape_simple_fn((9, 7), || u8::from(rand::Rng::random_bool(&mut rng, 0.4)));
    let label = ChangeLabel::from_changed(changed.clone()).unwrap();
    let mut sum = 0.0;
    for ((i, j), &pv) in p.indexed_iter() {
        let q = pv.clamp(1e-7, 1.0 - 1e-7);
        sum -= if changed[[i, j]] == 1 { q.ln() } else { (1.0 - q).ln() };
    }
    let expected = sum / 63.0;
    let got = change_supervision_loss(&p, &label).unwrap();
    assert!((got - expected).abs() < 1e-12);

    let perfect = changed.mapv(f64::from);
    assert!(change_supervision_loss(&perfect, &label).unwrap() <= 2e-7);
}

#[test]
fn stub_encoder_is_not_part_of_the_trainable_set() {
    let model = SamCd::<f32>::new(tiny_config()).unwrap();
    assert!(model.store().iter().all(|(_, p)| !p.name.starts_with("encoder")));
    let names: Vec<_> = model.store().iter().map(|(_, p)| p.name.clone()).collect();
    for prefix in ["adaptor.", "fuse.", "semantic.", "change.", "head."] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "missing {prefix}");
    }
    assert!(matches!(
        StubEncoder::<f32>::new(&EncoderSpec { frozen: false, ..EncoderSpec::default() }),
        Err(Error::Config(_))
    ));
}

#[test]
fn external_pyramids_predict_like_the_stub() {
    let model = SamCd::<f64>::new(tiny_config()).unwrap();
    let t1 = uniform3((3, 64, 64), 1);
    let t2 = uniform3((3, 64, 64), 2);
    let enc = model.encoder().unwrap();
    let to_batch = |img: &Array3<f32>| img.mapv(f64::from).insert_axis(Axis(0));
    let mut records = Vec::new();
    for img in [&t1, &t2] {
        let p = enc.encode(to_batch(img).view()).unwrap();
        let mut buf = Vec::new();
        write_pyramid(&p, &mut buf).unwrap();
        records.push(buf);
    }
    let p1: FeaturePyramid<f64> = load_external_pyramid(&mut records[0].as_slice()).unwrap();
    let p2: FeaturePyramid<f64> = load_external_pyramid(&mut records[1].as_slice()).unwrap();
    let external = model.predict_external(&p1, &p2).unwrap();
    let direct = model.predict(t1.view(), t2.view()).unwrap();
    assert_eq!(external.probability, direct.probability);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rectified_adaptor_output(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let a = Adaptor::new(&mut store, 1, 3, 4, &mut rng).unwrap();
        let mut g = Graph::new(seed % 2 == 0);
        let x = g.constant(randn4((2, 3, 4, 4), seed));
        let y = adapt_level(&mut g, &store, &a, x).unwrap();
        prop_assert!(g.value(y).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn argmax_is_temperature_invariant(seed in 0u64..10_000, t in 0.05f64..50.0) {
        let values = randn4((1, 5, 3, 3), seed).index_axis_move(Axis(0), 0);
        let latent = SemanticLatent::new(values.clone()).unwrap();
        let p = tempered_softmax(&latent, t).unwrap();
        let argmax = |lane: ndarray::ArrayView1<f64>| {
            lane.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
        };
        for (a, b) in values.lanes(Axis(0)).into_iter().zip(p.values().lanes(Axis(0))) {
            prop_assert_eq!(argmax(a), argmax(b));
        }
    }

    #[test]
    fn temporal_loss_is_bounded_symmetric_and_mask_local(
        seed in 0u64..10_000,
        density in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = |s| randn4((1, 4, 4, 4), s).index_axis_move(Axis(0), 0) * 3.0;
        let norm = |v: Array3<f64>| tempered_softmax(&SemanticLatent::new(v).unwrap(), 3.0).unwrap();
        let l1 = norm(logits(seed));
        let l2 = norm(logits(seed + 1));
        let changed = Array2::from_shape_simple_fn((16, 16), || u8::from(rand::Rng::random_bool(&mut rng, density)));
        let label = ChangeLabel::from_changed(changed).unwrap();
        let loss = temporal_constraint_loss(&l1, &l2, &label).unwrap();
        prop_assert!((0.0..=2.0).contains(&loss));
        prop_assert_eq!(loss.to_bits(), temporal_constraint_loss(&l2, &l1, &label).unwrap().to_bits());

        // perturb only latent pixels whose resampled mask says "changed"
        let mask = samcd::semantic::unchanged_masks(&[&label], 4, 4);
        let mut perturbed = logits(seed + 1);
        let noise = logits(seed + 2);
        for ((c, y, x), v) in perturbed.indexed_iter_mut() {
            if mask[[0, y, x]] == 0 {
                *v += noise[[c, y, x]];
            }
        }
        let l2p = norm(perturbed);
        prop_assert_eq!(loss.to_bits(), temporal_constraint_loss(&l1, &l2p, &label).unwrap().to_bits());
    }
}
