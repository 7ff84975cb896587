use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistr_core::losses::{hungarian_loss, LossWeights};
use vistr_core::model::{query_count, MaskFeatureSource, ModelConfig, QueryMode, VisTr};
use vistr_core::synth::{generate_clip, SynthConfig};
use vistr_tensor::{ParamStore, Tape, Tensor};

fn small(t: usize) -> ModelConfig {
    ModelConfig {
        d: 24,
        n: 3,
        t,
        height: 32,
        width: 48,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 4,
        ffn_dim: 32,
        k: 3,
        mask_channels: 4,
        ..ModelConfig::default()
    }
}

fn build<E: vistr_tensor::Float>(cfg: ModelConfig, seed: u64) -> (VisTr, ParamStore<E>) {
    let mut store = ParamStore::new();
    let model = VisTr::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, store)
}

fn random_frames<E: vistr_tensor::Float>(cfg: &ModelConfig, seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.t * 3 * cfg.height * cfg.width;
    Tensor::from_f64(&[cfg.t, 3, cfg.height, cfg.width], &(0..len).map(|_| rng.gen::<f64>()).collect::<Vec<_>>()).unwrap()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

fn distinct(rs: &[Vec<f64>]) -> usize {
    let mut u: Vec<&Vec<f64>> = Vec::new();
    for r in rs {
        if !u.contains(&r) {
            u.push(r);
        }
    }
    u.len()
}

#[test]
fn desk_scale_shapes() {
    let cfg = ModelConfig::default();
    let (model, store) = build::<f32>(cfg.clone(), 0);
    let (clip, _) = generate_clip(&SynthConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &clip.frames).unwrap();
    assert_eq!(tape.shape(out.f0), &[6, 128, 12, 20]);
    assert_eq!(tape.shape(out.f1), &[6, 96, 12, 20]);
    assert_eq!(tape.shape(out.fusion_features), &[6, 32, 24, 40]);
    assert_eq!(tape.shape(out.memory), &[6 * 12 * 20, 96]);
    assert_eq!(tape.shape(out.instance_features), &[30, 96]);
    assert_eq!(tape.shape(out.preds.class_logits), &[30, 4]);
    assert_eq!(tape.shape(out.preds.boxes), &[30, 4]);
    assert_eq!(tape.shape(out.mask_features), &[5, 8, 6, 24, 40]);
    assert_eq!(tape.shape(out.preds.mask_logits), &[5, 6, 24, 40]);
    assert_eq!(tape.shape(out.mask_attention), &[30, 8, 12, 20]);
    for v in tape.value(out.preds.boxes).data() {
        assert!((0.0..=1.0).contains(v));
    }
    assert_eq!(cfg.num_predictions(), 30);
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small(2);
    let (model, store) = build::<f64>(cfg.clone(), 1);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &random_frames(&cfg, 2)).unwrap();
    let check = |t: &Tensor<f64>, width: usize| {
        for row in t.data().chunks(width) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    };
    for &a in out.encoder_attention.iter().chain(&out.decoder_attention) {
        let s = tape.shape(a).to_vec();
        check(tape.value(a), s[s.len() - 1]);
    }
    // Mask-head maps are distributions over each frame's spatial grid.
    let (h, w) = cfg.feature_hw();
    check(tape.value(out.mask_attention), h * w);
}

#[test]
fn frames_share_backbone_weights() {
    let cfg = small(2);
    let (model, store) = build::<f64>(cfg.clone(), 3);
    let one = random_frames::<f64>(&ModelConfig { t: 1, ..cfg.clone() }, 4);
    let twice: Vec<f64> = one.data().iter().chain(one.data()).copied().collect();
    let frames = Tensor::new(vec![2, 3, cfg.height, cfg.width], twice).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(frames);
    let (f0, _) = model.backbone_forward(&mut tape, &p, x).unwrap();
    let d = tape.value(f0).data();
    let half = d.len() / 2;
    assert_eq!(&d[..half], &d[half..]);
}

#[test]
fn zero_input_gives_zero_features() {
    let cfg = small(1);
    let (model, store) = build::<f64>(cfg.clone(), 5);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 3, cfg.height, cfg.width]));
    let (f0, _) = model.backbone_forward(&mut tape, &p, x).unwrap();
    assert!(tape.value(f0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_stacks_without_layers() {
    let cfg = ModelConfig { encoder_layers: 0, decoder_layers: 0, ..small(2) };
    let (model, store) = build::<f64>(cfg.clone(), 6);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &random_frames(&cfg, 7)).unwrap();
    let flat = VisTr::flatten(&mut tape, out.f1).unwrap();
    assert_eq!(tape.value(out.memory), tape.value(flat));
    assert_eq!(tape.value(out.instance_features), tape.value(out.queries));
    assert!(out.encoder_attention.is_empty());
}

#[test]
fn flatten_round_trips() {
    let cfg = small(2);
    let (model, _) = build::<f64>(cfg.clone(), 8);
    let (h, w) = cfg.feature_hw();
    let mut tape = Tape::<f64>::new();
    let map = tape.leaf(random_frames::<f64>(&ModelConfig { height: h, width: w * 8, ..cfg.clone() }, 9).reshape(&[2, 24, h, w]).unwrap());
    let tokens = VisTr::flatten(&mut tape, map).unwrap();
    assert_eq!(tape.shape(tokens), &[2 * h * w, 24]);
    let back = VisTr::unflatten(&mut tape, tokens, model.raster()).unwrap();
    assert_eq!(tape.value(back), tape.value(map));
    // Token (t, y, x) holds the map's column at that location.
    let r = model.raster();
    let i = r.index(1, 2, 3);
    assert_eq!(tape.value(tokens).at(&[i, 5]), tape.value(map).at(&[1, 5, 2, 3]));
}

#[test]
fn sequence_length_arithmetic() {
    let cfg = ModelConfig { t: 6, height: 64, width: 80, ..ModelConfig::default() };
    let (h, w) = cfg.feature_hw();
    assert_eq!(cfg.t * h * w, 480);
    assert_eq!(ModelConfig::default().feature_hw(), (12, 20));
}

#[test]
fn query_sharing_levels() {
    // Counts of learned embeddings: 360 per prediction, 10 per instance,
    // 36 per frame and 1 per video at n=10, T=36.
    assert_eq!(query_count(QueryMode::Prediction, 10, 36), 360);
    assert_eq!(query_count(QueryMode::Instance, 10, 36), 10);
    assert_eq!(query_count(QueryMode::Frame, 10, 36), 36);
    assert_eq!(query_count(QueryMode::Video, 10, 36), 1);
    assert_eq!(ModelConfig { n: 10, t: 36, ..ModelConfig::default() }.num_predictions(), 360);

    for (mode, unique) in [(QueryMode::Prediction, 360), (QueryMode::Instance, 10), (QueryMode::Frame, 36), (QueryMode::Video, 1)] {
        let cfg = ModelConfig { n: 10, t: 36, height: 16, width: 16, query_mode: mode, ..small(36) };
        let (model, store) = build::<f64>(cfg, 10);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = model.build_queries(&mut tape, &p).unwrap();
        assert_eq!(tape.shape(q), &[360, 24]);
        let rs = rows(tape.value(q));
        assert_eq!(distinct(&rs), unique, "{mode:?}");
        if mode == QueryMode::Instance {
            for j in 0..350 {
                assert_eq!(rs[j], rs[j + 10]);
            }
        }
    }
}

#[test]
fn class_head_has_background_column() {
    let cfg = ModelConfig { k: 40, ..small(1) };
    let (model, store) = build::<f64>(cfg.clone(), 11);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &random_frames(&cfg, 12)).unwrap();
    assert_eq!(tape.shape(out.preds.class_logits), &[3, 41]);
}

#[test]
fn zeroed_heads_give_centered_boxes_and_uniform_classes() {
    let cfg = small(2);
    let (model, mut store) = build::<f64>(cfg.clone(), 13);
    for name in ["class_embed.weight", "class_embed.bias", "bbox_embed.layers.2.weight", "bbox_embed.layers.2.bias"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).value.shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &random_frames(&cfg, 14)).unwrap();
    assert!(tape.value(out.preds.boxes).data().iter().all(|&v| v == 0.5));
    let values = out.preds.values(&tape);
    assert!(values.probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn decoder_is_permutation_equivariant() {
    let cfg = ModelConfig { decoder_layers: 2, ..small(2) };
    let (model, store) = build::<f64>(cfg.clone(), 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (h, w) = cfg.feature_hw();
    let l = cfg.t * h * w;
    let memory: Vec<f64> = (0..l * 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let queries: Vec<f64> = (0..6 * 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut swapped = queries.clone();
    for c in 0..24 {
        swapped.swap(c + 24, 4 * 24 + c);
    }
    let run = |q: &[f64]| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let m = tape.constant(Tensor::from_f64(&[l, 24], &memory).unwrap());
        let q = tape.constant(Tensor::from_f64(&[6, 24], q).unwrap());
        let (o, _) = model.decoder_forward(&mut tape, &p, m, None, q).unwrap();
        rows(tape.value(o))
    };
    let (a, b) = (run(&queries), run(&swapped));
    for (i, j) in [(0, 0), (1, 4), (4, 1), (2, 2), (3, 3), (5, 5)] {
        for c in 0..24 {
            assert!((a[i][c] - b[j][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn mask_sources_and_heads_agree_on_shape() {
    for (source, three_d) in [(MaskFeatureSource::Encoder, true), (MaskFeatureSource::Backbone, true), (MaskFeatureSource::Encoder, false)] {
        let cfg = ModelConfig { mask_feature_source: source, use_3d_head: three_d, ..small(3) };
        let (model, store) = build::<f64>(cfg.clone(), 17);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &random_frames(&cfg, 18)).unwrap();
        let (h4, w4) = cfg.mask_hw();
        assert_eq!((h4, w4), (8, 12));
        assert_eq!(tape.shape(out.mask_features), &[3, 4, 3, 8, 12]);
        assert_eq!(tape.shape(out.preds.mask_logits), &[3, 3, 8, 12]);
    }
}

/// With no encoder layers, no positional encoding, instance-shared queries
/// and the per-frame head, swapping two input frames swaps the per-frame
/// outputs.
#[test]
fn frame_swap_moves_outputs_in_lockstep() {
    let cfg = ModelConfig {
        encoder_layers: 0,
        use_positional: false,
        query_mode: QueryMode::Instance,
        use_3d_head: false,
        ..small(2)
    };
    let (model, store) = build::<f64>(cfg.clone(), 19);
    let frames = random_frames::<f64>(&cfg, 20);
    let half = frames.len() / 2;
    let swapped: Vec<f64> = frames.data()[half..].iter().chain(&frames.data()[..half]).copied().collect();
    let swapped = Tensor::new(frames.shape().to_vec(), swapped).unwrap();
    let run = |f: &Tensor<f64>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, f).unwrap();
        (tape.value(out.preds.mask_logits).clone(), tape.value(out.preds.class_logits).clone())
    };
    let (ma, ca) = run(&frames);
    let (mb, cb) = run(&swapped);
    let (n, hw) = (cfg.n, 8 * 12);
    for s in 0..n {
        for f in 0..2 {
            let a = &ma.data()[(s * 2 + f) * hw..(s * 2 + f + 1) * hw];
            let b = &mb.data()[(s * 2 + (1 - f)) * hw..(s * 2 + (1 - f) + 1) * hw];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
    assert!(ca.max_abs_diff(&cb) < 1e-9);
}

#[test]
fn forward_is_deterministic() {
    let cfg = small(2);
    let frames = random_frames::<f32>(&cfg, 21);
    let run = || {
        let (model, store) = build::<f32>(cfg.clone(), 22);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &frames).unwrap();
        tape.value(out.preds.mask_logits).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_parameter_gets_gradient() {
    let cfg = ModelConfig::default();
    let (model, store) = build::<f32>(cfg, 23);
    let (clip, truths) = generate_clip(&SynthConfig { min_instances: 3, ..SynthConfig::default() }, 2).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &clip.frames).unwrap();
    let loss = hungarian_loss(&mut tape, &out.preds, &truths, &LossWeights::default()).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    let grads = store.collect_grads(&p, &grads);
    for ((_, param), g) in store.iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{} receives no gradient", param.name);
    }
}

#[test]
fn bad_configs_rejected() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cfg in [
        ModelConfig { d: 32, ..small(1) },
        ModelConfig { heads: 5, ..small(1) },
        ModelConfig { height: 30, ..small(1) },
    ] {
        assert!(VisTr::new(cfg, &mut store, &mut rng).is_err());
    }
    let (model, store) = build::<f32>(small(2), 0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    assert!(model.forward(&mut tape, &p, &Tensor::zeros(&[3, 3, 32, 48])).is_err());
}
