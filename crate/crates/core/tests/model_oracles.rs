mod support;

use mmca::features::{MACRO_DIM, MICRO_DIM};
use mmca::model::{Axis, Batch, Checkpoint, Mode, ModelConfig};
use mmca::numcore::{gradcheck, Tape, Tensor};
use mmca::objective::t_nll;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn batched_layer_matches_single_example_reference() {
    let variants = [
        toy(),
        ModelConfig { use_cross_attention: false, ..toy() },
        ModelConfig { use_micro: false, ..toy() },
        ModelConfig { use_feed_forward: false, ..toy() },
    ];
    for (vi, cfg) in variants.into_iter().enumerate() {
        let m = jittered(cfg.clone(), 7 + vi as u64);
        let d = cfg.d_h();
        let mut rng = ChaCha8Rng::seed_from_u64(vi as u64);
        for (axis, a, s) in [(Axis::Spatial, cfg.history, cfg.n_segments), (Axis::Temporal, cfg.n_segments, cfg.history)] {
            let b = 3;
            let z = rand_tensor(&mut rng, &[b, a, s, d]);
            let mi = rand_tensor(&mut rng, &[b, a, s, d]);
            let micro = cfg.use_micro.then_some(&mi);
            let (tape, out, _) = run_layer(&m, axis, &z, micro);
            let got = tape.value(out).data();
            let per = s * d;
            let mut worst = 0.0f64;
            for e in 0..b * a {
                let zs = &z.data()[e * per..(e + 1) * per];
                let ms = micro.map(|t| &t.data()[e * per..(e + 1) * per]);
                let want = ref_layer(&m, &format!("{}.1", axis.name()), zs, ms, s);
                for (x, y) in got[e * per..(e + 1) * per].iter().zip(&want) {
                    worst = worst.max((x - y).abs());
                }
            }
            assert!(worst <= 1e-10, "variant {vi} {axis:?}: max diff {worst:e}");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = toy();
    let m = jittered(cfg.clone(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = cfg.d_h();
    let z = rand_tensor(&mut rng, &[2, 4, 4, d]);
    let mi = rand_tensor(&mut rng, &[2, 4, 4, d]);
    let (tape, _, trace) = run_layer(&m, Axis::Spatial, &z, Some(&mi));
    for probs in [trace.self_probs, trace.cross_probs.unwrap()] {
        let t = tape.value(probs);
        let s = *t.shape().last().unwrap();
        for row in t.data().chunks(s) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn single_key_attention_returns_values() {
    for (cfg, axis) in [
        (ModelConfig { n_segments: 1, ..toy() }, Axis::Spatial),
        (ModelConfig { history: 1, ..toy() }, Axis::Temporal),
    ] {
        let m = jittered(cfg.clone(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = cfg.d_h();
        let a = if axis == Axis::Spatial { cfg.history } else { cfg.n_segments };
        let z = rand_tensor(&mut rng, &[3, a, 1, d]);
        let mi = rand_tensor(&mut rng, &[3, a, 1, d]);
        let (tape, _, trace) = run_layer(&m, axis, &z, Some(&mi));
        assert_eq!(tape.value(trace.self_context).data(), tape.value(trace.self_values).data());
    }
}

#[test]
fn spatial_layer_is_permutation_equivariant() {
    let cfg = toy();
    let m = jittered(cfg.clone(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, h, n, d) = (2, cfg.history, cfg.n_segments, cfg.d_h());
    let z = rand_tensor(&mut rng, &[b, h, n, d]);
    let mi = rand_tensor(&mut rng, &[b, h, n, d]);
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor| {
        Tensor::from_fn(&[b, h, n, d], |i| {
            let (c, s, rest) = (i % d, (i / d) % n, i / (d * n));
            t.data()[(rest * n + perm[s]) * d + c]
        })
    };
    let (t1, o1, _) = run_layer(&m, Axis::Spatial, &z, Some(&mi));
    let (t2, o2, _) = run_layer(&m, Axis::Spatial, &permute(&z), Some(&permute(&mi)));
    assert!(permute(t1.value(o1)).max_abs_diff(t2.value(o2)) < 1e-12);
}

#[test]
fn micro_inputs_do_not_matter_without_micro() {
    let cfg = ModelConfig { use_micro: false, ..toy() };
    let m = jittered(cfg.clone(), 1);
    let b1 = batch(&cfg, 2, 8);
    let mut b2 = b1.clone();
    b2.micro_x = b2.micro_x.map(|v| v * 3.0 - 7.0);
    assert_eq!(m.predict(&b1).unwrap(), m.predict(&b2).unwrap());

    let all_masked = ModelConfig { micro_feature_mask: [true; 7], ..toy() };
    let m = jittered(all_masked.clone(), 1);
    assert_eq!(m.predict(&b1).unwrap(), m.predict(&b2).unwrap());
    let partly = ModelConfig { micro_feature_mask: [false, true, true, true, true, true, true], ..toy() };
    let m = jittered(partly, 1);
    assert_ne!(m.predict(&b1).unwrap(), m.predict(&b2).unwrap());
}

#[test]
fn batching_matches_one_example_at_a_time() {
    let cfg = toy();
    let m = jittered(cfg.clone(), 2);
    let full = batch(&cfg, 3, 21);
    let fc = m.predict(&full).unwrap();
    let (h, n, f) = (cfg.history, cfg.n_segments, cfg.horizon);
    for i in 0..3 {
        let one = Batch {
            size: 1,
            macro_x: Tensor::new(&[1, h, n, MACRO_DIM], full.macro_x.data()[i * h * n * MACRO_DIM..(i + 1) * h * n * MACRO_DIM].to_vec()).unwrap(),
            micro_x: Tensor::new(&[1, h, n, MICRO_DIM], full.micro_x.data()[i * h * n * MICRO_DIM..(i + 1) * h * n * MICRO_DIM].to_vec()).unwrap(),
            tod: full.tod[i * h..(i + 1) * h].to_vec(),
            dow: full.dow[i * h..(i + 1) * h].to_vec(),
            target: Tensor::zeros(&[1, n, f]),
            target_mph: vec![0.0; n * f],
        };
        let single = m.predict(&one).unwrap();
        for (x, y) in single.mean.iter().zip(&fc.mean[i * n * f..(i + 1) * n * f]) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn full_graph_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let cfg = toy();
        let m = jittered(cfg.clone(), 100 + seed);
        let b = batch(&cfg, 2, 200 + seed);
        let report = gradcheck::check_elements(&m.params.tensors, 1e-6, 3, |tape, vars| {
            let p = m.bind_vars(vars.to_vec()).map_err(|e| mmca::numcore::NumError::InvalidArgument(e.to_string()))?;
            let out = m.forward(tape, &p, &b, Mode::EVAL).map_err(|e| mmca::numcore::NumError::InvalidArgument(e.to_string()))?;
            let y = tape.constant(b.target.clone());
            t_nll(tape, out.mean, out.scale2, out.df, y).map_err(|e| mmca::numcore::NumError::InvalidArgument(e.to_string()))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?} ({})", m.params.names[report.worst.0]);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = toy();
    let m = jittered(cfg.clone(), 6);
    let ck = Checkpoint { model: m.clone(), norm_stats: None };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.model, m);
    let b = batch(&cfg, 2, 5);
    let (x, y) = (m.predict(&b).unwrap(), back.model.predict(&b).unwrap());
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x.mean), bits(&y.mean));
    assert_eq!(bits(&x.scale2), bits(&y.scale2));
    assert_eq!(bits(&x.df), bits(&y.df));

    assert!(Checkpoint::decode(&bytes[..bytes.len() - 8]).is_err());
    assert!(Checkpoint::decode(b"{}\n").is_err());
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(Checkpoint::decode(&bad).is_err());
}

#[test]
fn dropout_is_deterministic_per_seed() {
    let cfg = toy();
    let m = jittered(cfg.clone(), 4);
    let b = batch(&cfg, 2, 3);
    let run = |seed| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let out = m.forward(&mut tape, &p, &b, Mode { train: true, seed, capture_scores: false }).unwrap();
        tape.value(out.mean).data().to_vec()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}
