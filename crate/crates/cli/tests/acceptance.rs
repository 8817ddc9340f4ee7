//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mmca::features::{build_windows, extract_frames, ExtractConfig, NormStats, NormalizedGrid};
use mmca::model::{Axis, Batch, Checkpoint, Mode, Model, ModelConfig, TDistForecast};
use mmca::numcore::special::{lgamma, student_t_cdf, student_t_quantile};
use mmca::numcore::{gradcheck, NumError, Tape, Tensor, Var};
use mmca::objective::{fit_t_errors, interval_eval, intervals, t_nll, t_nll_value};
use mmca::synth::{generate, RandomWaves, ScenarioConfig};
use mmca::training::{train, TrainConfig};
use mmca_cli::commands::{execute, rerun, Job, CHECKPOINT_FILE, DATASET_FILE, RUN_RECORD_FILE};
use mmca_cli::config::RunConfig;
use mmca_cli::manifest::MANIFEST_FILE;
use mmca_cli::pipeline::{evaluate, prepare, train_on, variant_config, ModelForecaster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use support::features_ref;
use support::{jittered, rand_tensor, ref_layer, run_layer, toy};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn num(e: impl std::fmt::Display) -> NumError {
    NumError::InvalidArgument(e.to_string())
}

// 1. Gradients

fn weighted(t: &mut Tape, y: Var) -> mmca::numcore::Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(Tensor::from_fn(&shape, |i| 0.3 + ((i * 7) % 11) as f64 / 5.0));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> mmca::numcore::Result<Var>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5));
    let (a, b, row, col, w) = (r(&[3, 4]), r(&[3, 4]), r(&[4]), r(&[3, 1]), r(&[4, 5]));
    let (ba, bb, beta, table) = (r(&[2, 3, 4]), r(&[2, 4, 3]), r(&[4]), r(&[6, 4]));
    let pos = a.map(|x| x.abs() + 0.5);
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
    macro_rules! case {
        ($name:expr, [$($x:expr),*], |$t:ident, $v:ident| $body:expr) => {
            ($name, vec![$($x.clone()),*], Box::new(move |$t: &mut Tape, $v: &[Var]| { let y = $body?; weighted($t, y) }) as OpFn)
        };
    }
    vec![
        case!("add", [a, b], |t, v| t.add(v[0], v[1])),
        case!("sub", [a, row], |t, v| t.sub(v[0], v[1])),
        case!("mul", [a, col], |t, v| t.mul(v[0], v[1])),
        case!("div", [a, pos], |t, v| t.div(v[0], v[1])),
        case!("matmul", [a, w], |t, v| t.matmul(v[0], v[1])),
        case!("batched matmul", [ba, bb], |t, v| t.matmul(v[0], v[1])),
        case!("transpose", [a], |t, v| t.transpose(v[0])),
        case!("permute", [ba], |t, v| t.permute(v[0], &[2, 0, 1])),
        case!("reshape", [a], |t, v| t.reshape(v[0], &[2, 6])),
        case!("concat", [a, b], |t, v| t.concat(&[v[0], v[1]])),
        case!("slice", [ba], |t, v| t.slice(v[0], 1, 1, 3)),
        case!("broadcast_to", [col], |t, v| t.broadcast_to(v[0], &[2, 3, 4])),
        case!("softmax", [a], |t, v| t.softmax(v[0], 1)),
        case!("layer_norm", [a, row, beta], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case!("relu", [away], |t, v| Ok::<_, NumError>(t.relu(v[0]))),
        case!("softplus", [a], |t, v| Ok::<_, NumError>(t.softplus(v[0]))),
        case!("exp", [a], |t, v| Ok::<_, NumError>(t.exp(v[0]))),
        case!("square", [a], |t, v| Ok::<_, NumError>(t.square(v[0]))),
        case!("scalar ops", [a], |t, v| {
            let m = t.mul_scalar(v[0], -0.7);
            Ok::<_, NumError>(t.add_scalar(m, 2.0))
        }),
        case!("ln", [pos], |t, v| t.ln(v[0])),
        case!("lgamma", [pos], |t, v| t.lgamma(v[0])),
        case!("dropout", [a], |t, v| t.dropout(v[0], 0.3, 99, true)),
        case!("embedding", [table], |t, v| t.embedding(v[0], &[5, 0, 5, 2, 1, 5], &[2, 3])),
        case!("sum_axis", [ba], |t, v| t.sum_axis(v[0], 1)),
        case!("mean_axis", [ba], |t, v| t.mean_axis(v[0], 2)),
        ("sum/mean", vec![ba.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
            let s = t.sum(v[0]);
            let m = t.mean(v[0]);
            let q = t.mul(s, m)?;
            Ok(t.square(q))
        })),
    ]
}

fn gradients() -> Outcome {
    let mut worst_op = (0.0f64, "");
    for seed in 0..5 {
        for (name, inputs, f) in op_cases(seed) {
            let rep = gradcheck::check(&inputs, 1e-5, f).map_err(|e| format!("{name}: {e}"))?;
            if rep.max_rel_error > worst_op.0 {
                worst_op = (rep.max_rel_error, name);
            }
        }
    }
    let mut worst_model = 0.0f64;
    for seed in 0..5u64 {
        let cfg = toy();
        let m = jittered(cfg.clone(), 100 + seed);
        let b = support::batch(&cfg, 2, 200 + seed);
        let rep = gradcheck::check_elements(&m.params.tensors, 1e-6, 3, |tape, vars| {
            let p = m.bind_vars(vars.to_vec()).map_err(num)?;
            let out = m.forward(tape, &p, &b, Mode::EVAL).map_err(num)?;
            let y = tape.constant(b.target.clone());
            t_nll(tape, out.mean, out.scale2, out.df, y).map_err(num)
        })
        .map_err(|e| e.to_string())?;
        worst_model = worst_model.max(rep.max_rel_error);
    }
    check(
        worst_op.0 < 1e-4 && worst_model < 1e-4,
        format!("worst op rel error {:.2e} ({}), toy model graph {:.2e}, 5 seeds", worst_op.0, worst_op.1, worst_model),
    )
}

// 2. Special functions

fn special_functions() -> Outcome {
    let pi = std::f64::consts::PI;
    let mut worst_lg = 0.0f64;
    for (x, want) in [(0.5, pi.sqrt().ln()), (1.0, 0.0), (2.0, 0.0), (10.0, 362880f64.ln())] {
        worst_lg = worst_lg.max((lgamma(x).map_err(|e| e.to_string())? - want).abs());
    }
    let mut worst_rt = 0.0f64;
    for p in [0.025, 0.05, 0.5, 0.95, 0.975] {
        for df in [1.0, 2.0, 5.0, 30.0, 1e6] {
            let q = student_t_quantile(p, df).map_err(|e| e.to_string())?;
            worst_rt = worst_rt.max((student_t_cdf(q, df).map_err(|e| e.to_string())? - p).abs());
        }
    }
    let cauchy = (student_t_quantile(0.75, 1.0).map_err(|e| e.to_string())? - 1.0).abs();
    check(
        worst_lg <= 1e-8 && worst_rt <= 1e-8 && cauchy <= 1e-8,
        format!("lgamma identities {worst_lg:.1e}, cdf(quantile) round trip {worst_rt:.1e}, Cauchy quartile {cauchy:.1e}"),
    )
}

// 3. t-NLL value

fn t_nll_reference() -> Outcome {
    let direct = t_nll_value(3.0, 3.0, 1.0, 2.0).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let c = |tape: &mut Tape, x: f64| tape.constant(Tensor::full(&[2, 3], x));
    let (m, s, d, y) = (c(&mut tape, 3.0), c(&mut tape, 1.0), c(&mut tape, 2.0), c(&mut tape, 3.0));
    let v = t_nll(&mut tape, m, s, d, y).map_err(|e| e.to_string())?;
    let graph = tape.value(v).data()[0];
    let want = 1.039_720_7;
    check(
        (direct - want).abs() <= 1e-6 && (graph - want).abs() <= 1e-6,
        format!("per-element {direct:.9}, graph mean {graph:.9}, reference {want}"),
    )
}

// 4. Attention invariants

fn attention_invariants() -> Outcome {
    let cfg = toy();
    let d = cfg.d_h();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut row_err = 0.0f64;
    let m = jittered(cfg.clone(), 3);
    for axis in [Axis::Spatial, Axis::Temporal] {
        let z = rand_tensor(&mut rng, &[2, 4, 4, d]);
        let mi = rand_tensor(&mut rng, &[2, 4, 4, d]);
        let (tape, _, trace) = run_layer(&m, axis, &z, Some(&mi));
        for probs in [Some(trace.self_probs), trace.cross_probs].into_iter().flatten() {
            let t = tape.value(probs);
            let s = *t.shape().last().unwrap();
            for row in t.data().chunks(s) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let mut exact = true;
    for (c, axis) in [(ModelConfig { n_segments: 1, ..toy() }, Axis::Spatial), (ModelConfig { history: 1, ..toy() }, Axis::Temporal)] {
        let m = jittered(c.clone(), 5);
        let a = if axis == Axis::Spatial { c.history } else { c.n_segments };
        let z = rand_tensor(&mut rng, &[3, a, 1, d]);
        let mi = rand_tensor(&mut rng, &[3, a, 1, d]);
        let (tape, _, trace) = run_layer(&m, axis, &z, Some(&mi));
        exact &= tape.value(trace.self_context).data() == tape.value(trace.self_values).data();
    }

    let mut worst = 0.0f64;
    let variants = [
        toy(),
        ModelConfig { use_cross_attention: false, ..toy() },
        ModelConfig { use_micro: false, ..toy() },
        ModelConfig { use_feed_forward: false, ..toy() },
    ];
    for (vi, c) in variants.into_iter().enumerate() {
        let m = jittered(c.clone(), 7 + vi as u64);
        for (axis, a, s) in [(Axis::Spatial, c.history, c.n_segments), (Axis::Temporal, c.n_segments, c.history)] {
            let b = 3;
            let z = rand_tensor(&mut rng, &[b, a, s, d]);
            let mi = rand_tensor(&mut rng, &[b, a, s, d]);
            let micro = c.use_micro.then_some(&mi);
            let (tape, out, _) = run_layer(&m, axis, &z, micro);
            let got = tape.value(out).data();
            let per = s * d;
            for e in 0..b * a {
                let ms = micro.map(|t| &t.data()[e * per..(e + 1) * per]);
                let want = ref_layer(&m, &format!("{}.1", axis.name()), &z.data()[e * per..(e + 1) * per], ms, s);
                for (x, y) in got[e * per..(e + 1) * per].iter().zip(&want) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    check(
        row_err <= 1e-6 && exact && worst <= 1e-10,
        format!("row sums within {row_err:.1e}, single-key layers return V exactly: {exact}, batched vs reference {worst:.1e}"),
    )
}

// 5. Feature extraction

fn feature_oracle() -> Outcome {
    let (trajs, index) = features_ref::sample();
    let grid = extract_frames(&trajs, &index, &ExtractConfig::default()).map_err(|e| e.to_string())?;
    let c = features_ref::compare(&trajs, &index, &grid);
    check(
        c.days_match && c.exact_mismatches == 0 && c.max_real_diff <= 1e-9 && c.seen.iter().all(|&n| n > 0),
        format!(
            "{} journeys, {} cells, {} integer mismatches, max real diff {:.1e}, class counts {:?}",
            trajs.len(),
            c.cells,
            c.exact_mismatches,
            c.max_real_diff,
            c.seen
        ),
    )
}

// 6. Calibration

fn calibration() -> Outcome {
    let n = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dfs = [2.5, 4.0, 10.0, 30.0];
    let mut fc = TDistForecast { shape: [n, 1, 1], mean: vec![], scale2: vec![], df: vec![] };
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (mu, sigma, nu) = (rng.random_range(10.0..70.0), rng.random_range(0.5..6.0), dfs[i % dfs.len()]);
        let t: f64 = StudentT::new(nu).unwrap().sample(&mut rng);
        y.push(mu + sigma * t);
        fc.mean.push(mu);
        fc.scale2.push(sigma * sigma);
        fc.df.push(nu);
    }
    let (lo, hi) = intervals(&fc, 0.1).map_err(|e| e.to_string())?;
    let rep = interval_eval(&lo, &hi, &y, &vec![0; n], 1, 0.1).map_err(|e| e.to_string())?;
    let mut want = 0.0;
    for (s2, nu) in fc.scale2.iter().zip(&fc.df) {
        want += 2.0 * student_t_quantile(0.95, *nu).map_err(|e| e.to_string())? * s2.sqrt();
    }
    want /= n as f64;
    check(
        (0.88..=0.92).contains(&rep.picp) && (rep.mpiw - want).abs() <= 1e-6,
        format!("PICP {:.4} on {n} draws, MPIW {:.6} vs closed form {want:.6}", rep.picp, rep.mpiw),
    )
}

// 7. Overfitting one day

const OVERFIT_WAVES: usize = 3;

fn overfit_model() -> ModelConfig {
    ModelConfig { n_segments: 8, d_f: 8, d_a: 16, layers: 2, heads: 2, dropout: 0.0, ..Default::default() }
}

fn overfit() -> Outcome {
    let started = Instant::now();
    let sc = generate(&ScenarioConfig {
        n_segments: 8,
        n_days: 1,
        random_waves: RandomWaves { per_day: OVERFIT_WAVES, ..Default::default() },
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let stats = NormStats::fit(&sc.frames, &[0]).map_err(|e| e.to_string())?;
    let (grid, _) = NormalizedGrid::new(&sc.frames, &stats).map_err(|e| e.to_string())?;
    let windows = build_windows(&sc.frames, 12, 12);
    let cfg = TrainConfig { max_epochs: 200, early_stop_patience: 200, batch_size: 16, learning_rate: 2e-3, ..Default::default() };
    let model = Model::new(overfit_model()).map_err(|e| e.to_string())?;
    let out = train(&model, &grid, &windows, &windows, &cfg).map_err(|e| e.to_string())?;
    let losses = out.record.train_losses();
    let first = losses[0];
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let drop = (first - best) / first.abs();
    let batch = Batch::gather(&grid, &windows, 12, 12).map_err(|e| e.to_string())?;
    let fc = out.model.predict(&batch).map_err(|e| e.to_string())?;
    let mae = fc.mean.iter().zip(&batch.target_mph).map(|(p, y)| (stats.denormalize_speed(*p) - y).abs()).sum::<f64>()
        / fc.mean.len() as f64;
    let secs = started.elapsed().as_secs_f64();
    check(
        drop >= 0.5 && mae < 1.5 && secs < 600.0,
        format!(
            "t-NLL {first:.3} -> {best:.3} ({:.0}% drop) over {} epochs, training MAE {mae:.3} mph, {secs:.0}s",
            drop * 100.0,
            losses.len()
        ),
    )
}

// 8. Micro features ahead of waves

const MICRO_TOML: &str = r#"
[scenario]
n_segments = 8
n_days = 3
lead = 2

[scenario.random_waves]
per_day = 6

[model]
d_f = 8
d_a = 16
layers = 2
heads = 2

[train]
max_epochs = 40
early_stop_patience = 8
batch_size = 16
learning_rate = 2e-3
"#;

fn micro_benefit() -> Outcome {
    let mut rows = Vec::new();
    for seed in 1..=3u64 {
        let cfg = RunConfig::from_toml(MICRO_TOML).map_err(|e| e.to_string())?.with_seed(Some(seed));
        let sc = generate(&cfg.scenario).map_err(|e| e.to_string())?;
        let p = prepare(&sc.frames, &cfg, None).map_err(|e| e.to_string())?;
        let base = mmca_cli::pipeline::model_config_for(&cfg, &sc.frames);
        let mut mae = [0.0; 2];
        for (k, variant) in ["full", "no_micro"].iter().enumerate() {
            let mc = variant_config(&base, variant).map_err(|e| e.to_string())?;
            let out = train_on(&p, mc, &cfg).map_err(|e| e.to_string())?;
            let fc = ModelForecaster { model: &out.model, stats: &p.stats };
            let eval = mmca_cli::config::EvalConfig { export_attention: false, ..cfg.eval.clone() };
            let ev = evaluate(&fc, &p.grid, &p.split.test, &sc.frames.segment_ids, &eval).map_err(|e| e.to_string())?;
            mae[k] = ev.metrics.overall.mae;
        }
        rows.push((seed, mae[0], mae[1], (mae[1] - mae[0]) / mae[1]));
    }
    let wins = rows.iter().filter(|r| r.1 < r.2).count();
    let mut red: Vec<f64> = rows.iter().map(|r| r.3).collect();
    red.sort_by(f64::total_cmp);
    let median = red[1];
    let detail = rows.iter().map(|r| format!("seed {}: {:.3} vs {:.3}", r.0, r.1, r.2)).collect::<Vec<_>>().join(", ");
    check(wins >= 2 && median > 0.0, format!("full beats no_micro {wins}/3, median MAE reduction {:.1}% ({detail})", median * 100.0))
}

// 9. Heavy tails

fn heavy_tails() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = StudentT::new(2.5).unwrap();
    let xs: Vec<f64> = (0..10_000).map(|_| t.sample(&mut rng)).collect();
    let fit = fit_t_errors(&xs).map_err(|e| e.to_string())?;
    check(
        (2.0..=3.2).contains(&fit.df) && fit.ks_statistic < 0.05,
        format!("fitted df {:.3}, loc {:.3}, scale {:.3}, K-S {:.4}", fit.df, fit.loc, fit.scale, fit.ks_statistic),
    )
}

// 10. Determinism

const DETERMINISM_TOML: &str = r#"
[scenario]
n_segments = 6
n_days = 2
seed = 12

[scenario.random_waves]
per_day = 2

[model]
d_f = 4
d_a = 8
layers = 1
heads = 2
dropout = 0.1

[train]
max_epochs = 3
early_stop_patience = 3
"#;

fn traces(dir: &std::path::Path) -> Result<Vec<(u64, u64)>, String> {
    let text = fs::read_to_string(dir.join(RUN_RECORD_FILE)).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).ok()?;
            Some((v.get("train_loss")?.as_f64()?.to_bits(), v.get("val_loss")?.as_f64()?.to_bits()))
        })
        .collect())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::from_toml(DETERMINISM_TOML).map_err(|e| e.to_string())?;
    let s = execute(&Job::Synth, cfg.clone(), tmp.path()).map_err(|e| e.to_string())?;
    let a = execute(&Job::Train { dataset: s.join(DATASET_FILE) }, cfg, tmp.path()).map_err(|e| e.to_string())?;
    let b = rerun(&a.join(MANIFEST_FILE), tmp.path()).map_err(|e| e.to_string())?;
    let (ta, tb) = (traces(&a)?, traces(&b)?);

    let read = |d: &std::path::Path| -> Result<Checkpoint, String> {
        Checkpoint::decode(&fs::read(d.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
    };
    let (ca, cb) = (read(&a)?, read(&b)?);
    let again = Checkpoint::decode(&ca.to_bytes().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let frames = mmca::dataset::Dataset::decode(&fs::read(s.join(DATASET_FILE)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.grid;
    let stats = ca.norm_stats.clone().ok_or("checkpoint lacks normalization")?;
    let (grid, _) = NormalizedGrid::new(&frames, &stats).map_err(|e| e.to_string())?;
    let windows = build_windows(&frames, 12, 12);
    let batch = Batch::gather(&grid, &windows[..16], 12, 12).map_err(|e| e.to_string())?;
    let bits = |m: &Model| -> Result<Vec<u64>, String> {
        let f = m.predict(&batch).map_err(|e| e.to_string())?;
        Ok(f.mean.iter().chain(&f.scale2).chain(&f.df).map(|x| x.to_bits()).collect())
    };
    let (pa, pb, pc) = (bits(&ca.model)?, bits(&cb.model)?, bits(&again.model)?);
    check(
        ta.len() == 3 && ta == tb && pa == pb && pa == pc,
        format!(
            "{} epochs, loss traces identical: {}, reloaded forward outputs bit-identical: {} ({} values)",
            ta.len(),
            ta == tb,
            pa == pb && pa == pc,
            pa.len()
        ),
    )
}

fn main() {
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradients),
        ("special functions", special_functions),
        ("t-NLL reference value", t_nll_reference),
        ("attention invariants", attention_invariants),
        ("feature extraction oracle", feature_oracle),
        ("interval calibration", calibration),
        ("overfit one day", overfit),
        ("micro-feature benefit", micro_benefit),
        ("heavy-tail diagnostics", heavy_tails),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS {:>2} {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
