//! Acceptance suite for the whole pipeline. Each criterion is one test that
//! prints a single PASS line when it holds:
//!
//! 1. rendering oracle equivalence + telescoping opacity identity
//! 2. finite-difference gradient checks for every differentiable stage
//! 3. attention symmetries (view permutation, task exchange)
//! 4. metric closed forms
//! 5. end-to-end desk training run with quality thresholds
//! 6. ablation harness: full model vs no-CVA / no-CTA variants
//! 7. annotation-predictor inference: substitution identity + trained run
//! 8. on-disk format round trips (dataset + checkpoint)

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use muvie_core::decoder::{compose_prediction, Ablation, Decoder, DecoderConfig, EmptyPointPolicy};
use muvie_core::evalsuite::{
    evaluate_model, miou, psnr, HeuristicPredictor, ModelPredictor, Report, ViewPredictor,
};
use muvie_core::model::{
    nearest_source_frames, render_view, Model, ModelConfig, Task, ValueSource,
};
use muvie_core::nn::{ParamStore, Session};
use muvie_core::renderer::{composite, composite_on_tape, RaySampleBatch, TaskSamples};
use muvie_core::setting2::PredictedBundle;
use muvie_core::tape::{max_rel_err, Arr, Tape, Var};
use muvie_core::toyscenes::{
    default_orbit, generate_dataset, generate_dataset_root, load_dataset, load_dataset_root,
    SceneData, SceneSpec, NUM_CLASSES,
};
use muvie_core::training::{
    load_checkpoint, save_checkpoint, task_loss, train, Adam, LossWeights, Trainable,
    TrainOptions, TwoStageSchedule,
};

fn pass(criterion: usize, name: &str, detail: &str) {
    println!("ACCEPTANCE {criterion} ({name}): PASS  {detail}");
}

// ---------------------------------------------------------------- criterion 1

/// Direct summation of the rendering equations, recomputing the
/// transmittance exponent from scratch per sample.
fn direct_summation(sigma: &[f64], delta: &[f64], values: &[f64], channels: usize) -> Vec<f64> {
    let m = sigma.len();
    let mut out = vec![0.0; channels];
    for i in 0..m {
        let mut exponent = 0.0;
        for j in 0..i {
            exponent += delta[j] * sigma[j];
        }
        let w = (-exponent).exp() * (1.0 - (-delta[i] * sigma[i]).exp());
        for c in 0..channels {
            out[c] += w * values[i * channels + c];
        }
    }
    out
}

#[test]
fn criterion_1_rendering_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_value = 0.0f64;
    let mut worst_telescope = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=8);
        let channels = rng.random_range(1..=4);
        let sigma: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 5.0).collect();
        let delta: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 0.8 + 1e-4).collect();
        let values: Vec<f64> = (0..m * channels)
            .map(|_| rng.random::<f64>() * 6.0 - 3.0)
            .collect();

        let batch = RaySampleBatch {
            t: (0..m).map(|i| i as f64 * 0.1).collect(),
            delta: delta.clone(),
            sigma: sigma.clone(),
            values: vec![TaskSamples {
                channels,
                data: values.clone(),
            }],
        };
        let out = composite(&batch).expect("valid batch");
        let oracle = direct_summation(&sigma, &delta, &values, channels);
        for c in 0..channels {
            worst_value = worst_value.max((out.values[0][c] - oracle[c]).abs());
        }
        let total: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
        worst_telescope = worst_telescope.max((out.opacity - (1.0 - (-total).exp())).abs());
        assert!(out.opacity < 1.0);
    }
    assert!(
        worst_value < 1e-6,
        "composite deviates from direct summation by {worst_value}"
    );
    assert!(
        worst_telescope < 1e-6,
        "telescoping identity violated by {worst_telescope}"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}, budget 5 s");
    pass(
        1,
        "rendering oracle equivalence",
        &format!("max value err {worst_value:.2e}, max opacity err {worst_telescope:.2e}, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------- criterion 2

fn tiny_decoder() -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dec = Decoder::new(
        &mut store,
        &mut rng,
        DecoderConfig {
            n_tasks: 3, // K=2 plus RGB
            d_scene: 4,
            d_task: 4,
            d_prompt: 2,
            heads: 1,
            hidden: 8,
            cva_depth: 2,
            cta_depth: 2,
            angle_frequencies: 2,
            ablation: Ablation::Full,
        },
    );
    (store, dec)
}

fn decoder_inputs(seed: u64) -> (Arr, Array2<f64>, Vec<Vec<bool>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, v, d) = (2usize, 2usize, 4usize);
    let feat = Arr::from_shape_fn(IxDyn(&[p, v, d]), |_| rng.random::<f64>() - 0.5);
    let angles = Array2::from_shape_fn((p, v), |_| rng.random::<f64>() * 2.0);
    (feat, angles, vec![vec![true; v]; p])
}

/// Finite-difference check of the gradient w.r.t. chosen parameters of a
/// scalar objective built on a session.
fn check_param_grads(
    store: &mut ParamStore,
    param_names: &[&str],
    build: &dyn Fn(&Session) -> Var,
    eps: f64,
) -> f64 {
    let (grads, bound): (muvie_core::tape::Gradients, Vec<Option<Var>>) = {
        let tape = Tape::new();
        let session = Session::new(&tape, store);
        let out = build(&session);
        let grads = tape.backward(out);
        let bound = param_names
            .iter()
            .map(|n| session.bound_var(store.id_by_name(n).unwrap()))
            .collect();
        (grads, bound)
    };
    let mut worst = 0.0f64;
    for (name, var) in param_names.iter().zip(bound) {
        let id = store.id_by_name(name).unwrap();
        let base = store.value(id).clone();
        let analytic = var
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Arr::zeros(base.raw_dim()));
        let mut numeric = Arr::zeros(base.raw_dim());
        for i in 0..base.len() {
            for (sign, slot) in [(1.0, 0), (-1.0, 1)] {
                let mut probe = base.clone();
                probe.as_slice_mut().unwrap()[i] += sign * eps;
                store.set_value_exact(id, probe);
                let tape = Tape::new();
                let session = Session::new(&tape, store);
                let out = build(&session);
                let val = *tape.to_owned_value(out).first().unwrap();
                if slot == 0 {
                    numeric.as_slice_mut().unwrap()[i] = val;
                } else {
                    numeric.as_slice_mut().unwrap()[i] =
                        (numeric.as_slice().unwrap()[i] - val) / (2.0 * eps);
                }
            }
        }
        store.set_value_exact(id, base);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

#[test]
fn criterion_2_gradient_checks() {
    let started = Instant::now();
    let eps = 1e-4;
    let tol = 1e-4;
    let mut report = Vec::new();

    // composite w.r.t. densities and sampled values
    {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let sigma = Arr::from_shape_fn(IxDyn(&[2, 4]), |_| rng.random::<f64>() * 2.0 + 0.05);
        let vals = Arr::from_shape_fn(IxDyn(&[2, 4, 2]), |_| rng.random::<f64>() - 0.5);
        let delta = Arr::from_shape_fn(IxDyn(&[2, 4]), |_| rng.random::<f64>() * 0.4 + 0.05);
        let d2 = delta.clone();
        let err = muvie_core::tape::check_gradients(
            &move |t, vs| {
                let (rendered, _w, opacity) = composite_on_tape(t, vs[0], d2.clone(), &[vs[1]]);
                t.add(t.sum_all(rendered[0]), t.sum_all(opacity))
            },
            &[sigma, vals],
            eps,
        );
        assert!(err < tol, "composite gradients: rel err {err}");
        report.push(format!("composite {err:.1e}"));
    }

    let (mut store, dec) = tiny_decoder();
    let (feat, angles, mask) = decoder_inputs(23);

    // full decoder w.r.t. input features (covers cva+cta+heads end to end)
    {
        let a2 = angles.clone();
        let m2 = mask.clone();
        let dref = &dec;
        let sref = &store;
        let err = muvie_core::tape::check_gradients(
            &move |t, vs| {
                let s = Session::new(t, sref);
                let out = dref
                    .forward(&s, vs[0], &a2, &m2, EmptyPointPolicy::Error)
                    .unwrap();
                t.add(
                    t.sum_all(out.sigma),
                    t.affine(t.sum_all(out.weights), 0.31, 0.0),
                )
            },
            &[feat.clone()],
            eps,
        );
        assert!(err < tol, "decoder input gradients: rel err {err}");
        report.push(format!("decoder-input {err:.1e}"));
    }

    // per-module parameter gradients
    let cases: Vec<(&str, Vec<&str>)> = vec![
        (
            "cva",
            vec!["dec.cva.0.attn.wq.w", "dec.cva.0.attn.wv.w", "dec.cva.1.mlp.0.w"],
        ),
        (
            "cta",
            vec![
                "dec.prompts",
                "dec.cta.stage1.wk.w",
                "dec.cta.stage2.0.attn.wq.w",
                "dec.cta.stage2.1.mlp.0.w",
            ],
        ),
        ("density_head", vec!["dec.density.0.w", "dec.density.1.b"]),
        ("weight_head", vec!["dec.weight.0.w", "dec.weight.1.b"]),
    ];
    for (label, names) in cases {
        let feat_c = feat.clone();
        let angles_c = angles.clone();
        let mask_c = mask.clone();
        let dref = &dec;
        let err = check_param_grads(
            &mut store,
            &names,
            &|s| {
                let t = s.tape;
                let fv = t.constant(feat_c.clone());
                let out = dref
                    .forward(s, fv, &angles_c, &mask_c, EmptyPointPolicy::Error)
                    .unwrap();
                t.add(
                    t.sum_all(out.sigma),
                    t.affine(t.sum_all(out.weights), 0.31, 0.0),
                )
            },
            eps,
        );
        assert!(err < tol, "{label} parameter gradients: rel err {err}");
        report.push(format!("{label} {err:.1e}"));
    }

    // task losses w.r.t. predictions
    {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for task in [Task::Rgb, Task::Sn, Task::Sl] {
            let c = task.channels();
            let pred0 = Arr::from_shape_fn(IxDyn(&[3, c]), |_| rng.random::<f64>() * 0.5 + 0.2);
            let gt = if task == Task::Sl {
                let mut g = Arr::zeros(IxDyn(&[3, c]));
                for i in 0..3 {
                    g[[i, i % c]] = 1.0;
                }
                g
            } else {
                Arr::from_shape_fn(IxDyn(&[3, c]), |_| rng.random::<f64>())
            };
            let gt2 = gt.clone();
            let err = muvie_core::tape::check_gradients(
                &move |t, vs| task_loss(t, task, vs[0], &gt2),
                &[pred0],
                eps,
            );
            assert!(err < tol, "task_loss({}) gradients: rel err {err}", task.name());
            report.push(format!("loss-{} {err:.1e}", task.name()));
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 1 min");
    pass(2, "gradient checks", &format!("{} ({elapsed:?})", report.join(", ")));
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_attention_symmetries() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let tol = 1e-6;
    for case in 0..100 {
        let v = rng.random_range(1..=4usize);
        let k1 = rng.random_range(2..=5usize);
        let d = [4usize, 8][rng.random_range(0..2usize)];
        let p = rng.random_range(1..=2usize);
        let cfg = DecoderConfig {
            n_tasks: k1,
            d_scene: d,
            d_task: d,
            d_prompt: d / 2,
            heads: if d == 8 { 2 } else { 1 },
            hidden: d * 2,
            cva_depth: 2,
            cta_depth: 2,
            angle_frequencies: 2,
            ablation: Ablation::Full,
        };
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(1000 + case);
        let dec = Decoder::new(&mut store, &mut prng, cfg);

        let feat = Arr::from_shape_fn(IxDyn(&[p, v, d]), |_| rng.random::<f64>() - 0.5);
        let angles = Array2::from_shape_fn((p, v), |_| rng.random::<f64>() * 3.0);
        let mut mask = vec![vec![true; v]; p];
        if v > 1 {
            // mask one view somewhere, keeping at least one valid
            mask[rng.random_range(0..p)][rng.random_range(0..v)] = false;
        }
        let values: Vec<Arr> = (0..k1)
            .map(|_| Arr::from_shape_fn(IxDyn(&[p, v, 2]), |_| rng.random::<f64>()))
            .collect();

        // random view permutation
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(&mut rng);

        fn run(
            store: &ParamStore,
            dec: &Decoder,
            feat: &Arr,
            angles: &Array2<f64>,
            mask: &[Vec<bool>],
            values: &[Arr],
        ) -> (Arr, Arr, Vec<Arr>) {
            let tape = Tape::new();
            let s = Session::new(&tape, store);
            let out = dec
                .forward(&s, tape.constant(feat.clone()), angles, mask, EmptyPointPolicy::Error)
                .unwrap();
            let vals: Vec<Var> = values.iter().map(|a| tape.constant(a.clone())).collect();
            let preds = compose_prediction(&tape, out.weights, &vals).unwrap();
            (
                tape.to_owned_value(out.sigma),
                tape.to_owned_value(out.weights),
                preds.iter().map(|&pv| tape.to_owned_value(pv)).collect::<Vec<_>>(),
            )
        }

        let (sig_a, w_a, y_a) = run(&store, &dec, &feat, &angles, &mask, &values);

        let mut feat_p = Arr::zeros(IxDyn(&[p, v, d]));
        let mut angles_p = Array2::zeros((p, v));
        let mut mask_p = vec![vec![true; v]; p];
        let mut values_p: Vec<Arr> = values.clone();
        for pi in 0..p {
            for vi in 0..v {
                for di in 0..d {
                    feat_p[[pi, vi, di]] = feat[[pi, perm[vi], di]];
                }
                angles_p[[pi, vi]] = angles[[pi, perm[vi]]];
                mask_p[pi][vi] = mask[pi][perm[vi]];
            }
        }
        for (j, val) in values_p.iter_mut().enumerate() {
            for pi in 0..p {
                for vi in 0..v {
                    for c in 0..2 {
                        val[[pi, vi, c]] = values[j][[pi, perm[vi], c]];
                    }
                }
            }
        }
        let (sig_b, w_b, y_b) = run(&store, &dec, &feat_p, &angles_p, &mask_p, &values_p);

        for pi in 0..p {
            assert!(
                (sig_a[[pi]] - sig_b[[pi]]).abs() < tol,
                "case {case}: sigma changed under view permutation"
            );
            for j in 0..k1 {
                for vi in 0..v {
                    assert!(
                        (w_a[[pi, j, perm[vi]]] - w_b[[pi, j, vi]]).abs() < tol,
                        "case {case}: weights not permuted consistently"
                    );
                }
                for c in 0..2 {
                    assert!(
                        (y_a[j][[pi, c]] - y_b[j][[pi, c]]).abs() < tol,
                        "case {case}: prediction changed under view permutation"
                    );
                }
            }
        }

        // task-exchange symmetry: equal prompts and equal broadcast MLPs
        let pid = store.id_by_name("dec.prompts").unwrap();
        let mut pv2 = store.value(pid).clone();
        for j in 1..k1 {
            for di in 0..pv2.shape()[1] {
                let v0 = pv2[[0, di]];
                pv2[[j, di]] = v0;
            }
        }
        store.set_value(pid, pv2);
        for j in 1..k1 {
            for layer in 0..2 {
                for part in ["w", "b"] {
                    let src = store
                        .id_by_name(&format!("dec.broadcast.0.{layer}.{part}"))
                        .unwrap();
                    let dst = store
                        .id_by_name(&format!("dec.broadcast.{j}.{layer}.{part}"))
                        .unwrap();
                    let vsrc = store.value(src).clone();
                    store.set_value(dst, vsrc);
                }
            }
        }
        let (_, w_eq, _) = run(&store, &dec, &feat, &angles, &mask, &values);
        for pi in 0..p {
            for j in 1..k1 {
                for vi in 0..v {
                    assert!(
                        (w_eq[[pi, 0, vi]] - w_eq[[pi, j, vi]]).abs() < tol,
                        "case {case}: task branches differ under equal prompts"
                    );
                }
            }
        }
    }
    pass(3, "attention symmetries", "100 random configurations, tol 1e-6");
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_metric_closed_forms() {
    // PSNR at MSE = 0.01 is 20 dB
    let gt = vec![0.0; 64];
    let pred = vec![0.1; 64];
    let p = psnr(&pred, &gt).unwrap();
    assert!((p - 20.0).abs() < 1e-9, "psnr {p}");

    // cross-entropy of a uniform 13-class distribution is ln 13
    let tape = Tape::new();
    let c = 13;
    let mut probs = Arr::zeros(IxDyn(&[1, c]));
    probs.fill(1.0 / c as f64);
    let mut onehot = Arr::zeros(IxDyn(&[1, c]));
    onehot[[0, 7]] = 1.0;
    let pred_var = tape.constant(probs);
    let ce = task_loss(&tape, Task::Sl, pred_var, &onehot);
    let got = *tape.to_owned_value(ce).first().unwrap();
    assert!((got - (13.0f64).ln()).abs() < 1e-6, "ce {got}");

    // hand-counted 4-pixel mIoU
    let m = miou(&[1, 1, 1, 1], &[1, 1, 2, 2], NUM_CLASSES);
    assert_eq!(m, 0.25);

    pass(4, "metric closed forms", "psnr 20 dB, ce ln 13, miou 0.25");
}

// ---------------------------------------------------------------- criterion 5

fn desk_model_config() -> ModelConfig {
    ModelConfig {
        tasks: Task::ALL.to_vec(),
        d_scene: 16,
        d_task: 16,
        d_prompt: 8,
        heads: 2,
        hidden: 32,
        cva_depth: 4,
        cta_depth: 2,
        angle_frequencies: 6,
        samples_per_ray: 8,
        ablation: Ablation::Full,
    }
}

fn desk_train_options(stage1: usize, stage2: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        schedule: TwoStageSchedule {
            stage1_iters: stage1,
            stage2_iters: stage2,
        },
        rays_per_iter: 128,
        source_views: 3,
        lr: 5e-4,
        beta1: 0.9,
        beta2: 0.999,
        loss_weights: LossWeights::default(),
        seed,
        setting2: false,
        log_every: usize::MAX,
    }
}

/// Azimuth of a camera on the orbit, for the view-difficulty split.
fn orbit_azimuth(scene: &SceneData, frame: usize) -> f64 {
    let c = scene.bundles[frame].pose.center();
    c.z.atan2(c.x)
}

fn angle_between(a: f64, b: f64) -> f64 {
    let mut d = (a - b).abs() % std::f64::consts::TAU;
    if d > std::f64::consts::PI {
        d = std::f64::consts::TAU - d;
    }
    d
}

#[test]
fn criterion_5_end_to_end_desk_run() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let orbit = default_orbit(64, 64);
    generate_dataset_root(&root, 8, 1, 16, &orbit, 7).unwrap();
    let (train_named, test_named) = load_dataset_root(&root).unwrap();
    let scenes: Vec<SceneData> = train_named.iter().map(|(_, s)| clone_scene(s)).collect();

    let model = Model::new(desk_model_config(), 1).unwrap();
    let mut trainable = Trainable::new(model, false, 1).unwrap();
    let opts = desk_train_options(2000, 400, 0);
    let mut last_loss = f64::NAN;
    train(&mut trainable, &scenes, &opts, &mut |rec| {
        assert!(rec.total.is_finite(), "training diverged at iter {}", rec.iter);
        last_loss = rec.total;
    })
    .expect("training must finish without non-finite losses");

    let model_pred = ModelPredictor {
        model: &trainable.model,
        source_views: 3,
        chunk: 256,
        unet: None,
    };
    let heuristic = HeuristicPredictor;

    // quality thresholds on held-out views of the training scenes
    let mut psnr_sum = 0.0;
    let mut miou_sum = 0.0;
    let mut n_views = 0usize;
    // heuristic comparison restricted to views >= 20 degrees from their
    // nearest source view on the orbit
    let mut far_model = Vec::new();
    let mut far_heur = Vec::new();
    for (_, scene) in &train_named {
        for &frame in &scene.held_out {
            let pred = model_pred.predict(scene, frame).unwrap();
            let gt = &scene.bundles[frame];
            psnr_sum += psnr(&pred.rgb, &gt.rgb).unwrap();
            miou_sum += miou(&pred.sl, &gt.sl, NUM_CLASSES);
            n_views += 1;

            let az = orbit_azimuth(scene, frame);
            let nearest_gap = scene
                .train_frames()
                .iter()
                .map(|&f| angle_between(az, orbit_azimuth(scene, f)))
                .fold(f64::INFINITY, f64::min);
            if nearest_gap.to_degrees() >= 20.0 {
                let h = heuristic.predict(scene, frame).unwrap();
                far_model.push(psnr(&pred.rgb, &gt.rgb).unwrap());
                far_heur.push(psnr(&h.rgb, &gt.rgb).unwrap());
            }
        }
    }
    let mean_psnr = psnr_sum / n_views as f64;
    let mean_miou = miou_sum / n_views as f64;
    assert!(
        mean_psnr >= 22.0,
        "train-scene held-out PSNR {mean_psnr:.2} dB < 22 dB"
    );
    assert!(
        mean_miou >= 0.80,
        "train-scene held-out mIoU {mean_miou:.3} < 0.80"
    );
    assert!(!far_model.is_empty(), "no views with >= 20 degree gap");
    let fm = far_model.iter().sum::<f64>() / far_model.len() as f64;
    let fh = far_heur.iter().sum::<f64>() / far_heur.len() as f64;
    assert!(
        fm > fh,
        "model PSNR {fm:.2} dB must beat heuristic {fh:.2} dB on far views"
    );

    // the unseen scene still renders finite metrics
    let (_, test_scene) = &test_named[0];
    let pred = model_pred.predict(test_scene, test_scene.held_out[0]).unwrap();
    let test_psnr = psnr(&pred.rgb, &test_scene.bundles[test_scene.held_out[0]].rgb).unwrap();
    assert!(test_psnr.is_finite());

    let elapsed = started.elapsed();
    pass(
        5,
        "end-to-end desk run",
        &format!(
            "PSNR {mean_psnr:.2} dB (>=22), mIoU {mean_miou:.3} (>=0.80), far views {fm:.2} vs heuristic {fh:.2} dB over {} views, test-scene PSNR {test_psnr:.2}, final loss {last_loss:.4}, {elapsed:?}",
            far_model.len()
        ),
    );
}

fn clone_scene(s: &SceneData) -> SceneData {
    SceneData {
        bundles: s.bundles.clone(),
        held_out: s.held_out.clone(),
        near: s.near,
        far: s.far,
    }
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_ablation_harness() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let orbit = default_orbit(32, 32);
    generate_dataset_root(&root, 3, 2, 16, &orbit, 11).unwrap();
    let (train_named, test_named) = load_dataset_root(&root).unwrap();
    let scenes: Vec<SceneData> = train_named.iter().map(|(_, s)| clone_scene(s)).collect();

    let variants = [
        ("full", Ablation::Full),
        ("no-cva", Ablation::NoCva),
        ("no-cta", Ablation::NoCta),
    ];
    let seeds = [0u64, 1, 2];

    // identical training budget for every variant
    let budget = |seed: u64| desk_train_options(500, 125, seed);

    let mut report = Report::new();
    // variant -> seed -> task -> metric
    let mut metrics: BTreeMap<&str, Vec<BTreeMap<String, f64>>> = BTreeMap::new();
    for (name, ablation) in variants {
        for &seed in &seeds {
            let cfg = ModelConfig {
                ablation,
                samples_per_ray: 6,
                ..desk_model_config()
            };
            let model = Model::new(cfg, 10 + seed).unwrap();
            let mut trainable = Trainable::new(model, false, seed).unwrap();
            let mut opts = budget(seed);
            opts.rays_per_iter = 96;
            train(&mut trainable, &scenes, &opts, &mut |_| {}).unwrap();

            let predictor = ModelPredictor {
                model: &trainable.model,
                source_views: 3,
                chunk: 256,
                unet: None,
            };
            let rep =
                evaluate_model(&[&predictor], &[], &test_named, &Task::ALL, None).unwrap();
            let mean = rep.split_mean("test_scenes");
            metrics.entry(name).or_default().push(mean["model"].clone());
        }
        // seed-averaged row for the comparison report
        let rows = &metrics[name];
        let avg: BTreeMap<String, f64> = Task::ALL
            .iter()
            .map(|t| {
                let v: f64 =
                    rows.iter().map(|m| m[t.name()]).sum::<f64>() / rows.len() as f64;
                (t.name().to_string(), v)
            })
            .collect();
        report.insert("test_scenes", "ablation", name, avg);
    }
    let md = report.to_markdown(&Task::ALL);
    assert!(md.contains("| full |") && md.contains("| no-cva |") && md.contains("| no-cta |"));
    println!("{md}");

    // rank the seed-averaged metrics per task, then average the ranks over
    // the 6 tasks; the full model must rank at least as well as each ablated
    // variant (ties allowed)
    let seed_mean = |name: &str, task: Task| -> f64 {
        metrics[name].iter().map(|m| m[task.name()]).sum::<f64>() / seeds.len() as f64
    };
    let mut mean_rank: BTreeMap<&str, f64> = BTreeMap::new();
    for &task in &Task::ALL {
        let higher_better = muvie_core::evalsuite::higher_is_better(task);
        let mut vals: Vec<(&str, f64)> = variants
            .iter()
            .map(|(n, _)| (*n, seed_mean(n, task)))
            .collect();
        vals.sort_by(|a, b| {
            if higher_better {
                b.1.partial_cmp(&a.1).unwrap()
            } else {
                a.1.partial_cmp(&b.1).unwrap()
            }
        });
        for (rank, (name, _)) in vals.iter().enumerate() {
            *mean_rank.entry(name).or_insert(0.0) += (rank + 1) as f64;
        }
    }
    for v in mean_rank.values_mut() {
        *v /= Task::ALL.len() as f64;
    }
    println!("mean ranks over seed-averaged task metrics: {mean_rank:?}");
    let full = mean_rank["full"];
    assert!(
        full <= mean_rank["no-cva"] + 1e-12 && full <= mean_rank["no-cta"] + 1e-12,
        "full model mean rank {full:.3} must not exceed ablations {mean_rank:?}"
    );
    pass(
        6,
        "ablation harness",
        &format!("mean ranks {mean_rank:?}, {:?}", started.elapsed()),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_annotation_predictor_inference() {
    let started = Instant::now();
    // substitution identity: predictions replaced by ground truth render
    // bit-identically to the ground-truth-annotation path
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::random(31);
    let orbit = default_orbit(32, 32);
    generate_dataset(&spec, 16, &orbit, dir.path()).unwrap();
    let scene = load_dataset(dir.path()).unwrap();

    let tasks = vec![Task::Rgb, Task::Sn, Task::Ed, Task::Kp];
    let cfg = ModelConfig {
        tasks: tasks.clone(),
        samples_per_ray: 6,
        ..desk_model_config()
    };
    let model = Model::new(cfg, 3).unwrap();

    let frame = scene.held_out[1];
    let target = &scene.bundles[frame];
    let sources_idx = nearest_source_frames(
        &scene,
        &scene.train_frames(),
        target.pose.center(),
        3,
        Some(frame),
    );
    let sources: Vec<_> = sources_idx.iter().map(|&i| &scene.bundles[i]).collect();

    let setting1 = render_view(
        &model,
        &sources,
        &target.view(),
        scene.near,
        scene.far,
        &ValueSource::Ground,
        256,
    )
    .unwrap();

    let gt_as_predictions: Vec<PredictedBundle> = sources
        .iter()
        .map(|b| PredictedBundle::from_ground_truth(b, &tasks))
        .collect();
    let setting2 = render_view(
        &model,
        &sources,
        &target.view(),
        scene.near,
        scene.far,
        &ValueSource::Predicted(&gt_as_predictions),
        256,
    )
    .unwrap();

    for ((t1, m1), (t2, m2)) in setting1.maps.iter().zip(&setting2.maps) {
        assert_eq!(t1, t2);
        assert_eq!(m1.len(), m2.len());
        for (a, b) in m1.iter().zip(m2) {
            assert!(
                a.to_bits() == b.to_bits(),
                "task {} differs: {a} vs {b}",
                t1.name()
            );
        }
    }

    // a trained predictor yields finite reported errors on an unseen scene
    let data_dir = tempfile::tempdir().unwrap();
    let root = data_dir.path().join("data");
    generate_dataset_root(&root, 2, 1, 16, &default_orbit(32, 32), 17).unwrap();
    let (train_named, test_named) = load_dataset_root(&root).unwrap();
    let scenes: Vec<SceneData> = train_named.iter().map(|(_, s)| clone_scene(s)).collect();

    let cfg2 = ModelConfig {
        tasks: tasks.clone(),
        samples_per_ray: 6,
        ..desk_model_config()
    };
    let model2 = Model::new(cfg2, 4).unwrap();
    let mut trainable = Trainable::new(model2, true, 4).unwrap();
    let mut opts = desk_train_options(150, 30, 5);
    opts.setting2 = true;
    opts.rays_per_iter = 64;
    train(&mut trainable, &scenes, &opts, &mut |rec| {
        assert!(rec.total.is_finite());
        assert!(!rec.unet_per_task.is_empty(), "predictor losses must be recorded");
    })
    .unwrap();

    let predictor = ModelPredictor {
        model: &trainable.model,
        source_views: 3,
        chunk: 256,
        unet: trainable.unet.as_ref(),
    };
    let report = evaluate_model(&[&predictor], &[], &test_named, &tasks, None).unwrap();
    let mean = report.split_mean("test_scenes");
    let m = &mean["model-setting2"];
    for t in [Task::Sn, Task::Ed, Task::Kp] {
        let v = m[t.name()];
        assert!(v.is_finite(), "{} L1 not finite", t.name());
    }
    println!("{}", report.to_markdown(&tasks));
    pass(
        7,
        "annotation-predictor inference",
        &format!(
            "bit-identical substitution; trained run: sn {:.4}, ed {:.4}, kp {:.4} ({:?})",
            m["sn"], m["ed"], m["kp"], started.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_format_round_trips() {
    // dataset: integer maps lossless, RGB within 8-bit quantisation, floats
    // f32-exact
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::random(41);
    let orbit = default_orbit(32, 32);
    generate_dataset(&spec, 8, &orbit, dir.path()).unwrap();
    let scene = load_dataset(dir.path()).unwrap();
    let rerendered = muvie_core::toyscenes::render_ground_truth(
        &spec,
        &muvie_core::geometry::CameraView {
            intrinsics: orbit.intrinsics,
            pose: orbit.pose(5, 8),
        },
    );
    let loaded = &scene.bundles[5];
    assert_eq!(loaded.sl, rerendered.sl);
    for (name, a, b) in [
        ("sn", &loaded.sn, &rerendered.sn),
        ("sh", &loaded.sh, &rerendered.sh),
        ("ed", &loaded.ed, &rerendered.ed),
        ("kp", &loaded.kp, &rerendered.kp),
        ("depth", &loaded.depth, &rerendered.depth),
    ] {
        assert_eq!(a, b, "{name} must round-trip f32-exactly");
    }
    let rgb_err = loaded
        .rgb
        .iter()
        .zip(&rerendered.rgb)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(rgb_err <= 1.0 / 255.0, "rgb round trip err {rgb_err}");

    // checkpoint: save -> load reproduces identical renders
    let cfg = ModelConfig {
        samples_per_ray: 6,
        ..desk_model_config()
    };
    let model = Model::new(cfg.clone(), 9).unwrap();
    let frame = scene.held_out[0];
    let target = &scene.bundles[frame];
    let sources_idx = nearest_source_frames(
        &scene,
        &scene.train_frames(),
        target.pose.center(),
        3,
        Some(frame),
    );
    let sources: Vec<_> = sources_idx.iter().map(|&i| &scene.bundles[i]).collect();
    let render = |m: &Model| {
        render_view(
            m,
            &sources,
            &target.view(),
            scene.near,
            scene.far,
            &ValueSource::Ground,
            128,
        )
        .unwrap()
    };
    let before = render(&model);

    let ckpt = dir.path().join("model.ckpt");
    {
        let adam = Adam::new(&model.store, 5e-4, 0.9, 0.999);
        save_checkpoint(&ckpt, &model.store, Some(&adam), 0).unwrap();
    }
    let mut model2 = Model::new(cfg, 777).unwrap(); // different init
    load_checkpoint(&ckpt, &mut model2.store, None).unwrap();
    let after = render(&model2);
    for ((t1, m1), (t2, m2)) in before.maps.iter().zip(&after.maps) {
        assert_eq!(t1, t2);
        for (a, b) in m1.iter().zip(m2) {
            assert!(a.to_bits() == b.to_bits(), "{} render differs after reload", t1.name());
        }
    }
    assert_eq!(before.opacity, after.opacity);

    pass(
        8,
        "format round trips",
        &format!("rgb err {rgb_err:.5} <= 1/255, float maps exact, checkpoint render identical"),
    );
}
