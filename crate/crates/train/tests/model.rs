use std::sync::Arc;

use attnlab::context::{sample_context, sample_qtrue, targets, CategoryDist, QTrueMode, TokenSequence};
use attnlab::{Mat, Rng};
use attnlab_train::check::gradcheck_model;
use attnlab_train::model::{plant, position_mask, Flavor, ModelParams};
use attnlab_train::tape::Tape;
use attnlab_train::train::{sample_batch, TrainConfig};
use attnlab_train::EncodedBatch;

fn small_cfg(flavor: Flavor) -> TrainConfig {
    TrainConfig {
        n: 4,
        m: 7,
        batch: 16,
        hidden: Some(40),
        flavor,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn gradcheck_every_flavor() {
    for flavor in Flavor::ALL {
        let r = gradcheck_model(&small_cfg(flavor), 2, 60, 6, 1e-5, 1e-5).unwrap();
        assert!(r.passed(1e-5), "{flavor}: {r:?}");
        assert_eq!(r.kinked, 0);
    }
}

#[test]
fn gradcheck_softmax_and_penalty_variants() {
    let soft = TrainConfig {
        softmax: true,
        softmax_scale: 2.0,
        ..small_cfg(Flavor::Free)
    };
    let r = gradcheck_model(&soft, 2, 60, 6, 1e-5, 1e-5).unwrap();
    assert!(r.passed(1e-5), "{r:?}");
    let pen = TrainConfig {
        penalty: 0.3,
        ..small_cfg(Flavor::Sol3)
    };
    let r = gradcheck_model(&pen, 2, 60, 6, 1e-5, 1e-5).unwrap();
    assert!(r.passed(1e-5), "{r:?}");
}

#[test]
fn gradcheck_full_size() {
    let r = gradcheck_model(&TrainConfig::default(), 2, 100, 4, 1e-5, 1e-5).unwrap();
    assert!(r.passed(1e-5), "{r:?}");
}

#[test]
fn chunked_gradient_equals_single_tape() {
    let cfg = TrainConfig {
        hidden: Some(30),
        ..small_cfg(Flavor::Free)
    };
    let p = cfg.init_params().unwrap();
    let q = cfg.sample_qtrue().unwrap();
    // 120 contexts split into chunks of 50, 50 and 20
    let b = sample_batch(4, 7, 120, &q, &Rng::new(9)).unwrap();
    let (loss, g) = p.loss_and_grad(&b.enc, &b.targets);
    let mut f = p.forward(&b.enc);
    let out = f.tape.masked_mse(f.prediction, b.targets.clone(), Arc::new(position_mask(120, 7)));
    assert!((f.tape.value(out)[(0, 0)] - loss).abs() < 1e-13);
    let grads = f.tape.backward(out);
    let mut off = 0;
    for var in [f.vars.q, f.vars.k, f.vars.v] {
        let gm = grads.get(var).unwrap();
        for (i, x) in gm.data().iter().enumerate() {
            assert!((x - g[off + i]).abs() < 1e-13);
        }
        off += gm.data().len();
    }
}

#[test]
fn planted_solution3_is_a_stationary_global_minimum() {
    let (n, m) = (10, 50);
    let q = sample_qtrue(n, QTrueMode::StandardNormal, &mut Rng::new(11)).unwrap();
    let p = plant(Flavor::Sol3, &q, m, 2 * n * n - n).unwrap();
    assert_eq!(p.mask_violation(), 0.0);
    let b = sample_batch(n, m, 40, &q, &Rng::new(12)).unwrap();
    let pred = p.predict(&b.enc);
    for (i, (y, t)) in pred.iter().zip(b.targets.iter()).enumerate() {
        if i % m != 0 {
            assert!((y - t).abs() < 1e-6);
        }
    }
    let (loss, g) = p.loss_and_grad(&b.enc, &b.targets);
    assert!(loss < 1e-20, "{loss}");
    assert!(g.iter().all(|x| x.abs() < 1e-8));
}

#[test]
fn zero_readout_predicts_its_bias() {
    let mut p = small_cfg(Flavor::Free).init_params().unwrap();
    p.w2 = Mat::zeros(1, p.hidden());
    p.b2 = Mat::filled(1, 1, -0.75);
    let q = small_cfg(Flavor::Free).sample_qtrue().unwrap();
    let b = sample_batch(4, 7, 5, &q, &Rng::new(1)).unwrap();
    assert!(p.predict(&b.enc).iter().all(|y| *y == -0.75));
}

#[test]
fn readout_gradient_is_linear_in_targets_at_zero_output() {
    let cfg = small_cfg(Flavor::Free);
    let mut p = cfg.init_params().unwrap();
    p.w2 = Mat::zeros(1, p.hidden());
    let q = cfg.sample_qtrue().unwrap();
    let b = sample_batch(4, 7, 10, &q, &Rng::new(2)).unwrap();
    let doubled = Arc::new(b.targets.iter().map(|y| 2.0 * y).collect::<Vec<_>>());
    let (_, g1) = p.loss_and_grad(&b.enc, &b.targets);
    let (_, g2) = p.loss_and_grad(&b.enc, &doubled);
    let w2_start = p.len() - p.hidden() - 1;
    for i in w2_start..p.len() - 1 {
        assert!((g2[i] - 2.0 * g1[i]).abs() < 1e-12 * (1.0 + g1[i].abs()));
    }
}

#[test]
fn predictions_are_causal() {
    for flavor in Flavor::ALL {
        let p = small_cfg(flavor).init_params().unwrap();
        let a = TokenSequence::new(4, vec![0, 3, 1, 1, 2, 0, 3]).unwrap();
        let b = TokenSequence::new(4, vec![0, 3, 1, 1, 0, 2, 2]).unwrap();
        let pa = p.predict(&Arc::new(EncodedBatch::new(4, 7, &[a])));
        let pb = p.predict(&Arc::new(EncodedBatch::new(4, 7, &[b])));
        assert_eq!(pa[..4], pb[..4], "{flavor}");
        assert_ne!(pa[4], pb[4]);
    }
}

#[test]
fn sol2_scores_depend_only_on_token_content() {
    let p = small_cfg(Flavor::Sol2).init_params().unwrap();
    let t = TokenSequence::new(4, vec![2, 0, 2, 1, 0, 2, 1]).unwrap();
    let enc = Arc::new(EncodedBatch::new(4, 7, &[t.clone()]));
    let f = p.forward(&enc);
    let s = f.tape.value(f.scores);
    for i in 0..7 {
        for j in 0..7 {
            for jj in 0..7 {
                if t.tokens()[j] == t.tokens()[jj] {
                    assert_eq!(s[(j, i)], s[(jj, i)]);
                }
            }
        }
    }
    // the free flavor also reads positions
    let free = small_cfg(Flavor::Free).init_params().unwrap();
    let f = free.forward(&enc);
    assert_ne!(f.tape.value(f.scores)[(0, 3)], f.tape.value(f.scores)[(2, 3)]);
}

#[test]
fn planting_respects_head_width() {
    let q = sample_qtrue(10, QTrueMode::StandardNormal, &mut Rng::new(3)).unwrap();
    assert!(plant(Flavor::Sol1, &q, 50, 189).is_err());
    assert!(plant(Flavor::Sol2, &q, 50, 59).is_err());
    assert!(plant(Flavor::Sol3, &q, 50, 60).is_ok());
    assert!(plant(Flavor::Free, &q, 50, 190).is_err());
}

#[test]
fn planted_solutions_fit_under_their_own_masks_only() {
    let q = sample_qtrue(4, QTrueMode::StandardNormal, &mut Rng::new(4)).unwrap();
    for flavor in [Flavor::Sol1, Flavor::Sol2, Flavor::Sol3] {
        let p = plant(flavor, &q, 6, 28).unwrap();
        for other in [Flavor::Sol1, Flavor::Sol2, Flavor::Sol3] {
            let mut moved = p.clone();
            moved.flavor = other;
            // the sol1 mask is a subset of the sol3 mask
            let fits = other == flavor || (flavor == Flavor::Sol1 && other == Flavor::Sol3);
            assert_eq!(moved.mask_violation() == 0.0, fits, "{flavor} under {other}");
        }
    }
}

#[test]
fn planted_solutions_match_core_pipelines_on_fresh_contexts() {
    let (n, m) = (5, 8);
    let mut rng = Rng::new(6);
    let q = sample_qtrue(n, QTrueMode::StandardNormal, &mut rng).unwrap();
    let dist = CategoryDist::uniform(n).unwrap();
    for flavor in [Flavor::Sol1, Flavor::Sol2, Flavor::Sol3] {
        let p: ModelParams = plant(flavor, &q, m, 2 * n * n - n).unwrap();
        for _ in 0..50 {
            let t = sample_context(n, m, &dist, &mut rng).unwrap();
            let y = targets(&t, &q).unwrap();
            let pred = p.predict(&Arc::new(EncodedBatch::new(n, m, &[t])));
            assert!(pred.iter().zip(&y).skip(1).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}

#[test]
fn tape_dense_matches_unfused_ops() {
    let w = Mat::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3).unwrap();
    let x = Mat::from_fn(4, 5, |r, c| ((r * 5 + c) as f64).sin()).unwrap();
    let b = Mat::from_fn(3, 1, |r, _| r as f64 * 0.1 - 0.1).unwrap();
    let mut t = Tape::new();
    let (wv, xv, bv) = (t.leaf(w), t.leaf(x), t.leaf(b));
    let fused = t.dense(wv, xv, bv, true);
    let z = t.gemm(wv, false, xv, false);
    let z = t.add_col_bias(z, bv);
    let plain = t.relu(z);
    assert!(t.value(fused).max_abs_diff(t.value(plain)) < 1e-15);
    let wts = Arc::new(Mat::from_fn(3, 5, |r, c| (r + c) as f64 * 0.1).unwrap());
    let l1 = t.weighted_square_sum(fused, wts.clone());
    let l2 = t.weighted_square_sum(plain, wts);
    let g1 = t.backward(l1);
    let g2 = t.backward(l2);
    for v in [wv, xv, bv] {
        assert!(g1.get(v).unwrap().max_abs_diff(g2.get(v).unwrap()) < 1e-14);
    }
}
