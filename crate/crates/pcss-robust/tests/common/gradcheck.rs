//! Reverse-mode gradients versus the central-difference oracle, packaged as
//! reusable per-instance checks. Each function builds one small random
//! instance from its seed and returns the relative error between the
//! analytic gradient and the finite-difference estimate.

use super::{central_diff, rand_arr, rand_labels, rel_err, softmax_rows, FD_H};
use pcss_robust::iaam::{
    attention_loss, cycle_loss, flow_forward, mapping_loss, overlap_loss, AttentionHead,
    CouplingFlow, OverlapLossConfig,
};
use pcss_robust::ot::SinkhornConfig;
use pcss_robust::qcmb::{
    contrastive_loss, project_on_tape, update_bank, ContrastConfig, MemoryBank,
};
use pcss_robust::scene::{generate_scene, SceneConfig};
use pcss_robust::segnet::{forward_from_coords, knn_indices, SegModel};
use pcss_robust::{Arr, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
/// The mapping loss differentiates through the unrolled Sinkhorn iteration,
/// which accumulates more round-off than the other losses.
pub const TOL_SINKHORN: f64 = 1e-3;

/// Every gradient check as (name, tolerance, check): the check returns the
/// relative error for one seeded random instance.
pub fn all_checks() -> Vec<(&'static str, f64, fn(u64) -> f64)> {
    vec![
        ("attack objective (I-FGSM / PGD ascent)", TOL, attack_objective_rel_err),
        ("segmentation loss wrt weights", TOL, segmentation_weights_rel_err),
        ("cycle-consistency loss", TOL, cycle_rel_err),
        ("attention loss wrt features", TOL, attention_input_rel_err),
        ("attention loss wrt weights", TOL, attention_weights_rel_err),
        ("overlap suppression loss", TOL, overlap_rel_err),
        ("Sinkhorn mapping loss", TOL_SINKHORN, sinkhorn_mapping_rel_err),
        ("coupling flow wrt weights", TOL, flow_weights_rel_err),
        ("contrastive loss", TOL, contrastive_rel_err),
    ]
}

/// Cross-entropy of a model's predictions as a function of the coordinates,
/// with a frozen neighbor graph. This is the objective both attacks ascend
/// (I-FGSM takes its sign, PGD normalizes it) and the backbone's training
/// loss.
fn coord_ce(model: &SegModel, coords: &Arr, nbrs: &[Vec<usize>], labels: &[usize]) -> (f64, Arr) {
    let tape = Tape::new();
    let vars = model.vars(&tape, false);
    let c = tape.leaf(coords.clone(), true);
    let (_, logits) = forward_from_coords(&vars, c, nbrs, model.coord_scale).unwrap();
    let loss = logits.cross_entropy(labels).unwrap();
    let v = loss.scalar_value();
    tape.backward(loss).unwrap();
    (v, c.grad())
}

pub fn attack_objective_rel_err(seed: u64) -> f64 {
    let pc = generate_scene(&SceneConfig {
        points_per_scene: 10,
        extent: 2.0,
        seed: 900 + seed,
        ..SceneConfig::default()
    })
    .unwrap();
    let mut model = SegModel::new(8, 4, 3, seed);
    model.coord_scale = 1.7;
    let labels = pc.labels_usize();
    let coords = Arr {
        shape: vec![pc.len(), 3],
        data: pc.coords_flat(),
    };
    let nbrs = knn_indices(&pc.points, model.k);
    let (_, analytic) = coord_ce(&model, &coords, &nbrs, &labels);
    let numeric = central_diff(|x| coord_ce(&model, x, &nbrs, &labels).0, &coords, FD_H);
    rel_err(&analytic, &numeric)
}

pub fn segmentation_weights_rel_err(seed: u64) -> f64 {
    let pc = generate_scene(&SceneConfig {
        points_per_scene: 8,
        extent: 2.0,
        seed: 1900 + seed,
        ..SceneConfig::default()
    })
    .unwrap();
    let base = SegModel::new(6, 4, 3, seed);
    let labels = pc.labels_usize();
    let coords = Arr {
        shape: vec![pc.len(), 3],
        data: pc.coords_flat(),
    };
    let nbrs = knn_indices(&pc.points, base.k);
    // analytic gradient w.r.t. the classifier weights
    let tape = Tape::new();
    let vars = base.vars(&tape, true);
    let c = tape.constant(coords.clone());
    let (_, logits) = forward_from_coords(&vars, c, &nbrs, base.coord_scale).unwrap();
    let loss = logits.cross_entropy(&labels).unwrap();
    tape.backward(loss).unwrap();
    let analytic = vars.vars[vars.vars.len() - 2].grad();
    let numeric = central_diff(
        |w| {
            let mut m = base.clone();
            m.classifier.w = w.clone();
            let tape = Tape::new();
            let vars = m.vars(&tape, false);
            let c = tape.constant(coords.clone());
            let (_, logits) = forward_from_coords(&vars, c, &nbrs, m.coord_scale).unwrap();
            logits.cross_entropy(&labels).unwrap().scalar_value()
        },
        &base.classifier.w,
        FD_H,
    );
    rel_err(&analytic, &numeric)
}

pub fn cycle_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
    let f_s = rand_arr(&mut rng, 4, 5, 1.0);
    let f_s2t2s = rand_arr(&mut rng, 4, 5, 1.0);
    let f_t = rand_arr(&mut rng, 4, 5, 1.0);
    let f_t2s2t = rand_arr(&mut rng, 4, 5, 1.0);
    let eval = |a: &Arr, grad: bool| -> (f64, Arr) {
        let tape = Tape::new();
        let va = tape.leaf(a.clone(), grad);
        let loss = cycle_loss(
            va,
            tape.constant(f_s2t2s.clone()),
            tape.constant(f_t.clone()),
            tape.constant(f_t2s2t.clone()),
        )
        .unwrap();
        let v = loss.scalar_value();
        if grad {
            tape.backward(loss).unwrap();
            (v, va.grad())
        } else {
            (v, Arr::zeros(&[1]))
        }
    };
    let (_, analytic) = eval(&f_s, true);
    let numeric = central_diff(|x| eval(x, false).0, &f_s, FD_H);
    rel_err(&analytic, &numeric)
}

pub fn attention_input_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
    let att = AttentionHead::new(6, 3, 2, seed);
    let f_s = rand_arr(&mut rng, 5, 6, 1.0);
    let f_s2t = rand_arr(&mut rng, 5, 6, 1.0);
    let f_t2s = rand_arr(&mut rng, 4, 6, 1.0);
    let student = softmax_rows(&rand_arr(&mut rng, 4, 3, 1.5));
    let y_s = rand_labels(&mut rng, 5, 3);
    let eval = |fs: &Arr, grad: bool| -> (f64, Arr) {
        let tape = Tape::new();
        let av = att.vars(&tape, false);
        let v_fs = tape.leaf(fs.clone(), grad);
        let loss = attention_loss(
            &av,
            v_fs,
            &y_s,
            tape.constant(f_s2t.clone()),
            tape.constant(f_t2s.clone()),
            tape.constant(student.clone()),
        )
        .unwrap();
        let v = loss.scalar_value();
        if grad {
            tape.backward(loss).unwrap();
            (v, v_fs.grad())
        } else {
            (v, Arr::zeros(&[1]))
        }
    };
    let (_, analytic) = eval(&f_s, true);
    let numeric = central_diff(|x| eval(x, false).0, &f_s, FD_H);
    rel_err(&analytic, &numeric)
}

pub fn attention_weights_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(170 + seed);
    let att = AttentionHead::new(6, 3, 2, seed);
    let f_s = rand_arr(&mut rng, 5, 6, 1.0);
    let f_s2t = rand_arr(&mut rng, 5, 6, 1.0);
    let f_t2s = rand_arr(&mut rng, 4, 6, 1.0);
    let student = softmax_rows(&rand_arr(&mut rng, 4, 3, 1.5));
    let y_s = rand_labels(&mut rng, 5, 3);
    let run = |a: &AttentionHead, grad: bool| -> (f64, Arr) {
        let tape = Tape::new();
        let av = a.vars(&tape, grad);
        let loss = attention_loss(
            &av,
            tape.constant(f_s.clone()),
            &y_s,
            tape.constant(f_s2t.clone()),
            tape.constant(f_t2s.clone()),
            tape.constant(student.clone()),
        )
        .unwrap();
        let v = loss.scalar_value();
        if grad {
            tape.backward(loss).unwrap();
            (v, av.vars[0].grad()) // wq
        } else {
            (v, Arr::zeros(&[1]))
        }
    };
    let (_, analytic) = run(&att, true);
    let numeric = central_diff(
        |w| {
            let mut a = att.clone();
            a.wq = w.clone();
            run(&a, false).0
        },
        &att.wq,
        FD_H,
    );
    rel_err(&analytic, &numeric)
}

pub fn overlap_rel_err(seed: u64) -> f64 {
    let cfg = OverlapLossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(110 + seed);
    let logits = rand_arr(&mut rng, 5, 4, 1.5);
    let labels = rand_labels(&mut rng, 5, 4);
    // the loss validates probability rows, so differentiate through the
    // softmax of free logits
    let eval = |l: &Arr, grad: bool| -> (f64, Arr) {
        let tape = Tape::new();
        let v = tape.leaf(l.clone(), grad);
        let probs = v.row_softmax().unwrap();
        let loss = overlap_loss(probs, &labels, &cfg).unwrap().total;
        let val = loss.scalar_value();
        if grad {
            tape.backward(loss).unwrap();
            (val, v.grad())
        } else {
            (val, Arr::zeros(&[1]))
        }
    };
    let (_, analytic) = eval(&logits, true);
    let numeric = central_diff(|x| eval(x, false).0, &logits, FD_H);
    rel_err(&analytic, &numeric)
}

pub fn sinkhorn_mapping_rel_err(seed: u64) -> f64 {
    // fixed unroll depth (tol = 0 disables early exit) keeps the FD
    // comparison on a single smooth function
    let cfg = SinkhornConfig {
        reg: 0.3,
        max_iters: 40,
        tol: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(140 + seed);
    let f_s2t = rand_arr(&mut rng, 4, 3, 1.0);
    let f_t = rand_arr(&mut rng, 4, 3, 1.0);
    let f_t2s = rand_arr(&mut rng, 3, 3, 1.0);
    let f_s = rand_arr(&mut rng, 3, 3, 1.0);
    let eval = |x: &Arr, grad: bool| -> (f64, Arr) {
        let tape = Tape::new();
        let v = tape.leaf(x.clone(), grad);
        let loss = mapping_loss(
            &tape,
            v,
            tape.constant(f_t.clone()),
            tape.constant(f_t2s.clone()),
            tape.constant(f_s.clone()),
            &cfg,
        )
        .unwrap();
        let val = loss.scalar_value();
        if grad {
            tape.backward(loss).unwrap();
            (val, v.grad())
        } else {
            (val, Arr::zeros(&[1]))
        }
    };
    let (_, analytic) = eval(&f_s2t, true);
    let numeric = central_diff(|x| eval(x, false).0, &f_s2t, FD_H);
    rel_err(&analytic, &numeric)
}

pub fn flow_weights_rel_err(seed: u64) -> f64 {
    // mapping residual through a randomly perturbed flow: checks the
    // coupling-block backward pass end to end
    let mut rng = ChaCha8Rng::seed_from_u64(210 + seed);
    let mut flow = CouplingFlow::new(4, 2, 2.0, seed);
    for p in flow.params_mut() {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let f_s = rand_arr(&mut rng, 3, 4, 1.0);
    let target = rand_arr(&mut rng, 3, 4, 1.0);
    let run = |fl: &CouplingFlow, grad: bool| -> (f64, Arr) {
        let tape = Tape::new();
        let fv = fl.vars(&tape, grad);
        let (mapped, _) = flow_forward(&fv, tape.constant(f_s.clone())).unwrap();
        let loss = mapped
            .sub(tape.constant(target.clone()))
            .unwrap()
            .l2_norm()
            .unwrap();
        let v = loss.scalar_value();
        if grad {
            tape.backward(loss).unwrap();
            (v, fv.vars[0].grad())
        } else {
            (v, Arr::zeros(&[1]))
        }
    };
    let (_, analytic) = run(&flow, true);
    let first_param = flow.params()[0].1.clone();
    let numeric = central_diff(
        |w| {
            let mut fl = flow.clone();
            *fl.params_mut()[0] = w.clone();
            run(&fl, false).0
        },
        &first_param,
        FD_H,
    );
    rel_err(&analytic, &numeric)
}

pub fn contrastive_rel_err(seed: u64) -> f64 {
    let cfg = ContrastConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(250 + seed);
    let mut bank = MemoryBank::new(6, 3, 2, 5, 0.9, seed);
    for class in 0..3 {
        for _ in 0..2 {
            let sel = rand_arr(&mut rng, 3, 6, 1.0);
            update_bank(&mut bank, class, &sel).unwrap();
        }
    }
    let feats = rand_arr(&mut rng, 4, 6, 1.0);
    let labels = rand_labels(&mut rng, 4, 3);
    let eval = |x: &Arr, grad: bool| -> (f64, Arr) {
        let tape = Tape::new();
        let pv = bank.proj_vars(&tape, false);
        let v = tape.leaf(x.clone(), grad);
        let queries = project_on_tape(&pv, v).unwrap();
        let loss = contrastive_loss(&tape, queries, &bank, &labels, &cfg).unwrap();
        let val = loss.scalar_value();
        if grad {
            tape.backward(loss).unwrap();
            (val, v.grad())
        } else {
            (val, Arr::zeros(&[1]))
        }
    };
    let (_, analytic) = eval(&feats, true);
    let numeric = central_diff(|x| eval(x, false).0, &feats, FD_H);
    rel_err(&analytic, &numeric)
}
