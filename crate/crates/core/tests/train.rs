mod common;

use common::*;
use pflow::data::gen_2d;
use pflow::flows::{ArchSpec, CouplingKind, NetSpec};
use pflow::objectives::{evaluate, BlockChoice, Estimator, ObjectiveConfig, ObjectiveKind};
use pflow::train::*;
use pflow::{Error, FlowStack, Tensor};

fn small_arch() -> ArchSpec {
    ArchSpec::coupling(2, 2, CouplingKind::Affine, NetSpec { hidden: 8, blocks: 1 })
}

fn small_cfg(kind: ObjectiveKind, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(ObjectiveConfig::new(kind), small_arch()).with_steps(steps).with_seed(3);
    cfg.batch_size = 32;
    cfg.eval_interval = 5;
    cfg.eval_points = 64;
    cfg
}

fn moons(n: usize, seed: u64) -> (Tensor, Tensor) {
    let ds = gen_2d("moons", n, seed).unwrap();
    let (a, b) = ds.split(0.75).unwrap();
    (a.points, b.points)
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    for hyper in [OptimizerConfig::adabelief(), OptimizerConfig::adam(), OptimizerConfig::sgd()] {
        let mut st = OptimizerState::new(hyper.kind, 3);
        let mut p = vec![0.5, -1.0, 2.0];
        for _ in 0..10 {
            assert!(optimizer_step(&mut st, &mut p, &[0.0; 3], &hyper, 1e-2).unwrap());
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0], "{:?}", hyper.kind);
        assert_eq!(st.t, 10);
    }
}

#[test]
fn sgd_drifts_by_lr_times_gradient() {
    let hyper = OptimizerConfig::sgd();
    let mut st = OptimizerState::new(hyper.kind, 2);
    let mut p = vec![1.0, 2.0];
    let g = [0.25, -0.5];
    for k in 1..=100 {
        optimizer_step(&mut st, &mut p, &g, &hyper, 0.01).unwrap();
        assert!((p[0] - (1.0 - 0.01 * 0.25 * k as f64)).abs() < 1e-12);
        assert!((p[1] - (2.0 + 0.01 * 0.5 * k as f64)).abs() < 1e-12);
    }
}

#[test]
fn adabelief_matches_hand_recursion() {
    let hyper = OptimizerConfig { kind: OptimizerKind::Adabelief, beta1: 0.8, beta2: 0.95, eps: 1e-10 };
    let grads = [[1.0, -2.0], [0.5, 0.25], [-3.0, 1.0]];
    let mut st = OptimizerState::new(hyper.kind, 2);
    let mut p = vec![0.0, 0.0];
    let (mut m, mut s, mut q) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        optimizer_step(&mut st, &mut p, g, &hyper, 0.1).unwrap();
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = 0.8 * m[i] + 0.2 * g[i];
            s[i] = 0.95 * s[i] + 0.05 * (g[i] - m[i]).powi(2) + 1e-10;
            let mh = m[i] / (1.0 - 0.8f64.powi(t));
            let sh = s[i] / (1.0 - 0.95f64.powi(t));
            q[i] -= 0.1 * mh / (sh.sqrt() + 1e-10);
            assert!((p[i] - q[i]).abs() < 1e-14);
        }
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let hyper = OptimizerConfig::adam();
    let mut st = OptimizerState::new(hyper.kind, 2);
    let mut p = vec![0.0f64, 0.0];
    optimizer_step(&mut st, &mut p, &[3.0, -0.01], &hyper, 0.1).unwrap();
    assert!((p[0] + 0.1).abs() < 1e-8 && (p[1] - 0.1).abs() < 1e-5);
}

#[test]
fn quadratic_bowl_converges() {
    let centre = [1.5, -0.7, 0.3, 4.0];
    let curv = [1.0, 10.0, 0.1, 3.0];
    for hyper in [OptimizerConfig::adabelief(), OptimizerConfig::adam()] {
        let mut st = OptimizerState::new(hyper.kind, 4);
        let mut p = vec![0.0; 4];
        let mut reached = None;
        for k in 0..5000 {
            let g: Vec<f64> = (0..4).map(|i| curv[i] * (p[i] - centre[i])).collect();
            optimizer_step(&mut st, &mut p, &g, &hyper, 1e-2).unwrap();
            if p.iter().zip(&centre).all(|(a, b)| (a - b).abs() < 1e-6) {
                reached = Some(k);
                break;
            }
        }
        assert!(reached.is_some(), "{:?} ended at {p:?}", hyper.kind);
    }
}

#[test]
fn non_finite_gradient_skips_the_step() {
    let hyper = OptimizerConfig::adabelief();
    let mut st = OptimizerState::new(hyper.kind, 2);
    let mut p = vec![1.0, 1.0];
    optimizer_step(&mut st, &mut p, &[0.1, 0.2], &hyper, 1e-2).unwrap();
    let (before, sb) = (p.clone(), st.clone());
    assert!(!optimizer_step(&mut st, &mut p, &[f64::NAN, 0.2], &hyper, 1e-2).unwrap());
    assert_eq!(p, before);
    assert_eq!((st.t, &st.m, &st.s), (sb.t, &sb.m, &sb.s));
    assert_eq!(st.skipped, 1);
    assert!(matches!(optimizer_step(&mut st, &mut p, &[0.1], &hyper, 1e-2), Err(Error::Shape(_))));
}

#[test]
fn config_validation_and_defaults() {
    let cfg = small_cfg(ObjectiveKind::Ml, 10);
    assert!(cfg.validate().is_ok());
    assert!(matches!(cfg.clone().with_lr(0.0).validate(), Err(Error::InvalidArgument(_))));
    let mut bad = cfg.clone();
    bad.batch_size = 0;
    assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
    let mut pf_inj = cfg.clone();
    pf_inj.arch = ArchSpec::injective(2, 3, 1, 1, CouplingKind::Affine, NET);
    pf_inj.objective = ObjectiveConfig::new(ObjectiveKind::Pf);
    assert!(matches!(pf_inj.validate(), Err(Error::Unsupported(_))));

    let json = format!(r#"{{"objective": {{"kind": "PF"}}, "arch": {}}}"#, serde_json::to_string(&small_arch()).unwrap());
    let parsed: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.lr, 1e-3);
    assert_eq!(parsed.batch_size, 256);
    assert_eq!(parsed.optimizer, OptimizerConfig { kind: OptimizerKind::Adabelief, beta1: 0.9, beta2: 0.999, eps: 1e-16 });
    assert_eq!(parsed.objective.alpha, 10.0);
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&parsed).unwrap()).unwrap();
    assert_eq!(back, parsed);
    assert_eq!(back.hash(), parsed.hash());
    assert_ne!(parsed.hash(), parsed.clone().with_seed(9).hash());
}

#[test]
fn cosine_schedule_decays_to_its_floor() {
    let c = LrSchedule::Cosine { floor: 0.1 };
    assert_eq!(c.factor(0, 11), 1.0);
    assert!((c.factor(5, 11) - 0.55).abs() < 1e-15);
    assert!((c.factor(10, 11) - 0.1).abs() < 1e-15);
    assert_eq!(LrSchedule::Constant.factor(7, 11), 1.0);
    let v: LrSchedule = serde_json::from_str(r#"{"kind": "COSINE", "floor": 0.1}"#).unwrap();
    assert_eq!(v, c);
    let mut cfg = small_cfg(ObjectiveKind::Ml, 2);
    assert!(!serde_json::to_string(&cfg).unwrap().contains("schedule"));
    cfg.schedule = LrSchedule::Cosine { floor: 1.5 };
    assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));

    // With a zero floor the last of two SGD steps has zero learning rate.
    cfg.schedule = LrSchedule::Cosine { floor: 0.0 };
    cfg.optimizer = OptimizerConfig::sgd();
    let (tr, _) = moons(400, 5);
    let mut t = Trainer::new(&cfg, &tr).unwrap();
    let p0 = t.stack().params_flat();
    t.step().unwrap();
    let p1 = t.stack().params_flat();
    t.step().unwrap();
    assert_ne!(p0, p1);
    assert_eq!(p1, t.stack().params_flat());
}

#[test]
fn fixed_seed_reproduces_history() {
    let (tr, te) = moons(800, 1);
    let cfg = small_cfg(ObjectiveKind::Pf, 20);
    let a = fit(&cfg, &tr, &te).unwrap();
    let b = fit(&cfg, &tr, &te).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history.len(), 5);
    let strip = |h: &[MetricRow]| h.iter().map(|r| (r.step, r.nll.to_bits(), r.i_p.to_bits(), r.ihat_p.map(f64::to_bits))).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));
    assert_eq!(a.history.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 10, 15, 20]);
    let c = fit(&cfg.clone().with_seed(4), &tr, &te).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn checkpoint_round_trip_continues_bitwise() {
    let (tr, te) = moons(600, 2);
    let mut cfg = small_cfg(ObjectiveKind::Pf, 40);
    cfg.objective = cfg.objective.clone().with_estimator(Estimator::UnbiasedSingleBlock, 5);
    // 450 rows at batch 32: 14 batches per epoch, so the run crosses epochs.
    let mut a = Trainer::new(&cfg, &tr).unwrap();
    for _ in 0..13 {
        a.step().unwrap();
    }
    a.evaluate(&te).unwrap();
    let ck = a.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let mut b = Trainer::resume(&cfg, &back, &tr).unwrap();
    for _ in 0..3 {
        a.step().unwrap();
        b.step().unwrap();
        let (ca, cb) = (a.checkpoint(), b.checkpoint());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ca.params), bits(&cb.params));
        assert_eq!(bits(&ca.optimizer.m), bits(&cb.optimizer.m));
        assert_eq!(bits(&ca.optimizer.s), bits(&cb.optimizer.s));
        assert_eq!(ca.cursor, cb.cursor);
    }
    assert_eq!(b.checkpoint().cursor.epoch, 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn checkpoint_file_layout() {
    let (tr, _) = moons(200, 3);
    let cfg = small_cfg(ObjectiveKind::Ml, 3);
    let mut t = Trainer::new(&cfg, &tr).unwrap();
    t.step().unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], b"PFCKPT01");
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    assert_eq!(header["step"], 1);
    assert_eq!(header["config_hash"], cfg.hash());
    assert!(header["architecture"]["layers"].is_array());
    let floats = &bytes[16 + hlen..];
    let n = ck.params.len();
    assert_eq!(floats.len(), 8 * 3 * n);
    assert_eq!(f64::from_le_bytes(floats[..8].try_into().unwrap()), ck.params[0]);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..12]), Err(Error::Format(_))));
}

#[test]
fn resumed_fit_matches_uninterrupted_fit() {
    let (tr, te) = moons(500, 4);
    let cfg = small_cfg(ObjectiveKind::PfLagrangian, 20);
    let full = fit(&cfg, &tr, &te).unwrap();
    let half = fit(&cfg.clone().with_steps(10), &tr, &te).unwrap();
    let rest = resume(&cfg, &half, &tr, &te).unwrap();
    assert_eq!(rest.params, full.params);
    assert_eq!(rest.step, 20);
    let steps: Vec<u64> = rest.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 5, 10, 15, 20]);
    for (a, b) in rest.history.iter().zip(&full.history) {
        assert_eq!(a.nll.to_bits(), b.nll.to_bits());
    }
}

#[test]
fn metrics_csv_schema() {
    let rows = vec![
        MetricRow { step: 0, nll: 1.25, i_p: 0.5, ihat_p: Some(-0.25), wall_time: 0.0 },
        MetricRow { step: 100, nll: 1.0, i_p: 0.125, ihat_p: None, wall_time: 2.5 },
    ];
    let bytes = metrics_csv(&rows).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,nll,I_P,Ihat_P,wall_time");
    assert_eq!(text.lines().nth(2).unwrap(), "100,1.0000000000000000e0,1.2500000000000000e-1,,2.5000000000000000e0");
    assert_eq!(read_metrics(&bytes).unwrap(), rows);
    assert!(matches!(read_metrics(b"step,loss\n1,2\n"), Err(Error::Format(_))));
    let empty = metrics_csv(&[]).unwrap();
    assert_eq!(String::from_utf8(empty).unwrap().trim(), "step,nll,I_P,Ihat_P,wall_time");
}

#[test]
fn metrics_are_exact_held_out_quantities() {
    let (tr, te) = moons(400, 5);
    let mut cfg = small_cfg(ObjectiveKind::Pf, 5);
    cfg.objective = cfg.objective.clone().with_estimator(Estimator::UnbiasedSingleBlock, 1);
    let ck = fit(&cfg, &tr, &te).unwrap();
    let stack = ck.stack().unwrap();
    let x = te.slice_rows(0, 64);
    let nll = -stack.log_prob(&x).unwrap().mean();
    let last = ck.history.last().unwrap();
    assert!((last.nll - nll).abs() < 1e-12);
    let ml = evaluate(&ObjectiveConfig::new(ObjectiveKind::PfLagrangian).with_alpha(1.0), &stack, &x, BlockChoice::default()).unwrap();
    assert!(((ml.mean - nll) - last.i_p).abs() < 1e-10);
    assert!(last.i_p >= -1e-12 && last.ihat_p.unwrap() <= 1e-12);
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let (tr, te) = moons(400, 6);
    let mut cfg = small_cfg(ObjectiveKind::Ml, 50);
    cfg.optimizer = OptimizerConfig::sgd();
    cfg.lr = 1e8;
    cfg.eval_interval = 1;
    match fit(&cfg, &tr, &te) {
        Err(Error::Diverged { step, last_good }) => {
            assert_eq!(last_good.step, 0);
            assert!(last_good.history.last().unwrap().nll.is_finite());
            assert_eq!(step, 3);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    let mut nan = te.clone();
    nan.data_mut()[0] = f64::NAN;
    let cfg = small_cfg(ObjectiveKind::Ml, 50);
    assert!(matches!(fit(&cfg, &tr, &nan), Err(Error::Diverged { step: 10, .. })));
}

#[test]
fn maximum_likelihood_smoke_run_improves() {
    let ds = gen_2d("moons", 12_000, 8).unwrap();
    let (tr, te) = ds.split(10_000.0 / 12_000.0).unwrap();
    let mut cfg = TrainConfig::desk_2d(ObjectiveConfig::new(ObjectiveKind::Ml)).with_steps(400).with_seed(1);
    cfg.eval_interval = 100;
    cfg.eval_points = 1000;
    let ck = fit(&cfg, &tr.points, &te.points).unwrap();
    assert_eq!(ck.history.len(), 5);
    // Exponential smoothing with weight 1/2.
    let mut smooth = Vec::new();
    for r in &ck.history {
        let prev = smooth.last().copied().unwrap_or(r.nll);
        smooth.push(0.5 * prev + 0.5 * r.nll);
    }
    assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
}

#[test]
fn exhaustive_blocks_reproduce_the_exact_epoch_loss() {
    let arch = ArchSpec::coupling(3, 2, CouplingKind::Affine, NetSpec { hidden: 8, blocks: 1 });
    let stack = FlowStack::randomized(arch, 2, 0.3).unwrap();
    let x = stack.sample(96, 1).unwrap();
    for kind in [ObjectiveKind::Pf, ObjectiveKind::PfLagrangian] {
        let exact_cfg = ObjectiveConfig::new(kind).with_alpha(2.0);
        let single = exact_cfg.clone().with_estimator(Estimator::UnbiasedSingleBlock, 0);
        let (mut exact, mut avg) = (0.0, 0.0);
        for b in 0..3 {
            let batch = x.slice_rows(32 * b, 32 * (b + 1));
            exact += evaluate(&exact_cfg, &stack, &batch, BlockChoice::default()).unwrap().mean / 3.0;
            for k in 0..3 {
                avg += evaluate(&single, &stack, &batch, BlockChoice::Fixed(k)).unwrap().mean / 9.0;
            }
        }
        assert!((exact - avg).abs() < 1e-10, "{kind:?}: {exact} vs {avg}");
    }
}

#[test]
fn injective_stage_two_freezes_the_manifold() {
    let a = Tensor::from_rows(&[vec![1.0, 0.2, 0.1], vec![0.3, 1.0, 0.0], vec![0.5, -0.4, 1.0]]);
    let truth = injective_linear(&a, 2);
    let x = truth.sample(600, 3).unwrap();
    let (tr, te) = (x.slice_rows(0, 500), x.slice_rows(500, 600));
    let arch = ArchSpec::injective(2, 3, 1, 1, CouplingKind::Affine, NetSpec { hidden: 8, blocks: 1 });
    let mut cfg = InjectiveConfig::new(arch, 4);
    for s in [&mut cfg.stage1, &mut cfg.stage2] {
        s.steps = Some(10);
        s.batch_size = 50;
        s.eval_interval = 5;
        s.eval_points = 50;
    }
    let out = fit_injective(&cfg, &tr, &te).unwrap();
    let s1 = out.stage1.stack().unwrap();
    let s2 = out.stage2.stack().unwrap();
    let frozen = s1.injective_param_range();
    assert!(!frozen.is_empty());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out.stage1.params[frozen.clone()]), bits(&out.stage2.params[frozen.clone()]));
    assert_ne!(out.stage1.params[..frozen.start], out.stage2.params[..frozen.start]);
    assert!(reconstruction_mse(&s2, &te).unwrap().is_finite());
    assert!(out.stage2.history.iter().all(|r| r.ihat_p.is_none()));
    assert!(s1.is_injective());
}
