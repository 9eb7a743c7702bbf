use super::*;
use crate::data::{gen_synthetic, Split, SynthKind};
use crate::nn::{build_factory_pair, init_net};
use crate::rng::{seeded, uniform_sym};

fn param_with_grad(values: Vec<f64>, grad: Vec<f64>) -> Tensor {
    let p = Tensor::param(&[values.len()], values).unwrap();
    // d(Σ g·p)/dp = g
    let g = Tensor::new(p.shape(), grad).unwrap();
    p.mul(&g).unwrap().sum().backward().unwrap();
    p
}

#[test]
fn plain_gradient_step() {
    let p = param_with_grad(vec![1.0, -2.0], vec![0.5, 3.0]);
    let mut s = OptimizerState::new(&[p.clone()], 1.0, 0.0, 0.0);
    sgd_step(&[p.clone()], &mut s).unwrap();
    assert_eq!(p.to_vec(), vec![0.5, -5.0]);
}

#[test]
fn momentum_recurrence() {
    let p = param_with_grad(vec![0.0], vec![1.0]);
    let mut s = OptimizerState::new(&[p.clone()], 1.0, 0.9, 0.0);
    sgd_step(&[p.clone()], &mut s).unwrap();
    assert_eq!(p.to_vec(), vec![-1.0]);
    sgd_step(&[p.clone()], &mut s).unwrap();
    assert!((p.to_vec()[0] - (-1.0 - 1.9)).abs() < 1e-15);
}

#[test]
fn weight_decay_adds_to_gradient() {
    let p = param_with_grad(vec![2.0], vec![0.0]);
    let mut s = OptimizerState::new(&[p.clone()], 0.1, 0.0, 0.5);
    sgd_step(&[p.clone()], &mut s).unwrap();
    assert!((p.to_vec()[0] - (2.0 - 0.1 * 1.0)).abs() < 1e-15);
}

#[test]
fn missing_gradient_names_parameter() {
    let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap().named("block1.0.weight");
    let mut s = OptimizerState::new(&[p.clone()], 1.0, 0.0, 0.0);
    match sgd_step(&[p.clone()], &mut s) {
        Err(Error::Training(msg)) => assert!(msg.contains("block1.0.weight")),
        other => panic!("expected training error, got {other:?}"),
    }
    assert_eq!(p.to_vec(), vec![1.0, 2.0]);
}

#[test]
fn schedule_decades() {
    let s = Schedule::new(0.05, vec![210, 150, 180]);
    assert_eq!(s.lr_at(0), 0.05);
    assert_eq!(s.lr_at(149), 0.05);
    assert!((s.lr_at(150) - 0.005).abs() < 1e-18);
    assert!((s.lr_at(180) - 0.0005).abs() < 1e-18);
    assert!((s.lr_at(239) - 5e-5).abs() < 1e-18);
}

#[test]
fn counting_matches_oracle() {
    let mut rng = seeded(4);
    for _ in 0..50 {
        let (b, k) = (17, 5);
        let logits: Vec<f64> = (0..b * k).map(|_| uniform_sym(&mut rng, 3.0)).collect();
        let t = Targets((0..b).map(|i| (i * 7) % k).collect());
        let oracle = (0..b)
            .filter(|&r| {
                let row = &logits[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter().position(|&v| v == m).unwrap() == t.0[r]
            })
            .count();
        assert_eq!(count_correct(&Tensor::new(&[b, k], logits).unwrap(), &t), oracle);
    }
}

#[test]
fn constant_logits_score_argmax_class_frequency() {
    let spec = ArchSpec::preset("mlp").unwrap();
    let net = init_net(&spec.student_arch(), 0).unwrap();
    // zero every weight: logits equal the bias for every sample
    for (name, _, v) in net.named_values() {
        if name.ends_with("weight") {
            net.set_value(&name, &vec![0.0; v.len()]).unwrap();
        }
    }
    net.set_value("classifier.1.bias", &[0.0, 0.0, 1.0, 0.0]).unwrap();
    let (train, _) = gen_synthetic(SynthKind::Blobs, 4, 41, 0, 0.3, 1).unwrap();
    let acc = evaluate(&net, &train).unwrap();
    let freq = train.class_counts()[2] as f64 / 41.0;
    assert_eq!(acc, freq);
}

#[test]
fn empty_dataset_is_an_evaluation_error() {
    let spec = ArchSpec::preset("mlp").unwrap();
    let net = init_net(&spec.student_arch(), 0).unwrap();
    let empty = Dataset {
        samples: Tensor::zeros(&[1, 2]).unwrap(),
        labels: Targets(vec![]),
        classes: 4,
        split: Split::Test,
    };
    assert!(matches!(evaluate(&net, &empty), Err(Error::Evaluation(_))));
}

#[test]
fn batches_cover_every_sample_once() {
    let mut rng = seeded(0);
    for n in [2, 5, 64, 65, 129] {
        let batches = epoch_batches(n, 64, &mut rng);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() >= 2));
    }
}

fn small_optim(epochs: usize) -> OptimConfig {
    OptimConfig { epochs, batch_size: 16, lr: 0.05, momentum: 0.9, weight_decay: 5e-4, milestones: vec![3] }
}

fn blob_data() -> (Dataset, Dataset) {
    gen_synthetic(SynthKind::Blobs, 4, 96, 1, 0.4, 1).unwrap()
}

#[test]
fn zero_epochs_gives_initial_row_only() {
    let spec = ArchSpec::preset("mlp").unwrap();
    let (train, test) = blob_data();
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let r = train_run(&spec, TrainMode::Scratch, &plan, &small_optim(0), None, &train, &test, 0).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].epoch, 0);
}

#[test]
fn scratch_training_learns_blobs() {
    let spec = ArchSpec::preset("mlp").unwrap();
    let (train, test) = blob_data();
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let r = train_run(&spec, TrainMode::Scratch, &plan, &small_optim(8), None, &train, &test, 0).unwrap();
    assert!(r.final_test_acc() > 0.9, "{}", r.final_test_acc());
    assert!(r.rows.iter().all(|row| row.losses.distill == 0.0 && row.losses.cross == 0.0));
}

#[test]
fn teacher_untouched_and_runs_deterministic() {
    let spec = ArchSpec::preset("mlp").unwrap();
    let (train, test) = blob_data();
    let (teacher, _) = train_teacher(&spec.teacher_arch(), &small_optim(3), &train, &test, 5).unwrap();
    let teacher = teacher.freeze();
    let before = teacher.named_values();
    let mut plan = DistillPlan::new(3, 4.0).unwrap();
    plan.warmup_epochs = 2;
    let run = || {
        let r = train_run(&spec, TrainMode::BlockKd, &plan, &small_optim(4), Some(&teacher), &train, &test, 9).unwrap();
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &r.rows, 3).unwrap();
        (csv, r.student.named_values())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(teacher.named_values(), before);

    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("epoch,lr,warmup,L_total"));
}

#[test]
fn distill_modes_need_a_matching_teacher() {
    let spec = ArchSpec::preset("mlp").unwrap();
    let (train, test) = blob_data();
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let err = train_run(&spec, TrainMode::Kd, &plan, &small_optim(1), None, &train, &test, 0).unwrap_err();
    assert!(err.is_config());
    let wrong = build_factory_pair(&ArchSpec::preset("mlp").unwrap(), 0).unwrap().student.freeze();
    let err = train_run(&spec, TrainMode::Kd, &plan, &small_optim(1), Some(&wrong), &train, &test, 0).unwrap_err();
    assert!(err.is_config());
}

#[test]
fn dataset_mismatch_fails_before_training() {
    let spec = ArchSpec::preset("toy").unwrap();
    let (train, test) = blob_data();
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let err = train_run(&spec, TrainMode::Scratch, &plan, &small_optim(1), None, &train, &test, 0).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn kd_mode_drops_stones_and_cross() {
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let kd = plan_for_mode(TrainMode::Kd, &plan);
    assert!(kd.active_stones().is_empty());
    assert_eq!(kd.gamma, 0.0);
    assert_eq!(kd.beta, 1.0);
    let scratch = plan_for_mode(TrainMode::Scratch, &plan);
    assert_eq!((scratch.beta, scratch.gamma), (0.0, 0.0));
}

#[test]
fn timing_csv_excludes_initial_row() {
    let rows = vec![
        EpochRow { epoch: 0, lr: 0.1, losses: Default::default(), train_acc: 0.0, test_acc: 0.0, ms_per_batch: 0.0 },
        EpochRow { epoch: 1, lr: 0.1, losses: Default::default(), train_acc: 0.0, test_acc: 0.0, ms_per_batch: 1.5 },
    ];
    let mut out = Vec::new();
    write_timing_csv(&mut out, &rows).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "epoch,ms_per_batch\n1,1.5000\n");
}

#[test]
fn metrics_header_lists_every_breakdown_field() {
    let h = metrics_header(2);
    for col in ["L_task_N1", "L_distill_N2", "L_cross_N2", "train_acc", "test_acc", "warmup", "lr"] {
        assert!(h.iter().any(|c| c == col), "missing {col}");
    }
    assert_eq!(h.len(), 10 + 6 + 2);
}

#[test]
fn pruned_stones_leave_their_connectors_alone() {
    let spec = ArchSpec::preset("mlp").unwrap();
    let (train, test) = blob_data();
    let (teacher, _) = train_teacher(&spec.teacher_arch(), &small_optim(1), &train, &test, 5).unwrap();
    let teacher = teacher.freeze();
    let plan = DistillPlan::new(3, 4.0).unwrap().prune_stones(&[2, 3].into_iter().collect()).unwrap();
    let r = train_run(&spec, TrainMode::BlockKd, &plan, &small_optim(2), Some(&teacher), &train, &test, 0).unwrap();
    let values = |c: &Connector| c.parameters().iter().map(|p| p.to_vec()).collect::<Vec<_>>();
    let untouched = crate::nn::build_connectors(
        &spec.teacher_arch().feature_shapes().unwrap(),
        &spec.student_arch().feature_shapes().unwrap(),
        &mut crate::rng::substream(0, "connector-init"),
    );
    assert_eq!(values(&r.connectors[0]), values(&untouched[0]));
    assert_ne!(values(&r.connectors[1]), values(&untouched[1]));

    let mut idle = DistillPlan::new(3, 4.0).unwrap();
    idle.terms.stone_task = false;
    idle.terms.stone_distill = false;
    idle.terms.cross = false;
    assert!(idle.stones_in_use().is_empty());
    train_run(&spec, TrainMode::BlockKd, &idle, &small_optim(1), Some(&teacher), &train, &test, 0).unwrap();
}
