use super::*;
use crate::nn::{build_factory_pair, ArchSpec};
use crate::numdiff::{central_gradient, rel_err, DEFAULT_STEP};
use crate::rng::{seeded, uniform_sym};
use proptest::prelude::*;

fn batch(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| uniform_sym(&mut rng, 1.0)).collect()).unwrap()
}

fn targets(seed: u64, b: usize, k: usize) -> Targets {
    Targets((0..b).map(|i| (i + seed as usize) % k).collect())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Plain-f64 loss oracles, independent of the tape.
fn log_softmax_row(y: &[f64]) -> Vec<f64> {
    let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + y.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    y.iter().map(|v| v - lse).collect()
}

fn ce_oracle(y: &[f64], k: usize, t: &Targets) -> f64 {
    let b = y.len() / k;
    (0..b).map(|r| -log_softmax_row(&y[r * k..(r + 1) * k])[t.0[r]]).sum::<f64>() / b as f64
}

fn kd_oracle(ys: &[f64], yt: &[f64], k: usize, tau: f64) -> f64 {
    let b = ys.len() / k;
    let mut acc = 0.0;
    for r in 0..b {
        let s: Vec<f64> = ys[r * k..(r + 1) * k].iter().map(|v| v / tau).collect();
        let t: Vec<f64> = yt[r * k..(r + 1) * k].iter().map(|v| v / tau).collect();
        let (ls, lt) = (log_softmax_row(&s), log_softmax_row(&t));
        acc += (0..k).map(|j| lt[j].exp() * (lt[j] - ls[j])).sum::<f64>();
    }
    tau * tau * acc / b as f64
}

fn identity_pair() -> (CompositeNet, CompositeNet, Vec<Connector>) {
    let spec = ArchSpec::preset("tiny-same").unwrap();
    let pair = build_factory_pair(&spec, 3).unwrap();
    let student = pair.teacher.unfrozen_clone();
    let shapes = spec.teacher_arch().feature_shapes().unwrap();
    let connectors = shapes.iter().enumerate().map(|(i, s)| Connector::identity(i + 1, *s)).collect();
    (pair.teacher, student, connectors)
}

#[test]
fn coefficients_halve_toward_the_input() {
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let c = plan.stone_coefficients();
    assert_eq!(c.into_iter().collect::<Vec<_>>(), vec![(1, 0.25), (2, 0.5), (3, 1.0)]);
}

#[test]
fn prune_keeps_coefficients() {
    let plan = DistillPlan::new(4, 4.0).unwrap();
    let pruned = plan.prune_stones(&[1, 3].into_iter().collect()).unwrap();
    assert_eq!(pruned.stone_coefficients().into_iter().collect::<Vec<_>>(), vec![(1, 0.125), (3, 0.5)]);
    assert!(plan.prune_stones(&[5].into_iter().collect()).unwrap_err().is_config());
    assert!(plan.prune_stones(&[0].into_iter().collect()).unwrap_err().is_config());
}

#[test]
fn empty_stone_set_disables_cross() {
    let plan = DistillPlan::with_stones(3, 4.0, []).unwrap();
    assert_eq!(plan.effective_gamma(), 0.0);
}

#[test]
fn plan_validation() {
    let mut plan = DistillPlan::new(3, 4.0).unwrap();
    plan.beta = -1.0;
    assert!(plan.validate().unwrap_err().is_config());
    plan.beta = 1.0;
    plan.temperature = 0.0;
    assert!(plan.validate().unwrap_err().is_config());
    assert!(DistillPlan::new(0, 4.0).unwrap_err().is_config());
}

#[test]
fn warmup_ramps_linearly() {
    assert_eq!(warmup_factor(0, 0), 1.0);
    assert_eq!(warmup_factor(7, 0), 1.0);
    assert_eq!(warmup_factor(0, 4), 0.0);
    assert_eq!(warmup_factor(1, 4), 0.25);
    assert_eq!(warmup_factor(4, 4), 1.0);
    assert_eq!(warmup_factor(9, 4), 1.0);
}

#[test]
fn ensemble_is_detached_elementwise_mean() {
    let a = Tensor::param(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let b = Tensor::param(&[1, 3], vec![3.0, 2.0, -1.0]).unwrap();
    let stones: BTreeMap<_, _> = [(1, a), (2, b)].into_iter().collect();
    let e = ensemble_logits(&stones).unwrap();
    assert_eq!(e.to_vec(), vec![2.0, 2.0, 1.0]);
    assert!(!e.requires_grad());
    assert!(ensemble_logits(&BTreeMap::new()).is_err());
}

#[test]
fn ensemble_rejects_mismatched_shapes() {
    let stones: BTreeMap<_, _> =
        [(1, Tensor::zeros(&[1, 3]).unwrap()), (2, Tensor::zeros(&[2, 3]).unwrap())].into_iter().collect();
    assert!(matches!(ensemble_logits(&stones), Err(Error::Dimension { .. })));
}

#[test]
fn cross_loss_term_by_term() {
    let k = 4;
    let tau = 3.0;
    let d = LogitDistance::kl(tau).unwrap();
    for seed in 0..20 {
        let y_s = batch(seed, &[5, k]);
        let stones: BTreeMap<_, _> = (1..=3).map(|i| (i, batch(100 * seed + i as u64, &[5, k]))).collect();
        let ens = ensemble_logits(&stones).unwrap();
        let got = cross_loss(&y_s, &stones, &ens, &d).unwrap().item();
        let mut want = kd_oracle(&y_s.to_vec(), &ens.to_vec(), k, tau);
        for y in stones.values() {
            want += kd_oracle(&y.to_vec(), &ens.to_vec(), k, tau);
        }
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
    let y_s = batch(1, &[2, k]);
    assert_eq!(cross_loss(&y_s, &BTreeMap::new(), &y_s, &d).unwrap().item(), 0.0);
}

#[test]
fn cross_loss_treats_ensemble_as_constant() {
    // Gradient on each stone is only its own pull toward the fixed ensemble.
    let tau = 2.0;
    let d = LogitDistance::kl(tau).unwrap();
    let y_s = Tensor::param(&[3, 4], batch(1, &[3, 4]).to_vec()).unwrap();
    let stones: BTreeMap<_, _> = (1..=2)
        .map(|i| (i, Tensor::param(&[3, 4], batch(10 + i as u64, &[3, 4]).to_vec()).unwrap()))
        .collect();
    let ens = ensemble_logits(&stones).unwrap();
    cross_loss(&y_s, &stones, &ens, &d).unwrap().backward().unwrap();
    for y in stones.values().chain(std::iter::once(&y_s)) {
        let closed = kd_gradient_wrt_student(y, &ens, tau);
        assert!(max_abs_diff(&y.grad().unwrap(), &closed) <= 1e-12);
    }
}

fn kd_gradient_wrt_student(y: &Tensor, target: &Tensor, tau: f64) -> Vec<f64> {
    let b = y.shape()[0] as f64;
    crate::losses::kd_gradient_wrt_student_logits(y, target, tau)
        .unwrap()
        .to_vec()
        .into_iter()
        .map(|g| g * tau * tau / b)
        .collect()
}

#[test]
fn identical_nets_give_teacher_logits_at_every_stone() {
    let (teacher, student, connectors) = identity_pair();
    let nets = Nets { teacher: &teacher, student: &student, connectors: &connectors };
    let x = batch(9, &[4, 1, 8, 8]);
    let y_t = teacher.forward(&x, Mode::Eval).unwrap();
    let features = student.forward_with_features(&x, Mode::Eval).unwrap().features;
    let all: BTreeSet<usize> = (1..=3).collect();
    let stones = stone_logits(nets, &features, &all, Mode::Eval).unwrap();
    for (i, y) in &stones {
        assert!(max_abs_diff(&y.to_vec(), &y_t.to_vec()) <= 1e-12, "stone {i}");
    }
}

#[test]
fn identical_nets_have_zero_distillation_and_cross() {
    let (teacher, student, connectors) = identity_pair();
    let nets = Nets { teacher: &teacher, student: &student, connectors: &connectors };
    let x = batch(2, &[6, 1, 8, 8]);
    let t = targets(0, 6, 4);
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let v = total_loss(&x, &t, nets, &plan, 0, Mode::Eval).unwrap();
    assert!(v.breakdown.distill.abs() <= 1e-12, "{}", v.breakdown.distill);
    assert!(v.breakdown.cross.abs() <= 1e-12, "{}", v.breakdown.cross);
}

#[test]
fn feature_reuse_matches_independent_forward() {
    let spec = ArchSpec::preset("tiny-nonuniform").unwrap();
    for seed in 0..10 {
        let pair = build_factory_pair(&spec, seed).unwrap();
        let nets = pair.nets();
        let x = batch(seed + 50, &[5, 1, 8, 8]);
        for mode in [Mode::Train, Mode::Eval] {
            let features = pair.student.forward_with_features(&x, mode).unwrap().features;
            let all: BTreeSet<usize> = (1..=3).collect();
            let reused = stone_logits(nets, &features, &all, mode).unwrap();
            for (&i, y) in &reused {
                let fresh = nets.stone(i).unwrap().forward(&x, mode).unwrap();
                assert!(max_abs_diff(&y.to_vec(), &fresh.to_vec()) <= 1e-10, "seed {seed} stone {i}");
            }
        }
    }
}

#[test]
fn inactive_stone_requests_fail() {
    let pair = build_factory_pair(&ArchSpec::preset("tiny-uniform").unwrap(), 0).unwrap();
    assert!(matches!(pair.nets().stone(0), Err(Error::Usage(_))));
    assert!(matches!(pair.nets().stone(4), Err(Error::Usage(_))));
    let x = batch(0, &[2, 1, 8, 8]);
    let features = pair.student.forward_with_features(&x, Mode::Eval).unwrap().features;
    let bad: BTreeSet<usize> = [5].into_iter().collect();
    assert!(stone_logits(pair.nets(), &features, &bad, Mode::Eval).is_err());
}

#[test]
fn no_stones_reduces_to_vanilla_kd() {
    let spec = ArchSpec::preset("tiny-uniform").unwrap();
    for seed in 0..10 {
        let pair = build_factory_pair(&spec, seed).unwrap();
        let x = batch(seed, &[8, 1, 8, 8]);
        let t = targets(seed, 8, 4);
        let mut plan = DistillPlan::with_stones(3, 4.0, []).unwrap();
        plan.alpha = 0.7;
        plan.beta = 1.3;
        plan.gamma = 0.0;
        let got = total_loss(&x, &t, pair.nets(), &plan, 5, Mode::Train).unwrap().loss.item();

        // standalone KD: α·CE(Y^S) + β·τ²·KL(p_t ‖ p_s)
        let y_s = pair.student.forward(&x, Mode::Train).unwrap();
        let y_t = pair.teacher.forward(&x, Mode::Eval).unwrap();
        let want = task_loss(&y_s, &t)
            .unwrap()
            .scale(0.7)
            .add(&crate::losses::kl_logit_distance(&y_s, &y_t, 4.0).unwrap().scale(1.3))
            .unwrap()
            .item();
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
        let oracle = 0.7 * ce_oracle(&y_s.to_vec(), 4, &t) + 1.3 * kd_oracle(&y_s.to_vec(), &y_t.to_vec(), 4, 4.0);
        assert!((got - oracle).abs() <= 1e-10);
    }
}

/// Total objective recomputed with every stone run from the input and all
/// losses in plain f64.
fn total_oracle(pair: &FactoryPair, x: &Tensor, t: &Targets, plan: &DistillPlan, epoch: usize, mode: Mode) -> f64 {
    let k = 4;
    let tau = plan.temperature;
    let y_s = pair.student.forward(x, mode).unwrap().to_vec();
    let y_t = pair.teacher.forward(x, Mode::Eval).unwrap().to_vec();
    let stones: BTreeMap<usize, Vec<f64>> = plan
        .active_stones()
        .iter()
        .map(|&i| (i, pair.nets().stone(i).unwrap().forward(x, mode).unwrap().to_vec()))
        .collect();
    let c = |i: usize| 2f64.powi(i as i32 - plan.n_blocks() as i32);
    let mut task = ce_oracle(&y_s, k, t);
    let mut distill = kd_oracle(&y_s, &y_t, k, tau);
    for (&i, y) in &stones {
        task += c(i) * ce_oracle(y, k, t);
        distill += c(i) * kd_oracle(y, &y_t, k, tau);
    }
    let mut cross = 0.0;
    if !stones.is_empty() {
        let mut ens = vec![0.0; y_s.len()];
        for y in stones.values() {
            ens.iter_mut().zip(y).for_each(|(e, v)| *e += v);
        }
        ens.iter_mut().for_each(|e| *e /= stones.len() as f64);
        cross = kd_oracle(&y_s, &ens, k, tau);
        for (&i, y) in &stones {
            cross += c(i) * kd_oracle(y, &ens, k, tau);
        }
    }
    let w = warmup_factor(epoch, plan.warmup_epochs);
    plan.alpha * task + w * plan.beta * distill + w * plan.gamma * cross
}

#[test]
fn total_matches_recompute_oracle() {
    let spec = ArchSpec::preset("tiny-nonuniform").unwrap();
    let stone_sets: [&[usize]; 4] = [&[1, 2, 3], &[3], &[1, 3], &[]];
    for seed in 0..8u64 {
        let pair = build_factory_pair(&spec, seed).unwrap();
        let x = batch(seed + 7, &[6, 1, 8, 8]);
        let t = targets(seed, 6, 4);
        for (j, set) in stone_sets.iter().enumerate() {
            let mut plan = DistillPlan::with_stones(3, 1.0 + seed as f64, set.iter().copied()).unwrap();
            plan.alpha = 0.5 + 0.1 * j as f64;
            plan.beta = 0.8;
            plan.gamma = if set.is_empty() { 0.0 } else { 0.6 };
            plan.warmup_epochs = 4;
            for mode in [Mode::Train, Mode::Eval] {
                let v = total_loss(&x, &t, pair.nets(), &plan, 2, mode).unwrap();
                let want = total_oracle(&pair, &x, &t, &plan, 2, mode);
                assert!((v.loss.item() - want).abs() <= 1e-10, "seed {seed} set {set:?}: {} vs {want}", v.loss.item());
            }
        }
    }
}

#[test]
fn gradient_reaches_only_active_connectors() {
    let spec = ArchSpec::preset("tiny-uniform").unwrap();
    let pair = build_factory_pair(&spec, 11).unwrap();
    let x = batch(4, &[6, 1, 8, 8]);
    let t = targets(1, 6, 4);
    let plan = DistillPlan::with_stones(3, 4.0, [1, 3]).unwrap();
    let v = total_loss(&x, &t, pair.nets(), &plan, 0, Mode::Train).unwrap();
    v.loss.backward().unwrap();
    let norm = |c: &Connector| c.conv.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>());
    assert!(norm(&pair.connectors[0]) > 0.0);
    assert!(pair.connectors[1].conv.grad().is_none());
    assert!(norm(&pair.connectors[2]) > 0.0);
    for p in pair.teacher.state() {
        if let crate::nn::StateEntry::Param(name, p) = p {
            assert!(p.grad().is_none(), "teacher parameter {name} got a gradient");
        }
    }
}

#[test]
fn connector_gradient_matches_finite_differences() {
    let spec = ArchSpec::preset("tiny-uniform").unwrap();
    let pair = build_factory_pair(&spec, 5).unwrap();
    let x = batch(6, &[4, 1, 8, 8]);
    let t = targets(2, 4, 4);
    // The ensemble target is a stop-gradient, which finite differences
    // cannot see; the cross term is covered separately.
    let mut plan = DistillPlan::new(3, 2.0).unwrap();
    plan.terms.cross = false;
    let eval = || Ok(total_loss(&x, &t, pair.nets(), &plan, 0, Mode::Eval)?.loss.item());
    for c in &pair.connectors {
        for p in c.parameters() {
            p.zero_grad();
        }
        total_loss(&x, &t, pair.nets(), &plan, 0, Mode::Eval).unwrap().loss.backward().unwrap();
        let fd = central_gradient(&c.conv, DEFAULT_STEP, eval).unwrap();
        let err = rel_err(&c.conv.grad().unwrap(), &fd);
        assert!(err <= 1e-6, "connector {}: rel err {err}", c.index);
    }
}

#[test]
fn terms_toggle_off_independently() {
    let spec = ArchSpec::preset("tiny-uniform").unwrap();
    let pair = build_factory_pair(&spec, 1).unwrap();
    let x = batch(1, &[4, 1, 8, 8]);
    let t = targets(0, 4, 4);
    let mut plan = DistillPlan::new(3, 4.0).unwrap();
    plan.terms = ObjectiveTerms { student_distill: false, stone_task: false, stone_distill: false, cross: false };
    let v = total_loss(&x, &t, pair.nets(), &plan, 0, Mode::Eval).unwrap();
    assert_eq!(v.breakdown.total, v.breakdown.task_student);
    assert!(v.breakdown.task_stone.is_empty() && v.breakdown.distill == 0.0 && v.breakdown.cross == 0.0);

    plan.terms.stone_task = true;
    let v = total_loss(&x, &t, pair.nets(), &plan, 0, Mode::Eval).unwrap();
    assert_eq!(v.breakdown.task_stone.len(), 3);
    assert_eq!(v.breakdown.distill, 0.0);
}

#[test]
fn warmup_scales_only_distillation_terms() {
    let spec = ArchSpec::preset("tiny-uniform").unwrap();
    let pair = build_factory_pair(&spec, 2).unwrap();
    let x = batch(3, &[4, 1, 8, 8]);
    let t = targets(0, 4, 4);
    let mut plan = DistillPlan::new(3, 4.0).unwrap();
    plan.warmup_epochs = 5;
    let v0 = total_loss(&x, &t, pair.nets(), &plan, 0, Mode::Eval).unwrap();
    assert!((v0.breakdown.total - v0.breakdown.task).abs() <= 1e-12);
    let v = total_loss(&x, &t, pair.nets(), &plan, 2, Mode::Eval).unwrap().breakdown;
    let want = v.task + 0.4 * v.distill + 0.4 * v.cross;
    assert!((v.total - want).abs() <= 1e-12);
}

#[test]
fn total_loss_requires_frozen_teacher() {
    let spec = ArchSpec::preset("tiny-uniform").unwrap();
    let pair = build_factory_pair(&spec, 2).unwrap();
    let live = pair.teacher.unfrozen_clone();
    let nets = Nets { teacher: &live, student: &pair.student, connectors: &pair.connectors };
    let plan = DistillPlan::new(3, 4.0).unwrap();
    let x = batch(3, &[2, 1, 8, 8]);
    assert!(total_loss(&x, &targets(0, 2, 4), nets, &plan, 0, Mode::Eval).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn breakdown_recombines_to_total(
        seed in 0u64..1000,
        alpha in 0.0f64..2.0,
        beta in 0.0f64..2.0,
        gamma in 0.0f64..2.0,
        mask in 0usize..8,
        epoch in 0usize..6,
    ) {
        let spec = ArchSpec::preset("tiny-uniform").unwrap();
        let pair = build_factory_pair(&spec, seed).unwrap();
        let x = batch(seed, &[3, 1, 8, 8]);
        let t = targets(seed, 3, 4);
        let stones = (1..=3).filter(|i| mask & (1 << (i - 1)) != 0);
        let mut plan = DistillPlan::with_stones(3, 4.0, stones).unwrap();
        plan.alpha = alpha;
        plan.beta = beta;
        plan.gamma = gamma;
        plan.warmup_epochs = 3;
        let b = total_loss(&x, &t, pair.nets(), &plan, epoch, Mode::Train).unwrap().breakdown;
        let w = warmup_factor(epoch, 3);
        let want = alpha * b.task + w * beta * b.distill + w * plan.effective_gamma() * b.cross;
        prop_assert!(b.total >= 0.0);
        prop_assert!((b.total - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}
