use galr_core::training::data::measured_snr_db;
use galr_core::training::loss::{permutations, si_snr_with};
use galr_core::training::optim::global_norm;
use galr_core::training::si_snr_var;
use galr_core::training::{
    adam_step, clip_global_norm, gen_synthetic, pit_loss, si_snr, train, AdamConfig, EarlyStopper,
    LrSchedule, OptimState, SiSnrOptions, SyntheticConfig, TrainConfig,
};
use galr_core::{Graph, HyperParams, SeparatorModel, Tensor};
use proptest::prelude::*;

fn signal(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, n)
        .prop_filter("non-silent", |v| v.iter().any(|x| x.abs() > 0.1))
}

fn signals(c: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(signal(n), c)
}

/// Minimum of `-mean SI-SNR` over every assignment, by direct enumeration.
fn brute_force(est: &[Vec<f32>], tgt: &[Vec<f32>]) -> f64 {
    let c = est.len();
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..c).collect();
    // Heap's algorithm
    fn visit(k: usize, idx: &mut Vec<usize>, est: &[Vec<f32>], tgt: &[Vec<f32>], best: &mut f64) {
        if k == 1 {
            let s: f64 = (0..idx.len())
                .map(|t| {
                    galr_core::training::si_snr_clamped(
                        &est[idx[t]],
                        &tgt[t],
                        SiSnrOptions::default(),
                    )
                    .unwrap()
                })
                .sum();
            *best = best.min(-s / idx.len() as f64);
            return;
        }
        for i in 0..k {
            visit(k - 1, idx, est, tgt, best);
            if k % 2 == 0 {
                idx.swap(i, k - 1);
            } else {
                idx.swap(0, k - 1);
            }
        }
    }
    visit(c, &mut idx, est, tgt, &mut best);
    best
}

fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(|x| x.as_slice()).collect()
}

proptest! {
    #[test]
    fn si_snr_ignores_scale(est in signal(64), tgt in signal(64), a in 0.01f64..100.0, neg in any::<bool>(), zero_mean in any::<bool>()) {
        // scaled in f64 so that only the metric itself is under test
        let a = if neg { -a } else { a };
        let opts = SiSnrOptions { zero_mean };
        let value = |e: &[f32], ea: f64, t: &[f32], ta: f64| {
            let mut g = Graph::<f64>::new();
            let vec = |x: &[f32], s: f64| Tensor::new([x.len()], x.iter().map(|&v| f64::from(v) * s).collect()).unwrap();
            let ev = g.constant(vec(e, ea));
            let tv = g.constant(vec(t, ta));
            let raw = si_snr_var(&mut g, ev, tv, SiSnrOptions { zero_mean }).unwrap();
            g.value(raw).data()[0]
        };
        let base = value(&est, 1.0, &tgt, 1.0);
        prop_assume!(base.abs() < galr_core::training::CLAMP_DB);
        prop_assert!((value(&est, a, &tgt, 1.0) - base).abs() <= 1e-5);
        prop_assert!((value(&est, 1.0, &tgt, a) - base).abs() <= 1e-5);
        // exactly representable scales through the f32 metric
        let p = (a.log2().round() as i32).clamp(-6, 6);
        let s = 2f32.powi(p) * if neg { -1.0 } else { 1.0 };
        let scaled: Vec<f32> = est.iter().map(|x| x * s).collect();
        let base32 = si_snr_with(&est, &tgt, opts).unwrap();
        prop_assert!((si_snr_with(&scaled, &tgt, opts).unwrap() - base32).abs() <= 1e-5);
        prop_assert!((si_snr_with(&tgt, &scaled, opts).unwrap() - si_snr_with(&tgt, &est, opts).unwrap()).abs() <= 1e-5);
    }

    #[test]
    fn pit_is_the_best_assignment(c in 2usize..4, seed in any::<u64>()) {
        let cfg = SyntheticConfig { seed, count: 1, seconds: 0.01, sources: c, ..Default::default() };
        let tgt: Vec<Vec<f32>> = gen_synthetic(&cfg).unwrap()[0].sources.iter().map(|w| w.samples.clone()).collect();
        // estimates: targets in some order plus leakage from the others
        let est: Vec<Vec<f32>> = (0..c)
            .map(|e| {
                let main = (e + seed as usize) % c;
                (0..tgt[0].len())
                    .map(|i| tgt[main][i] + 0.3 * tgt[(main + 1) % c][i])
                    .collect()
            })
            .collect();
        let (loss, perm) = pit_loss(&refs(&est), &refs(&tgt), SiSnrOptions::default()).unwrap();
        prop_assert!((loss - brute_force(&est, &tgt)).abs() <= 1e-9);
        for p in permutations(c).unwrap() {
            let fixed: f64 = (0..c)
                .map(|t| galr_core::training::si_snr_clamped(&est[p[t]], &tgt[t], SiSnrOptions::default()).unwrap())
                .sum::<f64>();
            prop_assert!(loss <= -fixed / c as f64 + 1e-12);
        }
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..c).collect::<Vec<_>>());
    }

    #[test]
    fn pit_random_matches_brute_force(c in 2usize..4, seed in 0u64..1000) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut draw = || -> Vec<Vec<f32>> {
            (0..c).map(|_| (0..32).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect()).collect()
        };
        let est = draw();
        let tgt = draw();
        let (loss, _) = pit_loss(&refs(&est), &refs(&tgt), SiSnrOptions::default()).unwrap();
        prop_assert!((loss - brute_force(&est, &tgt)).abs() <= 1e-9);
    }

    #[test]
    fn permuting_targets_permutes_the_assignment(est in signals(3, 48), tgt in signals(3, 48), rot in 1usize..3) {
        let (loss, perm) = pit_loss(&refs(&est), &refs(&tgt), SiSnrOptions::default()).unwrap();
        // new target slot t holds old target (t + rot) % 3
        let moved: Vec<Vec<f32>> = (0..3).map(|t| tgt[(t + rot) % 3].clone()).collect();
        let (loss2, perm2) = pit_loss(&refs(&est), &refs(&moved), SiSnrOptions::default()).unwrap();
        prop_assert!((loss - loss2).abs() <= 1e-6);
        // ties aside, each target keeps its estimate
        let score = |p: &[usize], t: &[Vec<f32>]| -> f64 {
            (0..3).map(|i| galr_core::training::si_snr_clamped(&est[p[i]], &t[i], SiSnrOptions::default()).unwrap()).sum()
        };
        let expect: Vec<usize> = (0..3).map(|t| perm[(t + rot) % 3]).collect();
        prop_assert!((score(&perm2, &moved) - score(&expect, &moved)).abs() <= 1e-9);
    }

    #[test]
    fn clipping_bounds_the_global_norm(data in prop::collection::vec(-100.0f32..100.0, 1..40), split in 0usize..40) {
        let split = split.min(data.len());
        let mut grads = vec![
            Tensor::new([split], data[..split].to_vec()).unwrap(),
            Tensor::new([data.len() - split], data[split..].to_vec()).unwrap(),
        ];
        let before = global_norm(&grads);
        let reported = clip_global_norm(&mut grads, 5.0);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&grads) <= 5.0 + 1e-6);
        if before <= 5.0 {
            prop_assert_eq!(grads[0].data(), &data[..split]);
        }
    }
}

#[test]
fn si_snr_edge_cases() {
    let t = [1.0f32, -2.0, 0.5, 3.0];
    assert_eq!(si_snr(&[0.0; 4], &t).unwrap(), f64::NEG_INFINITY);
    assert!(matches!(
        si_snr(&t, &[0.0; 4]),
        Err(galr_core::Error::Input(_))
    ));
    assert!(si_snr(&t, &t[..3]).is_err());
    // orthogonal estimate: all residual
    assert!(si_snr(&[1.0, 0.0], &[0.0, 1.0]).unwrap() < -100.0);
    assert_eq!(
        galr_core::training::si_snr_clamped(&t, &t, SiSnrOptions::default()).unwrap(),
        galr_core::training::CLAMP_DB
    );
    assert!(permutations(6).is_err());
}

#[test]
fn adam_matches_scalar_oracle() {
    let cfg = AdamConfig::default();
    let grads = [0.5f64, -1.5, 2.0];
    let lr = 0.01;
    let mut p = vec![Tensor::new([1], vec![1.0f64]).unwrap()];
    let mut state = OptimState::new(&p, lr, cfg);
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let mut gt = vec![Tensor::new([1], vec![g]).unwrap()];
        adam_step(&mut p, &mut gt, &mut state).unwrap();
        let t = t as i32 + 1;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.999f64.powi(t));
        theta -= lr * 1e-6 * theta;
        theta -= lr * mhat / (vhat.sqrt() + 1e-8);
        assert!(
            (p[0].data()[0] - theta).abs() <= 1e-12,
            "step {t}: {} vs {theta}",
            p[0].data()[0]
        );
    }
}

#[test]
fn schedule_decays_every_two_epochs() {
    let s = LrSchedule::default();
    assert_eq!(s.at(0), 1e-3);
    assert_eq!(s.at(1), 1e-3);
    assert!((s.at(2) - 0.96e-3).abs() < 1e-15);
    assert!((s.at(5) - 1e-3 * 0.96f64.powi(2)).abs() < 1e-15);
}

#[test]
fn synthetic_mixtures_are_exact_sums_at_the_drawn_snr() {
    let cfg = SyntheticConfig {
        seed: 4,
        count: 12,
        ..Default::default()
    };
    let set = gen_synthetic(&cfg).unwrap();
    assert_eq!(set, gen_synthetic(&cfg).unwrap());
    for ex in &set {
        assert_eq!(ex.mixture.len(), 8000);
        for i in 0..8000 {
            assert_eq!(
                ex.mixture.samples[i],
                ex.sources[0].samples[i] + ex.sources[1].samples[i]
            );
        }
        assert!(ex.mixture.peak() <= 1.0);
        assert!((0.0..=5.0).contains(&ex.snr_db));
        assert!((measured_snr_db(ex, 1) - ex.snr_db).abs() < 1e-3);
    }
}

fn tiny_run(epochs: usize) -> (SeparatorModel<f32>, galr_core::training::TrainReport) {
    let data = |seed| SyntheticConfig {
        seed,
        count: 6,
        seconds: 0.125,
        ..Default::default()
    };
    let train_set = gen_synthetic(&data(1)).unwrap();
    let val_set = gen_synthetic(&data(2)).unwrap();
    let hp = HyperParams {
        d: 8,
        m: 8,
        k: 8,
        q: 4,
        h: 8,
        j: 2,
        n: 1,
        ..HyperParams::default()
    };
    let mut model = SeparatorModel::new(hp, 5).unwrap();
    let cfg = TrainConfig {
        epochs,
        batch: 2,
        schedule: LrSchedule {
            initial: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = train(&mut model, &train_set, &val_set, &cfg, |_| {}).unwrap();
    (model, report)
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (model, report) = tiny_run(6);
    let train_losses: Vec<f64> = report
        .history
        .iter()
        .filter(|m| m.split == "train")
        .map(|m| m.loss)
        .collect();
    assert_eq!(train_losses.len(), 6);
    assert!(train_losses[5] < train_losses[0], "{train_losses:?}");
    assert!(report.best_val_loss.is_finite());
    let (again, report2) = tiny_run(6);
    assert_eq!(model.store, again.store);
    assert_eq!(report, report2);
}

#[test]
fn early_stopping_counts_stale_epochs() {
    let mut s = EarlyStopper::new(3);
    assert_eq!(s.update(2.0), (true, false));
    assert_eq!(s.update(1.0), (true, false));
    assert_eq!(s.update(1.0), (false, false));
    assert_eq!(s.update(1.5), (false, false));
    assert_eq!(s.update(1.2), (false, true));
}
