use fdivreg::data::{gen_synthetic_spectra, split};
use fdivreg::divergence::{hp_divergence_exact, hp_divergence_smoothed, nn_cut_count, smoothed_cut_mass, LabeledPointSet};
use fdivreg::loss::{combined_loss, LossConfig};
use fdivreg::model::build_mlp;
use fdivreg::numerics::{pairwise_distances, row_softmax_neg_scaled, sample_gaussian, Rng, Tensor};
use fdivreg::train::{batch_loss, train_with_objective, TrainConfig};
use proptest::prelude::*;

fn points(rng: &mut Rng, n: usize, d: usize, shift: f64) -> Tensor {
    sample_gaussian(rng, shift, 1.0, &[n, d]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(n in 2usize..64, d in 1usize..4, lambda in 0.01f64..10.0, seed in any::<u64>()) {
        let x = points(&mut Rng::new(seed), n, d, 0.0);
        let w = row_softmax_neg_scaled(&pairwise_distances(&x, &x).unwrap(), lambda).unwrap();
        for i in 0..n {
            prop_assert_eq!(w.at(i, i), 0.0);
            prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_obey_triangle_inequality(d in 1usize..6, seed in any::<u64>()) {
        let x = points(&mut Rng::new(seed), 3, d, 0.0);
        let m = pairwise_distances(&x, &x).unwrap();
        for (i, j, k) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
            prop_assert!(m.at(i, k) <= m.at(i, j) + m.at(j, k) + 1e-9);
        }
    }

    #[test]
    fn split_is_a_partition(n in 3usize..1000, seed in any::<u64>()) {
        let s = split(n, &mut Rng::new(seed)).unwrap();
        let holdout = (n / 10).max(1);
        prop_assert_eq!(s.val.len(), holdout);
        prop_assert_eq!(s.test.len(), holdout);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn divergence_bounds_and_swap_symmetry(n in 1usize..20, d in 1usize..4, shift in 0.0f64..5.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let sets = LabeledPointSet::new(points(&mut rng, n, d, 0.0), points(&mut rng, n, d, shift)).unwrap();
        let swapped = sets.swapped();
        for r in [hp_divergence_exact(&sets).unwrap(), hp_divergence_smoothed(&sets, 2.0).unwrap()] {
            prop_assert!((-1.0 - 1e-12..=1.0).contains(&r.d_raw));
            prop_assert!((0.0..=1.0).contains(&r.d_clamped));
        }
        prop_assert_eq!(nn_cut_count(&sets).unwrap(), nn_cut_count(&swapped).unwrap());
        let (a, b) = (smoothed_cut_mass(&sets, 2.0).unwrap(), smoothed_cut_mass(&swapped, 2.0).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn rigid_motion_invariance(n in 2usize..16, angle in 0.0f64..std::f64::consts::TAU, tx in -10.0f64..10.0, ty in -10.0f64..10.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = points(&mut rng, n, 2, 0.0);
        let b = points(&mut rng, n, 2, 0.7);
        let (c, s) = (angle.cos(), angle.sin());
        let moved = |t: &Tensor| {
            let mut out = t.clone();
            for i in 0..t.rows() {
                let (x, y) = (t.at(i, 0), t.at(i, 1));
                out.row_mut(i).copy_from_slice(&[c * x - s * y + tx, s * x + c * y + ty]);
            }
            out
        };
        let before = LabeledPointSet::new(a.clone(), b.clone()).unwrap();
        let after = LabeledPointSet::new(moved(&a), moved(&b)).unwrap();
        let ds = hp_divergence_smoothed(&before, 2.0).unwrap().d_raw - hp_divergence_smoothed(&after, 2.0).unwrap().d_raw;
        prop_assert!(ds.abs() < 1e-9);
        // Gaussian draws are tie-free almost surely, so the NN graph is preserved.
        let de = hp_divergence_exact(&before).unwrap().d_raw - hp_divergence_exact(&after).unwrap().d_raw;
        prop_assert!(de.abs() < 1e-9);
    }

    #[test]
    fn small_lambda_recovers_cut_count(n in 2usize..12, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let sets = LabeledPointSet::new(points(&mut rng, n, d, 0.0), points(&mut rng, n, d, 0.5)).unwrap();
        let lambda = 1e-3 * min_gap(&sets);
        prop_assume!(nn_margin(&sets) >= 10.0 * lambda);
        let soft = smoothed_cut_mass(&sets, lambda).unwrap();
        prop_assert!((soft - nn_cut_count(&sets).unwrap() as f64).abs() < 0.01);
    }

    #[test]
    fn loss_is_row_permutation_invariant(b in 2usize..9, d2 in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = points(&mut rng, b, d2, 0.3);
        let t = points(&mut rng, b, d2, 0.0);
        let mut order: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut order);
        let cfg = LossConfig { w: 0.5, gamma: 0.2, ..Default::default() };
        let base = combined_loss(&p, &t, &cfg).unwrap();
        let perm = combined_loss(&p.select_rows(&order).unwrap(), &t.select_rows(&order).unwrap(), &cfg).unwrap();
        prop_assert!((base.value - perm.value).abs() < 1e-12);
        let back = base.grad.select_rows(&order).unwrap();
        for (x, y) in back.data().iter().zip(perm.grad.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

/// Smallest positive distance between any two pooled points.
fn min_gap(sets: &LabeledPointSet) -> f64 {
    let pooled = sets.pooled();
    let dist = pairwise_distances(&pooled, &pooled).unwrap();
    dist.data().iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min)
}

/// Smallest gap between a node's nearest and second-nearest distances.
fn nn_margin(sets: &LabeledPointSet) -> f64 {
    let pooled = sets.pooled();
    let dist = pairwise_distances(&pooled, &pooled).unwrap();
    (0..pooled.rows())
        .map(|i| {
            let mut row: Vec<f64> = (0..pooled.rows()).filter(|&j| j != i).map(|j| dist.at(i, j)).collect();
            row.sort_by(f64::total_cmp);
            row.get(1).map_or(f64::INFINITY, |second| second - row[0])
        })
        .fold(f64::INFINITY, f64::min)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn loss_gradient_matches_central_differences() {
    let h = 1e-5;
    let mut rng = Rng::new(31);
    for b in [2, 4, 8] {
        for d2 in [1, 3] {
            let p = points(&mut rng, b, d2, 0.5);
            let t = points(&mut rng, b, d2, 0.0);
            let cfg = LossConfig { w: 0.7, gamma: 0.3, lambda: 2.0, ..Default::default() };
            let grad = combined_loss(&p, &t, &cfg).unwrap().grad;
            for k in 0..p.len() {
                let mut up = p.clone();
                up.data_mut()[k] += h;
                let mut dn = p.clone();
                dn.data_mut()[k] -= h;
                let fd = (combined_loss(&up, &t, &cfg).unwrap().value - combined_loss(&dn, &t, &cfg).unwrap().value) / (2.0 * h);
                let e = rel_err(grad.data()[k], fd);
                assert!(e < 1e-4, "b {b} d2 {d2} entry {k}: analytic {} fd {fd}", grad.data()[k]);
            }
        }
    }
}

#[test]
fn separation_is_monotone() {
    let mut means = Vec::new();
    for sep in [0.0, 2.0, 4.0, 8.0] {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let sets = LabeledPointSet::new(points(&mut rng, 100, 2, 0.0), points(&mut rng, 100, 2, 0.0)).unwrap();
            let mut b = sets.points_b().clone();
            b.data_mut().iter_mut().step_by(2).for_each(|v| *v += sep);
            let sets = LabeledPointSet::new(sets.points_a().clone(), b).unwrap();
            total += hp_divergence_exact(&sets).unwrap().d_clamped;
        }
        means.push(total / 20.0);
    }
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
}

#[test]
fn f_alpha_convex_at_one() {
    let h = 0.01;
    for alpha in [0.2, 0.5, 0.8] {
        let f = |t| fdivreg::f_alpha(t, alpha).unwrap();
        assert!(f(1.0 + h) - 2.0 * f(1.0) + f(1.0 - h) > 0.0);
    }
}

#[test]
fn training_checkpoint_and_batches() {
    let data = gen_synthetic_spectra(&mut Rng::new(5), 53, 8, 2, 0.1).unwrap().dataset;
    let splits = split(data.len(), &mut Rng::new(6)).unwrap();
    let spec = build_mlp(&[8, 5, 2]).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 7,
        loss: LossConfig { w: 0.05, gamma: 0.1, ..Default::default() },
        ..Default::default()
    };
    // Each batch's rows are identified by their target rows; collect them per epoch.
    let mut seen: Vec<Vec<f64>> = Vec::new();
    let (_, report) = train_with_objective(&spec, &data, &splits, &cfg, |p, t| {
        assert_eq!(p.rows(), t.rows());
        seen.push(t.data().to_vec());
        batch_loss(p, t, &cfg.loss)
    })
    .unwrap();
    let per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    assert_eq!(seen.len(), cfg.epochs * per_epoch);
    let train_rows: Vec<f64> = {
        let mut v = data.y.select_rows(&splits.train).unwrap().into_data();
        v.sort_by(f64::total_cmp);
        v
    };
    for epoch in seen.chunks(per_epoch) {
        let mut v: Vec<f64> = epoch.concat();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, train_rows);
    }
    assert!(report.best_so_far().windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn divergence_risk_hits_truth_more_often_than_mse() {
    use fdivreg::sim::{run_simulation, LossKind, SimConfig};
    for seed in 0..5 {
        let out = run_simulation(&SimConfig { seed, ..Default::default() }).unwrap();
        let (f, m) = (out.hits(LossKind::Fdiv), out.hits(LossKind::Mse));
        assert!(f > m, "seed {seed}: fdiv {f} vs mse {m}");
    }
}
