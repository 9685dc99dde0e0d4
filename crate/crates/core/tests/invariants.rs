use chrono::NaiveDate;
use inverse_uq::autodiff::{Graph, Tensor};
use inverse_uq::data::{split, BasinRecord, Dataset, Normalizer, SplitSpec, YearRange};
use inverse_uq::losses::{contrastive_loss, pseudo_inverse_loss, temporal_uncertainty, ubl_penalty_vector};
use inverse_uq::model::{kl_variational_prior, BimConfig, Mode};
use inverse_uq::synthetic::{generate_dataset, recession_k, simulate_bucket, BucketParams, SyntheticConfig};
use inverse_uq::training::{train_inverse, InverseData, KlWeight, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn daily_dataset(n_basins: usize, years: i32) -> Dataset {
    let start = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(2000 + years, 1, 1).unwrap();
    let dates: Vec<NaiveDate> = start.iter_days().take_while(|d| *d < end).collect();
    let records = (0..n_basins)
        .map(|b| BasinRecord {
            basin_id: format!("b{b:02}"),
            drivers: (0..dates.len()).map(|t| vec![(t as f64 * 0.1 + b as f64).sin()]).collect(),
            response: (0..dates.len()).map(|t| (t % 17) as f64 + b as f64).collect(),
            statics: Some(vec![b as f64, (b * b) as f64]),
            dates: dates.clone(),
        })
        .collect();
    Dataset::new(vec!["x".into()], vec!["s1".into(), "s2".into()], records).unwrap()
}

fn ranges() -> (YearRange, YearRange, YearRange) {
    (YearRange::new(2000, 2001), YearRange::new(2001, 2002), YearRange::new(2002, 2003))
}

fn loss_of(rows: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph::new();
    let e = g.constant(Tensor::from_rows(rows).unwrap());
    let l = contrastive_loss(&mut g, e, tau).unwrap();
    g.value(l).item()
}

fn embeddings() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5, 2usize..6).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-2.0..2.0f64, d), 2 * n)
            .prop_filter("rows must not vanish", |rows| rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
    })
}

fn psd(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (0..d)
        .map(|i| (0..d).map(|j| (0..d).map(|k| a[i][k] * a[j][k]).sum()).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_are_disjoint_and_cover_the_dataset(n in 2usize..12, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let ds = daily_dataset(n, 3);
        let n_train = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let (tr, va, te) = ranges();
        let spec = SplitSpec::seeded(&ds.basin_ids(), n_train, seed, tr, va, te).unwrap();
        let parts = split(&ds, &spec).unwrap();
        prop_assert!(parts.train_basins.iter().all(|b| !parts.test_basins.contains(b)));
        let mut all: Vec<String> = parts.train_basins.iter().chain(&parts.test_basins).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ds.basin_ids());
        for p in [&parts.train, &parts.val, &parts.test] {
            prop_assert!(p.dates_within_period());
        }
        // Years cover every day exactly once.
        for r in &ds.records {
            let n_val = parts.val.data.get(&r.basin_id).map_or(0, |x| x.len());
            let n_test = parts.test.data.get(&r.basin_id).map_or(0, |x| x.len());
            let n_train = parts.train.data.get(&r.basin_id).map_or(0, |x| x.len());
            let expect_train = if parts.train_basins.contains(&r.basin_id) { 366 } else { 0 };
            prop_assert_eq!((n_train, n_val, n_test), (expect_train, 365, 365));
        }
    }

    #[test]
    fn contrastive_is_pair_permutation_equivariant(rows in embeddings(), seed in any::<u64>(), tau in 0.1..2.0f64) {
        let n = rows.len() / 2;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone())
            .chain(perm.iter().map(|&i| rows[n + i].clone()))
            .collect();
        prop_assert!((loss_of(&rows, tau) - loss_of(&permuted, tau)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_ignores_embedding_scale(rows in embeddings(), pick in any::<prop::sample::Index>(), c in 0.01..100.0f64) {
        let i = pick.index(rows.len());
        let mut scaled = rows.clone();
        scaled[i].iter_mut().for_each(|x| *x *= c);
        prop_assert!((loss_of(&rows, 0.5) - loss_of(&scaled, 0.5)).abs() < 1e-10);
        prop_assert!(loss_of(&rows, 0.5) >= 0.0);
    }

    #[test]
    fn penalty_matches_eigen_oracle(d in 1usize..28, seed in any::<u64>(), gamma in 0.0..=1.0f64) {
        let sigma = psd(d, seed);
        let p = ubl_penalty_vector(&sigma, gamma).unwrap();
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
        let top = m.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((p.eigenvalue - top).abs() < 1e-8 * top.abs().max(1.0));
        prop_assert!(p.w.iter().all(|w| *w >= 0.0));
        let mean = p.w.iter().sum::<f64>() / d as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_leave_the_inverse_loss_unchanged(
        z in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 1..6),
        t in prop::collection::vec(prop::option::of(prop::collection::vec(-3.0..3.0f64, 4)), 6),
    ) {
        let t = &t[..z.len()];
        let eval = |w: Option<&[f64]>| {
            let mut g = Graph::new();
            let zh = g.constant(Tensor::from_rows(&z).unwrap());
            pseudo_inverse_loss(&mut g, zh, t, w).unwrap().map(|v| g.value(v).item())
        };
        prop_assert_eq!(eval(None), eval(Some(&[1.0; 4])));
        if let Some(v) = eval(None) {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn temporal_uncertainty_matches_two_pass_oracle(w in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 1..12)) {
        let n = w.len() as f64;
        let mean: Vec<f64> = (0..3).map(|j| w.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let t = temporal_uncertainty(&w, &mean).unwrap();
        for j in 0..3 {
            let oracle = (w.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((t.unc[j] - oracle).abs() < 1e-12);
        }
        let same = vec![w[0].clone(); w.len()];
        prop_assert!(temporal_uncertainty(&same, &w[0]).unwrap().unc.iter().all(|u| *u == 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_only_at_the_prior(
        mu in prop::collection::vec(-1.0..1.0f64, 1..8),
        rho in -6.0..2.0f64,
        prior in 0.01..2.0f64,
    ) {
        let m = Tensor::row(&mu);
        let r = Tensor::full(1, mu.len(), rho);
        let kl = kl_variational_prior(&m, &r, prior).unwrap();
        prop_assert!(kl >= -1e-12);
        // softplus(ρ) = prior
        let at_prior = Tensor::full(1, mu.len(), prior.exp_m1().ln());
        let zero = Tensor::zeros(1, mu.len());
        prop_assert!(kl_variational_prior(&zero, &at_prior, prior).unwrap().abs() < 1e-12);
        if mu.iter().any(|x| x.abs() > 1e-3) {
            prop_assert!(kl_variational_prior(&m, &at_prior, prior).unwrap() > 0.0);
        }
    }

    #[test]
    fn bucket_conserves_water(k in 0.01..1.0f64, c_max in 10.0..400.0f64, et in 0.0..=1.0f64, seed in any::<u64>(), s0 in 0.0..500.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..200).map(|_| if rng.gen::<f64>() < 0.3 { rng.gen_range(0.0..60.0) } else { 0.0 }).collect();
        let e: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..5.0)).collect();
        let tr = simulate_bucket(&BucketParams { k, c_max, et_coeff: et }, &p, &e, s0).unwrap();
        let s_start = tr.storage[0];
        let balance = s_start + p.iter().sum::<f64>() - tr.outflow.iter().sum::<f64>() - tr.et_actual.iter().sum::<f64>();
        prop_assert!((balance - tr.storage[200]).abs() < 1e-8 * (1.0 + s_start + p.iter().sum::<f64>()));
        prop_assert!(tr.storage.iter().all(|s| *s >= 0.0 && *s <= c_max + 1e-9));
    }
}

#[test]
fn non_increasing_dates_are_rejected() {
    let mut ds = daily_dataset(2, 1);
    ds.records[1].dates.swap(3, 4);
    let msg = ds.validate().unwrap_err().to_string();
    assert!(msg.contains("b01") && msg.contains("strictly increasing"), "{msg}");
}

#[test]
fn normalizer_ignores_validation_and_test_rows() {
    let ds = daily_dataset(4, 3);
    let (tr, va, te) = ranges();
    let spec = SplitSpec::seeded(&ds.basin_ids(), 3, 1, tr, va, te).unwrap();
    let base = Normalizer::fit(&split(&ds, &spec).unwrap().train.data).unwrap();

    let mut altered = ds.clone();
    for r in &mut altered.records {
        for t in 0..r.len() {
            if !tr.contains(r.dates[t]) {
                r.response[t] = 1e6;
                r.drivers[t][0] = -1e6;
            }
        }
    }
    let again = Normalizer::fit(&split(&altered, &spec).unwrap().train.data).unwrap();
    assert_eq!(base, again);
}

#[test]
fn recession_regression_recovers_k_on_generated_basins() {
    let syn = generate_dataset(&SyntheticConfig { n_basins: 10, n_days: 1461, n_distractors: 0, ..Default::default() }).unwrap();
    for ((rec, q), bp) in syn.dataset.records.iter().zip(&syn.clean_response).zip(&syn.params) {
        let p: Vec<f64> = rec.drivers.iter().map(|r| r[0]).collect();
        let e: Vec<f64> = rec.drivers.iter().map(|r| r[1]).collect();
        let k = recession_k(&p, &e, q).unwrap();
        assert!((k - bp.k).abs() < 0.05 * bp.k, "basin {}: k {} vs {}", rec.basin_id, k, bp.k);
    }
}

#[test]
fn seeded_inverse_training_is_reproducible() {
    let syn = generate_dataset(&SyntheticConfig { n_basins: 4, n_days: 800, n_distractors: 1, ..Default::default() }).unwrap();
    let (tr, va, te) = ranges();
    let spec = SplitSpec::seeded(&syn.dataset.basin_ids(), 3, 0, tr, va, te).unwrap();
    let data = InverseData::prepare(&split(&syn.dataset, &spec).unwrap(), 30, 30).unwrap();
    let bim = BimConfig { hidden_size: 4, embed_size: 4, regressor_hidden: 4, decoder_hidden: 4, mode: Mode::Bayesian, ..Default::default() };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lookback: 30,
        stride: 30,
        kl_weight: KlWeight::PerSequence,
        kl_warmup_epochs: 2,
        seed: 11,
        ..Default::default()
    };
    let (m1, mut a) = train_inverse(&data, &bim, &cfg).unwrap();
    let (m2, mut b) = train_inverse(&data, &bim, &cfg).unwrap();
    a.wall_clock_secs = 0.0;
    b.wall_clock_secs = 0.0;
    assert_eq!(m1, m2);
    assert_eq!(a, b);
    assert_eq!(a.epochs.len(), 3);

    let (m3, _) = train_inverse(&data, &bim, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(m1, m3);
}
