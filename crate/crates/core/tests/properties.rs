use std::sync::Arc;

use proptest::prelude::*;

use exposure_lab::design::{
    build_pair, build_null_pair, expected_exposure_ratio, sample_slate, solve_force_prob, training_view, Experiment, ExposurePolicy, PairSettings, SessionCounts,
};
use exposure_lab::domain::{build_catalog, partition_users, ChoiceEvent, ItemCatalog, PolicyKind, Slate};
use exposure_lab::eval::{ndcg_of_ranking, RankTable, Relevance};
use exposure_lab::models::{loss_and_gradient, predict_ranking, randomize, LossContext, ModelKind, ModelParams, NestStructure};
use exposure_lab::oracle::{choice_distribution, sample_population, BehaviorSpec};
use exposure_lab::stats::kendall_tau;
use exposure_lab::RngHandle;

fn catalog(seed: u64) -> ItemCatalog {
    build_catalog(20, 10, 2, RngHandle::new(seed, 1)).unwrap()
}

fn small_settings() -> PairSettings {
    PairSettings {
        slate_size: 3,
        counts: SessionCounts {
            uniform_a: 2,
            uniform_b: 2,
            overexpose_bias: 2,
            compete_popular: 2,
            compete_unpopular: 2,
            competition_anchor: 1,
        },
        force_prob: 0.5,
        quartile_size: 3,
    }
}

fn random_events(seed: u64, n_users: usize, n_items: usize, k: usize, n: usize) -> Vec<ChoiceEvent> {
    use rand::seq::index::sample;
    use rand::Rng;
    let mut rng = RngHandle::new(seed, 7).rng();
    (0..n)
        .map(|_| {
            let items = sample(&mut rng, n_items, k).into_vec();
            let user = rng.random_range(0..n_users);
            let chosen = rng.random_range(0..k);
            ChoiceEvent::new(user, Slate::new(items, PolicyKind::UniformB), chosen).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rank_rows_are_permutations_of_set_b(seed in any::<u64>(), sd in 0.01f64..3.0) {
        let cat = catalog(seed);
        let split = partition_users(9, 1.0 / 3.0, RngHandle::new(seed, 2)).unwrap();
        let mut params = ModelParams::zeros(9, 20, 2, 1);
        randomize(&mut params, sd, RngHandle::new(seed, 3));
        let table = RankTable::build(&params, &split, &cat);
        for row in 0..split.eval_users.len() {
            let mut ranks: Vec<u32> = cat.set_b.iter().map(|&i| table.rank(row, i).unwrap()).collect();
            ranks.sort_unstable();
            prop_assert_eq!(ranks, (1..=cat.set_b.len() as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ndcg_is_bounded(seed in any::<u64>(), k in 1usize..=10) {
        let cat = catalog(seed);
        let split = partition_users(9, 1.0 / 3.0, RngHandle::new(seed, 2)).unwrap();
        let pop = sample_population(9, 20, 3, RngHandle::new(seed, 4)).unwrap();
        let rel = Relevance::from_population(&pop, &split, &cat);
        let mut params = ModelParams::zeros(9, 20, 3, 1);
        randomize(&mut params, 1.0, RngHandle::new(seed, 5));
        let v = rel.ndcg(&params, &cat, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v), "{}", v);
    }

    #[test]
    fn ndcg_is_one_iff_relevant_items_lead(perm in Just((0usize..10).collect::<Vec<_>>()).prop_shuffle(), n_rel in 1usize..=5) {
        let relevant = |i: usize| i < n_rel;
        let v = ndcg_of_ranking(&perm, relevant, n_rel, 10);
        let leads = perm[..n_rel].iter().all(|&i| relevant(i));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert_eq!((v - 1.0).abs() < 1e-12, leads);
    }

    #[test]
    fn sampled_slates_are_valid(seed in any::<u64>(), which in 0usize..5, k in 2usize..=4, rho in 0.0f64..=1.0) {
        let cat = catalog(seed);
        let popularity: Vec<f64> = (0..20).map(|i| (i * 7 % 20) as f64).collect();
        let policy = [
            ExposurePolicy::UniformA,
            ExposurePolicy::UniformB,
            ExposurePolicy::OverexposeBias { force_prob: rho },
            ExposurePolicy::CompetePopular { quartile_size: 3 },
            ExposurePolicy::CompeteUnpopular { quartile_size: 3 },
        ][which];
        let mut rng = RngHandle::new(seed, 6).rng();
        for _ in 0..20 {
            let slate = sample_slate(policy, &cat, &popularity, k, &mut rng).unwrap();
            prop_assert_eq!(slate.len(), k);
            slate.validate(&cat).unwrap();
            let n_bias = slate.items.iter().filter(|&&i| cat.is_bias(i)).count();
            match policy {
                ExposurePolicy::CompetePopular { .. } | ExposurePolicy::CompeteUnpopular { .. } => prop_assert_eq!(n_bias, 1),
                ExposurePolicy::OverexposeBias { force_prob } if force_prob == 1.0 => prop_assert!(n_bias >= 1),
                _ => {}
            }
        }
    }

    #[test]
    fn training_view_never_leaks(seed in any::<u64>(), which in 0usize..3) {
        let cat = Arc::new(catalog(seed));
        let split = Arc::new(partition_users(12, 1.0 / 3.0, RngHandle::new(seed, 2)).unwrap());
        let pop = sample_population(12, 20, 3, RngHandle::new(seed, 4)).unwrap();
        let settings = small_settings();
        let behavior = BehaviorSpec::default();
        let rng = RngHandle::new(seed, 8);
        let pair = match which {
            0 => build_pair(&pop, &cat, &split, Experiment::Overexposure, &behavior, &settings, rng).unwrap(),
            1 => build_pair(&pop, &cat, &split, Experiment::Competition, &behavior, &settings, rng).unwrap(),
            _ => build_null_pair(&pop, &cat, &split, &behavior, &settings, false, rng).unwrap(),
        };
        for log in [&pair.treated, &pair.control] {
            for e in training_view(log, &split, &cat) {
                prop_assert!(!(split.is_eval(e.user) && e.slate.within_set_b(&cat)));
            }
        }
    }

    #[test]
    fn choice_probabilities_normalize(seed in any::<u64>(), strength in 0.0f64..2.0, context in any::<bool>()) {
        let cat = catalog(seed);
        let pop = sample_population(4, 20, 3, RngHandle::new(seed, 4)).unwrap();
        let behavior = if context { BehaviorSpec::context(strength) } else { BehaviorSpec::mnl() };
        let mut rng = RngHandle::new(seed, 9).rng();
        let slate = sample_slate(ExposurePolicy::UniformB, &cat, &[0.0; 20], 4, &mut rng).unwrap();
        let p = choice_distribution(&pop, 1, &slate, &behavior).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn ranking_ignores_a_common_intercept_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut params = ModelParams::zeros(3, 20, 2, 1);
        randomize(&mut params, 1.0, RngHandle::new(seed, 3));
        let items: Vec<usize> = (0..20).collect();
        let before = predict_ranking(&params, 1, &items);
        params.intercepts_mut().iter_mut().for_each(|b| *b += shift);
        prop_assert_eq!(before, predict_ranking(&params, 1, &items));
    }

    #[test]
    fn gev_with_unit_scales_is_mnl(seed in any::<u64>()) {
        let events = random_events(seed, 5, 12, 4, 30);
        let nests = NestStructure::random(12, 3, RngHandle::new(seed, 1)).unwrap().with_unit_scales();
        let mut params = ModelParams::zeros(5, 12, 3, 3);
        randomize(&mut params, 0.7, RngHandle::new(seed, 2));
        let gev = LossContext::new(ModelKind::Gev, &events, 5, 12, 1e-3, nests.clone(), 4).unwrap();
        let mnl = LossContext::new(ModelKind::Mnl, &events, 5, 12, 1e-3, nests, 4).unwrap();
        let (lg, gg) = loss_and_gradient(&gev, &params, &events, RngHandle::new(seed, 3)).unwrap();
        let (lm, gm) = loss_and_gradient(&mnl, &params, &events, RngHandle::new(seed, 3)).unwrap();
        prop_assert!((lg - lm).abs() <= 1e-9 * lm.abs().max(1.0));
        for (a, b) in gg.values().iter().zip(gm.values()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn solved_force_prob_hits_the_ratio(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let cat = catalog(seed);
        let max = expected_exposure_ratio(1.0, &cat, 3);
        let target = 1.0 + frac * (max - 1.0);
        let rho = solve_force_prob(target, &cat, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&rho));
        prop_assert!((expected_exposure_ratio(rho, &cat, 3) - target).abs() < 1e-9);
    }

    #[test]
    fn kendall_is_symmetric_and_bounded(xs in prop::collection::vec(-5.0f64..5.0, 2..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut ys = xs.clone();
        ys.shuffle(&mut RngHandle::new(seed, 1).rng());
        let a = kendall_tau(&xs, &ys).unwrap();
        let b = kendall_tau(&ys, &xs).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
    }
}
