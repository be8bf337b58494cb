mod common;

use casil::alignment::{compute_durations, cosine_similarity, segment_trajectory, SimilarityMatrix};
use casil::autodiff::Tensor;
use casil::dataset::{deserialize_dataset, serialize_dataset, Dataset, Manifest};
use casil::generator::{fuse_goal, init_chain_memory};
use casil::model::{Mode, ModelBundle};
use casil::optim::LrSchedule;
use casil::policy::{greedy_action, sample_action, ActionDistribution};
use casil::training::{casil_loss, chunk_segments, generator_inputs, LossWeights};
use casil::types::{
    boundaries_from_labels, ActionKind, CognitivePrior, Observation, RunConfig, SegmentedTrajectory,
};
use common::{brute_force_segmentation, random_boundaries, random_similarity, random_trajectory, tiny_config, tiny_data, tiny_spec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kind_strategy() -> impl Strategy<Value = ActionKind> {
    prop_oneof![Just(ActionKind::Discrete), Just(ActionKind::Continuous)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn segmented_trajectories_keep_their_shape(seed in any::<u64>(), t in 1usize..60, k_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + ((t - 1) as f64 * k_frac) as usize;
        let b = random_boundaries(&mut rng, t, k);
        let seg = SegmentedTrajectory::new(random_trajectory(&mut rng, ActionKind::Discrete, t), b.clone()).unwrap();
        prop_assert_eq!(seg.durations.iter().sum::<usize>(), t);
        prop_assert!(seg.boundaries.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*seg.boundaries.last().unwrap(), t);
        prop_assert!(seg.per_step_option.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        prop_assert_eq!(seg.per_step_option[0], 0);
        prop_assert_eq!(*seg.per_step_option.last().unwrap(), k - 1);
        let again = boundaries_from_labels(&seg.per_step_option).unwrap();
        prop_assert_eq!(&again, &b);
        let relabelled = SegmentedTrajectory::new(seg.base.clone(), again).unwrap();
        prop_assert_eq!(relabelled.per_step_option, seg.per_step_option);
        prop_assert_eq!(compute_durations(&b, t).unwrap().iter().sum::<usize>(), t);
    }

    #[test]
    fn dp_segmenter_matches_exhaustive_search(seed in any::<u64>(), t in 1usize..=12, k in 1usize..=4, integer in any::<bool>()) {
        prop_assume!(k <= t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = random_similarity(&mut rng, k, t, integer);
        let dp = segment_trajectory(&sim).unwrap();
        prop_assert_eq!(&dp, &brute_force_segmentation(&sim));
        prop_assert_eq!(dp, segment_trajectory(&sim).unwrap());
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(
        a in prop::collection::vec(-10.0f64..10.0, 1..8),
        b_seed in any::<u64>(),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
        let b: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(-10.0..10.0)).collect();
        prop_assume!(b.iter().any(|v| v.abs() > 1e-3));
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine_similarity(&b, &a).unwrap());
        let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
        prop_assert!((cosine_similarity(&sa, &sb).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn datasets_round_trip_exactly(seed in any::<u64>(), n in 0usize..5, kind in kind_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectories: Vec<_> = (0..n).map(|_| {
            let t = rng.gen_range(3..12);
            random_trajectory(&mut rng, kind, t)
        }).collect();
        let prior = CognitivePrior::new(["a", "b", "c"]).unwrap();
        let d = Dataset {
            manifest: Manifest::new("tiny", common::TINY_GOAL, &prior, 5, 3, kind, n),
            trajectories,
        };
        let back = deserialize_dataset(&serialize_dataset(&d).unwrap()).unwrap();
        for (x, y) in back.trajectories.iter().zip(&d.trajectories) {
            for (sx, sy) in x.steps.iter().zip(&y.steps) {
                for (u, v) in sx.obs.features.iter().zip(&sy.obs.features) {
                    prop_assert_eq!(u.to_bits(), v.to_bits());
                }
            }
        }
        prop_assert_eq!(back, d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn generator_distribution_normalizes(seed in any::<u64>(), len in 1usize..6, chain in prop::collection::vec(0usize..3, 0..4)) {
        let config = RunConfig { seed, ..tiny_config() };
        let bundle = ModelBundle::new(tiny_spec(ActionKind::Discrete), config, Mode::Casil).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let window: Vec<Observation> = random_trajectory(&mut rng, ActionKind::Discrete, len).observations().cloned().collect();
        let mut mem = init_chain_memory(bundle.config.memory_dim);
        for &k in &chain {
            let o = bundle.generator.option(&bundle.params, k);
            let next = bundle.generator.push_option(&bundle.params, &mem, &o).unwrap();
            let again = bundle.generator.push_option(&bundle.params, &mem, &o).unwrap();
            prop_assert_eq!(&next, &again);
            mem = next;
        }
        let out = bundle.generator.generate_option(
            &bundle.params, &bundle.obs, &bundle.goal_embedding().unwrap(), &bundle.prior_embeddings().unwrap(),
            &window, &mem, len,
        ).unwrap();
        prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(out.probs.iter().all(|&p| p > 0.0));
        prop_assert!((0.0..=1.0).contains(&out.termination));
    }

    #[test]
    fn policy_is_causal(seed in any::<u64>(), len in 2usize..=4, cut in 0usize..3, kind in kind_strategy()) {
        prop_assume!(cut + 1 < len);
        let config = RunConfig { seed, ..tiny_config() };
        let bundle = ModelBundle::new(tiny_spec(kind), config, Mode::Casil).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let window: Vec<Observation> = random_trajectory(&mut rng, kind, len).observations().cloned().collect();
        let mut changed = window.clone();
        for o in &mut changed[cut + 1..] {
            for v in &mut o.features {
                *v += rng.gen_range(-2.0..2.0);
            }
        }
        let goal = bundle.goal_embedding().unwrap();
        let code = bundle.params.get(bundle.codes).row(1).to_vec();
        let a = bundle.policy.predict_sequence(&bundle.params, &goal, &window, Some(&code)).unwrap();
        let b = bundle.policy.predict_sequence(&bundle.params, &goal, &changed, Some(&code)).unwrap();
        prop_assert_eq!(&a[..=cut], &b[..=cut]);
        prop_assert_ne!(&a[cut + 1..], &b[cut + 1..]);
    }

    #[test]
    fn loss_is_its_weighted_terms(seed in any::<u64>(), eps in 0.0f64..3.0, lam in 0.0f64..3.0, kind in kind_strategy()) {
        let config = RunConfig { seed, ..tiny_config() };
        let bundle = ModelBundle::new(tiny_spec(kind), config, Mode::Casil).unwrap();
        let data = tiny_data(kind, seed);
        let chunks = chunk_segments(&data.segmented, bundle.config.truncation);
        let l = casil_loss(&bundle, &data, &chunks, LossWeights { epsilon: eps, termination: lam }).unwrap();
        prop_assert_eq!(l.total, eps * l.cognition + l.policy + lam * l.termination);
    }
}

#[test]
fn action_distributions_normalize_for_many_seeds() {
    for seed in 0..100u64 {
        let config = RunConfig { seed, ..tiny_config() };
        let bundle = ModelBundle::new(tiny_spec(ActionKind::Discrete), config, Mode::Casil).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window: Vec<Observation> = random_trajectory(&mut rng, ActionKind::Discrete, 4).observations().cloned().collect();
        let goal = bundle.goal_embedding().unwrap();
        for k in 0..3 {
            let code = bundle.params.get(bundle.codes).row(k).to_vec();
            for d in bundle.policy.predict_sequence(&bundle.params, &goal, &window, Some(&code)).unwrap() {
                let ActionDistribution::Categorical { probs } = d else { panic!("discrete head") };
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6, "seed {seed}");
            }
        }
    }
}

#[test]
fn gaussian_head_keeps_log_std_in_range() {
    let bundle = ModelBundle::new(tiny_spec(ActionKind::Continuous), tiny_config(), Mode::Casil).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut window: Vec<Observation> = random_trajectory(&mut rng, ActionKind::Continuous, 4).observations().cloned().collect();
    for o in &mut window {
        for v in &mut o.features {
            *v *= 1e4;
        }
    }
    let goal = bundle.goal_embedding().unwrap();
    for d in bundle.policy.predict_sequence(&bundle.params, &goal, &window, None).unwrap() {
        let ActionDistribution::Gaussian { std, .. } = d else { panic!("continuous head") };
        for s in std {
            assert!(s >= (-5.0f64).exp() * (1.0 - 1e-12) && s <= 2.0f64.exp() * (1.0 + 1e-12));
        }
    }
}

#[test]
fn greedy_and_seeded_sampling_are_repeatable() {
    let d = ActionDistribution::Gaussian {
        mean: vec![0.2, -0.4],
        std: vec![0.5, 1.5],
    };
    assert_eq!(greedy_action(&d), greedy_action(&d));
    let draw = |seed| sample_action(&d, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn film_starts_as_identity() {
    let bundle = ModelBundle::new(tiny_spec(ActionKind::Discrete), tiny_config(), Mode::Casil).unwrap();
    let gen = &bundle.generator;
    let goal = bundle.goal_embedding().unwrap();
    let features: Vec<f64> = (0..gen.dims.model_dim).map(|i| (i as f64 * 0.37).sin()).collect();
    let fused = fuse_goal(&gen.film_gamma, &gen.film_beta, &bundle.params, goal.row(0), &features).unwrap();
    assert_eq!(fused, features);
}

#[test]
fn empty_chain_has_zero_state_and_still_yields_an_option() {
    let bundle = ModelBundle::new(tiny_spec(ActionKind::Discrete), tiny_config(), Mode::Casil).unwrap();
    let mem = init_chain_memory(bundle.config.memory_dim);
    assert!(mem.hidden.iter().chain(&mem.cell).all(|&v| v == 0.0));
    assert!(mem.is_empty());
    let obs = Observation::new(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
    let out = bundle
        .generator
        .generate_option(
            &bundle.params,
            &bundle.obs,
            &bundle.goal_embedding().unwrap(),
            &bundle.prior_embeddings().unwrap(),
            &[obs],
            &mem,
            1,
        )
        .unwrap();
    assert_eq!(out.probs.len(), 3);
}

#[test]
fn schedule_is_piecewise_exact() {
    let s = LrSchedule::from_config(&RunConfig::default());
    assert_eq!(s.at(1), 1e-4);
    assert_eq!(s.at(10), 5e-4);
    assert_eq!(s.at(149), 5e-4);
    assert_eq!(s.at(150), 2.5e-4);
    assert_eq!(s.at(151), 2.5e-4);
    let mut prev = 0.0;
    for step in 1..=10 {
        assert!(s.at(step) > prev);
        prev = s.at(step);
    }
    assert!((s.at(5) - (1e-4 + 4.0 * 4e-4 / 9.0)).abs() < 1e-18);
}

#[test]
fn generator_sees_teacher_forced_chains() {
    let bundle = ModelBundle::new(tiny_spec(ActionKind::Discrete), tiny_config(), Mode::Casil).unwrap();
    let data = tiny_data(ActionKind::Discrete, 4);
    let chunks = chunk_segments(&data.segmented, bundle.config.truncation);
    let chains = generator_inputs(&bundle, &data, &chunks).unwrap();
    let mut i = 0;
    for c in &chunks {
        let labels = &data.segmented[c.trajectory].per_step_option;
        let expected: Vec<usize> = (0..=c.skill).collect();
        assert_eq!(chains[i], expected);
        assert_eq!(labels[c.start], c.skill);
        i += 1;
        if c.start == 0 {
            assert!(chains[i].is_empty());
            i += 1;
        }
    }
    assert_eq!(i, chains.len());
}

#[test]
fn similarity_entries_stay_in_range() {
    let mut bundle = ModelBundle::new(tiny_spec(ActionKind::Discrete), tiny_config(), Mode::Casil).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for b in bundle.params.blocks_mut() {
        for v in &mut b.value.data {
            *v *= 3.0;
        }
    }
    let traj = random_trajectory(&mut rng, ActionKind::Discrete, 10);
    let sim: SimilarityMatrix =
        casil::alignment::build_similarity_matrix(&bundle.text, &bundle.obs, &bundle.params, &bundle.spec.prior, &traj)
            .unwrap();
    assert!(sim.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    let t: Tensor = casil::alignment::prior_embeddings(&bundle.text, &bundle.params, &bundle.spec.prior).unwrap();
    for k in 0..t.rows {
        let n: f64 = t.row(k).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
