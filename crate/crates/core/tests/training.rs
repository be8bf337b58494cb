use casil::alignment::uniform_boundaries;
use casil::env::{generate_demos, Difficulty, EnvKind};
use casil::experiment::{captions_for, fit};
use casil::model::{Mode, ModelBundle};
use casil::types::{Action, Observation, RunConfig, TaskGoal, Trajectory};
use casil::Error;

fn quick(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        train_steps: 30,
        batch_size: 32,
        pretrain_steps: 20,
        pretrain_pairs: 256,
        realign_steps: 3,
        ..RunConfig::default()
    }
}

const STAGE: EnvKind = EnvKind::Stage { stages: 4 };

fn run(mode: Mode, seed: u64) -> (ModelBundle, casil::training::TrainingLog) {
    let demos = generate_demos(STAGE, Difficulty::Easy, 8, 1).unwrap();
    let config = quick(seed);
    let captions = captions_for(STAGE, Difficulty::Easy, &config).unwrap();
    fit(STAGE.task_spec().unwrap(), &demos.dataset, &captions, config, mode).unwrap()
}

#[test]
fn same_seed_gives_identical_logs_and_parameters() {
    for mode in Mode::ALL {
        let (a, la) = run(mode, 3);
        let (b, lb) = run(mode, 3);
        assert_eq!(la.to_jsonl(), lb.to_jsonl(), "{mode}");
        assert_eq!(la.boundaries, lb.boundaries);
        assert_eq!(a.params, b.params);
        assert_eq!(a.rng, b.rng);
    }
    let (_, other) = run(Mode::Casil, 4);
    assert_ne!(other.to_jsonl(), run(Mode::Casil, 3).1.to_jsonl());
}

#[test]
fn logged_totals_decompose_exactly() {
    let (b, log) = run(Mode::Casil, 1);
    for r in &log.records {
        assert_eq!(
            r.total,
            b.config.epsilon * r.cognition + r.policy + b.config.termination_weight * r.termination
        );
    }
}

#[test]
fn baselines_train_what_they_should() {
    let demos = generate_demos(STAGE, Difficulty::Easy, 8, 1).unwrap();
    let spec = STAGE.task_spec().unwrap();
    let config = quick(2);
    let captions = captions_for(STAGE, Difficulty::Easy, &config).unwrap();

    let mut pre = ModelBundle::new(spec.clone(), config.clone(), Mode::NoCognition).unwrap();
    casil::training::pretrain_encoders(&mut pre, &captions).unwrap();
    let (nc, log) = fit(spec.clone(), &demos.dataset, &captions, config.clone(), Mode::NoCognition).unwrap();
    for ((x, y), enc) in pre.params.blocks().iter().zip(nc.params.blocks()).zip(nc.encoder_mask()) {
        if enc {
            assert_eq!(x.value, y.value, "{} moved", x.name);
        }
    }
    assert_eq!(nc.switch_thresholds.len(), 4);
    assert!(log.records.iter().all(|r| r.cognition == 0.0 && r.termination == 0.0));

    let (_, log) = fit(spec.clone(), &demos.dataset, &captions, config.clone(), Mode::Hbc).unwrap();
    for (b, t) in log.boundaries.iter().zip(&demos.dataset.trajectories) {
        assert_eq!(*b, uniform_boundaries(t.len(), 4).unwrap());
    }

    let init = ModelBundle::new(spec.clone(), config.clone(), Mode::Bc).unwrap();
    let (bc, log) = fit(spec, &demos.dataset, &captions, config, Mode::Bc).unwrap();
    assert_eq!(bc.params.get(bc.codes), init.params.get(init.codes));
    assert!(log.boundaries.iter().all(|b| b.len() == 1));
}

#[test]
fn skill_code_changes_the_trained_policy() {
    let demos = generate_demos(STAGE, Difficulty::Easy, 20, 1).unwrap();
    let config = RunConfig {
        train_steps: 120,
        ..quick(0)
    };
    let captions = captions_for(STAGE, Difficulty::Easy, &config).unwrap();
    let (b, _) = fit(STAGE.task_spec().unwrap(), &demos.dataset, &captions, config, Mode::Casil).unwrap();
    let goal = b.goal_embedding().unwrap();
    let window: Vec<Observation> = demos.dataset.trajectories[0].observations().take(3).cloned().collect();
    let dists: Vec<_> = (0..4)
        .map(|k| {
            let code = b.params.get(b.codes).row(k).to_vec();
            b.policy.predict_action(&b.params, &goal, &window, Some(&code)).unwrap()
        })
        .collect();
    for k in 1..4 {
        assert_ne!(dists[0], dists[k]);
    }
}

#[test]
fn too_short_demonstrations_are_refused() {
    let spec = STAGE.task_spec().unwrap();
    let goal = TaskGoal::new(spec.goal.clone()).unwrap();
    let steps = (0..3)
        .map(|_| casil::types::Step {
            obs: Observation::new(vec![0.0; spec.obs_dim]),
            action: Action::one_hot(0, spec.action_dim),
        })
        .collect();
    let mut dataset = generate_demos(STAGE, Difficulty::Easy, 1, 0).unwrap().dataset;
    dataset.trajectories = vec![Trajectory::new(goal, steps).unwrap()];
    let mut b = ModelBundle::new(spec, quick(0), Mode::Casil).unwrap();
    assert!(matches!(casil::training::train(&mut b, &dataset), Err(Error::Infeasible(_))));
}
