//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 1-5, 9 and 10 are exact properties and fail the run when they
//! do not hold. Criteria 6-8 are measured experiment outcomes; their lines
//! report the measurement either way and do not change the exit status.
//!
//! `CASIL_ACCEPTANCE_ONLY=2,6` restricts the run to the listed criteria.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use casil::alignment::segment_trajectory;
use casil::cli_io::{deserialize_checkpoint, serialize_checkpoint};
use casil::dataset::{deserialize_dataset, serialize_dataset};
use casil::env::{caption_seed, generate_demos, Difficulty, EnvKind};
use casil::evaluation::{evaluate, evaluation_seeds};
use casil::experiment::{captions_for, data_drop_sweep, fit, option_count_sweep, SweepSettings};
use casil::generator::init_chain_memory;
use casil::model::{Mode, ModelBundle};
use casil::policy::ActionDistribution;
use casil::training::{casil_loss, chunk_segments, mode_weights, LossWeights, TrainingData, TrainingLog};
use casil::types::{ActionKind, Observation, RunConfig, SegmentedTrajectory};
use common::{
    brute_force_segmentation, gradient_errors, random_boundaries, random_similarity, random_trajectory, tiny_config,
    tiny_spec, tiny_spec_with,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STAGE: EnvKind = EnvKind::Stage { stages: 4 };

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn c1_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut zero = Vec::new();
    for kind in [ActionKind::Discrete, ActionKind::Continuous] {
        for (group, rel, nonzero) in gradient_errors(kind) {
            worst = worst.max(rel);
            if !nonzero {
                zero.push(group);
            }
        }
    }
    outcome(
        worst <= 1e-4 && zero.is_empty(),
        format!("max relative error {worst:.2e} over text/obs/skill/gen/policy, both action heads"),
    )
}

fn c2_segmenter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for i in 0..500 {
        let t = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=4usize.min(t));
        let sim = random_similarity(&mut rng, k, t, i % 2 == 0);
        if segment_trajectory(&sim).unwrap() != brute_force_segmentation(&sim) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 500 matrices (half with integer ties)"))
}

fn c3_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad_segments = 0;
    for _ in 0..1000 {
        let t = rng.gen_range(1..=60);
        let k = rng.gen_range(1..=t.min(12));
        let b = random_boundaries(&mut rng, t, k);
        let s = SegmentedTrajectory::new(random_trajectory(&mut rng, ActionKind::Discrete, t), b).unwrap();
        let ok = s.durations.iter().sum::<usize>() == t
            && s.boundaries.windows(2).all(|w| w[0] < w[1])
            && *s.boundaries.last().unwrap() == t;
        bad_segments += usize::from(!ok);
    }
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        for kind in [ActionKind::Discrete, ActionKind::Continuous] {
            let config = RunConfig { seed, ..tiny_config() };
            let b = ModelBundle::new(tiny_spec(kind), config, Mode::Casil).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let window: Vec<Observation> = random_trajectory(&mut rng, kind, 4).observations().cloned().collect();
            let goal = b.goal_embedding().unwrap();
            let mut mem = init_chain_memory(b.config.memory_dim);
            for k in 0..3 {
                let out = b
                    .generator
                    .generate_option(&b.params, &b.obs, &goal, &b.prior_embeddings().unwrap(), &window, &mem, 2)
                    .unwrap();
                worst = worst.max((out.probs.iter().sum::<f64>() - 1.0).abs());
                let code = b.params.get(b.codes).row(k).to_vec();
                for d in b.policy.predict_sequence(&b.params, &goal, &window, Some(&code)).unwrap() {
                    if let ActionDistribution::Categorical { probs } = d {
                        worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
                    }
                }
                mem = b.generator.push_option(&b.params, &mem, &b.generator.option(&b.params, k)).unwrap();
            }
        }
    }
    outcome(
        bad_segments == 0 && worst <= 1e-6,
        format!("{bad_segments} of 1000 segmentations broken; max normalization error {worst:.1e} over 100 seeds"),
    )
}

fn c4_loss_structure() -> Outcome {
    let prior = ["reach the red block", "grasp it", "lift it", "place it on blue"];
    let spec = tiny_spec_with(ActionKind::Discrete, &prior);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let segmented = [(9usize, vec![2usize, 4, 7, 9]), (7, vec![1, 3, 6, 7]), (12, vec![3, 6, 9, 12])]
        .into_iter()
        .map(|(t, b)| SegmentedTrajectory::new(random_trajectory(&mut rng, ActionKind::Discrete, t), b).unwrap())
        .collect();
    let data = TrainingData { segmented };
    let mut casil = ModelBundle::new(spec, tiny_config(), Mode::Casil).unwrap();
    let chunks = chunk_segments(&data.segmented, casil.config.truncation);
    let zero = LossWeights {
        epsilon: 0.0,
        termination: 0.0,
    };
    let full = casil_loss(&casil, &data, &chunks, zero).unwrap();
    let mut ablation = casil.clone();
    ablation.mode = Mode::NoCognition;
    let ablated = casil_loss(&ablation, &data, &chunks, mode_weights(Mode::NoCognition, &ablation.config)).unwrap();
    let same = full == ablated;

    let classifier = casil.generator.classifier;
    for id in [classifier.weight, classifier.bias] {
        casil.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let terms = casil_loss(&casil, &data, &chunks, LossWeights { epsilon: 1.0, termination: 1.0 }).unwrap();
    let decisions = chunks
        .iter()
        .filter(|c| c.start == 0)
        .count()
        + chunks
            .iter()
            .filter(|c| c.end == c.skill_end && c.skill + 1 < 4)
            .count();
    let per_boundary = terms.cognition * chunks.len() as f64 / decisions as f64;
    let err = (per_boundary - 4f64.ln()).abs();
    outcome(
        same && err <= 1e-9,
        format!("ε=λ=0 terms identical: {same}; uniform per-boundary term {per_boundary:.12} (|Δ ln 4| = {err:.1e})"),
    )
}

fn c5_loss_reduction(logs: &mut Vec<TrainingLog>) -> Outcome {
    let started = Instant::now();
    let demos = generate_demos(STAGE, Difficulty::Easy, 20, 1).unwrap();
    let mut ok = 0;
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let config = RunConfig { seed, ..RunConfig::default() };
        let captions = captions_for(STAGE, Difficulty::Easy, &config).unwrap();
        let (_, log) = fit(STAGE.task_spec().unwrap(), &demos.dataset, &captions, config, Mode::Casil).unwrap();
        let ratio = log.records.last().unwrap().total / log.records[0].total;
        ok += usize::from(log.records.len() == 300 && ratio < 0.5);
        ratios.push(format!("{ratio:.3}"));
        logs.push(log);
    }
    let took = started.elapsed();
    outcome(
        ok >= 9 && took < Duration::from_secs(600),
        format!("{ok}/10 seeds below 0.5x (final/initial: {}); {:.1} min", ratios.join(" "), minutes(took)),
    )
}

fn c6_corridor() -> Outcome {
    let started = Instant::now();
    let kind = EnvKind::Corridor;
    let demos = generate_demos(kind, Difficulty::Hard, 80, 0).unwrap();
    let config = RunConfig::default();
    let captions = captions_for(kind, Difficulty::Hard, &config).unwrap();
    let rate = |mode| {
        let (b, _) = fit(kind.task_spec().unwrap(), &demos.dataset, &captions, config.clone(), mode).unwrap();
        evaluate(&b, kind, Difficulty::Hard, 80, 0).unwrap().success_mean
    };
    let (casil, nocog, hbc, bc) = (rate(Mode::Casil), rate(Mode::NoCognition), rate(Mode::Hbc), rate(Mode::Bc));
    let took = started.elapsed();
    let ordered = casil > nocog && nocog > hbc && hbc > bc;
    outcome(
        ordered && casil - bc >= 0.20 && took < Duration::from_secs(7200),
        format!(
            "casil {casil:.3}, no-cognition {nocog:.3}, hbc {hbc:.3}, bc {bc:.3}; ordered {ordered}, casil-bc {:.3}; {:.1} min",
            casil - bc,
            minutes(took)
        ),
    )
}

fn stage_settings(modes: Vec<Mode>) -> SweepSettings {
    SweepSettings {
        kind: STAGE,
        difficulty: Difficulty::Easy,
        modes,
        seeds: vec![0, 1, 2],
        episodes: 80,
        demos: 100,
        config: RunConfig::default(),
        cache: None,
    }
}

fn c7_data_drop() -> Outcome {
    let started = Instant::now();
    let t = data_drop_sweep(&stage_settings(vec![Mode::Casil, Mode::Hbc]), &[100, 20]).unwrap();
    let drop = |m| t.success(m, 100.0).unwrap().0 - t.success(m, 20.0).unwrap().0;
    let (dc, dh) = (drop(Mode::Casil), drop(Mode::Hbc));
    outcome(
        dc < dh,
        format!(
            "casil {:.3}->{:.3} (drop {dc:.3}), hbc {:.3}->{:.3} (drop {dh:.3}); {:.1} min",
            t.success(Mode::Casil, 100.0).unwrap().0,
            t.success(Mode::Casil, 20.0).unwrap().0,
            t.success(Mode::Hbc, 100.0).unwrap().0,
            t.success(Mode::Hbc, 20.0).unwrap().0,
            minutes(started.elapsed())
        ),
    )
}

fn c8_option_count() -> Outcome {
    let started = Instant::now();
    let t = option_count_sweep(&stage_settings(vec![Mode::Casil]), &[2, 4, 6]).unwrap();
    let s = |k: f64| t.success(Mode::Casil, k).unwrap().0;
    outcome(
        s(4.0) > s(2.0) && s(4.0) > s(6.0),
        format!(
            "K=2 {:.3}, K=4 {:.3}, K=6 {:.3}; {:.1} min",
            s(2.0),
            s(4.0),
            s(6.0),
            minutes(started.elapsed())
        ),
    )
}

fn c9_reproducibility() -> Outcome {
    let config = RunConfig {
        train_steps: 40,
        ..RunConfig::default()
    };
    let demos = generate_demos(STAGE, Difficulty::Easy, 10, 9).unwrap();
    let captions = captions_for(STAGE, Difficulty::Easy, &config).unwrap();
    let go = || fit(STAGE.task_spec().unwrap(), &demos.dataset, &captions, config.clone(), Mode::Casil).unwrap();
    let ((a, la), (_, lb)) = (go(), go());
    let logs = la.to_jsonl() == lb.to_jsonl();

    let bytes = serialize_checkpoint(&a).unwrap();
    let back = deserialize_checkpoint(&bytes).unwrap();
    let bits = |b: &ModelBundle| -> Vec<u64> {
        b.params.blocks().iter().flat_map(|x| x.value.data.iter().map(|v| v.to_bits())).collect()
    };
    let checkpoint = bits(&a) == bits(&back) && serialize_checkpoint(&back).unwrap() == bytes;

    let dataset = deserialize_dataset(&serialize_dataset(&demos.dataset).unwrap()).unwrap() == demos.dataset;

    let train: std::collections::HashSet<u64> = demos
        .seeds
        .iter()
        .copied()
        .chain((0..config.pretrain_pairs).map(|i| caption_seed(config.seed, i)))
        .collect();
    let disjoint = evaluation_seeds(0, 1000).iter().all(|s| !train.contains(s));
    outcome(
        logs && checkpoint && dataset && disjoint,
        format!("logs identical {logs}, checkpoint exact {checkpoint}, dataset exact {dataset}, seeds disjoint {disjoint}"),
    )
}

fn c10_schedule(logs: &[TrainingLog]) -> Outcome {
    let log = match logs.first() {
        Some(l) => l.clone(),
        None => {
            let demos = generate_demos(STAGE, Difficulty::Easy, 20, 1).unwrap();
            let config = RunConfig::default();
            let captions = captions_for(STAGE, Difficulty::Easy, &config).unwrap();
            fit(STAGE.task_spec().unwrap(), &demos.dataset, &captions, config, Mode::Casil).unwrap().1
        }
    };
    let lr = |step: usize| log.records[step - 1].lr;
    let want = [(1, 1e-4), (10, 5e-4), (149, 5e-4), (150, 2.5e-4), (151, 2.5e-4)];
    let exact = want.iter().all(|&(s, v)| log.records[s - 1].step == s && lr(s) == v);
    outcome(
        exact,
        format!(
            "logged lr at steps 1/10/149/150/151: {:e} {:e} {:e} {:e} {:e}",
            lr(1),
            lr(10),
            lr(149),
            lr(150),
            lr(151)
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("CASIL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut logs = Vec::new();
    let mut hard_failures = 0;
    let names = [
        "gradient check",
        "segmenter vs exhaustive search",
        "segmentation and distribution invariants",
        "loss structure",
        "loss reduction on the stage task",
        "hard corridor ordering",
        "data-drop robustness",
        "option count",
        "reproducibility and persistence",
        "learning-rate schedule",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let started = Instant::now();
        let o = match n {
            1 => c1_gradients(),
            2 => c2_segmenter(),
            3 => c3_invariants(),
            4 => c4_loss_structure(),
            5 => c5_loss_reduction(&mut logs),
            6 => c6_corridor(),
            7 => c7_data_drop(),
            8 => c8_option_count(),
            9 => c9_reproducibility(),
            _ => c10_schedule(&logs),
        };
        let measured = (6..=8).contains(&n);
        if !o.pass && !measured {
            hard_failures += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if hard_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
