//! Saves a briefly trained model, loads it back and checks that the copy
//! acts exactly like the original.
//!
//! cargo run --release --example checkpoints

use casil::cli_io::{load_checkpoint, save_checkpoint};
use casil::dataset::{read_dataset, write_dataset};
use casil::env::{generate_demos, make_env, Difficulty, EnvKind};
use casil::experiment::{captions_for, fit};
use casil::model::Mode;
use casil::rollout::run_episode;
use casil::types::RunConfig;

/// `[0, 0, 1, 1, 1]` as `0×2 1×3`.
fn runs(skills: &[usize]) -> String {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &s in skills {
        match out.last_mut() {
            Some((k, n)) if *k == s => *n += 1,
            _ => out.push((s, 1)),
        }
    }
    out.iter().map(|(k, n)| format!("{k}×{n}")).collect::<Vec<_>>().join(" ")
}

fn main() -> casil::Result<()> {
    let kind = EnvKind::Stage { stages: 3 };
    let dir = std::env::temp_dir().join("casil-checkpoint-example");
    std::fs::create_dir_all(&dir)?;

    let demos = generate_demos(kind, Difficulty::Easy, 20, 4)?;
    write_dataset(&dir.join("dataset.jsonl"), &demos.dataset)?;
    let dataset = read_dataset(&dir.join("dataset.jsonl"))?;
    assert_eq!(dataset, demos.dataset);

    let config = RunConfig::default();
    let captions = captions_for(kind, Difficulty::Easy, &config)?;
    let (bundle, _) = fit(kind.task_spec()?, &dataset, &captions, config, Mode::Casil)?;

    let path = dir.join("checkpoint.json");
    save_checkpoint(&path, &bundle)?;
    let restored = load_checkpoint(&path)?;
    println!("{} bytes written to {}", std::fs::metadata(&path)?.len(), path.display());

    for seed in [11, 12, 13] {
        let a = run_episode(&bundle, &mut make_env(kind, Difficulty::Easy, seed)?)?;
        let b = run_episode(&restored, &mut make_env(kind, Difficulty::Easy, seed)?)?;
        assert_eq!(a, b);
        println!(
            "world {seed}: success {} after {} steps, skills {}",
            a.result.success,
            a.result.steps,
            runs(&a.skills)
        );
    }
    Ok(())
}
