//! Experiment files: parse, override, validate and record a run.
//!
//! cargo run --example experiment_config

use casil::cli_io::{resolve_out_with, ExperimentConfig, RunRecord};
use casil::optim::LrSchedule;

const FILE: &str = r#"
env = "corridor"
difficulty = "hard"
mode = "casil"
demos = 80
out = "runs/corridor-hard"

[run]
seed = 5
epsilon = 0.5
"#;

fn main() -> casil::Result<()> {
    let mut exp = ExperimentConfig::from_toml(FILE)?;
    println!("{} {} with {} demos, ε = {}", exp.mode, exp.env, exp.demos, exp.run.epsilon);

    let schedule = LrSchedule::from_config(&exp.run);
    for step in [1, 5, 10, 150, 300] {
        println!("lr at step {step}: {:e}", schedule.at(step));
    }

    // misspelled keys are errors, not silently ignored
    let typo = FILE.replace("epsilon", "epsilom");
    println!("typo: {}", ExperimentConfig::from_toml(&typo).unwrap_err());

    exp.out = resolve_out_with(&exp.out, Some(std::env::temp_dir().join("casil-config-example")));
    RunRecord::new("train", &exp).write(&exp.out)?;
    println!("{}", std::fs::read_to_string(exp.out.join("run.toml"))?);
    Ok(())
}
