//! Trains CasIL on 20 stage-task demonstrations and rolls the result out.
//!
//! cargo run --release --example train_stage [-- <seed>]

use casil::env::{generate_demos, Difficulty, EnvKind};
use casil::evaluation::evaluate;
use casil::experiment::{captions_for, fit};
use casil::model::Mode;
use casil::types::RunConfig;

fn main() -> casil::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let kind = EnvKind::Stage { stages: 4 };
    let demos = generate_demos(kind, Difficulty::Easy, 20, 1)?;
    let config = RunConfig { seed, ..RunConfig::default() };
    let captions = captions_for(kind, Difficulty::Easy, &config)?;

    let (bundle, log) = fit(kind.task_spec()?, &demos.dataset, &captions, config, Mode::Casil)?;
    for r in log.records.iter().filter(|r| r.step == 1 || r.step % 50 == 0) {
        println!(
            "step {:>3}  lr {:.1e}  total {:.4}  cognition {:.4}  policy {:.4}  termination {:.4}",
            r.step, r.lr, r.total, r.cognition, r.policy, r.termination
        );
    }
    println!("trained in {:.1}s", log.wall_seconds.iter().sum::<f64>());

    let report = evaluate(&bundle, kind, Difficulty::Easy, 40, 0)?;
    println!(
        "success {:.3} ± {:.3}, stages completed {:.2} of 4",
        report.success_mean, report.success_std, report.progress_mean
    );
    Ok(())
}
