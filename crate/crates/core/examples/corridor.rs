//! The crowded corridor: one expert episode, then CasIL against plain
//! behaviour cloning on the hard setting.
//!
//! cargo run --release --example corridor [-- <demos> <episodes>]

use casil::env::{generate_demos, make_env, scripted_expert, Difficulty, EnvKind, World};
use casil::evaluation::evaluate;
use casil::experiment::{captions_for, fit};
use casil::model::Mode;
use casil::types::{RunConfig, TaskGoal};

fn main() -> casil::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().expect("counts are integers"));
    let n_demos = args.next().unwrap_or(80);
    let episodes = args.next().unwrap_or(40);
    let kind = EnvKind::Corridor;
    let hard = Difficulty::Hard;

    let mut world = make_env(kind, hard, 7)?;
    if let World::Corridor(c) = &world {
        println!("world 7: {} obstacles, mover {}", c.obstacles.len(), c.mover.is_some());
    }
    let goal = TaskGoal::new(kind.task_spec()?.goal)?;
    let demo = scripted_expert(&mut world, &goal)?;
    println!(
        "expert: {} steps, section ends at {:?}",
        demo.trajectory.len(),
        demo.boundaries
    );

    let demos = generate_demos(kind, hard, n_demos, 0)?;
    let config = RunConfig::default();
    let captions = captions_for(kind, hard, &config)?;
    for mode in [Mode::Casil, Mode::Bc] {
        let (bundle, _) = fit(kind.task_spec()?, &demos.dataset, &captions, config.clone(), mode)?;
        let r = evaluate(&bundle, kind, hard, episodes, 0)?;
        println!(
            "{mode:>6}: success {:.3}, metres travelled {:.1} ± {:.1}",
            r.success_mean, r.progress_mean, r.progress_std
        );
    }
    Ok(())
}
