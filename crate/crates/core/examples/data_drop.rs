//! How success falls as demonstrations are removed, for CasIL and the
//! hierarchical baseline. Cells are cached so a rerun is instant.
//!
//! cargo run --release --example data_drop

use casil::env::{Difficulty, EnvKind};
use casil::experiment::{data_drop_sweep, SweepSettings};
use casil::model::Mode;
use casil::types::RunConfig;

fn main() -> casil::Result<()> {
    let settings = SweepSettings {
        kind: EnvKind::Stage { stages: 4 },
        difficulty: Difficulty::Easy,
        modes: vec![Mode::Casil, Mode::Hbc],
        seeds: vec![0],
        episodes: 40,
        demos: 100,
        config: RunConfig::default(),
        cache: Some(std::env::temp_dir().join("casil-data-drop-example")),
    };
    let table = data_drop_sweep(&settings, &[100, 50, 20])?;
    print!("{}", table.to_text());
    for mode in table.modes() {
        let full = table.success(mode, 100.0).map_or(f64::NAN, |s| s.0);
        let low = table.success(mode, 20.0).map_or(f64::NAN, |s| s.0);
        println!("{mode}: drop from 100 to 20 demos {:.3}", full - low);
    }
    Ok(())
}
