//! Language-guided segmentation: the dynamic program on a hand-made
//! similarity matrix, then on real demonstrations before and after the dual
//! encoder is pre-trained on captions.
//!
//! cargo run --release --example segmentation

use casil::alignment::{compute_durations, segment_trajectory, uniform_boundaries, SimilarityMatrix};
use casil::env::{caption_pairs, generate_demos, Difficulty, EnvKind};
use casil::evaluation::dataset_segmentation_accuracy;
use casil::model::{Mode, ModelBundle};
use casil::training::{align_dataset, pretrain_encoders};
use casil::types::RunConfig;

fn main() -> casil::Result<()> {
    // three skills over eight steps; each row peaks where its skill ends
    let sim = SimilarityMatrix::from_rows(&[
        vec![0.1, 0.4, 0.9, 0.2, 0.0, 0.1, 0.0, 0.0],
        vec![0.0, 0.1, 0.2, 0.3, 0.8, 0.2, 0.1, 0.0],
        vec![0.0, 0.0, 0.1, 0.1, 0.2, 0.3, 0.4, 0.5],
    ])?;
    let b = segment_trajectory(&sim)?;
    println!("boundaries {b:?}, durations {:?}", compute_durations(&b, 8)?);
    println!("uniform split for comparison {:?}", uniform_boundaries(8, 3)?);

    let kind = EnvKind::Stage { stages: 4 };
    let demos = generate_demos(kind, Difficulty::Easy, 30, 1)?;
    let config = RunConfig::default();
    let mut bundle = ModelBundle::new(kind.task_spec()?, config.clone(), Mode::Casil)?;
    let trajectories = &demos.dataset.trajectories;

    let before = dataset_segmentation_accuracy(&align_dataset(&bundle, trajectories)?, &demos.boundaries, 3)?;
    let pairs = caption_pairs(kind, Difficulty::Easy, config.pretrain_pairs, config.seed)?;
    let losses = pretrain_encoders(&mut bundle, &pairs)?;
    let aligned = align_dataset(&bundle, trajectories)?;
    let after = dataset_segmentation_accuracy(&aligned, &demos.boundaries, 3)?;

    println!(
        "contrastive loss {:.3} -> {:.3}; boundary accuracy (±3 steps) {before:.2} -> {after:.2}",
        losses[0],
        losses[losses.len() - 1]
    );
    println!("first demo: expert {:?}, aligned {:?}", demos.boundaries[0], aligned[0]);
    Ok(())
}
