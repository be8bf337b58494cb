//! Demonstration datasets: validation and the line-delimited file format.
//!
//! A dataset file is JSON Lines. The first line holds the manifest, then one
//! line per trajectory, then a trailer carrying the record count, the byte
//! length of everything before the trailer and its SHA-256 digest. Floats are
//! written with shortest round-trip formatting, so reading a file back yields
//! bit-identical values.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::types::{ActionKind, CognitivePrior, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub task: String,
    pub goal: String,
    pub prior: Vec<String>,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_kind: ActionKind,
    pub trajectory_count: usize,
}

impl Manifest {
    pub fn new(
        task: impl Into<String>,
        goal: impl Into<String>,
        prior: &CognitivePrior,
        obs_dim: usize,
        action_dim: usize,
        action_kind: ActionKind,
        trajectory_count: usize,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            task: task.into(),
            goal: goal.into(),
            prior: prior.descriptions().to_vec(),
            obs_dim,
            action_dim,
            action_kind,
            trajectory_count,
        }
    }

    pub fn prior(&self) -> Result<CognitivePrior> {
        CognitivePrior::new(self.prior.iter().cloned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn prior(&self) -> Result<CognitivePrior> {
        self.manifest.prior()
    }

    /// The trajectories at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut trajectories = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self
                .trajectories
                .get(i)
                .ok_or_else(|| invalid(format!("trajectory index {i} out of range")))?;
            trajectories.push(t.clone());
        }
        let mut manifest = self.manifest.clone();
        manifest.trajectory_count = trajectories.len();
        Ok(Dataset {
            manifest,
            trajectories,
        })
    }

    /// The first `n` trajectories, with the manifest count adjusted.
    pub fn prefix(&self, n: usize) -> Dataset {
        let trajectories: Vec<Trajectory> = self.trajectories.iter().take(n).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.trajectory_count = trajectories.len();
        Dataset {
            manifest,
            trajectories,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub trajectory: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every trajectory against the prior and the first trajectory's
/// dimensions. Collects all problems rather than stopping at the first.
pub fn validate_dataset(trajectories: &[Trajectory], prior: &CognitivePrior) -> ValidationReport {
    let dims = trajectories
        .first()
        .and_then(|t| t.steps.first())
        .map(|s| (s.obs.dim(), s.action.dim()));
    validate_with_dims(trajectories, prior, dims)
}

pub fn validate_against_manifest(dataset: &Dataset) -> ValidationReport {
    let prior = match dataset.prior() {
        Ok(p) => p,
        Err(e) => {
            return ValidationReport {
                violations: vec![Violation {
                    trajectory: 0,
                    message: e.to_string(),
                }],
            }
        }
    };
    let mut report = validate_with_dims(
        &dataset.trajectories,
        &prior,
        Some((dataset.manifest.obs_dim, dataset.manifest.action_dim)),
    );
    if dataset.manifest.trajectory_count != dataset.trajectories.len() {
        report.violations.push(Violation {
            trajectory: 0,
            message: format!(
                "manifest declares {} trajectories, found {}",
                dataset.manifest.trajectory_count,
                dataset.trajectories.len()
            ),
        });
    }
    report
}

fn validate_with_dims(
    trajectories: &[Trajectory],
    prior: &CognitivePrior,
    dims: Option<(usize, usize)>,
) -> ValidationReport {
    let k = prior.len();
    let mut violations = Vec::new();
    for (i, traj) in trajectories.iter().enumerate() {
        let mut push = |message: String| violations.push(Violation { trajectory: i, message });
        if traj.len() < k {
            push(format!(
                "T < K: cannot place {k} monotone boundaries in {} steps",
                traj.len()
            ));
        }
        if traj.goal.text.trim().is_empty() {
            push("goal text is empty".to_string());
        }
        for (t, step) in traj.steps.iter().enumerate() {
            if let Some((od, ad)) = dims {
                if step.obs.dim() != od {
                    push(format!("step {t}: observation dimension {} != {od}", step.obs.dim()));
                }
                if step.action.dim() != ad {
                    push(format!("step {t}: action dimension {} != {ad}", step.action.dim()));
                }
            }
            if step.obs.features.iter().any(|v| !v.is_finite()) {
                push(format!("step {t}: non-finite observation entry"));
            }
            if step.action.values.iter().any(|v| !v.is_finite()) {
                push(format!("step {t}: non-finite action entry"));
            }
        }
    }
    ValidationReport { violations }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Manifest(Manifest),
    Trajectory(Trajectory),
    Trailer(Trailer),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    records: usize,
    payload_bytes: usize,
    sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn serialize_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut write_line = |rec: &Record| -> Result<()> {
        serde_json::to_writer(&mut out, rec).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(b'\n');
        Ok(())
    };
    write_line(&Record::Manifest(dataset.manifest.clone()))?;
    for t in &dataset.trajectories {
        write_line(&Record::Trajectory(t.clone()))?;
    }
    let trailer = Trailer {
        records: dataset.trajectories.len(),
        payload_bytes: out.len(),
        sha256: hex_digest(&out),
    };
    serde_json::to_writer(&mut out, &Record::Trailer(trailer))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn deserialize_dataset(bytes: &[u8]) -> Result<Dataset> {
    let parse_err = |offset: usize, message: String| Error::Parse { offset, message };
    let mut manifest: Option<Manifest> = None;
    let mut trajectories = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let end = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset + p,
            None => return Err(parse_err(offset, "unterminated record (stream truncated?)".into())),
        };
        let line = &bytes[offset..end];
        let record: Record = serde_json::from_slice(line).map_err(|e| {
            let at = offset + e.column().saturating_sub(1);
            parse_err(at, e.to_string())
        })?;
        match record {
            Record::Manifest(m) => {
                if manifest.is_some() {
                    return Err(parse_err(offset, "duplicate manifest".into()));
                }
                if m.format_version != FORMAT_VERSION {
                    return Err(Error::Version {
                        found: m.format_version,
                        expected: FORMAT_VERSION,
                    });
                }
                manifest = Some(m);
            }
            Record::Trajectory(t) => {
                if manifest.is_none() {
                    return Err(parse_err(offset, "trajectory before manifest".into()));
                }
                trajectories.push(t);
            }
            Record::Trailer(trailer) => {
                let manifest =
                    manifest.ok_or_else(|| parse_err(offset, "trailer before manifest".into()))?;
                if trailer.payload_bytes != offset {
                    return Err(parse_err(
                        offset,
                        format!("trailer expects {} payload bytes, found {offset}", trailer.payload_bytes),
                    ));
                }
                if trailer.sha256 != hex_digest(&bytes[..offset]) {
                    return Err(parse_err(offset, "checksum mismatch".into()));
                }
                if trailer.records != trajectories.len() || manifest.trajectory_count != trajectories.len() {
                    return Err(parse_err(offset, "record count mismatch".into()));
                }
                if end + 1 != bytes.len() {
                    return Err(parse_err(end + 1, "data after trailer".into()));
                }
                return Ok(Dataset {
                    manifest,
                    trajectories,
                });
            }
        }
        offset = end + 1;
    }
    Err(parse_err(bytes.len(), "missing trailer (stream truncated?)".into()))
}

pub fn write_dataset(path: &std::path::Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, serialize_dataset(dataset)?)?;
    Ok(())
}

pub fn read_dataset(path: &std::path::Path) -> Result<Dataset> {
    deserialize_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Action, Observation, Step, TaskGoal};

    fn prior(k: usize) -> CognitivePrior {
        CognitivePrior::new((0..k).map(|i| format!("skill number {i}"))).unwrap()
    }

    fn traj(t: usize, seed: f64) -> Trajectory {
        let steps = (0..t)
            .map(|i| Step {
                obs: Observation::new(vec![seed + i as f64 * 0.1, (i as f64).sin() / 3.0]),
                action: Action::new(vec![seed.cos() * i as f64]),
            })
            .collect();
        Trajectory::new(TaskGoal::new("reach the end").unwrap(), steps).unwrap()
    }

    fn dataset(trajs: Vec<Trajectory>) -> Dataset {
        let p = prior(4);
        Dataset {
            manifest: Manifest::new("unit", "reach the end", &p, 2, 1, ActionKind::Continuous, trajs.len()),
            trajectories: trajs,
        }
    }

    #[test]
    fn well_formed_dataset_has_empty_report() {
        let trajs: Vec<_> = (0..10).map(|i| traj(6 + i, i as f64)).collect();
        assert!(validate_dataset(&trajs, &prior(4)).is_valid());
    }

    #[test]
    fn short_trajectory_is_reported() {
        let report = validate_dataset(&[traj(2, 0.0)], &prior(4));
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].message.contains("T < K: cannot place 4 monotone boundaries"));
    }

    #[test]
    fn non_finite_observation_names_step() {
        let mut t = traj(6, 1.0);
        t.steps[3].obs.features[1] = f64::NAN;
        let report = validate_dataset(&[t], &prior(4));
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].message.starts_with("step 3"));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut t = traj(6, 1.0);
        t.steps[2].obs.features.push(0.0);
        let ds = dataset(vec![t]);
        let report = validate_against_manifest(&ds);
        assert!(report.violations.iter().any(|v| v.message.contains("observation dimension")));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = dataset(vec![]);
        let back = deserialize_dataset(&serialize_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn floats_round_trip_exactly() {
        let mut t = traj(5, 0.123_456_789_012_345_67);
        t.steps[0].obs.features[0] = 1.0 / 3.0;
        t.steps[1].obs.features[0] = f64::MIN_POSITIVE;
        t.steps[2].action.values[0] = -2.225_073_858_507_201e-308;
        let ds = dataset(vec![t]);
        let back = deserialize_dataset(&serialize_dataset(&ds).unwrap()).unwrap();
        for (a, b) in ds.trajectories[0].steps.iter().zip(&back.trajectories[0].steps) {
            for (x, y) in a.obs.features.iter().zip(&b.obs.features) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.action.values.iter().zip(&b.action.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_stream_is_a_parse_error() {
        let ds = dataset(vec![traj(5, 0.5), traj(7, 1.5)]);
        let bytes = serialize_dataset(&ds).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(deserialize_dataset(cut), Err(Error::Parse { .. })));
        // dropping the whole trailer line is caught too
        let without_trailer = {
            let body = &bytes[..bytes.len() - 1];
            let last_nl = body.iter().rposition(|&b| b == b'\n').unwrap();
            &bytes[..=last_nl]
        };
        assert!(matches!(deserialize_dataset(without_trailer), Err(Error::Parse { .. })));
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let ds = dataset(vec![traj(5, 0.5)]);
        let mut bytes = serialize_dataset(&ds).unwrap();
        let pos = bytes.iter().position(|&b| b == b'5').unwrap();
        bytes[pos] = b'6';
        assert!(matches!(deserialize_dataset(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut ds = dataset(vec![]);
        ds.manifest.format_version = 99;
        let bytes = serialize_dataset(&ds).unwrap();
        assert!(matches!(
            deserialize_dataset(&bytes),
            Err(Error::Version { found: 99, expected: FORMAT_VERSION })
        ));
    }

    #[test]
    fn garbage_reports_offset() {
        let err = deserialize_dataset(b"{\"manifest\": oops}\n").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 0 && offset < 20),
            other => panic!("unexpected {other:?}"),
        }
    }
}
