//! JSON-lines sequence files, one sequence per line:
//!
//! ```text
//! {"schema_version":1,"id":0,"config_hash":"…","seed":42,"rosters":[[0,1],[2]],
//!  "steps":[{"x":[…],"y":0,"y_tilde":0,"env":0,"u":true}, …]}
//! ```
//!
//! `y_tilde` is -1 for an unlabeled step. `rosters` may be empty when the
//! producer has no notion of environment rosters.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ClassId, Sequence, TimeStep};
use crate::{Error, Real, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    x: Vec<Real>,
    y: ClassId,
    y_tilde: i64,
    env: u32,
    u: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    schema_version: u32,
    id: u64,
    config_hash: String,
    seed: u64,
    #[serde(default)]
    rosters: Vec<Vec<ClassId>>,
    steps: Vec<StepRecord>,
}

pub fn sequence_to_json(seq: &Sequence) -> String {
    let rec = SequenceRecord {
        schema_version: SCHEMA_VERSION,
        id: seq.id,
        config_hash: seq.config_hash.clone(),
        seed: seq.seed,
        rosters: seq.rosters.clone(),
        steps: seq
            .steps
            .iter()
            .map(|s| StepRecord {
                x: s.x.clone(),
                y: s.y,
                y_tilde: s.label.map_or(-1, i64::from),
                env: s.env,
                u: s.novel,
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("sequence serializes")
}

/// Parse and validate one line; errors carry the 1-based `line`.
pub fn sequence_from_json(text: &str, line: usize) -> Result<Sequence> {
    let bad = |reason: String| Error::Record { line, reason };
    let rec: SequenceRecord =
        serde_json::from_str(text).map_err(|e| bad(format!("malformed record: {e}")))?;
    if rec.schema_version != SCHEMA_VERSION {
        return Err(bad(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            rec.schema_version
        )));
    }
    let mut steps = Vec::with_capacity(rec.steps.len());
    for (t, s) in rec.steps.into_iter().enumerate() {
        let label = match s.y_tilde {
            -1 => None,
            l if l == s.y as i64 => Some(s.y),
            l => {
                return Err(bad(format!(
                    "step {t}: revealed label {l} does not match class {}",
                    s.y
                )))
            }
        };
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("step {t}: non-finite feature")));
        }
        steps.push(TimeStep {
            x: s.x,
            y: s.y,
            label,
            env: s.env,
            novel: s.u,
        });
    }
    let seq = Sequence {
        id: rec.id,
        seed: rec.seed,
        config_hash: rec.config_hash,
        rosters: rec.rosters,
        steps,
    };
    seq.validate(None).map_err(bad)?;
    Ok(seq)
}

pub fn write_sequences(w: &mut impl Write, sequences: &[Sequence]) -> Result<()> {
    for seq in sequences {
        writeln!(w, "{}", sequence_to_json(seq))?;
    }
    Ok(())
}

/// Read every non-blank line of a sequence file.
pub fn read_sequences(r: impl BufRead) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(sequence_from_json(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences::{generate_sequence, SamplerConfig};

    #[test]
    fn round_trip_is_identity() {
        let cfg = SamplerConfig {
            semi_supervised: true,
            ..Default::default()
        };
        let seqs: Vec<_> = (0..3).map(|i| generate_sequence(&cfg, 11, i)).collect();
        let mut buf = Vec::new();
        write_sequences(&mut buf, &seqs).unwrap();
        let back = read_sequences(buf.as_slice()).unwrap();
        assert_eq!(back, seqs);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(read_sequences(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn mismatched_label_rejected_with_line() {
        let good = sequence_to_json(&generate_sequence(&SamplerConfig::default(), 1, 0));
        let bad = good.replacen("\"y_tilde\":0", "\"y_tilde\":7", 1);
        let text = format!("{good}\n{bad}\n");
        let err = read_sequences(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("does not match"), "{err}");
    }

    #[test]
    fn class_outside_roster_rejected() {
        let text = r#"{"schema_version":1,"id":0,"config_hash":"","seed":0,"rosters":[[0]],"steps":[{"x":[0.0],"y":3,"y_tilde":3,"env":0,"u":true}]}"#;
        let err = sequence_from_json(text, 4).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("roster"), "{err}");
    }

    #[test]
    fn malformed_and_wrong_version_rejected() {
        assert!(sequence_from_json("{not json", 1).is_err());
        let text = r#"{"schema_version":9,"id":0,"config_hash":"","seed":0,"steps":[]}"#;
        let err = sequence_from_json(text, 1).unwrap_err().to_string();
        assert!(err.contains("schema version 9"), "{err}");
    }
}
