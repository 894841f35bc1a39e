//! Result files: per-round CSV, JSON summary and the resolved config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::orchestrator::{ExperimentOutcome, RoundReport};

pub const CSV_HEADER: &str = "round,participants,mta,asr,benign_count,poisoned_count,wall_ms";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Renders the per-round table. Floats use the shortest round-trip representation.
pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::with_capacity(64 * (reports.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.participants.len(),
            r.mta,
            r.asr,
            r.benign_count,
            r.poisoned_count,
            r.wall_ms
        ));
    }
    out
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Paths of the files written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub rounds: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
}

/// Creates `dir` if needed and writes the CSV, summary and resolved config.
pub fn write_outputs(dir: &Path, outcome: &ExperimentOutcome) -> Result<OutputFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = OutputFiles {
        rounds: dir.join(ROUNDS_FILE),
        summary: dir.join(SUMMARY_FILE),
        config: dir.join(CONFIG_FILE),
    };
    write_atomic(&files.rounds, rounds_csv(&outcome.reports).as_bytes())?;
    let summary = serde_json::to_string_pretty(&outcome.summary)
        .map_err(|e| Error::usage(format!("cannot serialize summary: {e}")))?;
    write_atomic(&files.summary, summary.as_bytes())?;
    write_atomic(&files.config, outcome.summary.config.to_toml_string()?.as_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(round: usize, mta: f64) -> RoundReport {
        RoundReport {
            round,
            participants: vec![0, 3, 4],
            malicious_participants: 1,
            verdicts: vec![],
            mta,
            per_class: vec![Some(mta)],
            asr: 0.1,
            benign_count: 2,
            poisoned_count: 1,
            wall_ms: 12,
            warnings: vec![],
        }
    }

    #[test]
    fn header_only_without_rounds() {
        assert_eq!(rounds_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn rows_round_trip_floats() {
        let csv = rounds_csv(&[report(1, 0.1 + 0.2), report(2, 1.0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,3,0.30000000000000004,0.1,2,1,12");
        assert_eq!(lines[2], "2,3,1,0.1,2,1,12");
        let mta: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(mta, 0.1 + 0.2);
    }
}
