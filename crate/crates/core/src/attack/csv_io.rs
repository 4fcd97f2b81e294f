use std::path::Path;

use super::MembershipScore;
use crate::error::{Error, Result};

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::config(format!("{}: {e}", path.display()))
}

/// Columns: `record_id,method,score,label`.
pub fn write_scores(path: &Path, scores: &[MembershipScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in scores {
        w.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scores(path: &Path) -> Result<Vec<MembershipScore>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Method;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let scores = vec![
            MembershipScore { record_id: "a,1".into(), method: Method::Spv, score: 0.1 + 0.2, label: 1 },
            MembershipScore { record_id: "b".into(), method: Method::LiraBase, score: -1e-300, label: 0 },
        ];
        write_scores(&path, &scores).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("record_id,method,score,label\n"));
        assert_eq!(read_scores(&path).unwrap(), scores);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_scores(Path::new("/nonexistent/scores.csv")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
