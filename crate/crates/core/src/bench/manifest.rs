use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BenchError;
use crate::boxcodec::RegionCaption;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_regions: Option<Vec<RegionCaption>>,
}

/// Requests to replay. Relative image paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadManifest {
    pub records: Vec<ManifestRecord>,
    pub warmup: usize,
    pub requests: usize,
    /// Manifest file name plus a digest of its contents.
    pub corpus_id: String,
}

impl WorkloadManifest {
    pub fn load(path: &Path, warmup: usize, requests: Option<usize>) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&text, base, &name, warmup, requests)
    }

    pub fn parse(text: &str, base: &Path, name: &str, warmup: usize, requests: Option<usize>) -> Result<Self, BenchError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| BenchError::Data(format!("manifest line {}: {e}", i + 1)))?;
            if rec.image_path.is_relative() {
                rec.image_path = base.join(&rec.image_path);
            }
            if !rec.image_path.is_file() {
                return Err(BenchError::Data(format!(
                    "manifest line {}: image {} not found",
                    i + 1,
                    rec.image_path.display()
                )));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(BenchError::Data("manifest has no records".into()));
        }
        let requests = requests.unwrap_or(records.len());
        if requests == 0 {
            return Err(BenchError::Config("request count must be at least 1".into()));
        }
        let digest = Sha256::digest(text.as_bytes());
        let short: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { records, warmup, requests, corpus_id: format!("{name}@{short}") })
    }

    /// Record served at position `i` of the run, warmup included. Records
    /// are replayed cyclically.
    pub fn record(&self, i: usize) -> &ManifestRecord {
        &self.records[i % self.records.len()]
    }

    pub fn total(&self) -> usize {
        self.warmup + self.requests
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_resolve() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.jpg"), b"x").unwrap();
        let text = "{\"image_path\":\"a.jpg\",\"prompt\":\"hi\"}\n\n";
        let m = WorkloadManifest::parse(text, dir.path(), "m.jsonl", 2, None).unwrap();
        assert_eq!(m.requests, 1);
        assert_eq!(m.total(), 3);
        assert_eq!(m.record(2).image_path, dir.path().join("a.jpg"));
        assert!(m.corpus_id.starts_with("m.jsonl@"));

        let missing = "{\"image_path\":\"b.jpg\",\"prompt\":\"hi\"}";
        assert!(matches!(WorkloadManifest::parse(missing, dir.path(), "m", 0, None), Err(BenchError::Data(_))));
        assert!(matches!(WorkloadManifest::parse("", dir.path(), "m", 0, None), Err(BenchError::Data(_))));
        assert!(matches!(WorkloadManifest::parse(text, dir.path(), "m", 0, Some(0)), Err(BenchError::Config(_))));
    }
}
