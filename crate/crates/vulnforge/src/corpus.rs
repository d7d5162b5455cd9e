//! Corpus ingestion and preparation.
//!
//! Raw vulnerability datasets arrive as JSON-lines files with heterogeneous
//! field names; a [`SchemaMapping`] describes where each [`VulnRecord`] field
//! lives in a given source. After ingest the corpus is deduplicated on
//! whitespace-normalized code, class-balanced by undersampling the majority
//! class, and split 8:1:1 with per-class stratification. Every seeded step is
//! a pure function of (input order, seed).

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("file {path} has {rows} rows but none are usable")]
    NoUsableRows { path: String, rows: usize },
    #[error("class {label} is absent; cannot balance")]
    ClassAbsent { label: u8 },
    #[error("need at least 10 records per class to split, got {minority}")]
    TooFewRecords { minority: usize },
    #[error("line {line}: {message}")]
    BadRecordLine { line: usize, message: String },
}

/// One labeled function plus the metadata that travels with it. This is the
/// unit every pipeline stage consumes and produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnRecord {
    /// Content hash of the whitespace-normalized code, 16 hex chars.
    pub record_id: String,
    /// Full function source; the pre-patch version for vulnerable records.
    pub code: String,
    /// 1 = vulnerable, 0 = not.
    pub label: u8,
    pub project: Option<String>,
    pub commit: Option<String>,
    pub cve_id: Option<String>,
    pub cwe_id: Option<String>,
    pub cve_description: Option<String>,
    /// Unified diff of the fixing patch; present implies label = 1.
    pub patch: Option<String>,
    /// Tag of the source dataset this row came from.
    pub source_dataset: String,
    /// True for records produced by identifier augmentation.
    pub augmented: bool,
}

/// Field mapping for one source dataset: each value names the JSON field in
/// that source which holds the corresponding record field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaMapping {
    pub code: String,
    pub label: String,
    #[serde(default)]
    pub project: Option<String>,
    #[serde(default)]
    pub commit: Option<String>,
    #[serde(default)]
    pub cve_id: Option<String>,
    #[serde(default)]
    pub cwe_id: Option<String>,
    #[serde(default)]
    pub cve_description: Option<String>,
    #[serde(default)]
    pub patch: Option<String>,
}

/// Record-id lists for the three splits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// What `ingest` accepted and what it had to skip.
#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub records: Vec<VulnRecord>,
    /// Rows missing code or a parseable label.
    pub skipped: usize,
    /// Patches dropped because the row's label was 0.
    pub patches_dropped: usize,
}

/// Collapses whitespace runs to single spaces, trims each line, and drops
/// blank lines. Formatting-only variants of a function normalize identically.
pub fn normalize_code(code: &str) -> String {
    let mut lines = Vec::new();
    for line in code.lines() {
        let mut out = String::with_capacity(line.len());
        let mut in_ws = false;
        for c in line.trim().chars() {
            if c.is_whitespace() {
                in_ws = true;
            } else {
                if in_ws && !out.is_empty() {
                    out.push(' ');
                }
                in_ws = false;
                out.push(c);
            }
        }
        if !out.is_empty() {
            lines.push(out);
        }
    }
    lines.join("\n")
}

/// record_id = first 8 bytes of SHA-256 over the normalized code, hex.
pub fn record_id_for(code: &str) -> String {
    let digest = Sha256::digest(normalize_code(code).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn value_to_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn value_to_label(v: &serde_json::Value) -> Option<u8> {
    match v {
        serde_json::Value::Number(n) => match n.as_u64() {
            Some(0) => Some(0),
            Some(1) => Some(1),
            _ => None,
        },
        serde_json::Value::Bool(b) => Some(u8::from(*b)),
        serde_json::Value::String(s) => match s.trim() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
        _ => None,
    }
}

/// Reads one JSON-lines source file through a schema mapping. Rows missing
/// code or label are skipped and counted, not fatal; a file whose every row
/// is unusable is an error.
pub fn ingest(
    path: &Path,
    schema_tag: &str,
    mapping: &SchemaMapping,
) -> Result<IngestOutcome, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut outcome = IngestOutcome::default();
    let mut rows = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let row: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => {
                outcome.skipped += 1;
                continue;
            }
        };
        let code = row
            .get(&mapping.code)
            .and_then(value_to_string)
            .filter(|c| !c.trim().is_empty());
        let label = row.get(&mapping.label).and_then(value_to_label);
        let (code, label) = match (code, label) {
            (Some(c), Some(l)) => (c, l),
            _ => {
                outcome.skipped += 1;
                continue;
            }
        };
        let field = |name: &Option<String>| {
            name.as_ref()
                .and_then(|f| row.get(f))
                .and_then(value_to_string)
                .filter(|s| !s.is_empty())
        };
        let mut patch = field(&mapping.patch);
        if patch.is_some() && label == 0 {
            // A patch on a non-vulnerable row contradicts the record contract.
            patch = None;
            outcome.patches_dropped += 1;
        }
        outcome.records.push(VulnRecord {
            record_id: record_id_for(&code),
            code,
            label,
            project: field(&mapping.project),
            commit: field(&mapping.commit),
            cve_id: field(&mapping.cve_id),
            cwe_id: field(&mapping.cwe_id),
            cve_description: field(&mapping.cve_description),
            patch,
            source_dataset: schema_tag.to_string(),
            augmented: false,
        });
    }
    if rows > 0 && outcome.records.is_empty() {
        return Err(CorpusError::NoUsableRows {
            path: path.display().to_string(),
            rows,
        });
    }
    Ok(outcome)
}

/// Keeps the first record per normalized-code hash, in input order.
pub fn deduplicate(records: Vec<VulnRecord>) -> Vec<VulnRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert(record_id_for(&r.code)))
        .collect()
}

/// Drops majority-class records by seeded uniform sampling until both
/// classes have equal counts. The minority class is never touched and
/// surviving records keep their input order.
pub fn balance_undersample(
    records: Vec<VulnRecord>,
    seed: u64,
) -> Result<Vec<VulnRecord>, CorpusError> {
    let pos = records.iter().filter(|r| r.label == 1).count();
    let neg = records.len() - pos;
    if pos == 0 {
        return Err(CorpusError::ClassAbsent { label: 1 });
    }
    if neg == 0 {
        return Err(CorpusError::ClassAbsent { label: 0 });
    }
    if pos == neg {
        return Ok(records);
    }
    let (majority_label, keep) = if pos > neg { (1, neg) } else { (0, pos) };
    let mut majority_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == majority_label)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    majority_idx.shuffle(&mut rng);
    let kept: HashSet<usize> = majority_idx.into_iter().take(keep).collect();
    Ok(records
        .into_iter()
        .enumerate()
        .filter(|(i, r)| r.label != majority_label || kept.contains(i))
        .map(|(_, r)| r)
        .collect())
}

/// Stratified 8:1:1 split over a balanced corpus. Validation and test take
/// floor(n/10) records per class; the remainder goes to train, so the small
/// splits stay exact.
pub fn split(records: &[VulnRecord], seed: u64) -> Result<SplitSet, CorpusError> {
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for r in records {
        by_class[r.label as usize].push(&r.record_id);
    }
    let minority = by_class[0].len().min(by_class[1].len());
    if minority < 10 {
        return Err(CorpusError::TooFewRecords { minority });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SplitSet::default();
    for ids in by_class.iter_mut() {
        ids.shuffle(&mut rng);
        let n = ids.len();
        let eval_n = n / 10;
        for (i, id) in ids.iter().enumerate() {
            let bucket = if i < eval_n {
                &mut set.validation
            } else if i < 2 * eval_n {
                &mut set.test
            } else {
                &mut set.train
            };
            bucket.push(id.to_string());
        }
    }
    set.train.sort();
    set.validation.sort();
    set.test.sort();
    Ok(set)
}

/// Canonical record serialization: one JSON object per line, all fields
/// present, in declaration order.
pub fn write_records(path: &Path, records: &[VulnRecord]) -> Result<(), CorpusError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(buf.as_bytes()).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<VulnRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: VulnRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::BadRecordLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(r);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(code: &str, label: u8) -> VulnRecord {
        VulnRecord {
            record_id: record_id_for(code),
            code: code.to_string(),
            label,
            project: None,
            commit: None,
            cve_id: None,
            cwe_id: None,
            cve_description: None,
            patch: None,
            source_dataset: "test".to_string(),
            augmented: false,
        }
    }

    fn synth_corpus(pos: usize, neg: usize) -> Vec<VulnRecord> {
        let mut v = Vec::new();
        for i in 0..pos {
            v.push(record(&format!("int p{i}(void) {{ return {i}; }}"), 1));
        }
        for i in 0..neg {
            v.push(record(&format!("int n{i}(void) {{ return {i}; }}"), 0));
        }
        v
    }

    #[test]
    fn normalization_collapses_formatting() {
        let a = "int  f(void)\n{\n    return   1;\n}\n";
        let b = "int f(void)\n{\n\n  return 1;\n}";
        assert_eq!(normalize_code(a), normalize_code(b));
        assert_eq!(record_id_for(a), record_id_for(b));
    }

    #[test]
    fn record_id_is_16_hex_chars() {
        let id = record_id_for("int f() { return 0; }");
        assert_eq!(id.len(), 16);
        assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let mut a = record("int f() { return 1; }", 1);
        a.project = Some("first".to_string());
        let mut b = record("int  f()  {  return 1;  }", 0);
        b.project = Some("second".to_string());
        let out = deduplicate(vec![a, b]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].project.as_deref(), Some("first"));
    }

    #[test]
    fn balance_drops_majority_only() {
        let out = balance_undersample(synth_corpus(10, 30), 7).unwrap();
        let pos = out.iter().filter(|r| r.label == 1).count();
        let neg = out.iter().filter(|r| r.label == 0).count();
        assert_eq!((pos, neg), (10, 10));
    }

    #[test]
    fn balance_is_deterministic() {
        let ids = |seed| {
            balance_undersample(synth_corpus(5, 20), seed)
                .unwrap()
                .into_iter()
                .map(|r| r.record_id)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(42), ids(42));
        assert_ne!(ids(42), ids(43), "different seeds should usually differ");
    }

    #[test]
    fn balance_requires_both_classes() {
        assert!(balance_undersample(synth_corpus(5, 0), 1).is_err());
        assert!(balance_undersample(synth_corpus(0, 5), 1).is_err());
    }

    #[test]
    fn split_20_balanced_is_16_2_2() {
        let records = balance_undersample(synth_corpus(10, 10), 1).unwrap();
        let set = split(&records, 9).unwrap();
        assert_eq!(set.train.len(), 16);
        assert_eq!(set.validation.len(), 2);
        assert_eq!(set.test.len(), 2);
    }

    #[test]
    fn split_rejects_tiny_corpora() {
        let records = synth_corpus(5, 5);
        assert!(matches!(
            split(&records, 1),
            Err(CorpusError::TooFewRecords { minority: 5 })
        ));
    }

    #[test]
    fn ingest_skips_unusable_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"func\": \"int f() { return 0; }\", \"target\": 1, \"patch\": \"x\"}\n",
                "{\"target\": 1}\n",
                "{\"func\": \"int g() { return 0; }\", \"target\": \"maybe\"}\n",
                "{\"func\": \"int h() { return 2; }\", \"target\": 0, \"patch\": \"y\"}\n",
            ),
        )
        .unwrap();
        let mapping = SchemaMapping {
            code: "func".to_string(),
            label: "target".to_string(),
            project: None,
            commit: None,
            cve_id: None,
            cwe_id: None,
            cve_description: None,
            patch: Some("patch".to_string()),
        };
        let out = ingest(&path, "t", &mapping).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.skipped, 2);
        assert_eq!(out.patches_dropped, 1);
        assert_eq!(out.records[0].patch.as_deref(), Some("x"));
        assert!(out.records[1].patch.is_none());
    }

    #[test]
    fn ingest_empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let out = ingest(
            &path,
            "t",
            &SchemaMapping {
                code: "func".to_string(),
                label: "target".to_string(),
                project: None,
                commit: None,
                cve_id: None,
                cwe_id: None,
                cve_description: None,
                patch: None,
            },
        )
        .unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn ingest_all_bad_rows_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"nope\": 1}\nnot json\n").unwrap();
        let err = ingest(
            &path,
            "t",
            &SchemaMapping {
                code: "func".to_string(),
                label: "target".to_string(),
                project: None,
                commit: None,
                cve_id: None,
                cwe_id: None,
                cve_description: None,
                patch: None,
            },
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::NoUsableRows { rows: 2, .. }));
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let records = synth_corpus(2, 2);
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(codes in proptest::collection::vec("[a-z]{1,6}", 1..20)) {
            let records: Vec<_> = codes
                .iter()
                .map(|c| record(&format!("int f() {{ return {c}; }}"), 0))
                .collect();
            let once = deduplicate(records);
            let twice = deduplicate(once.clone());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn split_partitions_the_input(pos in 10usize..40, neg in 10usize..40, seed in 0u64..1000) {
            let records = synth_corpus(pos.min(neg), pos.min(neg));
            let set = split(&records, seed).unwrap();
            let mut all: Vec<_> = set.train.iter()
                .chain(&set.validation)
                .chain(&set.test)
                .cloned()
                .collect();
            all.sort();
            let mut expect: Vec<_> = records.iter().map(|r| r.record_id.clone()).collect();
            expect.sort();
            prop_assert_eq!(all, expect);
        }

        #[test]
        fn splits_are_stratified(n in 10usize..50, seed in 0u64..1000) {
            let records = synth_corpus(n, n);
            let set = split(&records, seed).unwrap();
            let by_id: std::collections::HashMap<_, _> =
                records.iter().map(|r| (r.record_id.clone(), r.label)).collect();
            for ids in [&set.train, &set.validation, &set.test] {
                let pos = ids.iter().filter(|id| by_id[*id] == 1).count() as i64;
                let neg = ids.len() as i64 - pos;
                prop_assert!((pos - neg).abs() <= 1);
            }
        }
    }
}
