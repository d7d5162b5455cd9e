//! The bundled mini corpus must stay consistent with the pipeline contracts:
//! row counts, dedup arithmetic, and per-record feature extraction.

use std::collections::BTreeSet;
use std::path::Path;

use vulnforge::corpus::{self, SchemaMapping};
use vulnforge::cotsv;

fn mapping() -> SchemaMapping {
    SchemaMapping {
        code: "func".into(),
        label: "target".into(),
        project: Some("project".into()),
        commit: Some("commit_id".into()),
        cve_id: Some("cve".into()),
        cwe_id: Some("cwe".into()),
        cve_description: Some("cve_description".into()),
        patch: Some("patch".into()),
    }
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn mini_corpus_ingests_with_the_documented_arithmetic() {
    let outcome = corpus::ingest(&fixture("mini_corpus.jsonl"), "mini", &mapping()).unwrap();
    assert_eq!(outcome.skipped, 2, "two malformed rows");
    assert_eq!(outcome.records.len(), 38);
    let unique = corpus::deduplicate(outcome.records);
    assert_eq!(unique.len(), 35, "three whitespace near-duplicates collapse");
    let vuln = unique.iter().filter(|r| r.label == 1).count();
    assert_eq!(vuln, 10);
    assert_eq!(unique.len() - vuln, 25);

    let balanced = corpus::balance_undersample(unique, 11).unwrap();
    assert_eq!(balanced.len(), 20);
    let splits = corpus::split(&balanced, 12).unwrap();
    assert_eq!(splits.train.len(), 16);
    assert_eq!(splits.validation.len(), 2);
    assert_eq!(splits.test.len(), 2);
}

#[test]
fn every_vulnerable_record_yields_lines_and_cve_text() {
    let outcome = corpus::ingest(&fixture("mini_corpus.jsonl"), "mini", &mapping()).unwrap();
    let records = corpus::deduplicate(outcome.records);
    let mut contexts = 0;
    for record in records.iter().filter(|r| r.label == 1) {
        let features = cotsv::extract_features(record, None, 1);
        assert!(
            features.cve_description.is_some(),
            "{}: missing CVE description",
            record.record_id
        );
        let lines = features
            .vuln_lines
            .unwrap_or_else(|| panic!("{}: no vulnerability lines", record.record_id));
        for line in lines.lines() {
            let (no, text) = line.split_once(": ").unwrap();
            let n: usize = no.parse().unwrap();
            assert_eq!(record.code.lines().nth(n - 1).unwrap().trim(), text);
        }
        if features.context.is_some() {
            contexts += 1;
        }
    }
    assert!(contexts >= 8, "dependency context extracted for most records, got {contexts}");
}

#[test]
fn vulnerable_line_positions_match_the_stories() {
    let outcome = corpus::ingest(&fixture("mini_corpus.jsonl"), "mini", &mapping()).unwrap();
    let records = corpus::deduplicate(outcome.records);
    let by_name = |needle: &str| {
        records
            .iter()
            .find(|r| r.code.contains(needle))
            .unwrap_or_else(|| panic!("no record containing {needle}"))
    };

    let probe = by_name("svg_probe");
    let features = cotsv::extract_features(probe, None, 1);
    assert_eq!(
        features.vuln_lines.as_deref(),
        Some("9: b += ff_subtitles_next_line(b);")
    );

    // The double free resolves to the conditional branch, not the first
    // free of the same trimmed text.
    let double_free = by_name("release_node");
    let features = cotsv::extract_features(double_free, None, 1);
    let lines = features.vuln_lines.unwrap();
    assert_eq!(lines, "5: free(node_ref->left);");

    let overflow = by_name("alloc_table");
    let features = cotsv::extract_features(overflow, None, 1);
    let numbers: BTreeSet<usize> = features
        .vuln_lines
        .unwrap()
        .lines()
        .map(|l| l.split_once(':').unwrap().0.parse().unwrap())
        .collect();
    assert_eq!(numbers, BTreeSet::from([3, 4]));
}
