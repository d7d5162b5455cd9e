//! Stage implementations behind the subcommands.
//!
//! Stages communicate only through files under the output directory, so any
//! stage can be rerun or resumed without the others in memory. Each run
//! refreshes its own manifest entry; the manifest carries no timestamps so
//! reruns with identical inputs produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use vulnforge::attacks::{self, AttackConfig, AttackKind, AttackOutcome};
use vulnforge::client::{EndpointConfig, MockTransport, ModelClient};
use vulnforge::corpus::{self, VulnRecord};
use vulnforge::cotsv::{
    self, CotBudget, CotOptions, CotStatus, PromptTemplates, RecordFeatures, ReviewItem,
};
use vulnforge::eval::{self, Condition, EvalReport, RobustnessRow};
use vulnforge::instruct::{self, BuildCounts, InstructionExample};
use vulnforge::pdg;

use crate::config::PipelineConfig;

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One process per output directory. The lock file is removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "output directory {} is locked by another run (remove {} if that run is gone)",
                out_dir.display(),
                path.display()
            ),
            Err(e) => Err(e).context("creating lock file"),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ManifestEntry {
    inputs: Vec<String>,
    outputs: Vec<String>,
    seeds: BTreeMap<String, u64>,
}

/// Run provenance: which stage read and wrote what, under which seeds,
/// for which config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    config_sha256: String,
    stages: BTreeMap<String, ManifestEntry>,
}

fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

fn load_manifest(out_dir: &Path) -> Manifest {
    fs::read_to_string(manifest_path(out_dir))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok())
        .unwrap_or_default()
}

fn record_stage(
    out_dir: &Path,
    config_text: &str,
    stage: &str,
    entry: ManifestEntry,
) -> anyhow::Result<()> {
    let mut manifest = load_manifest(out_dir);
    manifest.tool_version = TOOL_VERSION.to_string();
    manifest.config_sha256 = hex_sha256(config_text.as_bytes());
    manifest.stages.insert(stage.to_string(), entry);
    write_json_pretty(&manifest_path(out_dir), &manifest)
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = sha2::Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Render a path for the manifest: relative to the output directory when it
/// lives inside it, so two runs into different directories write identical
/// manifests.
fn manifest_input(out_dir: &Path, path: &Path) -> String {
    path.strip_prefix(out_dir).unwrap_or(path).display().to_string()
}

/// Missing upstream artifacts name the stage that produces them.
fn require(path: &Path, produced_by: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!(
            "missing artifact {}; run the `{}` stage first",
            path.display(),
            produced_by
        );
    }
    Ok(())
}

/// Transport selection: a scripted mock fixture when given, HTTP otherwise.
pub fn make_client(
    endpoint: &EndpointConfig,
    mock: Option<&Path>,
) -> anyhow::Result<ModelClient> {
    let client = match mock {
        Some(fixture) => {
            let transport = MockTransport::from_file(fixture)
                .with_context(|| format!("loading mock fixture {}", fixture.display()))?;
            ModelClient::with_transport(endpoint.clone(), Box::new(transport))?
        }
        None => ModelClient::http(endpoint.clone())?,
    };
    Ok(client)
}

#[derive(Debug, Serialize)]
struct IngestReport {
    parsed: usize,
    skipped: usize,
    patches_dropped: usize,
    after_dedup: usize,
    after_balance: usize,
    vulnerable: usize,
    benign: usize,
}

pub fn run_ingest(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let outcome = corpus::ingest(
        &config.dataset.path,
        &config.dataset.schema,
        &config.dataset.mapping,
    )?;
    let parsed = outcome.records.len();
    let unique = corpus::deduplicate(outcome.records);
    let after_dedup = unique.len();
    let balanced = corpus::balance_undersample(unique, config.seeds.balance)?;
    let splits = corpus::split(&balanced, config.seeds.split)?;

    let report = IngestReport {
        parsed,
        skipped: outcome.skipped,
        patches_dropped: outcome.patches_dropped,
        after_dedup,
        after_balance: balanced.len(),
        vulnerable: balanced.iter().filter(|r| r.label == 1).count(),
        benign: balanced.iter().filter(|r| r.label == 0).count(),
    };

    corpus::write_records(&out_dir.join("records.jsonl"), &balanced)?;
    write_json_pretty(&out_dir.join("splits.json"), &splits)?;
    write_json_pretty(&out_dir.join("ingest_report.json"), &report)?;
    record_stage(
        out_dir,
        config_text,
        "ingest",
        ManifestEntry {
            inputs: vec![manifest_input(out_dir, &config.dataset.path)],
            outputs: vec!["records.jsonl".into(), "splits.json".into(), "ingest_report.json".into()],
            seeds: BTreeMap::from([
                ("balance".into(), config.seeds.balance),
                ("split".into(), config.seeds.split),
            ]),
        },
    )?;
    log::info!(
        "ingest: {} parsed, {} skipped, {} after dedup, {} balanced",
        parsed,
        report.skipped,
        after_dedup,
        report.after_balance
    );
    Ok(())
}

pub fn run_features(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
    emit_pdg: bool,
) -> anyhow::Result<()> {
    let records_path = out_dir.join("records.jsonl");
    require(&records_path, "ingest")?;
    let records = corpus::read_records(&records_path)?;

    let mut features: BTreeMap<String, RecordFeatures> = BTreeMap::new();
    for record in &records {
        let f = cotsv::extract_features(record, None, config.cotsv.context_hops);
        if !f.is_empty() {
            features.insert(record.record_id.clone(), f);
        }
    }
    write_json_pretty(&out_dir.join("features.json"), &features)?;

    let mut outputs = vec!["features.json".to_string()];
    if emit_pdg {
        let dir = out_dir.join("pdg");
        fs::create_dir_all(&dir)?;
        for record in &records {
            let Ok(statements) = pdg::segment_statements(&record.code) else { continue };
            let graph = pdg::build_pdg(statements);
            write_json_pretty(&dir.join(format!("{}.json", record.record_id)), &pdg::pdg_to_json(&graph))?;
        }
        outputs.push("pdg/".into());
    }

    record_stage(
        out_dir,
        config_text,
        "features",
        ManifestEntry {
            inputs: vec!["records.jsonl".into()],
            outputs,
            seeds: BTreeMap::new(),
        },
    )?;
    log::info!("features: {} records carry features", features.len());
    Ok(())
}

fn split_records<'a>(
    records: &'a [VulnRecord],
    ids: &[String],
) -> Vec<&'a VulnRecord> {
    let wanted: BTreeMap<&str, ()> = ids.iter().map(|s| (s.as_str(), ())).collect();
    records.iter().filter(|r| wanted.contains_key(r.record_id.as_str())).collect()
}

#[derive(Debug, Serialize)]
struct InterpretReport {
    transcripts: usize,
    accepted: usize,
    needs_review: usize,
    rejected: usize,
    skipped: Vec<cotsv::SkippedRecord>,
    requests: u64,
    prompt_tokens: u64,
    response_tokens: u64,
    budget_exhausted: bool,
}

pub fn run_interpret(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
    client: &ModelClient,
) -> anyhow::Result<()> {
    let records_path = out_dir.join("records.jsonl");
    let splits_path = out_dir.join("splits.json");
    require(&records_path, "ingest")?;
    require(&splits_path, "ingest")?;
    let features_path = out_dir.join("features.json");
    require(&features_path, "features")?;

    let records = corpus::read_records(&records_path)?;
    let splits: corpus::SplitSet = read_json(&splits_path)?;
    let features: BTreeMap<String, RecordFeatures> = read_json(&features_path)?;
    let train: Vec<VulnRecord> =
        split_records(&records, &splits.train).into_iter().cloned().collect();

    let templates = match &config.cotsv.templates_dir {
        Some(dir) => PromptTemplates::from_dir(dir)?,
        None => PromptTemplates::default(),
    };
    let options = CotOptions {
        context_hops: config.cotsv.context_hops,
        ..CotOptions::default()
    };
    let budget = CotBudget {
        max_requests: config.cotsv.max_requests,
        max_tokens: config.cotsv.max_tokens,
    };

    let store = out_dir.join("transcripts.jsonl");
    let outcome = cotsv::run_balanced_batch(
        &train,
        &features,
        client,
        &templates,
        &options,
        &budget,
        config.seeds.interpret,
        &store,
    )?;

    let all = cotsv::read_transcripts(&store)?;
    let records_map: BTreeMap<String, VulnRecord> =
        records.iter().map(|r| (r.record_id.clone(), r.clone())).collect();
    let queue = cotsv::export_review_queue(&all, &records_map, &features);
    write_json_pretty(&out_dir.join("review_queue.json"), &queue)?;

    let count = |status: CotStatus| all.iter().filter(|t| t.status == status).count();
    let report = InterpretReport {
        transcripts: all.len(),
        accepted: count(CotStatus::Accepted),
        needs_review: count(CotStatus::NeedsReview),
        rejected: count(CotStatus::Rejected),
        skipped: outcome.skipped,
        requests: outcome.usage.requests,
        prompt_tokens: outcome.usage.prompt_tokens,
        response_tokens: outcome.usage.response_tokens,
        budget_exhausted: outcome.exhausted,
    };
    write_json_pretty(&out_dir.join("interpret_report.json"), &report)?;

    record_stage(
        out_dir,
        config_text,
        "interpret",
        ManifestEntry {
            inputs: vec!["records.jsonl".into(), "splits.json".into(), "features.json".into()],
            outputs: vec![
                "transcripts.jsonl".into(),
                "review_queue.json".into(),
                "interpret_report.json".into(),
            ],
            seeds: BTreeMap::from([("interpret".into(), config.seeds.interpret)]),
        },
    )?;
    log::info!(
        "interpret: {} transcripts ({} accepted, {} for review), {} requests",
        report.transcripts,
        report.accepted,
        report.needs_review,
        report.requests
    );
    if report.budget_exhausted {
        log::warn!("interpret: budget exhausted before the batch finished; rerun to resume");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AugmentReport {
    produced: usize,
    unchanged: usize,
}

pub fn run_augment(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let records_path = out_dir.join("records.jsonl");
    let splits_path = out_dir.join("splits.json");
    require(&records_path, "ingest")?;
    require(&splits_path, "ingest")?;
    let records = corpus::read_records(&records_path)?;
    let splits: corpus::SplitSet = read_json(&splits_path)?;

    let pool = instruct::IdentifierPool::harvest(&records);
    let train = split_records(&records, &splits.train);
    let mut augmented = Vec::new();
    let mut unchanged = 0usize;
    for (i, record) in train.iter().enumerate() {
        let out = instruct::augment_identifiers(
            record,
            config.augment.ratio,
            &pool,
            config.seeds.augment.wrapping_add(i as u64),
        )?;
        if out.renames.is_empty() {
            unchanged += 1;
        }
        augmented.push(out.record);
    }
    corpus::write_records(&out_dir.join("augmented.jsonl"), &augmented)?;
    let report = AugmentReport { produced: augmented.len(), unchanged };
    write_json_pretty(&out_dir.join("augment_report.json"), &report)?;

    record_stage(
        out_dir,
        config_text,
        "augment",
        ManifestEntry {
            inputs: vec!["records.jsonl".into(), "splits.json".into()],
            outputs: vec!["augmented.jsonl".into(), "augment_report.json".into()],
            seeds: BTreeMap::from([("augment".into(), config.seeds.augment)]),
        },
    )?;
    log::info!(
        "augment: {} copies written ({} had nothing to rename)",
        report.produced,
        report.unchanged
    );
    Ok(())
}

pub fn run_build_dataset(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
    rendered: bool,
) -> anyhow::Result<()> {
    let records_path = out_dir.join("records.jsonl");
    let splits_path = out_dir.join("splits.json");
    require(&records_path, "ingest")?;
    require(&splits_path, "ingest")?;
    let features_path = out_dir.join("features.json");
    require(&features_path, "features")?;
    let transcripts_path = out_dir.join("transcripts.jsonl");
    require(&transcripts_path, "interpret")?;

    let records = corpus::read_records(&records_path)?;
    let splits: corpus::SplitSet = read_json(&splits_path)?;
    let features: BTreeMap<String, RecordFeatures> = read_json(&features_path)?;
    let transcripts: BTreeMap<String, cotsv::CotTranscript> =
        cotsv::read_transcripts(&transcripts_path)?
            .into_iter()
            .map(|t| (t.record_id.clone(), t))
            .collect();

    let augmented_path = out_dir.join("augmented.jsonl");
    let augmented: Vec<VulnRecord> = if config.augment.enable && augmented_path.exists() {
        corpus::read_records(&augmented_path)?
    } else {
        Vec::new()
    };

    let original_code: BTreeMap<&str, &str> =
        records.iter().map(|r| (r.record_id.as_str(), r.code.as_str())).collect();

    let dataset_dir = out_dir.join("dataset");
    fs::create_dir_all(&dataset_dir)?;
    let mut outputs = Vec::new();
    for (split_name, ids) in [
        ("train", &splits.train),
        ("validation", &splits.validation),
        ("test", &splits.test),
    ] {
        let subset: Vec<VulnRecord> =
            split_records(&records, ids).into_iter().cloned().collect();
        let mut counts = BuildCounts::default();
        let mut examples = instruct::build_dataset(&subset, &features, &transcripts, &mut counts);
        if split_name == "train" {
            // Augmented copies strengthen detection only; other tasks keep
            // original code.
            for copy in &augmented {
                if original_code.get(copy.record_id.as_str()) == Some(&copy.code.as_str()) {
                    counts.unchanged_augmented += 1;
                }
                examples.push(instruct::detection_example(copy));
                counts.detection += 1;
            }
        }
        let path = dataset_dir.join(format!("{split_name}.jsonl"));
        instruct::emit_dataset(&examples, &path, &counts, config.seeds.augment, config.augment.ratio)?;
        outputs.push(format!("dataset/{split_name}.jsonl"));
        if rendered {
            let rendered_path = dataset_dir.join(format!("{split_name}_rendered.jsonl"));
            instruct::emit_rendered(&examples, &rendered_path)?;
            outputs.push(format!("dataset/{split_name}_rendered.jsonl"));
        }
        log::info!("build-dataset: {split_name} has {} examples", examples.len());
    }

    record_stage(
        out_dir,
        config_text,
        "build-dataset",
        ManifestEntry {
            inputs: vec![
                "records.jsonl".into(),
                "splits.json".into(),
                "features.json".into(),
                "transcripts.jsonl".into(),
                "augmented.jsonl".into(),
            ],
            outputs,
            seeds: BTreeMap::from([("augment".into(), config.seeds.augment)]),
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct AttackReport {
    kind: AttackKind,
    attempted: usize,
    clean_correct: usize,
    successes: usize,
    queries: u64,
}

pub fn run_attack(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
    kind: AttackKind,
    client: &ModelClient,
) -> anyhow::Result<()> {
    let records_path = out_dir.join("records.jsonl");
    let splits_path = out_dir.join("splits.json");
    require(&records_path, "ingest")?;
    require(&splits_path, "ingest")?;
    let records = corpus::read_records(&records_path)?;
    let splits: corpus::SplitSet = read_json(&splits_path)?;

    let pool: Vec<String> =
        instruct::IdentifierPool::harvest(&records).identifiers().to_vec();
    let snippets = load_snippets(config)?;

    let attack_config = AttackConfig {
        kind,
        max_iterations: config.attack.max_iterations,
        candidates_per_iteration: config.attack.candidates_per_iteration,
        seed: config.seeds.attack,
        max_queries: config.attack.max_queries,
    };

    let mut targets = split_records(&records, &splits.test);
    targets.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let mut outcomes: Vec<AttackOutcome> = Vec::new();
    for record in targets {
        outcomes.push(attacks::run_attack(record, client, &attack_config, &pool, &snippets)?);
    }

    let dir = out_dir.join("attacks");
    fs::create_dir_all(&dir)?;
    let kind_tag = kind.to_string().to_lowercase();
    let mut lines = String::new();
    for outcome in &outcomes {
        lines.push_str(&serde_json::to_string(outcome)?);
        lines.push('\n');
    }
    let outcome_rel = format!("attacks/{kind_tag}.jsonl");
    fs::write(out_dir.join(&outcome_rel), lines)?;

    let report = AttackReport {
        kind,
        attempted: outcomes.len(),
        clean_correct: outcomes.iter().filter(|o| o.clean_correct).count(),
        successes: outcomes.iter().filter(|o| o.success).count(),
        queries: outcomes.iter().map(|o| o.queries_used).sum(),
    };
    let report_rel = format!("attacks/{kind_tag}_report.json");
    write_json_pretty(&out_dir.join(&report_rel), &report)?;

    record_stage(
        out_dir,
        config_text,
        &format!("attack-{kind_tag}"),
        ManifestEntry {
            inputs: vec!["records.jsonl".into(), "splits.json".into()],
            outputs: vec![outcome_rel, report_rel],
            seeds: BTreeMap::from([("attack".into(), config.seeds.attack)]),
        },
    )?;
    log::info!(
        "attack {}: {}/{} flipped, {} queries",
        kind,
        report.successes,
        report.attempted,
        report.queries
    );
    Ok(())
}

fn load_snippets(config: &PipelineConfig) -> anyhow::Result<Vec<String>> {
    let text = match &config.attack.snippet_pool {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("reading snippet pool {}", path.display()))?,
        None => include_str!("../../vulnforge/fixtures/snippet_pool.txt").to_string(),
    };
    let snippets: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if snippets.is_empty() {
        bail!("snippet pool is empty");
    }
    Ok(snippets)
}

pub fn run_evaluate(
    _config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
    split_name: &str,
    emit_density_csv: bool,
    client: &ModelClient,
) -> anyhow::Result<()> {
    let dataset_path = out_dir.join("dataset").join(format!("{split_name}.jsonl"));
    require(&dataset_path, "build-dataset")?;
    let examples = instruct::read_examples(&dataset_path)?;
    let detection: Vec<&InstructionExample> = examples
        .iter()
        .filter(|e| e.task == instruct::Task::Detection && !e.augmented)
        .collect();
    if detection.is_empty() {
        bail!("dataset split {split_name} carries no detection examples");
    }

    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut correct_probabilities = Vec::new();
    let mut rows: BTreeMap<String, RobustnessRow> = BTreeMap::new();
    for example in &detection {
        let truth: u8 = example.output.parse().context("detection output is 0 or 1")?;
        let prediction = client.classify(&example.input, &example.instruction)?;
        if prediction.label.as_u8() == Some(truth) {
            if let Some(p) = prediction.probability {
                correct_probabilities.push(p);
            }
        }
        rows.insert(
            example.record_id.clone(),
            RobustnessRow {
                record_id: example.record_id.clone(),
                truth,
                clean: prediction.label,
                attack_success: None,
            },
        );
        predictions.push(prediction.label);
        truths.push(truth);
    }

    let counts = eval::score(&predictions, &truths)?;
    let clean = eval::prf1(counts, split_name, Condition::Clean);
    let mut reports: Vec<EvalReport> = vec![clean];

    for (kind, condition) in [
        (AttackKind::Mhm, Condition::Mhm),
        (AttackKind::Wir, Condition::Wir),
        (AttackKind::Dci, Condition::Dci),
    ] {
        let path =
            out_dir.join("attacks").join(format!("{}.jsonl", kind.to_string().to_lowercase()));
        if !path.exists() {
            continue;
        }
        let mut attacked = rows.clone();
        for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
            let outcome: AttackOutcome = serde_json::from_str(line)?;
            if let Some(row) = attacked.get_mut(&outcome.record_id) {
                row.attack_success = Some(outcome.success);
            }
        }
        let rows_vec: Vec<RobustnessRow> = attacked.into_values().collect();
        reports.push(eval::robustness_report(split_name, condition, &rows_vec));
    }

    let eval_dir = out_dir.join("eval");
    fs::create_dir_all(&eval_dir)?;
    write_json_pretty(&eval_dir.join("report.json"), &reports)?;
    let table = eval::render_report_table(&reports);
    fs::write(eval_dir.join("report.txt"), &table)?;
    let mut outputs = vec!["eval/report.json".to_string(), "eval/report.txt".to_string()];
    if emit_density_csv {
        let hist = eval::density(&correct_probabilities, 20);
        fs::write(eval_dir.join("density.csv"), eval::density_csv(&hist))?;
        outputs.push("eval/density.csv".into());
    }

    record_stage(
        out_dir,
        config_text,
        "evaluate",
        ManifestEntry {
            inputs: vec![format!("dataset/{split_name}.jsonl"), "attacks/".into()],
            outputs,
            seeds: BTreeMap::new(),
        },
    )?;
    print!("{table}");
    Ok(())
}

pub fn run_review(
    config_text: &str,
    out_dir: &Path,
    apply: Option<&Path>,
) -> anyhow::Result<()> {
    let queue_path = out_dir.join("review_queue.json");
    let transcripts_path = out_dir.join("transcripts.jsonl");
    require(&queue_path, "interpret")?;
    require(&transcripts_path, "interpret")?;

    let Some(decisions_path) = apply else {
        let queue: Vec<ReviewItem> = read_json(&queue_path)?;
        if queue.is_empty() {
            println!("review queue is empty");
        } else {
            println!("{} transcript(s) awaiting review:", queue.len());
            for item in &queue {
                println!("  {}", item.record_id);
            }
            println!(
                "edit the decision fields in {} and rerun with --apply",
                queue_path.display()
            );
        }
        return Ok(());
    };

    let decisions: Vec<ReviewItem> = read_json(decisions_path)?;
    let mut transcripts = cotsv::read_transcripts(&transcripts_path)?;
    let applied = cotsv::apply_review(&mut transcripts, &decisions)?;
    let tmp = out_dir.join("transcripts.jsonl.tmp");
    {
        let mut buf = String::new();
        for t in &transcripts {
            buf.push_str(&serde_json::to_string(t)?);
            buf.push('\n');
        }
        fs::write(&tmp, buf)?;
    }
    fs::rename(&tmp, &transcripts_path)?;

    record_stage(
        out_dir,
        config_text,
        "review",
        ManifestEntry {
            inputs: vec![
                "review_queue.json".into(),
                manifest_input(out_dir, decisions_path),
            ],
            outputs: vec!["transcripts.jsonl".into()],
            seeds: BTreeMap::new(),
        },
    )?;
    println!("applied {applied} review decision(s)");
    Ok(())
}

const DEMO_CORPUS: &str =
    include_str!("../../vulnforge/fixtures/mini_corpus.jsonl");
const DEMO_SNIPPETS: &str =
    include_str!("../../vulnforge/fixtures/snippet_pool.txt");
const DEMO_MOCK: &str = include_str!("../assets/demo_mock.json");
const DEMO_CONFIG: &str = include_str!("../assets/demo_config.toml");

/// Materialize the bundled inputs and run every stage offline against the
/// scripted endpoint.
pub fn run_demo(out_dir: &Path) -> anyhow::Result<()> {
    let inputs = out_dir.join("inputs");
    fs::create_dir_all(&inputs)?;
    fs::write(inputs.join("mini_corpus.jsonl"), DEMO_CORPUS)?;
    fs::write(inputs.join("snippet_pool.txt"), DEMO_SNIPPETS)?;
    fs::write(inputs.join("demo_mock.json"), DEMO_MOCK)?;
    let config_path = out_dir.join("pipeline.toml");
    fs::write(&config_path, DEMO_CONFIG)?;

    let config = PipelineConfig::load(&config_path)?;
    let config_text = DEMO_CONFIG;
    let mock_path = inputs.join("demo_mock.json");

    run_ingest(&config, config_text, out_dir)?;
    run_features(&config, config_text, out_dir, true)?;
    let client = make_client(&config.endpoint, Some(&mock_path))?;
    run_interpret(&config, config_text, out_dir, &client)?;
    run_augment(&config, config_text, out_dir)?;
    run_build_dataset(&config, config_text, out_dir, true)?;
    for kind in [AttackKind::Wir, AttackKind::Mhm, AttackKind::Dci] {
        run_attack(&config, config_text, out_dir, kind, &client)?;
    }
    run_evaluate(&config, config_text, out_dir, "test", true, &client)?;
    println!("demo artifacts written under {}", out_dir.display());
    Ok(())
}
