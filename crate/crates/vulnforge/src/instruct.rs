//! Instruction dataset assembly: detection, localization, and interpretation
//! examples rendered Alpaca-style, with identifier-substitution augmentation.
//!
//! Detection is label passthrough, localization reproduces the vulnerable
//! lines as "line_no: text", and interpretation carries the accepted
//! self-verified explanation. Augmentation renames a tenth of a function's
//! declared identifiers to names harvested elsewhere in the corpus, which
//! keeps semantics while diluting per-project naming habits.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackError};
use crate::corpus::VulnRecord;
use crate::cotsv::{CotStatus, CotTranscript, RecordFeatures};
use crate::lexer::{self, TokKind};

pub const DETECTION_INSTRUCTION: &str =
    "Detect whether the following code contains vulnerabilities.";
pub const LOCALIZATION_INSTRUCTION: &str =
    "Identify any security vulnerabilities in the following code, and specify the lines where they occur.";
pub const INTERPRETATION_INSTRUCTION: &str =
    "Analyze the following code from the perspective of whether it contains vulnerabilities.";

const PREAMBLE: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.";
const PREAMBLE_NO_INPUT: &str = "Below is an instruction that describes a task. Write a response that appropriately completes the request.";

#[derive(Debug, thiserror::Error)]
pub enum InstructError {
    #[error("identifier pool has no collision-free name left for record {record_id}")]
    PoolExhausted { record_id: String },
    #[error("augmentation ratio {0} is not in [0, 1]")]
    BadRatio(f64),
    #[error(transparent)]
    Rename(#[from] AttackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Localization,
    Interpretation,
}

impl Task {
    pub fn instruction(self) -> &'static str {
        match self {
            Task::Detection => DETECTION_INSTRUCTION,
            Task::Localization => LOCALIZATION_INSTRUCTION,
            Task::Interpretation => INTERPRETATION_INSTRUCTION,
        }
    }
}

/// One training example. `record_id` points back at the source record, so an
/// augmented copy shares its source's id and differs in the flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub task: Task,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub record_id: String,
    pub augmented: bool,
}

/// Replacement names harvested from every record in the corpus. Keywords and
/// lexically invalid tokens never enter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifierPool {
    identifiers: Vec<String>,
    /// identifier -> number of records it occurs in.
    provenance: BTreeMap<String, usize>,
}

impl IdentifierPool {
    pub fn harvest(records: &[VulnRecord]) -> Self {
        let mut provenance: BTreeMap<String, usize> = BTreeMap::new();
        for record in records {
            let names: BTreeSet<String> = lexer::tokenize(&record.code)
                .into_iter()
                .filter(|t| {
                    t.kind == TokKind::Ident
                        && lexer::is_valid_identifier(&t.text)
                        && !lexer::is_reserved(&t.text, &[])
                })
                .map(|t| t.text)
                .collect();
            for name in names {
                *provenance.entry(name).or_insert(0) += 1;
            }
        }
        let identifiers = provenance.keys().cloned().collect();
        IdentifierPool { identifiers, provenance }
    }

    pub fn from_names(names: &[&str]) -> Self {
        let mut provenance = BTreeMap::new();
        for name in names {
            if lexer::is_valid_identifier(name) && !lexer::is_reserved(name, &[]) {
                provenance.entry(name.to_string()).or_insert(1);
            }
        }
        IdentifierPool { identifiers: provenance.keys().cloned().collect(), provenance }
    }

    pub fn identifiers(&self) -> &[String] {
        &self.identifiers
    }

    pub fn occurrences(&self, name: &str) -> usize {
        self.provenance.get(name).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.identifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identifiers.is_empty()
    }
}

/// Per-task tallies for one dataset build, including the records a task
/// skipped for missing prerequisites.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildCounts {
    pub detection: usize,
    pub localization: usize,
    pub interpretation: usize,
    /// Vulnerable records whose patch yielded no usable line rendering.
    pub skipped_localization: usize,
    /// Records whose transcript exists but was not accepted.
    pub skipped_interpretation: usize,
    /// Augmented copies whose source had nothing to rename.
    pub unchanged_augmented: usize,
}

pub fn detection_example(record: &VulnRecord) -> InstructionExample {
    InstructionExample {
        task: Task::Detection,
        instruction: DETECTION_INSTRUCTION.to_string(),
        input: record.code.clone(),
        output: record.label.to_string(),
        record_id: record.record_id.clone(),
        augmented: record.augmented,
    }
}

/// Re-render "line_no: text" from the record's own code, ascending and
/// de-duplicated, so the output always matches the example's input even
/// after renaming. Lines that no longer resolve are dropped.
fn localization_output(record: &VulnRecord, vuln_lines: &str) -> Option<String> {
    let code_lines: Vec<&str> = record.code.lines().collect();
    let mut numbers = BTreeSet::new();
    for line in vuln_lines.lines() {
        let (no, _) = line.split_once(':')?;
        let n: usize = no.trim().parse().ok()?;
        if n >= 1 && n <= code_lines.len() {
            numbers.insert(n);
        }
    }
    if numbers.is_empty() {
        return None;
    }
    Some(
        numbers
            .iter()
            .map(|&n| format!("{n}: {}", code_lines[n - 1].trim()))
            .collect::<Vec<_>>()
            .join("\n"),
    )
}

/// Build every example the record's prerequisites allow. Detection always;
/// localization needs a vulnerable label plus rendered lines; interpretation
/// needs an accepted transcript. Missing prerequisites skip the task and
/// bump the matching count.
pub fn build_examples(
    record: &VulnRecord,
    features: Option<&RecordFeatures>,
    transcript: Option<&CotTranscript>,
    counts: &mut BuildCounts,
) -> Vec<InstructionExample> {
    let mut examples = vec![detection_example(record)];
    counts.detection += 1;

    if record.label == 1 {
        let rendered = features
            .and_then(|f| f.vuln_lines.as_deref())
            .and_then(|lines| localization_output(record, lines));
        match rendered {
            Some(output) => {
                examples.push(InstructionExample {
                    task: Task::Localization,
                    instruction: LOCALIZATION_INSTRUCTION.to_string(),
                    input: record.code.clone(),
                    output,
                    record_id: record.record_id.clone(),
                    augmented: record.augmented,
                });
                counts.localization += 1;
            }
            None => counts.skipped_localization += 1,
        }
    }

    if let Some(transcript) = transcript {
        if transcript.status == CotStatus::Accepted
            && !transcript.final_interpretation.is_empty()
        {
            examples.push(InstructionExample {
                task: Task::Interpretation,
                instruction: INTERPRETATION_INSTRUCTION.to_string(),
                input: record.code.clone(),
                output: transcript.final_interpretation.clone(),
                record_id: record.record_id.clone(),
                augmented: record.augmented,
            });
            counts.interpretation += 1;
        } else {
            counts.skipped_interpretation += 1;
        }
    }

    examples
}

/// A renamed copy of a record. The copy keeps its source's `record_id` and
/// is flagged `augmented`; `renames` is empty when nothing was renameable.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRecord {
    pub record: VulnRecord,
    pub renames: BTreeMap<String, String>,
}

/// Rename ceil(ratio * D) of the record's D declared identifiers, each to a
/// seeded pool name absent from the code. Labels and metadata carry over.
pub fn augment_identifiers(
    record: &VulnRecord,
    ratio: f64,
    pool: &IdentifierPool,
    seed: u64,
) -> Result<AugmentedRecord, InstructError> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(InstructError::BadRatio(ratio));
    }
    let mut augmented = record.clone();
    augmented.augmented = true;
    let mut renames = BTreeMap::new();

    let identifiers = attacks::extract_identifiers(&record.code);
    let n = ((ratio * identifiers.len() as f64).ceil() as usize).min(identifiers.len());
    if n == 0 {
        return Ok(AugmentedRecord { record: augmented, renames });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<String> =
        identifiers.choose_multiple(&mut rng, n).cloned().collect();
    let mut code = record.code.clone();
    for old in chosen {
        let candidates = attacks::usable_candidates(pool.identifiers(), &code, &old);
        if candidates.is_empty() {
            return Err(InstructError::PoolExhausted { record_id: record.record_id.clone() });
        }
        let new = candidates[rng.gen_range(0..candidates.len())].to_string();
        code = attacks::rename(&code, &old, &new)?;
        renames.insert(old, new);
    }
    augmented.code = code;
    Ok(AugmentedRecord { record: augmented, renames })
}

/// Canonical Alpaca-style rendering; the input section disappears when the
/// input is empty.
pub fn render_instruction(example: &InstructionExample) -> String {
    if example.input.is_empty() {
        format!(
            "{PREAMBLE_NO_INPUT}\n\n### Instruction:\n{}\n\n### Response:\n{}",
            example.instruction, example.output
        )
    } else {
        format!(
            "{PREAMBLE}\n\n### Instruction:\n{}\n\n### Input:\n{}\n\n### Response:\n{}",
            example.instruction, example.input, example.output
        )
    }
}

fn sort_examples(examples: &mut [InstructionExample]) {
    examples.sort_by(|a, b| {
        (&a.record_id, a.task, a.augmented).cmp(&(&b.record_id, b.task, b.augmented))
    });
}

/// Build the full example list for a corpus slice, ordered by
/// (record_id, task) with augmented copies after their originals.
pub fn build_dataset(
    records: &[VulnRecord],
    features: &BTreeMap<String, RecordFeatures>,
    transcripts: &BTreeMap<String, CotTranscript>,
    counts: &mut BuildCounts,
) -> Vec<InstructionExample> {
    let mut examples = Vec::new();
    for record in records {
        examples.extend(build_examples(
            record,
            features.get(&record.record_id),
            transcripts.get(&record.record_id),
            counts,
        ));
    }
    sort_examples(&mut examples);
    examples
}

/// Fine-tuning settings this dataset shape is sized for (512-token prompts,
/// LoRA adapters). Recorded in the sidecar as documentation, not consumed
/// anywhere in the pipeline.
fn reference_hyperparameters() -> serde_json::Value {
    serde_json::json!({
        "adapter": "LoRA",
        "lora_rank": 16,
        "lora_alpha": 32,
        "target_modules": {
            "llama_family": ["q_proj", "v_proj", "k_proj", "o_proj"],
            "starcoder": ["c_proj", "c_attn", "q_attn"],
        },
        "learning_rate": { "llama_family": 1e-4, "starcoder": 2e-5 },
        "max_length": 512,
        "batch_size": { "llama_family": 32, "starcoder": 16 },
        "epochs": 3,
        "quantization": "8-bit",
    })
}

#[derive(Debug, Clone, Serialize)]
struct DatasetSidecar<'a> {
    seed: u64,
    augment_ratio: f64,
    total_examples: usize,
    counts: &'a BuildCounts,
    augmented_examples: usize,
    reference_hyperparameters: serde_json::Value,
}

/// Write examples as JSON-lines in (record_id, task) order plus a
/// `.meta.json` sidecar with seeds, tallies, and reference hyperparameters.
/// Output is byte-stable for a fixed input set.
pub fn emit_dataset(
    examples: &[InstructionExample],
    path: &Path,
    counts: &BuildCounts,
    seed: u64,
    augment_ratio: f64,
) -> Result<(), InstructError> {
    let mut ordered = examples.to_vec();
    sort_examples(&mut ordered);
    let mut out = Vec::new();
    for example in &ordered {
        serde_json::to_writer(&mut out, example)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;

    let sidecar = DatasetSidecar {
        seed,
        augment_ratio,
        total_examples: ordered.len(),
        counts,
        augmented_examples: ordered.iter().filter(|e| e.augmented).count(),
        reference_hyperparameters: reference_hyperparameters(),
    };
    let meta_path = path.with_extension("meta.json");
    let mut meta = serde_json::to_vec_pretty(&sidecar)?;
    meta.push(b'\n');
    write_atomic(&meta_path, &meta)?;
    Ok(())
}

/// Pre-rendered prompt form: one JSON line per example with the Alpaca text
/// already assembled.
pub fn emit_rendered(
    examples: &[InstructionExample],
    path: &Path,
) -> Result<(), InstructError> {
    let mut ordered = examples.to_vec();
    sort_examples(&mut ordered);
    let mut out = Vec::new();
    for example in &ordered {
        let row = serde_json::json!({
            "record_id": example.record_id,
            "task": example.task,
            "augmented": example.augmented,
            "text": render_instruction(example),
        });
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<InstructionExample>, InstructError> {
    let text = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        examples.push(serde_json::from_str(line)?);
    }
    Ok(examples)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
