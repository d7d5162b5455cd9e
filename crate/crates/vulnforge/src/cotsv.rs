//! Five-step vulnerability interpretation with self-verification.
//!
//! Step 1 asks the model, in a vulnerability-analyst role, for a verdict and
//! explanation. For code known to be vulnerable, steps 2 to 4 then confront
//! the model with one extracted feature each (CVE description, vulnerability
//! lines, dependency context) and ask it to double-check itself, and step 5
//! synthesizes a final interpretation that must reference the lines and
//! context. Non-vulnerable code stops after step 1; its explanation of why
//! nothing is wrong becomes the interpretation. A transcript whose final
//! verdict disagrees with ground truth is queued for manual review and never
//! reaches the interpretation task unreviewed.
//!
//! The whole exchange runs over [`crate::client::ModelClient`], so transcripts
//! replay from the request cache and an interrupted batch resumes without
//! repeating network calls.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{ChatMessage, ClientError, ModelClient};
use crate::corpus::VulnRecord;
use crate::eval::{parse_label, ParsedLabel};
use crate::patch;
use crate::pdg;

#[derive(Debug, thiserror::Error)]
pub enum CotError {
    #[error("template {template} is missing required text {missing:?}")]
    BadTemplate { template: &'static str, missing: String },
    #[error("record {record_id} has no code")]
    EmptyCode { record_id: String },
    #[error("record {record_id} is not vulnerable; verification steps need label 1")]
    NotVulnerable { record_id: String },
    #[error("record {record_id} has no features to verify")]
    NoFeatures { record_id: String },
    #[error("step {step_no} prompt cannot fit the context budget even after truncation")]
    ContextOverflow { step_no: u8 },
    #[error("request budget exhausted")]
    BudgetExhausted,
    #[error("review decision references unknown record {record_id}")]
    UnknownRecord { record_id: String },
    #[error("review decision {decision:?} is not one of pending/accept/reject")]
    BadDecision { decision: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("transcript line {line_no} is malformed: {message}")]
    BadTranscriptLine { line_no: usize, message: String },
}

/// The three verifiable features, in their fixed verification order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    CveDescription,
    VulnLines,
    VulnContext,
}

impl FeatureKind {
    /// Human-readable label substituted into the verification template.
    pub fn label(self) -> &'static str {
        match self {
            FeatureKind::CveDescription => "CVE description",
            FeatureKind::VulnLines => "Vulnerability lines",
            FeatureKind::VulnContext => "Vulnerability context",
        }
    }

    /// Canonical step number; kept stable even when earlier features are
    /// missing so transcripts stay comparable across records.
    pub fn step_no(self) -> u8 {
        match self {
            FeatureKind::CveDescription => 2,
            FeatureKind::VulnLines => 3,
            FeatureKind::VulnContext => 4,
        }
    }
}

/// Extracted evidence for one record, already rendered for prompting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFeatures {
    pub cve_description: Option<String>,
    /// "line_no: text" lines from the patch's deletions.
    pub vuln_lines: Option<String>,
    /// "line_no: text" dependency lines from the k-hop graph neighborhood.
    pub context: Option<String>,
}

impl RecordFeatures {
    pub fn is_empty(&self) -> bool {
        self.cve_description.is_none() && self.vuln_lines.is_none() && self.context.is_none()
    }

    fn get(&self, kind: FeatureKind) -> Option<&str> {
        match kind {
            FeatureKind::CveDescription => self.cve_description.as_deref(),
            FeatureKind::VulnLines => self.vuln_lines.as_deref(),
            FeatureKind::VulnContext => self.context.as_deref(),
        }
    }
}

pub const DOUBLE_CHECK_INSTRUCTION: &str =
    "Please double-check the answer and analyze its correctness.";

/// Prompt texts for the five steps. Defaults ship as editable text assets;
/// alternates can be loaded from disk and validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub step1_role_prompt: String,
    pub verification_prompt: String,
    pub synthesis_prompt: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            step1_role_prompt: include_str!("../assets/templates/step1.txt").to_string(),
            verification_prompt: include_str!("../assets/templates/verification.txt").to_string(),
            synthesis_prompt: include_str!("../assets/templates/synthesis.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn from_dir(dir: &Path) -> Result<Self, CotError> {
        let templates = PromptTemplates {
            step1_role_prompt: std::fs::read_to_string(dir.join("step1.txt"))?,
            verification_prompt: std::fs::read_to_string(dir.join("verification.txt"))?,
            synthesis_prompt: std::fs::read_to_string(dir.join("synthesis.txt"))?,
        };
        templates.validate()?;
        Ok(templates)
    }

    /// Placeholder and wording requirements each template must satisfy.
    pub fn validate(&self) -> Result<(), CotError> {
        let need = |template: &'static str, text: &str, token: &str| -> Result<(), CotError> {
            if text.contains(token) {
                Ok(())
            } else {
                Err(CotError::BadTemplate { template, missing: token.to_string() })
            }
        };
        need("step1", &self.step1_role_prompt, "[Code]")?;
        need("verification", &self.verification_prompt, "[Feature label]")?;
        need("verification", &self.verification_prompt, "[Feature]")?;
        need("verification", &self.verification_prompt, DOUBLE_CHECK_INSTRUCTION)?;
        need("synthesis", &self.synthesis_prompt, "[Vulnerability lines]")?;
        need("synthesis", &self.synthesis_prompt, "[Vulnerability context]")?;
        Ok(())
    }

    pub fn render_step1(&self, code: &str) -> String {
        self.step1_role_prompt.replace("[Code]", code)
    }

    pub fn render_verification(&self, kind: FeatureKind, feature: &str) -> String {
        self.verification_prompt
            .replace("[Feature label]", kind.label())
            .replace("[Feature]", feature)
    }

    pub fn render_synthesis(&self, vuln_lines: &str, context: &str) -> String {
        self.synthesis_prompt
            .replace("[Vulnerability lines]", vuln_lines)
            .replace("[Vulnerability context]", context)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotStep {
    pub step_no: u8,
    pub prompt: String,
    pub response: String,
    /// Parsed verdict, recorded for step 1 only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step1_verdict: Option<u8>,
    /// True when the code or a feature was cut to fit the context budget.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotStatus {
    Accepted,
    NeedsReview,
    Rejected,
}

/// Character-approximated usage for one transcript or one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub requests: u64,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
}

impl TokenUsage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.response_tokens
    }

    fn add(&mut self, other: TokenUsage) {
        self.requests += other.requests;
        self.prompt_tokens += other.prompt_tokens;
        self.response_tokens += other.response_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotTranscript {
    pub record_id: String,
    pub label: u8,
    pub steps: Vec<CotStep>,
    pub final_interpretation: String,
    pub final_judgment_correct: bool,
    pub status: CotStatus,
    pub token_usage: TokenUsage,
}

impl CotTranscript {
    /// Structural invariants: step numbers ascend starting at 1, vulnerable
    /// records end in synthesis, non-vulnerable records stop after step 1,
    /// and an incorrect final judgment forces review.
    pub fn check_shape(&self) -> Result<(), String> {
        if self.steps.is_empty() || self.steps[0].step_no != 1 {
            return Err("transcript must start with step 1".into());
        }
        for pair in self.steps.windows(2) {
            if pair[1].step_no <= pair[0].step_no {
                return Err("step numbers must strictly ascend".into());
            }
        }
        if self.label == 1 {
            if self.steps.last().unwrap().step_no != 5 {
                return Err("vulnerable transcript must end with synthesis (step 5)".into());
            }
        } else if self.steps.len() != 1 {
            return Err("non-vulnerable transcript must have exactly step 1".into());
        }
        if !self.final_judgment_correct && self.status == CotStatus::Accepted {
            return Err("incorrect final judgment cannot be accepted".into());
        }
        Ok(())
    }
}

/// Knobs for one interpretation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotOptions {
    /// Lowercased substrings that mark a response as a refusal.
    pub refusal_patterns: Vec<String>,
    /// Hop count for the dependency context feature.
    pub context_hops: usize,
}

impl Default for CotOptions {
    fn default() -> Self {
        CotOptions {
            refusal_patterns: vec![
                "i cannot assist".into(),
                "i can't assist".into(),
                "i am unable to".into(),
                "i'm unable to".into(),
                "as an ai".into(),
                "i cannot help with".into(),
            ],
            context_hops: 1,
        }
    }
}

fn is_refusal(text: &str, options: &CotOptions) -> bool {
    let lower = text.to_lowercase();
    options.refusal_patterns.iter().any(|p| lower.contains(p.as_str()))
}

/// Spending cap for a batch. `None` fields are unlimited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotBudget {
    pub max_requests: Option<u64>,
    pub max_tokens: Option<u64>,
}

impl CotBudget {
    pub fn unlimited() -> Self {
        CotBudget::default()
    }

    pub fn requests(n: u64) -> Self {
        CotBudget { max_requests: Some(n), max_tokens: None }
    }
}

/// Tracks spend against a budget across one batch. Cached replies are
/// charged like fresh ones so a rerun walks the same schedule.
pub struct UsageMeter<'a> {
    budget: &'a CotBudget,
    used: TokenUsage,
}

impl<'a> UsageMeter<'a> {
    pub fn new(budget: &'a CotBudget) -> Self {
        UsageMeter { budget, used: TokenUsage::default() }
    }

    pub fn usage(&self) -> TokenUsage {
        self.used
    }

    /// Refuses the next request if it would pass a cap.
    fn precheck(&self, prompt_tokens: u64) -> Result<(), CotError> {
        if let Some(max) = self.budget.max_requests {
            if self.used.requests + 1 > max {
                return Err(CotError::BudgetExhausted);
            }
        }
        if let Some(max) = self.budget.max_tokens {
            if self.used.prompt_tokens + self.used.response_tokens + prompt_tokens > max {
                return Err(CotError::BudgetExhausted);
            }
        }
        Ok(())
    }

    fn charge(&mut self, prompt_tokens: u64, response_tokens: u64) {
        self.used.requests += 1;
        self.used.prompt_tokens += prompt_tokens;
        self.used.response_tokens += response_tokens;
    }
}

/// Truncate to at most `max_chars` characters, cutting from the tail.
fn fit_tail(text: &str, max_chars: usize) -> (String, bool) {
    if text.chars().count() <= max_chars {
        return (text.to_string(), false);
    }
    (text.chars().take(max_chars).collect(), true)
}

/// One model exchange: budget precheck, completion, usage charge.
fn exchange(
    client: &ModelClient,
    messages: &[ChatMessage],
    meter: &mut UsageMeter,
    local: &mut TokenUsage,
) -> Result<String, CotError> {
    let prompt_tokens = ModelClient::approx_tokens(messages) as u64;
    meter.precheck(prompt_tokens)?;
    let response = client.complete(messages)?;
    let response_tokens = response.chars().count().div_ceil(4) as u64;
    meter.charge(prompt_tokens, response_tokens);
    local.requests += 1;
    local.prompt_tokens += prompt_tokens;
    local.response_tokens += response_tokens;
    Ok(response)
}

/// Remaining character room in the budget after the running conversation.
fn remaining_chars(client: &ModelClient, messages: &[ChatMessage], overhead: &str) -> usize {
    let budget_chars = client.config().context_budget * 4;
    let used: usize = messages.iter().map(|m| m.content.chars().count()).sum();
    budget_chars.saturating_sub(used + overhead.chars().count())
}

/// Strip a leading "0:" / "1:" style verdict so stored interpretations read
/// as prose.
pub fn strip_label_prefix(text: &str) -> &str {
    let trimmed = text.trim_start();
    let Some(rest) = trimmed.strip_prefix('0').or_else(|| trimmed.strip_prefix('1')) else {
        return text.trim();
    };
    let rest = rest.trim_start();
    for sep in [':', '.', '-', ')'] {
        if let Some(body) = rest.strip_prefix(sep) {
            return body.trim();
        }
    }
    text.trim()
}

/// Verdict of a synthesized interpretation. Synthesis output is prose and
/// rarely repeats a bare label, so after the standard parse an affirmative
/// description of a vulnerability counts as 1 and a negated one as 0.
pub fn synthesis_verdict(text: &str) -> ParsedLabel {
    match parse_label(text) {
        ParsedLabel::Unparsed => {
            let lower = text.to_lowercase();
            if lower.contains("not vulnerable")
                || lower.contains("no vulnerab")
                || lower.contains("absence of vulnerab")
                || lower.contains("free of vulnerab")
            {
                ParsedLabel::Zero
            } else if lower.contains("vulnerab") {
                ParsedLabel::One
            } else {
                ParsedLabel::Unparsed
            }
        }
        verdict => verdict,
    }
}

/// Step 1: role-framed verdict and explanation.
///
/// A ground-truth mismatch is recorded, not fatal; later steps correct it.
pub fn run_step1(
    record: &VulnRecord,
    client: &ModelClient,
    templates: &PromptTemplates,
) -> Result<(ParsedLabel, String), CotError> {
    if record.code.trim().is_empty() {
        return Err(CotError::EmptyCode { record_id: record.record_id.clone() });
    }
    let budget = CotBudget::unlimited();
    let mut meter = UsageMeter::new(&budget);
    let mut usage = TokenUsage::default();
    let mut messages = Vec::new();
    let step = step1_exchange(record, client, templates, &mut messages, &mut meter, &mut usage)?;
    let verdict = parse_label(&step.response);
    Ok((verdict, step.response))
}

fn step1_exchange(
    record: &VulnRecord,
    client: &ModelClient,
    templates: &PromptTemplates,
    messages: &mut Vec<ChatMessage>,
    meter: &mut UsageMeter,
    usage: &mut TokenUsage,
) -> Result<CotStep, CotError> {
    let overhead = templates.render_step1("");
    let room = remaining_chars(client, messages, &overhead);
    if room == 0 {
        return Err(CotError::ContextOverflow { step_no: 1 });
    }
    let (code, truncated) = fit_tail(&record.code, room);
    if truncated {
        log::warn!("record {}: code truncated to fit the context budget", record.record_id);
    }
    let prompt = templates.render_step1(&code);
    messages.push(ChatMessage::user(prompt.clone()));
    let response = exchange(client, messages, meter, usage)?;
    messages.push(ChatMessage::assistant(response.clone()));
    let verdict = parse_label(&response);
    Ok(CotStep { step_no: 1, prompt, response, step1_verdict: verdict.as_u8(), truncated })
}

/// Steps 2 to 4: one verification turn per available feature, in the fixed
/// order CVE description, vulnerability lines, vulnerability context. The
/// feature text is injected verbatim unless the budget forces truncation.
pub fn run_verification_steps(
    record: &VulnRecord,
    features: &RecordFeatures,
    client: &ModelClient,
    transcript: &mut CotTranscript,
) -> Result<(), CotError> {
    let templates = PromptTemplates::default();
    let budget = CotBudget::unlimited();
    let mut meter = UsageMeter::new(&budget);
    let mut usage = TokenUsage::default();
    let mut messages = replay_messages(transcript);
    verification_exchanges(
        record,
        features,
        client,
        &templates,
        transcript,
        &mut messages,
        &mut meter,
        &mut usage,
    )?;
    transcript.token_usage.add(usage);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn verification_exchanges(
    record: &VulnRecord,
    features: &RecordFeatures,
    client: &ModelClient,
    templates: &PromptTemplates,
    transcript: &mut CotTranscript,
    messages: &mut Vec<ChatMessage>,
    meter: &mut UsageMeter,
    usage: &mut TokenUsage,
) -> Result<(), CotError> {
    if record.label != 1 {
        return Err(CotError::NotVulnerable { record_id: record.record_id.clone() });
    }
    if features.is_empty() {
        return Err(CotError::NoFeatures { record_id: record.record_id.clone() });
    }
    for kind in [FeatureKind::CveDescription, FeatureKind::VulnLines, FeatureKind::VulnContext] {
        let Some(feature) = features.get(kind) else { continue };
        let overhead = templates.render_verification(kind, "");
        let room = remaining_chars(client, messages, &overhead);
        if room == 0 {
            return Err(CotError::ContextOverflow { step_no: kind.step_no() });
        }
        // Features are the verification signal: only the budget itself may
        // cut them, and the cut is flagged on the step.
        let (text, truncated) = fit_tail(feature, room);
        if truncated {
            log::warn!(
                "record {}: {} truncated to fit the context budget",
                record.record_id,
                kind.label()
            );
        }
        let prompt = templates.render_verification(kind, &text);
        messages.push(ChatMessage::user(prompt.clone()));
        let response = exchange(client, messages, meter, usage)?;
        messages.push(ChatMessage::assistant(response.clone()));
        transcript.steps.push(CotStep {
            step_no: kind.step_no(),
            prompt,
            response,
            step1_verdict: None,
            truncated,
        });
    }
    Ok(())
}

/// Step 5: synthesis referencing the vulnerability lines and context. Sets
/// the final interpretation, re-judges it against ground truth, and fixes
/// the transcript status.
pub fn run_synthesis(
    record: &VulnRecord,
    transcript: &mut CotTranscript,
    client: &ModelClient,
) -> Result<(), CotError> {
    let templates = PromptTemplates::default();
    let budget = CotBudget::unlimited();
    let mut meter = UsageMeter::new(&budget);
    let mut usage = TokenUsage::default();
    let mut messages = replay_messages(transcript);
    let features = features_from_transcript(transcript);
    synthesis_exchange(
        record,
        &features,
        client,
        &templates,
        transcript,
        &mut messages,
        &mut meter,
        &mut usage,
    )?;
    transcript.token_usage.add(usage);
    Ok(())
}

/// Recover injected feature texts from persisted verification prompts, for
/// resuming a transcript without re-extracting features.
fn features_from_transcript(transcript: &CotTranscript) -> RecordFeatures {
    let templates = PromptTemplates::default();
    let mut features = RecordFeatures::default();
    for step in &transcript.steps {
        let kind = match step.step_no {
            2 => FeatureKind::CveDescription,
            3 => FeatureKind::VulnLines,
            4 => FeatureKind::VulnContext,
            _ => continue,
        };
        let shell = templates.render_verification(kind, "\u{0}");
        let (prefix, suffix) = match shell.split_once('\u{0}') {
            Some(parts) => parts,
            None => continue,
        };
        let text = step
            .prompt
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(suffix))
            .unwrap_or_default();
        match kind {
            FeatureKind::CveDescription => features.cve_description = Some(text.to_string()),
            FeatureKind::VulnLines => features.vuln_lines = Some(text.to_string()),
            FeatureKind::VulnContext => features.context = Some(text.to_string()),
        }
    }
    features
}

#[allow(clippy::too_many_arguments)]
fn synthesis_exchange(
    record: &VulnRecord,
    features: &RecordFeatures,
    client: &ModelClient,
    templates: &PromptTemplates,
    transcript: &mut CotTranscript,
    messages: &mut Vec<ChatMessage>,
    meter: &mut UsageMeter,
    usage: &mut TokenUsage,
) -> Result<(), CotError> {
    let vuln_lines = features.vuln_lines.as_deref().unwrap_or("(not available)");
    let context = features.context.as_deref().unwrap_or("(not available)");
    let overhead = templates.render_synthesis("", "");
    let room = remaining_chars(client, messages, &overhead);
    if room == 0 {
        return Err(CotError::ContextOverflow { step_no: 5 });
    }
    // Lines outrank context when the budget cannot carry both whole.
    let (context_text, cut_ctx) = fit_tail(context, room.saturating_sub(vuln_lines.len()).max(1));
    let (lines_text, cut_lines) = fit_tail(vuln_lines, room.saturating_sub(context_text.len()));
    let truncated = cut_ctx || cut_lines;
    let prompt = templates.render_synthesis(&lines_text, &context_text);
    messages.push(ChatMessage::user(prompt.clone()));
    let response = exchange(client, messages, meter, usage)?;
    messages.push(ChatMessage::assistant(response.clone()));
    transcript.steps.push(CotStep {
        step_no: 5,
        prompt,
        response: response.clone(),
        step1_verdict: None,
        truncated,
    });
    transcript.final_interpretation = strip_label_prefix(&response).to_string();
    let verdict = synthesis_verdict(&response);
    transcript.final_judgment_correct = verdict.as_u8() == Some(record.label);
    transcript.status = if transcript.final_judgment_correct {
        CotStatus::Accepted
    } else {
        CotStatus::NeedsReview
    };
    Ok(())
}

fn replay_messages(transcript: &CotTranscript) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(transcript.steps.len() * 2);
    for step in &transcript.steps {
        messages.push(ChatMessage::user(step.prompt.clone()));
        messages.push(ChatMessage::assistant(step.response.clone()));
    }
    messages
}

/// Outcome of processing one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RecordOutcome {
    Completed(Box<CotTranscript>),
    Skipped { record_id: String, reason: String },
}

/// Run the full protocol for one record: step 1 alone for non-vulnerable
/// code, all five steps for vulnerable code with features.
pub fn run_record(
    record: &VulnRecord,
    features: &RecordFeatures,
    client: &ModelClient,
    templates: &PromptTemplates,
    options: &CotOptions,
    meter: &mut UsageMeter,
) -> Result<RecordOutcome, CotError> {
    if record.code.trim().is_empty() {
        return Ok(RecordOutcome::Skipped {
            record_id: record.record_id.clone(),
            reason: "empty code".into(),
        });
    }
    let mut usage = TokenUsage::default();
    let mut messages = Vec::new();
    let mut transcript = CotTranscript {
        record_id: record.record_id.clone(),
        label: record.label,
        steps: Vec::new(),
        final_interpretation: String::new(),
        final_judgment_correct: false,
        status: CotStatus::NeedsReview,
        token_usage: TokenUsage::default(),
    };

    let step1 = step1_exchange(record, client, templates, &mut messages, meter, &mut usage)?;
    if is_refusal(&step1.response, options) {
        return Ok(RecordOutcome::Skipped {
            record_id: record.record_id.clone(),
            reason: format!("refusal at step 1: {}", first_line(&step1.response)),
        });
    }
    let step1_verdict = parse_label(&step1.response);
    let step1_response = step1.response.clone();
    transcript.steps.push(step1);

    if record.label == 0 {
        // The explanation of why nothing is wrong is the interpretation.
        transcript.final_interpretation = strip_label_prefix(&step1_response).to_string();
        transcript.final_judgment_correct = step1_verdict == ParsedLabel::Zero;
        transcript.status = if transcript.final_judgment_correct {
            CotStatus::Accepted
        } else {
            CotStatus::NeedsReview
        };
        transcript.token_usage = usage;
        return Ok(RecordOutcome::Completed(Box::new(transcript)));
    }

    if step1_verdict != ParsedLabel::One {
        log::info!(
            "record {}: step 1 verdict disagrees with ground truth; verification continues",
            record.record_id
        );
    }
    verification_exchanges(
        record,
        features,
        client,
        templates,
        &mut transcript,
        &mut messages,
        meter,
        &mut usage,
    )?;
    if let Some(last) = transcript.steps.last() {
        if is_refusal(&last.response, options) {
            return Ok(RecordOutcome::Skipped {
                record_id: record.record_id.clone(),
                reason: format!("refusal at step {}: {}", last.step_no, first_line(&last.response)),
            });
        }
    }
    synthesis_exchange(
        record,
        features,
        client,
        templates,
        &mut transcript,
        &mut messages,
        meter,
        &mut usage,
    )?;
    transcript.token_usage = usage;
    Ok(RecordOutcome::Completed(Box::new(transcript)))
}

fn first_line(text: &str) -> &str {
    text.lines().next().unwrap_or("")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub transcripts: Vec<CotTranscript>,
    pub skipped: Vec<SkippedRecord>,
    pub usage: TokenUsage,
    /// True when the budget ran out before the batch finished; the partial
    /// record was rolled back and the batch can resume.
    pub exhausted: bool,
}

/// Interpret an equal number of vulnerable and non-vulnerable records.
///
/// Selection is seeded: both classes are shuffled, the minority count is
/// taken from each, and processing follows record_id order so a resumed run
/// walks the same sequence. Completed transcripts append to `store_path`
/// immediately; records already in the store are not rerun.
pub fn run_balanced_batch(
    records: &[VulnRecord],
    features: &BTreeMap<String, RecordFeatures>,
    client: &ModelClient,
    templates: &PromptTemplates,
    options: &CotOptions,
    budget: &CotBudget,
    seed: u64,
    store_path: &Path,
) -> Result<BatchOutcome, CotError> {
    let mut outcome = BatchOutcome::default();
    let mut done: BTreeMap<String, CotTranscript> = BTreeMap::new();
    if store_path.exists() {
        for transcript in read_transcripts(store_path)? {
            done.insert(transcript.record_id.clone(), transcript);
        }
    }

    // Vulnerable candidates must carry at least the vulnerability lines;
    // there is nothing to verify otherwise.
    let mut vulnerable: Vec<&VulnRecord> = records
        .iter()
        .filter(|r| {
            r.label == 1
                && features.get(&r.record_id).is_some_and(|f| f.vuln_lines.is_some())
        })
        .collect();
    let mut benign: Vec<&VulnRecord> = records.iter().filter(|r| r.label == 0).collect();
    for r in records.iter().filter(|r| r.label == 1) {
        if !features.get(&r.record_id).is_some_and(|f| f.vuln_lines.is_some()) {
            outcome.skipped.push(SkippedRecord {
                record_id: r.record_id.clone(),
                reason: "vulnerable record without vulnerability lines".into(),
            });
        }
    }

    let take = vulnerable.len().min(benign.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vulnerable.shuffle(&mut rng);
    benign.shuffle(&mut rng);
    let mut selected: Vec<&VulnRecord> =
        vulnerable.into_iter().take(take).chain(benign.into_iter().take(take)).collect();
    selected.sort_by(|a, b| a.record_id.cmp(&b.record_id));

    let mut meter = UsageMeter::new(budget);
    let empty = RecordFeatures::default();
    for record in selected {
        if let Some(existing) = done.get(&record.record_id) {
            outcome.transcripts.push(existing.clone());
            continue;
        }
        let recorded = features.get(&record.record_id).unwrap_or(&empty);
        match run_record(record, recorded, client, templates, options, &mut meter) {
            Ok(RecordOutcome::Completed(transcript)) => {
                append_transcript(store_path, &transcript)?;
                outcome.transcripts.push(*transcript);
            }
            Ok(RecordOutcome::Skipped { record_id, reason }) => {
                log::warn!("record {record_id} skipped: {reason}");
                outcome.skipped.push(SkippedRecord { record_id, reason });
            }
            Err(CotError::BudgetExhausted) => {
                // The in-flight record is dropped whole; its cached requests
                // make the rerun free.
                outcome.exhausted = true;
                break;
            }
            Err(other) => return Err(other),
        }
    }
    outcome.usage = meter.used;
    Ok(outcome)
}

pub fn read_transcripts(path: &Path) -> Result<Vec<CotTranscript>, CotError> {
    let text = std::fs::read_to_string(path)?;
    let mut transcripts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let transcript: CotTranscript = serde_json::from_str(line).map_err(|e| {
            CotError::BadTranscriptLine { line_no: i + 1, message: e.to_string() }
        })?;
        transcripts.push(transcript);
    }
    Ok(transcripts)
}

pub fn append_transcript(path: &Path, transcript: &CotTranscript) -> Result<(), CotError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(transcript).expect("transcript serializes");
    writeln!(file, "{line}")?;
    Ok(())
}

/// One reviewable item. The reviewer edits `decision` to accept or reject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub record_id: String,
    pub code: String,
    pub features: RecordFeatures,
    pub interpretation: String,
    pub decision: String,
}

/// Transcripts needing review, paired with their records' code and features.
pub fn export_review_queue(
    transcripts: &[CotTranscript],
    records: &BTreeMap<String, VulnRecord>,
    features: &BTreeMap<String, RecordFeatures>,
) -> Vec<ReviewItem> {
    transcripts
        .iter()
        .filter(|t| t.status == CotStatus::NeedsReview)
        .map(|t| ReviewItem {
            record_id: t.record_id.clone(),
            code: records.get(&t.record_id).map(|r| r.code.clone()).unwrap_or_default(),
            features: features.get(&t.record_id).cloned().unwrap_or_default(),
            interpretation: t.final_interpretation.clone(),
            decision: "pending".into(),
        })
        .collect()
}

/// Apply reviewer decisions in place. "accept" clears the review flag,
/// "reject" bars the record from interpretation data, "pending" is a no-op.
pub fn apply_review(
    transcripts: &mut [CotTranscript],
    decisions: &[ReviewItem],
) -> Result<usize, CotError> {
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for (i, t) in transcripts.iter().enumerate() {
        by_id.insert(t.record_id.clone(), i);
    }
    let mut applied = 0;
    for item in decisions {
        let index = *by_id
            .get(item.record_id.as_str())
            .ok_or_else(|| CotError::UnknownRecord { record_id: item.record_id.clone() })?;
        let transcript = &mut transcripts[index];
        match item.decision.as_str() {
            "accept" => {
                transcript.status = CotStatus::Accepted;
                applied += 1;
            }
            "reject" => {
                transcript.status = CotStatus::Rejected;
                applied += 1;
            }
            "pending" => {}
            other => return Err(CotError::BadDecision { decision: other.to_string() }),
        }
    }
    Ok(applied)
}

/// Local CVE description directory with an optional HTTP fetch path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CveDirectory {
    map: BTreeMap<String, String>,
}

impl CveDirectory {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        CveDirectory { map }
    }

    /// Load a JSON object mapping cve_id to description text.
    pub fn from_file(path: &Path) -> Result<Self, CotError> {
        let text = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| {
            CotError::BadTranscriptLine { line_no: 0, message: format!("cve map: {e}") }
        })?;
        Ok(CveDirectory { map })
    }

    pub fn lookup(&self, cve_id: &str) -> Option<&str> {
        self.map.get(cve_id).map(|s| s.as_str())
    }

    pub fn insert(&mut self, cve_id: String, description: String) {
        self.map.insert(cve_id, description);
    }

    /// Fetch a description by id from an HTTP source, caching the raw body
    /// under `cache_dir/{cve_id}.json`. The cache is consulted first, so
    /// repeated fetches are offline.
    pub fn fetch(
        &mut self,
        cve_id: &str,
        base_url: &str,
        cache_dir: &Path,
    ) -> Result<String, CotError> {
        if let Some(found) = self.map.get(cve_id) {
            return Ok(found.clone());
        }
        std::fs::create_dir_all(cache_dir)?;
        let cache_path = cache_dir.join(format!("{cve_id}.json"));
        let body = if cache_path.exists() {
            std::fs::read_to_string(&cache_path)?
        } else {
            let url = format!("{}/{}", base_url.trim_end_matches('/'), cve_id);
            let body = reqwest::blocking::get(&url)
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.text())
                .map_err(|e| {
                    CotError::Client(ClientError::Exhausted { attempts: 1, last: e.to_string() })
                })?;
            std::fs::write(&cache_path, &body)?;
            body
        };
        let description = extract_cve_description(&body);
        self.map.insert(cve_id.to_string(), description.clone());
        Ok(description)
    }
}

/// Pull the English description out of an NVD-style JSON body, falling back
/// to a bare "description" field and finally the raw text.
fn extract_cve_description(body: &str) -> String {
    let Ok(value) = serde_json::from_str::<serde_json::Value>(body) else {
        return body.trim().to_string();
    };
    if let Some(descriptions) = value
        .pointer("/vulnerabilities/0/cve/descriptions")
        .and_then(|d| d.as_array())
    {
        for entry in descriptions {
            if entry.get("lang").and_then(|l| l.as_str()) == Some("en") {
                if let Some(text) = entry.get("value").and_then(|v| v.as_str()) {
                    return text.to_string();
                }
            }
        }
        if let Some(text) = descriptions
            .first()
            .and_then(|e| e.get("value"))
            .and_then(|v| v.as_str())
        {
            return text.to_string();
        }
    }
    if let Some(text) = value.get("description").and_then(|d| d.as_str()) {
        return text.to_string();
    }
    body.trim().to_string()
}

/// Assemble the three features for a record: the CVE description from the
/// record or a directory, and the vulnerability lines plus k-hop context
/// from its patch. Feature extraction failures degrade to missing features
/// with a warning; interpretation decides separately whether it can proceed.
pub fn extract_features(
    record: &VulnRecord,
    cve_dir: Option<&CveDirectory>,
    context_hops: usize,
) -> RecordFeatures {
    let mut features = RecordFeatures {
        cve_description: record.cve_description.clone(),
        ..RecordFeatures::default()
    };
    if features.cve_description.is_none() {
        if let (Some(cve_id), Some(dir)) = (&record.cve_id, cve_dir) {
            features.cve_description = dir.lookup(cve_id).map(|s| s.to_string());
        }
    }
    let Some(patch_text) = &record.patch else {
        return features;
    };
    let parsed = match patch::parse_unified_diff(patch_text) {
        Ok(parsed) => parsed,
        Err(e) => {
            log::warn!("record {}: patch unusable: {e}", record.record_id);
            return features;
        }
    };
    let extraction = match patch::extract_vuln_lines(&parsed, record) {
        Ok(extraction) => extraction,
        Err(e) => {
            log::warn!("record {}: no vulnerability lines: {e}", record.record_id);
            return features;
        }
    };
    for missed in &extraction.unmatched {
        log::warn!("record {}: deleted line not found in code: {missed}", record.record_id);
    }
    features.vuln_lines = Some(extraction.lines.rendered());
    match pdg::segment_statements(&record.code) {
        Ok(statements) => {
            let graph = pdg::build_pdg(statements);
            match pdg::k_hop_context(&graph, &extraction.lines, context_hops) {
                Ok(context) if !context.context_lines.is_empty() => {
                    features.context = Some(context.rendered());
                }
                Ok(_) => {}
                Err(e) => log::warn!("record {}: context failed: {e}", record.record_id),
            }
        }
        Err(e) => log::warn!("record {}: statement segmentation failed: {e}", record.record_id),
    }
    features
}
