//! Adversarial robustness attacks: MHM, WIR-Random, and dead-code insertion.
//!
//! The identifier attacks rename declared locals and parameters, steering by
//! the model's probability of the ground-truth label; dead-code insertion
//! plants one inert declaration at a legal statement boundary. Attacks never
//! change what the code does, so the ground-truth label carries over and a
//! flipped prediction is a model failure, not a relabeling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{ClientError, ModelClient, Prediction, ProbeMethod};
use crate::corpus::VulnRecord;
use crate::instruct::DETECTION_INSTRUCTION;
use crate::lexer::{self, TokKind};
use crate::pdg::{self, StatementKind};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("identifier {name:?} already occurs in the code")]
    Collision { name: String },
    #[error("{name:?} is not a usable identifier")]
    InvalidIdentifier { name: String },
    #[error("record {record_id} has no legal insertion point")]
    NoInsertionPoint { record_id: String },
    #[error("identifier or snippet pool is empty")]
    EmptyPool,
    #[error("attack configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Mhm,
    Wir,
    Dci,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AttackKind::Mhm => "MHM",
            AttackKind::Wir => "WIR",
            AttackKind::Dci => "DCI",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub max_iterations: u32,
    pub candidates_per_iteration: u32,
    pub seed: u64,
    /// Cap on model queries for one record, the clean check included.
    pub max_queries: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        AttackConfig {
            kind,
            max_iterations: 50,
            candidates_per_iteration: 5,
            seed,
            max_queries: 500,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.max_iterations < 1 {
            return Err(AttackError::BadConfig("max_iterations must be at least 1".into()));
        }
        if self.max_queries < 1 {
            return Err(AttackError::BadConfig("max_queries must be at least 1".into()));
        }
        Ok(())
    }
}

/// One logged decision during an attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditEntry {
    Rename {
        old: String,
        new: String,
        accepted: bool,
        p_before: f64,
        p_after: f64,
    },
    Insert {
        /// Byte offset of the inserted span in the adversarial code.
        position: usize,
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub record_id: String,
    pub kind: AttackKind,
    pub adversarial_code: String,
    /// The adversarial label differs from ground truth while the clean
    /// prediction was correct. Always false when the clean check failed.
    pub success: bool,
    pub queries_used: u64,
    pub edits: Vec<EditEntry>,
    /// The clean prediction matched ground truth, so the attack ran.
    pub clean_correct: bool,
    /// Scores came from sampling rather than token scores, so reruns may
    /// differ.
    pub stochastic: bool,
}

/// Distinct identifiers declared in the function (parameters and locals), in
/// first-occurrence order. Keywords, configured type names, call positions,
/// and string/comment contents never qualify.
pub fn extract_identifiers(code: &str) -> Vec<String> {
    extract_identifiers_with(code, &[])
}

pub fn extract_identifiers_with(code: &str, extra_types: &[String]) -> Vec<String> {
    let Ok(statements) = pdg::segment_statements_with(code, extra_types) else {
        return Vec::new();
    };
    let mut declared: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    for statement in &statements {
        if statement.kind == StatementKind::Declaration {
            declared.extend(statement.defs.iter().map(|s| s.as_str()));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut ordered = Vec::new();
    for token in lexer::tokenize(code) {
        if token.kind == TokKind::Ident
            && declared.contains(token.text.as_str())
            && seen.insert(token.text.clone())
        {
            ordered.push(token.text);
        }
    }
    ordered
}

/// Rename every identifier token `old` to `new`. Strings and comments pass
/// through untouched; `old == new` is the identity.
pub fn rename(code: &str, old: &str, new: &str) -> Result<String, AttackError> {
    if !lexer::is_valid_identifier(new) || lexer::is_reserved(new, &[]) {
        return Err(AttackError::InvalidIdentifier { name: new.to_string() });
    }
    if old == new {
        return Ok(code.to_string());
    }
    let tokens = lexer::tokenize(code);
    if tokens.iter().any(|t| t.kind == TokKind::Ident && t.text == new) {
        return Err(AttackError::Collision { name: new.to_string() });
    }
    let mut out = String::with_capacity(code.len());
    let mut cursor = 0;
    for token in &tokens {
        if token.kind == TokKind::Ident && token.text == old {
            out.push_str(&code[cursor..token.start]);
            out.push_str(new);
            cursor = token.end;
        }
    }
    out.push_str(&code[cursor..]);
    Ok(out)
}

/// Acceptance clamp for a perfectly confident current state.
pub const MH_EPSILON: f64 = 1e-6;

/// Metropolis-Hastings acceptance probability min(1, (1-p')/(1-p)) for
/// moving from ground-truth probability `p` to `p_prime`.
pub fn mh_acceptance_probability(p: f64, p_prime: f64) -> f64 {
    let denom = (1.0 - p).max(MH_EPSILON);
    ((1.0 - p_prime) / denom).clamp(0.0, 1.0)
}

pub fn mh_accept(p: f64, p_prime: f64, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < mh_acceptance_probability(p, p_prime)
}

/// Probability the model assigns to the ground-truth label, reading the
/// two-class complement when the predicted label is the other one.
fn truth_probability(prediction: &Prediction, truth: u8) -> f64 {
    match (prediction.label.as_u8(), prediction.probability) {
        (Some(label), Some(p)) => {
            if label == truth {
                p
            } else {
                1.0 - p
            }
        }
        (Some(label), None) => {
            if label == truth {
                1.0
            } else {
                0.0
            }
        }
        // An unparseable answer carries no information either way.
        (None, _) => 0.5,
    }
}

/// Shared query bookkeeping for one attack run.
struct QueryMeter<'a> {
    client: &'a ModelClient,
    used: u64,
    max: u64,
    stochastic: bool,
}

impl<'a> QueryMeter<'a> {
    fn new(client: &'a ModelClient, max: u64) -> Self {
        QueryMeter { client, used: 0, max, stochastic: false }
    }

    fn remaining(&self) -> bool {
        self.used < self.max
    }

    fn score(&mut self, code: &str, truth: u8) -> Result<(Prediction, f64), AttackError> {
        let prediction = self.client.classify(code, DETECTION_INSTRUCTION)?;
        self.used += 1;
        if prediction.probe_method == ProbeMethod::SampleVote {
            self.stochastic = true;
        }
        let p = truth_probability(&prediction, truth);
        Ok((prediction, p))
    }
}

fn outcome_shell(record: &VulnRecord, kind: AttackKind) -> AttackOutcome {
    AttackOutcome {
        record_id: record.record_id.clone(),
        kind,
        adversarial_code: record.code.clone(),
        success: false,
        queries_used: 0,
        edits: Vec::new(),
        clean_correct: false,
        stochastic: false,
    }
}

/// Pool names that can stand in for `old` in `code` without colliding.
pub(crate) fn usable_candidates<'a>(pool: &'a [String], code: &str, old: &str) -> Vec<&'a str> {
    let present: std::collections::BTreeSet<String> = lexer::tokenize(code)
        .into_iter()
        .filter(|t| t.kind == TokKind::Ident)
        .map(|t| t.text)
        .collect();
    pool.iter()
        .map(|s| s.as_str())
        .filter(|name| {
            *name != old
                && lexer::is_valid_identifier(name)
                && !lexer::is_reserved(name, &[])
                && !present.contains(*name)
        })
        .collect()
}

/// Metropolis-Hastings identifier renaming.
///
/// Each iteration proposes renaming one random declared identifier to the
/// most adversarial of a handful of pool names, accepting the move with
/// probability min(1, (1-p')/(1-p)). Stops on a label flip, an exhausted
/// query budget, or `max_iterations`.
pub fn mhm_attack(
    record: &VulnRecord,
    client: &ModelClient,
    config: &AttackConfig,
    pool: &[String],
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    if pool.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    let mut outcome = outcome_shell(record, AttackKind::Mhm);
    let mut meter = QueryMeter::new(client, config.max_queries);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (clean, mut p_current) = meter.score(&record.code, record.label)?;
    outcome.clean_correct = clean.label.as_u8() == Some(record.label);
    if !outcome.clean_correct {
        outcome.queries_used = meter.used;
        return Ok(outcome);
    }

    let mut current = record.code.clone();
    'iterations: for _ in 0..config.max_iterations {
        if !meter.remaining() {
            break;
        }
        let identifiers = extract_identifiers(&current);
        if identifiers.is_empty() {
            break;
        }
        let old = identifiers[rng.gen_range(0..identifiers.len())].clone();
        let mut candidates = usable_candidates(pool, &current, &old);
        candidates.shuffle(&mut rng);
        candidates.truncate(config.candidates_per_iteration as usize);
        if candidates.is_empty() {
            continue;
        }

        let mut best: Option<(String, String, Prediction, f64)> = None;
        for name in candidates {
            if !meter.remaining() {
                break 'iterations;
            }
            let rewritten = match rename(&current, &old, name) {
                Ok(rewritten) => rewritten,
                Err(_) => continue,
            };
            let (prediction, p) = meter.score(&rewritten, record.label)?;
            if best.as_ref().is_none_or(|(_, _, _, best_p)| p < *best_p) {
                best = Some((name.to_string(), rewritten, prediction, p));
            }
        }
        let Some((name, rewritten, prediction, p_prime)) = best else { continue };

        let accepted = mh_accept(p_current, p_prime, &mut rng);
        outcome.edits.push(EditEntry::Rename {
            old: old.clone(),
            new: name,
            accepted,
            p_before: p_current,
            p_after: p_prime,
        });
        if accepted {
            current = rewritten;
            p_current = p_prime;
            if prediction.label.as_u8() != Some(record.label) {
                outcome.success = true;
                break;
            }
        }
    }

    outcome.adversarial_code = current;
    outcome.queries_used = meter.used;
    outcome.stochastic = meter.stochastic;
    Ok(outcome)
}

/// Word-importance-ranked random substitution.
///
/// Ranks identifiers by how much masking them to "UNK" drops the model's
/// ground-truth probability, then walks them in rank order, substituting a
/// seeded pool name and keeping only substitutions that strictly reduce the
/// probability.
pub fn wir_random_attack(
    record: &VulnRecord,
    client: &ModelClient,
    config: &AttackConfig,
    pool: &[String],
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    if pool.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    let mut outcome = outcome_shell(record, AttackKind::Wir);
    let mut meter = QueryMeter::new(client, config.max_queries);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (clean, p_clean) = meter.score(&record.code, record.label)?;
    outcome.clean_correct = clean.label.as_u8() == Some(record.label);
    if !outcome.clean_correct {
        outcome.queries_used = meter.used;
        return Ok(outcome);
    }

    let identifiers = extract_identifiers(&record.code);
    let mut ranked: Vec<(String, f64)> = Vec::new();
    for name in identifiers {
        if !meter.remaining() {
            break;
        }
        let masked = match rename(&record.code, &name, "UNK") {
            Ok(masked) => masked,
            Err(_) => continue,
        };
        let (_, p_masked) = meter.score(&masked, record.label)?;
        ranked.push((name, p_clean - p_masked));
    }
    // Descending delta; first-occurrence order already breaks ties because
    // the sort is stable.
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let mut current = record.code.clone();
    let mut p_current = p_clean;
    for (old, _) in ranked {
        if !meter.remaining() {
            break;
        }
        let candidates = usable_candidates(pool, &current, &old);
        if candidates.is_empty() {
            continue;
        }
        let name = candidates[rng.gen_range(0..candidates.len())];
        let rewritten = match rename(&current, &old, name) {
            Ok(rewritten) => rewritten,
            Err(_) => continue,
        };
        let (prediction, p_prime) = meter.score(&rewritten, record.label)?;
        let kept = p_prime < p_current;
        outcome.edits.push(EditEntry::Rename {
            old,
            new: name.to_string(),
            accepted: kept,
            p_before: p_current,
            p_after: p_prime,
        });
        if kept {
            current = rewritten;
            p_current = p_prime;
            if prediction.label.as_u8() != Some(record.label) {
                outcome.success = true;
                break;
            }
        }
    }

    outcome.adversarial_code = current;
    outcome.queries_used = meter.used;
    outcome.stochastic = meter.stochastic;
    Ok(outcome)
}

fn escape_snippet(snippet: &str) -> String {
    snippet.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Byte offsets where a statement can be inserted: immediately after a ';'
/// or '{' inside the function body, outside parentheses (so never in a
/// `for (...)` header), computed on masked code so strings and comments
/// cannot offer false boundaries.
fn insertion_points(code: &str) -> Vec<usize> {
    let masked = lexer::mask_code(code);
    let mut points = Vec::new();
    let mut brace_depth = 0usize;
    let mut paren_depth = 0usize;
    for (i, b) in masked.bytes().enumerate() {
        match b {
            b'{' => {
                brace_depth += 1;
                if brace_depth >= 1 && paren_depth == 0 {
                    points.push(i + 1);
                }
            }
            b'}' => brace_depth = brace_depth.saturating_sub(1),
            b'(' => paren_depth += 1,
            b')' => paren_depth = paren_depth.saturating_sub(1),
            b';' => {
                if brace_depth >= 1 && paren_depth == 0 {
                    points.push(i + 1);
                }
            }
            _ => {}
        }
    }
    points
}

/// Insert one dead `char {id}_2[] = "{snippet}";` declaration at a seeded
/// legal statement boundary. Pure: the caller owns model queries.
pub fn dead_code_insertion(
    record: &VulnRecord,
    pool: &[String],
    snippet_pool: &[String],
    seed: u64,
) -> Result<(String, EditEntry), AttackError> {
    if pool.is_empty() || snippet_pool.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = insertion_points(&record.code);
    if points.is_empty() {
        return Err(AttackError::NoInsertionPoint { record_id: record.record_id.clone() });
    }

    let present: std::collections::BTreeSet<String> = lexer::tokenize(&record.code)
        .into_iter()
        .filter(|t| t.kind == TokKind::Ident)
        .map(|t| t.text)
        .collect();
    let mut base_ids: Vec<&String> = pool
        .iter()
        .filter(|name| {
            lexer::is_valid_identifier(name)
                && !lexer::is_reserved(name, &[])
                && !present.contains(format!("{name}_2").as_str())
        })
        .collect();
    if base_ids.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    base_ids.shuffle(&mut rng);
    let id = base_ids[0];
    let snippet = &snippet_pool[rng.gen_range(0..snippet_pool.len())];
    let declaration = format!("char {id}_2[] = \"{}\";", escape_snippet(snippet));

    let position = points[rng.gen_range(0..points.len())];
    let inserted = format!("\n{declaration}");
    let mut adversarial = String::with_capacity(record.code.len() + inserted.len());
    adversarial.push_str(&record.code[..position]);
    adversarial.push_str(&inserted);
    adversarial.push_str(&record.code[position..]);

    Ok((adversarial, EditEntry::Insert { position, text: inserted }))
}

/// Run the configured attack end to end, including the clean-correctness
/// precheck and, for dead-code insertion, the post-insertion query.
pub fn run_attack(
    record: &VulnRecord,
    client: &ModelClient,
    config: &AttackConfig,
    pool: &[String],
    snippet_pool: &[String],
) -> Result<AttackOutcome, AttackError> {
    match config.kind {
        AttackKind::Mhm => mhm_attack(record, client, config, pool),
        AttackKind::Wir => wir_random_attack(record, client, config, pool),
        AttackKind::Dci => {
            config.validate()?;
            let mut outcome = outcome_shell(record, AttackKind::Dci);
            let mut meter = QueryMeter::new(client, config.max_queries);
            let (clean, _) = meter.score(&record.code, record.label)?;
            outcome.clean_correct = clean.label.as_u8() == Some(record.label);
            if outcome.clean_correct {
                let (adversarial, edit) =
                    dead_code_insertion(record, pool, snippet_pool, config.seed)?;
                let (prediction, _) = meter.score(&adversarial, record.label)?;
                outcome.success = prediction.label.as_u8() != Some(record.label);
                outcome.adversarial_code = adversarial;
                outcome.edits.push(edit);
            }
            outcome.queries_used = meter.used;
            outcome.stochastic = meter.stochastic;
            Ok(outcome)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{
        ChatReply, EndpointConfig, FnTransport, ProbeConfig, RetryPolicy, WireRequest,
    };
    use crate::corpus;
    use std::collections::BTreeMap;

    fn record_for(code: &str, label: u8) -> VulnRecord {
        VulnRecord {
            record_id: corpus::record_id_for(code),
            code: code.to_string(),
            label,
            project: None,
            commit: None,
            cve_id: None,
            cwe_id: None,
            cve_description: None,
            patch: None,
            source_dataset: "fixture".into(),
            augmented: false,
        }
    }

    /// Client whose ground-truth-1 probability is `p(code)`; answers with
    /// token scores so the probe is deterministic.
    fn scoring_client(p: impl Fn(&str) -> f64 + Send + Sync + 'static) -> ModelClient {
        let transport = FnTransport::new(move |req: &WireRequest, _| {
            let content = &req.messages.last().unwrap().content;
            let code = content.split_once('\n').map(|(_, c)| c).unwrap_or(content);
            let p1 = p(code).clamp(1e-9, 1.0 - 1e-9);
            let label = if p1 >= 0.5 { "1" } else { "0" };
            let mut scores = BTreeMap::new();
            scores.insert("1".to_string(), p1.ln());
            scores.insert("0".to_string(), (1.0 - p1).ln());
            Ok(ChatReply {
                texts: vec![label.to_string()],
                label_token_scores: Some(scores),
            })
        });
        let config = EndpointConfig {
            probe: Some(ProbeConfig::TokenLogprob),
            retry: RetryPolicy { max_attempts: 2, initial_backoff_ms: 1, backoff_multiplier: 2.0 },
            context_budget: 65536,
            ..EndpointConfig::default()
        };
        ModelClient::with_transport(config, Box::new(transport)).unwrap()
    }

    fn contains_ident(code: &str, name: &str) -> bool {
        lexer::tokenize(code)
            .iter()
            .any(|t| t.kind == TokKind::Ident && t.text == name)
    }

    #[test]
    fn extract_identifiers_finds_params_and_locals_in_order() {
        let code = "int foo(int a){int b=a; return b;}";
        assert_eq!(extract_identifiers(code), vec!["a", "b"]);
    }

    #[test]
    fn extract_identifiers_ignores_globals_and_calls() {
        let code = "void tick(void) { counter = next_value(counter); }";
        assert_eq!(extract_identifiers(code), Vec::<String>::new());
    }

    #[test]
    fn extract_identifiers_on_probe_fixture_matches_hand_table() {
        let code = include_str!("../fixtures/svg_probe.c");
        assert_eq!(extract_identifiers(code), vec!["p", "b", "end", "i"]);
    }

    #[test]
    fn rename_to_self_is_identity() {
        let code = "int foo(int a){int b=a; return b;}";
        assert_eq!(rename(code, "a", "a").unwrap(), code);
    }

    #[test]
    fn rename_rewrites_probe_line_9() {
        let code = include_str!("../fixtures/svg_probe.c");
        let renamed = rename(code, "b", "tmp_q").unwrap();
        let line9 = renamed.lines().nth(8).unwrap().trim();
        assert_eq!(line9, "tmp_q += ff_subtitles_next_line(tmp_q);");
        assert!(!contains_ident(&renamed, "b"));
    }

    #[test]
    fn rename_leaves_strings_and_comments_alone() {
        let code = "int f(int v) { /* v stays here */ const char *s = \"v\"; return v; }";
        let renamed = rename(code, "v", "w").unwrap();
        assert!(renamed.contains("/* v stays here */"));
        assert!(renamed.contains("\"v\""));
        assert!(renamed.contains("return w;"));
    }

    #[test]
    fn rename_rejects_collisions_and_keywords() {
        let code = "int f(int a){int b=a; return b;}";
        assert!(matches!(rename(code, "a", "b"), Err(AttackError::Collision { .. })));
        assert!(matches!(rename(code, "a", "while"), Err(AttackError::InvalidIdentifier { .. })));
        assert!(matches!(rename(code, "a", "9lives"), Err(AttackError::InvalidIdentifier { .. })));
    }

    #[test]
    fn rename_changes_only_mapped_tokens() {
        for seed in 0..25u64 {
            let code = pdg::synthetic_function(seed);
            let identifiers = extract_identifiers(&code);
            if identifiers.is_empty() {
                continue;
            }
            let old = &identifiers[seed as usize % identifiers.len()];
            let renamed = rename(&code, old, "zz_fresh").unwrap();
            let before = lexer::token_texts(&code);
            let after = lexer::token_texts(&renamed);
            assert_eq!(before.len(), after.len());
            for (a, b) in before.iter().zip(after.iter()) {
                if a == old {
                    assert_eq!(b, "zz_fresh");
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn acceptance_probability_matches_the_ratio_rule() {
        assert!((mh_acceptance_probability(0.9, 0.95) - 0.5).abs() < 1e-12);
        assert_eq!(mh_acceptance_probability(0.5, 0.2), 1.0);
        assert_eq!(mh_acceptance_probability(0.0, 1.0), 0.0);
        // Perfect current confidence: epsilon floor keeps the ratio finite.
        assert_eq!(mh_acceptance_probability(1.0, 0.95), 1.0);
        assert_eq!(mh_acceptance_probability(1.0, 1.0), 0.0);
    }

    #[test]
    fn acceptance_frequency_tracks_analytic_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (p, p_prime) in [(0.9, 0.95), (0.8, 0.9), (0.6, 0.9), (0.3, 0.2)] {
            let trials = 10_000;
            let hits = (0..trials).filter(|_| mh_accept(p, p_prime, &mut rng)).count();
            let frequency = hits as f64 / trials as f64;
            let analytic = mh_acceptance_probability(p, p_prime);
            assert!(
                (frequency - analytic).abs() < 0.02,
                "p={p} p'={p_prime}: {frequency} vs {analytic}"
            );
        }
    }

    const LEAKY: &str = "int check(int secret_sauce, int n) {\n    int total = secret_sauce + n;\n    int limit = total * 2;\n    return limit;\n}\n";

    /// Scorer that stays confident only while `secret_sauce` is present.
    fn leak_scorer() -> ModelClient {
        scoring_client(|code| if code.contains("secret_sauce") { 0.95 } else { 0.2 })
    }

    fn pool() -> Vec<String> {
        ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn mhm_flips_the_label_by_renaming_the_sensitive_identifier() {
        let record = record_for(LEAKY, 1);
        let client = leak_scorer();
        let config = AttackConfig::new(AttackKind::Mhm, 3);
        let outcome = mhm_attack(&record, &client, &config, &pool()).unwrap();
        assert!(outcome.clean_correct);
        assert!(outcome.success);
        assert!(!contains_ident(&outcome.adversarial_code, "secret_sauce"));
        assert!(outcome.queries_used <= config.max_queries);
        assert_eq!(outcome.queries_used as usize, client.network_calls());
        assert!(outcome.edits.iter().any(|e| matches!(e, EditEntry::Rename { accepted: true, .. })));
        // Ground truth label carries over and the result still lexes.
        assert!(!lexer::tokenize(&outcome.adversarial_code).is_empty());
    }

    #[test]
    fn mhm_skips_records_the_model_already_gets_wrong() {
        let record = record_for(LEAKY, 0);
        let client = leak_scorer();
        let config = AttackConfig::new(AttackKind::Mhm, 3);
        let outcome = mhm_attack(&record, &client, &config, &pool()).unwrap();
        assert!(!outcome.clean_correct);
        assert!(!outcome.success);
        assert_eq!(outcome.queries_used, 1);
        assert_eq!(outcome.adversarial_code, record.code);
        assert!(outcome.edits.is_empty());
    }

    #[test]
    fn mhm_respects_the_query_budget() {
        let record = record_for(LEAKY, 1);
        let client = scoring_client(|_| 0.95);
        let mut config = AttackConfig::new(AttackKind::Mhm, 3);
        config.max_queries = 7;
        let outcome = mhm_attack(&record, &client, &config, &pool()).unwrap();
        assert!(!outcome.success);
        assert!(outcome.queries_used <= 7);
        assert_eq!(outcome.queries_used as usize, client.network_calls());
    }

    #[test]
    fn wir_ranks_the_sensitive_identifier_first() {
        let record = record_for(LEAKY, 1);
        let client = leak_scorer();
        let config = AttackConfig::new(AttackKind::Wir, 9);
        let outcome = wir_random_attack(&record, &client, &config, &pool()).unwrap();
        assert!(outcome.success);
        // The first substitution attempt is the top-ranked identifier.
        match &outcome.edits[0] {
            EditEntry::Rename { old, accepted, .. } => {
                assert_eq!(old, "secret_sauce");
                assert!(accepted);
            }
            other => panic!("unexpected edit {other:?}"),
        }
        assert!(!contains_ident(&outcome.adversarial_code, "secret_sauce"));
    }

    #[test]
    fn wir_ranking_equals_brute_force_deltas() {
        // Sensitivities differ per identifier; the rank order must match a
        // direct recomputation of the UNK deltas.
        let weights: BTreeMap<&str, f64> =
            [("secret_sauce", 0.4), ("total", 0.25), ("limit", 0.1), ("n", 0.05)]
                .into_iter()
                .collect();
        let score = move |code: &str| {
            let mut p: f64 = 0.2;
            for (name, w) in [("secret_sauce", 0.4), ("total", 0.25), ("limit", 0.1), ("n", 0.05)]
            {
                if contains_ident(code, name) {
                    p += w;
                }
            }
            p
        };
        let record = record_for(LEAKY, 1);
        let client = scoring_client(score);
        let config = AttackConfig::new(AttackKind::Wir, 4);

        // Brute-force expectation: deltas equal each identifier's weight, so
        // rank order is descending weight.
        let mut expected: Vec<(&str, f64)> = weights.iter().map(|(k, v)| (*k, *v)).collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let expected_order: Vec<&str> = expected.iter().map(|(k, _)| *k).collect();

        let outcome = wir_random_attack(&record, &client, &config, &pool()).unwrap();
        let attempted: Vec<String> = outcome
            .edits
            .iter()
            .map(|e| match e {
                EditEntry::Rename { old, .. } => old.clone(),
                other => panic!("unexpected edit {other:?}"),
            })
            .collect();
        // The attack stops on flip, so the attempted prefix must follow the
        // expected ranking.
        for (i, name) in attempted.iter().enumerate() {
            assert_eq!(name, expected_order[i]);
        }
        assert!(!attempted.is_empty());
    }

    #[test]
    fn wir_keeps_nothing_when_renames_change_nothing() {
        let record = record_for(LEAKY, 1);
        let client = scoring_client(|_| 0.9);
        let config = AttackConfig::new(AttackKind::Wir, 4);
        let outcome = wir_random_attack(&record, &client, &config, &pool()).unwrap();
        assert!(!outcome.success);
        assert_eq!(outcome.adversarial_code, record.code);
        assert!(outcome
            .edits
            .iter()
            .all(|e| matches!(e, EditEntry::Rename { accepted: false, .. })));
    }

    #[test]
    fn dci_builds_the_documented_declaration_shape() {
        let record = record_for(LEAKY, 1);
        let pool = vec!["xpath".to_string()];
        let snippets =
            vec!["err = sock_do_ioctl(net, sock, cmd, (unsigned long)&ktv);".to_string()];
        let (adversarial, edit) = dead_code_insertion(&record, &pool, &snippets, 5).unwrap();
        assert!(adversarial.contains(
            "char xpath_2[] = \"err = sock_do_ioctl(net, sock, cmd, (unsigned long)&ktv);\";"
        ));
        match edit {
            EditEntry::Insert { position, text } => {
                assert!(text.contains("xpath_2"));
                // Removing the inserted span restores the original bytes.
                let mut restored = adversarial.clone();
                restored.replace_range(position..position + text.len(), "");
                assert_eq!(restored, record.code);
            }
            other => panic!("unexpected edit {other:?}"),
        }
    }

    #[test]
    fn dci_escapes_quotes_and_backslashes() {
        let record = record_for(LEAKY, 1);
        let pool = vec!["qq".to_string()];
        let snippets = vec![r#"printf("%s\n", msg);"#.to_string()];
        let (adversarial, _) = dead_code_insertion(&record, &pool, &snippets, 1).unwrap();
        assert!(adversarial.contains(r#"char qq_2[] = "printf(\"%s\\n\", msg);";"#));
        // The masked view stays balanced: the insertion is one statement.
        let masked = lexer::mask_code(&adversarial);
        assert_eq!(masked.matches('{').count(), masked.matches('}').count());
    }

    #[test]
    fn dci_handles_an_empty_body() {
        let record = record_for("void nop(void) {}", 0);
        let pool = vec!["pad".to_string()];
        let snippets = vec!["x = 1;".to_string()];
        let (adversarial, _) = dead_code_insertion(&record, &pool, &snippets, 0).unwrap();
        assert!(adversarial.contains("char pad_2[] = \"x = 1;\";"));
        assert!(adversarial.starts_with("void nop(void) {\nchar pad_2[]"));
    }

    #[test]
    fn dci_never_lands_inside_a_for_header_or_string() {
        let code = "void walk(int n) {\n    for (int i = 0; i < n; i++) {\n        mark(\"a;b{c\", i);\n    }\n}\n";
        let points = insertion_points(code);
        for p in &points {
            let prefix = &code[..*p];
            // Legal points sit right after ';' or '{' outside parens.
            let last = prefix.bytes().last().unwrap();
            assert!(last == b';' || last == b'{');
            assert!(!prefix.ends_with("i = 0;"));
            assert!(!prefix.ends_with("i < n;"));
            assert!(!prefix.ends_with("a;"));
        }
        // The string literal's ';' and '{' contribute nothing.
        assert_eq!(points.len(), 3);
    }

    #[test]
    fn dci_insertions_preserve_the_original_token_stream() {
        let record = record_for(include_str!("../fixtures/svg_probe.c"), 1);
        let pool = pool();
        let snippets = vec![
            "err = sock_do_ioctl(net, sock, cmd, (unsigned long)&ktv);".to_string(),
            "count += strlen(path);".to_string(),
        ];
        let original = lexer::token_texts(&record.code);
        for seed in 0..100u64 {
            let (adversarial, edit) =
                dead_code_insertion(&record, &pool, &snippets, seed).unwrap();
            let EditEntry::Insert { position, text } = edit else { panic!("wrong edit kind") };
            let mut restored = adversarial.clone();
            restored.replace_range(position..position + text.len(), "");
            assert_eq!(restored, record.code, "seed {seed}");
            // Token stream: original plus one contiguous inserted run.
            let inserted = lexer::token_texts(&adversarial);
            assert!(inserted.len() > original.len(), "seed {seed}");
            let extra = inserted.len() - original.len();
            let mut matched = false;
            for cut in 0..=(inserted.len() - extra) {
                let mut spliced = inserted.clone();
                spliced.drain(cut..cut + extra);
                if spliced == original {
                    matched = true;
                    break;
                }
            }
            assert!(matched, "seed {seed}: insertion was not contiguous");
        }
    }

    #[test]
    fn run_attack_covers_dci_with_clean_and_post_queries() {
        let record = record_for(LEAKY, 1);
        // Drops below the decision line as soon as any code is added.
        let baseline = LEAKY.to_string();
        let client = scoring_client(move |code| if code == baseline { 0.9 } else { 0.3 });
        let mut config = AttackConfig::new(AttackKind::Dci, 2);
        config.max_queries = 10;
        let snippets = vec!["x = 1;".to_string()];
        let outcome = run_attack(&record, &client, &config, &pool(), &snippets).unwrap();
        assert_eq!(outcome.kind, AttackKind::Dci);
        assert!(outcome.clean_correct);
        assert!(outcome.success);
        assert_eq!(outcome.queries_used, 2);
        assert_eq!(outcome.queries_used as usize, client.network_calls());
    }

    #[test]
    fn config_validation_rejects_zero_budgets() {
        let mut config = AttackConfig::new(AttackKind::Mhm, 0);
        config.max_iterations = 0;
        assert!(config.validate().is_err());
        let mut config = AttackConfig::new(AttackKind::Mhm, 0);
        config.max_queries = 0;
        assert!(config.validate().is_err());
    }
}
