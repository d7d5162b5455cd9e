//! Statement-level program dependency graphs for C-like functions.
//!
//! This is a deliberately approximate, branch-insensitive analysis: data
//! edges connect each use to its nearest preceding definition in statement
//! order, and control edges connect a control header to the statements in
//! its body. That is enough to recover the patch-line neighborhoods the rest
//! of the pipeline needs, without a real compiler front end. Known
//! approximations: member accesses contribute only their base identifier,
//! call-position names are ignored, and `T *a;` for an unknown typedef T is
//! read as a declaration.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lexer::{self, is_reserved, TokKind, Token};
use crate::patch::VulnLines;

#[derive(Debug, thiserror::Error)]
pub enum PdgError {
    #[error("unbalanced {what} starting near line {line}")]
    Unbalanced { what: &'static str, line: usize },
    #[error("vuln_lines is empty")]
    EmptyVulnLines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatementKind {
    Declaration,
    Assignment,
    Call,
    Control,
    Return,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub index: usize,
    /// 1-based source line of the statement head.
    pub line_no: usize,
    /// Last source line the statement touches; multi-line statements span
    /// [line_no, end_line_no].
    pub end_line_no: usize,
    /// Original text, whitespace-collapsed onto one line.
    pub text: String,
    pub kind: StatementKind,
    pub defs: BTreeSet<String>,
    pub uses: BTreeSet<String>,
    pub control_parent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Data,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdg {
    pub statements: Vec<Statement>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextLine {
    pub line_no: usize,
    pub text: String,
}

/// Statements within k undirected dependency hops of the vulnerability lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnContext {
    pub record_id: String,
    pub k: usize,
    pub context_lines: Vec<ContextLine>,
}

impl VulnContext {
    /// "line_no: text" per line, the rendering used in prompts.
    pub fn rendered(&self) -> String {
        self.context_lines
            .iter()
            .map(|c| format!("{}: {}", c.line_no, c.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn line_numbers(&self) -> Vec<usize> {
        self.context_lines.iter().map(|c| c.line_no).collect()
    }
}

const DECL_KEYWORDS: &[&str] = &[
    "auto", "bool", "_Bool", "char", "const", "double", "enum", "extern", "float", "inline",
    "int", "long", "register", "short", "signed", "static", "struct", "union", "unsigned",
    "void", "volatile",
];

const ASSIGN_OPS: &[&str] = &["=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>="];

fn is_assign_op(t: &str) -> bool {
    ASSIGN_OPS.contains(&t)
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Segmentation

struct Segmenter<'a> {
    masked: &'a [u8],
    original: &'a str,
    extra_types: &'a [String],
    pos: usize,
    stmts: Vec<Statement>,
}

impl<'a> Segmenter<'a> {
    fn line_at(&self, pos: usize) -> usize {
        lexer::line_of_offset(self.original, pos)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.masked.len() && self.masked[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.masked.get(self.pos).copied()
    }

    /// Identifier starting exactly at `pos`, if any.
    fn word_at(&self, pos: usize) -> Option<&str> {
        let b = *self.masked.get(pos)?;
        if !(b.is_ascii_alphabetic() || b == b'_') {
            return None;
        }
        let mut end = pos + 1;
        while end < self.masked.len()
            && (self.masked[end].is_ascii_alphanumeric() || self.masked[end] == b'_')
        {
            end += 1;
        }
        std::str::from_utf8(&self.masked[pos..end]).ok()
    }

    /// Consumes from an opening delimiter at `pos` through its match.
    fn scan_matching(&mut self, open: u8, close: u8) -> Result<(), PdgError> {
        let start_line = self.line_at(self.pos);
        let mut depth = 0usize;
        while self.pos < self.masked.len() {
            let b = self.masked[self.pos];
            self.pos += 1;
            if b == open {
                depth += 1;
            } else if b == close {
                depth -= 1;
                if depth == 0 {
                    return Ok(());
                }
            }
        }
        Err(PdgError::Unbalanced {
            what: if open == b'(' { "parentheses" } else { "braces" },
            line: start_line,
        })
    }

    fn emit(&mut self, start: usize, end: usize, kind: StatementKind, parent: Option<usize>) {
        let raw = &self.original[start..end];
        let text = collapse_ws(raw);
        if text.is_empty() {
            return;
        }
        let head_offset = start
            + raw
                .bytes()
                .position(|b| !b.is_ascii_whitespace())
                .unwrap_or(0);
        let tail_offset = start
            + raw
                .bytes()
                .rposition(|b| !b.is_ascii_whitespace())
                .unwrap_or(0);
        let index = self.stmts.len();
        let (defs, uses) = def_use_impl(&text, kind, self.extra_types);
        self.stmts.push(Statement {
            index,
            line_no: self.line_at(head_offset),
            end_line_no: self.line_at(tail_offset),
            text,
            kind,
            defs,
            uses,
            control_parent: parent,
        });
    }

    fn parse_block(&mut self, parent: Option<usize>, until_rbrace: bool) -> Result<(), PdgError> {
        loop {
            self.skip_ws();
            match self.peek() {
                None => {
                    if until_rbrace {
                        return Err(PdgError::Unbalanced {
                            what: "braces",
                            line: self.line_at(self.masked.len().saturating_sub(1)),
                        });
                    }
                    return Ok(());
                }
                Some(b'}') => {
                    if until_rbrace {
                        self.pos += 1;
                        return Ok(());
                    }
                    return Err(PdgError::Unbalanced {
                        what: "braces",
                        line: self.line_at(self.pos),
                    });
                }
                _ => self.parse_construct(parent)?,
            }
        }
    }

    /// One statement, control structure, label, or anonymous block.
    fn parse_construct(&mut self, parent: Option<usize>) -> Result<(), PdgError> {
        self.skip_ws();
        match self.peek() {
            None => return Ok(()),
            Some(b';') => {
                self.pos += 1;
                return Ok(());
            }
            Some(b'{') => {
                self.pos += 1;
                return self.parse_block(parent, true);
            }
            _ => {}
        }
        if let Some(word) = self.word_at(self.pos) {
            match word {
                "if" | "while" | "for" | "switch" => {
                    let word_is_if = word == "if";
                    let start = self.pos;
                    self.pos += word.len();
                    self.skip_ws();
                    if self.peek() == Some(b'(') {
                        self.scan_matching(b'(', b')')?;
                    }
                    let idx = self.stmts.len();
                    self.emit(start, self.pos, StatementKind::Control, parent);
                    self.parse_body(idx)?;
                    if word_is_if {
                        self.maybe_else(parent)?;
                    }
                    return Ok(());
                }
                "do" => {
                    let start = self.pos;
                    self.pos += 2;
                    let idx = self.stmts.len();
                    self.emit(start, self.pos, StatementKind::Control, parent);
                    self.parse_body(idx)?;
                    self.skip_ws();
                    if self.word_at(self.pos) == Some("while") {
                        let wstart = self.pos;
                        self.pos += 5;
                        self.skip_ws();
                        if self.peek() == Some(b'(') {
                            self.scan_matching(b'(', b')')?;
                        }
                        self.emit(wstart, self.pos, StatementKind::Control, parent);
                        self.skip_ws();
                        if self.peek() == Some(b';') {
                            self.pos += 1;
                        }
                    }
                    return Ok(());
                }
                "else" => {
                    // An else without a tracked if; treat it as its own node.
                    return self.parse_else(parent);
                }
                "case" | "default" => {
                    // Labels carry no semantics here; skip through the colon.
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b':' {
                            break;
                        }
                    }
                    return Ok(());
                }
                _ => {}
            }
        }
        self.plain_statement(parent)
    }

    fn maybe_else(&mut self, parent: Option<usize>) -> Result<(), PdgError> {
        let save = self.pos;
        self.skip_ws();
        if self.word_at(self.pos) == Some("else") {
            self.parse_else(parent)
        } else {
            self.pos = save;
            Ok(())
        }
    }

    fn parse_else(&mut self, parent: Option<usize>) -> Result<(), PdgError> {
        let start = self.pos;
        self.pos += 4;
        let save = self.pos;
        self.skip_ws();
        if self.word_at(self.pos) == Some("if") {
            self.pos += 2;
            self.skip_ws();
            if self.peek() == Some(b'(') {
                self.scan_matching(b'(', b')')?;
            }
            let idx = self.stmts.len();
            self.emit(start, self.pos, StatementKind::Control, parent);
            self.parse_body(idx)?;
            return self.maybe_else(parent);
        }
        self.pos = save;
        let idx = self.stmts.len();
        self.emit(start, self.pos, StatementKind::Control, parent);
        self.parse_body(idx)
    }

    /// The single statement or block controlled by statement `ctrl`.
    fn parse_body(&mut self, ctrl: usize) -> Result<(), PdgError> {
        self.skip_ws();
        match self.peek() {
            None => Ok(()),
            Some(b'{') => {
                self.pos += 1;
                self.parse_block(Some(ctrl), true)
            }
            _ => self.parse_construct(Some(ctrl)),
        }
    }

    fn plain_statement(&mut self, parent: Option<usize>) -> Result<(), PdgError> {
        let start = self.pos;
        let mut paren_depth = 0i32;
        let mut brace_depth = 0i32;
        let mut seen_eq = false;
        let mut prev_nonws = 0u8;
        while let Some(b) = self.peek() {
            match b {
                b';' if paren_depth == 0 && brace_depth == 0 => {
                    self.pos += 1;
                    self.emit(start, self.pos, StatementKind::Other, parent);
                    self.fix_last_kind();
                    return Ok(());
                }
                b'(' => paren_depth += 1,
                b')' => paren_depth -= 1,
                b'{' => {
                    if seen_eq || brace_depth > 0 {
                        brace_depth += 1;
                    } else {
                        // A block opening mid-statement: end the statement here
                        // and let the block be parsed on its own.
                        self.emit(start, self.pos, StatementKind::Other, parent);
                        self.fix_last_kind();
                        return Ok(());
                    }
                }
                b'}' => {
                    if brace_depth > 0 {
                        brace_depth -= 1;
                    } else {
                        self.emit(start, self.pos, StatementKind::Other, parent);
                        self.fix_last_kind();
                        return Ok(());
                    }
                }
                b'=' => {
                    let next = self.masked.get(self.pos + 1).copied();
                    if next != Some(b'=') && !matches!(prev_nonws, b'=' | b'!' | b'<' | b'>') {
                        seen_eq = true;
                    }
                }
                _ => {}
            }
            if !b.is_ascii_whitespace() {
                prev_nonws = b;
            }
            self.pos += 1;
        }
        self.emit(start, self.pos, StatementKind::Other, parent);
        self.fix_last_kind();
        Ok(())
    }

    /// Reclassifies the just-emitted plain statement and recomputes def/use.
    fn fix_last_kind(&mut self) {
        let Some(stmt) = self.stmts.last_mut() else { return };
        let kind = classify_plain(&stmt.text, self.extra_types);
        if kind != stmt.kind {
            stmt.kind = kind;
            let (defs, uses) = def_use_impl(&stmt.text, kind, self.extra_types);
            stmt.defs = defs;
            stmt.uses = uses;
        }
    }
}

fn classify_plain(text: &str, extra_types: &[String]) -> StatementKind {
    let toks = lexer::tokenize(text);
    let Some(first) = toks.first() else {
        return StatementKind::Other;
    };
    if first.text == "return" {
        return StatementKind::Return;
    }
    if first.kind == TokKind::Ident
        && (DECL_KEYWORDS.contains(&first.text.as_str())
            || lexer::DEFAULT_TYPE_NAMES.contains(&first.text.as_str())
            || extra_types.iter().any(|t| t == &first.text))
    {
        return StatementKind::Declaration;
    }
    // Unknown-typedef declarations: ident, optional stars, ident, then a
    // declarator continuation. `pool_t *p = x;` and `pool_t p;` both match.
    if first.kind == TokKind::Ident && !is_reserved(&first.text, extra_types) {
        let mut j = 1;
        while toks.get(j).map(|t| t.text.as_str()) == Some("*") {
            j += 1;
        }
        if toks.get(j).map(|t| t.kind) == Some(TokKind::Ident) {
            let after = toks.get(j + 1).map(|t| t.text.as_str());
            if matches!(after, None | Some(";") | Some("=") | Some(",") | Some("[")) {
                return StatementKind::Declaration;
            }
        }
    }
    let mut depth = 0i32;
    for t in &toks {
        match t.text.as_str() {
            "(" => depth += 1,
            ")" => depth -= 1,
            s if depth == 0 && (is_assign_op(s) || s == "++" || s == "--") => {
                return StatementKind::Assignment;
            }
            _ => {}
        }
    }
    if first.kind == TokKind::Ident
        && !is_keyword_str(&first.text)
        && toks.get(1).map(|t| t.text.as_str()) == Some("(")
    {
        return StatementKind::Call;
    }
    StatementKind::Other
}

fn is_keyword_str(s: &str) -> bool {
    lexer::is_keyword(s)
}

/// Splits a function (or bare statement sequence) into statements. A leading
/// `ret name(params)` chunk before the body brace becomes a declaration-kind
/// header statement whose defs are the parameter names.
pub fn segment_statements(code: &str) -> Result<Vec<Statement>, PdgError> {
    segment_statements_with(code, &[])
}

pub fn segment_statements_with(
    code: &str,
    extra_types: &[String],
) -> Result<Vec<Statement>, PdgError> {
    let masked = lexer::mask_code(code);
    let mut seg = Segmenter {
        masked: masked.as_bytes(),
        original: code,
        extra_types,
        pos: 0,
        stmts: Vec::new(),
    };

    // Function form: header text, then a brace-enclosed body.
    let mut header_end = None;
    let mut depth = 0i32;
    for (i, b) in masked.bytes().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => depth -= 1,
            b';' if depth == 0 => break,
            b'{' if depth == 0 => {
                let head = &masked[..i];
                let first_word = head
                    .trim_start()
                    .split(|c: char| !c.is_ascii_alphanumeric() && c != '_')
                    .next()
                    .unwrap_or("");
                let control_head = matches!(
                    first_word,
                    "if" | "while" | "for" | "switch" | "do" | "else"
                );
                if head.contains('(') && !head.trim().is_empty() && !control_head {
                    header_end = Some(i);
                }
                break;
            }
            _ => {}
        }
    }

    if let Some(end) = header_end {
        seg.emit(0, end, StatementKind::Declaration, None);
        seg.pos = end + 1;
        seg.parse_block(None, true)?;
    } else {
        seg.parse_block(None, false)?;
    }
    Ok(seg.stmts)
}

// ---------------------------------------------------------------------------
// Def-use

/// Public entry matching the statement contract; recomputes from the
/// statement's own text and kind.
pub fn def_use(statement: &Statement) -> (BTreeSet<String>, BTreeSet<String>) {
    def_use_impl(&statement.text, statement.kind, &[])
}

fn def_use_impl(
    text: &str,
    kind: StatementKind,
    extra_types: &[String],
) -> (BTreeSet<String>, BTreeSet<String>) {
    let toks = lexer::tokenize(text);
    let candidate = |i: usize| -> Option<&str> {
        let t = toks.get(i)?;
        if t.kind != TokKind::Ident || is_reserved(&t.text, extra_types) {
            return None;
        }
        if toks.get(i + 1).map(|n| n.text.as_str()) == Some("(") {
            return None; // call position
        }
        if i > 0 {
            let prev = toks[i - 1].text.as_str();
            if prev == "." || prev == "->" {
                return None; // member access: only the base identifier counts
            }
        }
        Some(&t.text)
    };

    let mut defs: BTreeSet<String> = BTreeSet::new();
    let mut uses: BTreeSet<String> = BTreeSet::new();
    let mut def_positions: BTreeSet<usize> = BTreeSet::new();

    // Walks left from `i` over one lvalue expression to its base identifier.
    let lvalue_base = |mut j: isize| -> Option<usize> {
        while j >= 0 {
            let t = &toks[j as usize];
            match t.text.as_str() {
                "]" => {
                    let mut depth = 0i32;
                    while j >= 0 {
                        match toks[j as usize].text.as_str() {
                            "]" => depth += 1,
                            "[" => {
                                depth -= 1;
                                if depth == 0 {
                                    break;
                                }
                            }
                            _ => {}
                        }
                        j -= 1;
                    }
                    j -= 1;
                }
                ")" => {
                    let mut depth = 0i32;
                    while j >= 0 {
                        match toks[j as usize].text.as_str() {
                            ")" => depth += 1,
                            "(" => {
                                depth -= 1;
                                if depth == 0 {
                                    break;
                                }
                            }
                            _ => {}
                        }
                        j -= 1;
                    }
                    j -= 1;
                }
                _ if t.kind == TokKind::Ident => {
                    if j > 0 {
                        let prev = toks[j as usize - 1].text.as_str();
                        if prev == "." || prev == "->" {
                            j -= 2;
                            continue;
                        }
                    }
                    if is_reserved(&t.text, extra_types) {
                        return None;
                    }
                    return Some(j as usize);
                }
                "*" | "&" => j -= 1,
                _ => return None,
            }
        }
        None
    };

    if kind == StatementKind::Declaration {
        declaration_defs(&toks, &|i| candidate(i).is_some(), &mut defs, &mut def_positions);
    } else {
        for (i, t) in toks.iter().enumerate() {
            if is_assign_op(&t.text) {
                if let Some(base) = lvalue_base(i as isize - 1) {
                    let name = toks[base].text.clone();
                    if t.text != "=" {
                        uses.insert(name.clone());
                    }
                    defs.insert(name);
                    def_positions.insert(base);
                }
            }
            if t.text == "++" || t.text == "--" {
                let target = lvalue_base(i as isize - 1)
                    .or_else(|| (i + 1..toks.len()).find(|&j| candidate(j).is_some()));
                if let Some(base) = target {
                    if !is_reserved(&toks[base].text, extra_types) {
                        let name = toks[base].text.clone();
                        uses.insert(name.clone());
                        defs.insert(name);
                        def_positions.insert(base);
                    }
                }
            }
        }
    }

    for i in 0..toks.len() {
        if def_positions.contains(&i) {
            continue;
        }
        if let Some(name) = candidate(i) {
            uses.insert(name.to_string());
        }
    }
    (defs, uses)
}

/// Declaration defs: for a function header, the last identifier of each
/// parameter; otherwise the last identifier of each comma-separated
/// declarator before its initializer or array bound.
fn declaration_defs(
    toks: &[Token],
    candidate: &dyn Fn(usize) -> bool,
    defs: &mut BTreeSet<String>,
    def_positions: &mut BTreeSet<usize>,
) {
    // Function-header form: a call-position identifier before any '='.
    let mut header_paren = None;
    for (i, t) in toks.iter().enumerate() {
        if t.text == "=" {
            break;
        }
        if t.kind == TokKind::Ident
            && !lexer::is_keyword(&t.text)
            && toks.get(i + 1).map(|n| n.text.as_str()) == Some("(")
        {
            header_paren = Some(i + 1);
            break;
        }
    }
    if let Some(open) = header_paren {
        let mut depth = 0i32;
        let mut close = open;
        for (i, t) in toks.iter().enumerate().skip(open) {
            match t.text.as_str() {
                "(" => depth += 1,
                ")" => {
                    depth -= 1;
                    if depth == 0 {
                        close = i;
                        break;
                    }
                }
                _ => {}
            }
        }
        let mut chunk_last: Option<usize> = None;
        let mut depth = 0i32;
        for i in open + 1..close {
            match toks[i].text.as_str() {
                "(" | "[" => depth += 1,
                ")" | "]" => depth -= 1,
                "," if depth == 0 => {
                    if let Some(p) = chunk_last {
                        defs.insert(toks[p].text.clone());
                        def_positions.insert(p);
                    }
                    chunk_last = None;
                }
                _ => {
                    if candidate(i) {
                        chunk_last = Some(i);
                    }
                }
            }
        }
        if let Some(p) = chunk_last {
            defs.insert(toks[p].text.clone());
            def_positions.insert(p);
        }
        // Parameters are the only names a header introduces; type-ish
        // identifiers around them are not uses.
        for i in 0..toks.len() {
            if !def_positions.contains(&i) && candidate(i) {
                def_positions.insert(i); // suppressed below by the caller loop
            }
        }
        return;
    }

    // Ordinary declaration: split on top-level commas.
    let mut depth = 0i32;
    let mut boundary_hit = false; // '=' or '[' seen in current declarator
    let mut last_before_boundary: Option<usize> = None;
    let flush =
        |last: &mut Option<usize>, defs: &mut BTreeSet<String>, pos: &mut BTreeSet<usize>| {
            if let Some(p) = last.take() {
                defs.insert(toks[p].text.clone());
                pos.insert(p);
            }
        };
    for (i, t) in toks.iter().enumerate() {
        match t.text.as_str() {
            "(" | "{" => depth += 1,
            ")" | "}" => depth -= 1,
            "[" if depth == 0 => {
                boundary_hit = true;
                depth += 1;
            }
            "[" => depth += 1,
            "]" => depth -= 1,
            "=" if depth == 0 => boundary_hit = true,
            "," if depth == 0 => {
                flush(&mut last_before_boundary, defs, def_positions);
                boundary_hit = false;
            }
            _ => {
                if !boundary_hit && depth == 0 && candidate(i) {
                    last_before_boundary = Some(i);
                }
            }
        }
    }
    flush(&mut last_before_boundary, defs, def_positions);

    // Identifiers before the declared name are type words, not uses.
    if let Some(&first_def) = def_positions.iter().next() {
        for i in 0..first_def {
            if candidate(i) {
                def_positions.insert(i);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Graph construction

/// Data edges by nearest preceding definition, control edges from
/// control_parent; sorted and deduplicated.
pub fn build_pdg(statements: Vec<Statement>) -> Pdg {
    let mut edge_set: BTreeSet<Edge> = BTreeSet::new();
    for s in &statements {
        if let Some(p) = s.control_parent {
            edge_set.insert(Edge {
                src: p,
                dst: s.index,
                kind: EdgeKind::Control,
            });
        }
    }
    let mut last_def: HashMap<&str, usize> = HashMap::new();
    for s in &statements {
        for u in &s.uses {
            if let Some(&d) = last_def.get(u.as_str()) {
                edge_set.insert(Edge {
                    src: d,
                    dst: s.index,
                    kind: EdgeKind::Data,
                });
            }
        }
        for d in &s.defs {
            last_def.insert(d.as_str(), s.index);
        }
    }
    Pdg {
        edges: edge_set.into_iter().collect(),
        statements,
    }
}

/// Breadth-first context around the vulnerability lines over the undirected
/// union of both edge kinds, to depth k. The vulnerability lines themselves
/// are excluded from the result.
pub fn k_hop_context(
    pdg: &Pdg,
    vuln_lines: &VulnLines,
    k: usize,
) -> Result<VulnContext, PdgError> {
    if vuln_lines.entries.is_empty() {
        return Err(PdgError::EmptyVulnLines);
    }
    let mut seeds: Vec<usize> = Vec::new();
    let mut vuln_line_set: BTreeSet<usize> = BTreeSet::new();
    for entry in &vuln_lines.entries {
        vuln_line_set.insert(entry.line_no);
        let exact = pdg
            .statements
            .iter()
            .find(|s| s.line_no == entry.line_no)
            .or_else(|| {
                pdg.statements
                    .iter()
                    .find(|s| s.line_no <= entry.line_no && entry.line_no <= s.end_line_no)
            });
        match exact {
            Some(s) => seeds.push(s.index),
            None => log::warn!(
                "vuln line {} maps to no statement in {}",
                entry.line_no,
                vuln_lines.record_id
            ),
        }
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); pdg.statements.len()];
    for e in &pdg.edges {
        adj[e.src].push(e.dst);
        adj[e.dst].push(e.src);
    }

    let mut depth: Vec<Option<usize>> = vec![None; pdg.statements.len()];
    let mut queue = VecDeque::new();
    for &s in &seeds {
        if depth[s].is_none() {
            depth[s] = Some(0);
            queue.push_back(s);
        }
    }
    let mut reached: BTreeSet<usize> = BTreeSet::new();
    while let Some(n) = queue.pop_front() {
        let d = depth[n].unwrap();
        if d == k {
            continue;
        }
        for &m in &adj[n] {
            if depth[m].is_none() {
                depth[m] = Some(d + 1);
                reached.insert(m);
                queue.push_back(m);
            }
        }
    }

    let mut by_line: Vec<(usize, &str)> = Vec::new();
    for idx in reached {
        let s = &pdg.statements[idx];
        if vuln_line_set.contains(&s.line_no) {
            continue;
        }
        if by_line.iter().all(|(l, _)| *l != s.line_no) {
            by_line.push((s.line_no, &s.text));
        }
    }
    by_line.sort_by_key(|(l, _)| *l);
    Ok(VulnContext {
        record_id: vuln_lines.record_id.clone(),
        k,
        context_lines: by_line
            .into_iter()
            .map(|(line_no, text)| ContextLine {
                line_no,
                text: text.to_string(),
            })
            .collect(),
    })
}

/// JSON shape used by the `--emit-pdg` CLI flag.
pub fn pdg_to_json(pdg: &Pdg) -> serde_json::Value {
    serde_json::json!({
        "nodes": pdg.statements.iter().map(|s| serde_json::json!({
            "index": s.index,
            "line": s.line_no,
            "text": s.text,
            "kind": s.kind,
        })).collect::<Vec<_>>(),
        "edges": pdg.edges.iter().map(|e| serde_json::json!({
            "src": e.src,
            "dst": e.dst,
            "kind": e.kind,
        })).collect::<Vec<_>>(),
    })
}

// ---------------------------------------------------------------------------
// Synthetic functions for oracle testing

/// Generates a small deterministic C function from a seed: declarations,
/// assignments, compound updates, calls, and nested if/while blocks. Used to
/// cross-check the graph builder against brute-force oracles.
pub fn synthetic_function(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    out.push_str("static int synth_fn(int a, int b)\n{\n");
    let mut vars: Vec<String> = vec!["a".to_string(), "b".to_string()];
    let mut next_var = 0usize;
    let mut stmts_left = rng.gen_range(3..=24usize);

    fn expr(rng: &mut ChaCha8Rng, vars: &[String]) -> String {
        let v = |rng: &mut ChaCha8Rng| vars[rng.gen_range(0..vars.len())].clone();
        match rng.gen_range(0..5) {
            0 => v(rng),
            1 => rng.gen_range(0..100).to_string(),
            2 => format!("{} + {}", v(rng), v(rng)),
            3 => format!("{} * {}", v(rng), rng.gen_range(1..9)),
            _ => format!("get_val({})", v(rng)),
        }
    }

    fn simple(
        rng: &mut ChaCha8Rng,
        vars: &mut Vec<String>,
        next_var: &mut usize,
        indent: &str,
    ) -> String {
        match rng.gen_range(0..5) {
            0 => {
                let name = format!("v{}", *next_var);
                *next_var += 1;
                let e = expr(rng, vars);
                vars.push(name.clone());
                format!("{indent}int {name} = {e};\n")
            }
            1 => {
                let t = vars[rng.gen_range(0..vars.len())].clone();
                let e = expr(rng, vars);
                format!("{indent}{t} = {e};\n")
            }
            2 => {
                let t = vars[rng.gen_range(0..vars.len())].clone();
                let e = expr(rng, vars);
                format!("{indent}{t} += {e};\n")
            }
            3 => {
                let t = vars[rng.gen_range(0..vars.len())].clone();
                format!("{indent}{t}++;\n")
            }
            _ => {
                let e = expr(rng, vars);
                format!("{indent}use_val({e});\n")
            }
        }
    }

    while stmts_left > 0 {
        if stmts_left >= 3 && rng.gen_bool(0.25) {
            let head = if rng.gen_bool(0.5) { "if" } else { "while" };
            let cond_var = vars[rng.gen_range(0..vars.len())].clone();
            out.push_str(&format!(
                "    {head} ({cond_var} > {}) {{\n",
                rng.gen_range(0..50)
            ));
            stmts_left -= 1;
            let inner = rng.gen_range(1..=2usize.min(stmts_left));
            for _ in 0..inner {
                out.push_str(&simple(&mut rng, &mut vars, &mut next_var, "        "));
                stmts_left -= 1;
            }
            out.push_str("    }\n");
        } else {
            out.push_str(&simple(&mut rng, &mut vars, &mut next_var, "    "));
            stmts_left -= 1;
        }
    }
    out.push_str(&format!("    return {};\n}}\n", vars[vars.len() - 1]));
    out
}
