//! Unified-diff parsing and vulnerability-line extraction.
//!
//! A security patch's deleted lines are where the vulnerability lived. Corpora
//! store functions excised from their files, so hunk offsets are useless here;
//! deleted lines are instead matched back into the function by trimmed-text
//! equality, with context lines anchoring a forward cursor so that repeated
//! statements resolve to the occurrence the patch actually touched.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::VulnRecord;
use crate::lexer;

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("empty patch text")]
    Empty,
    #[error("malformed hunk header at line {line_no}: {text}")]
    MalformedHunkHeader { line_no: usize, text: String },
    #[error("hunk {hunk_index}: line counts disagree with header ({detail})")]
    CountMismatch { hunk_index: usize, detail: String },
    #[error("hunk {hunk_index}: truncated before header counts were satisfied")]
    TruncatedHunk { hunk_index: usize },
    #[error("line {line_no}: unexpected prefix {prefix:?} inside hunk")]
    BadLinePrefix { line_no: usize, prefix: char },
    #[error("no deleted line matches the function body")]
    NoVulnLines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LineTag {
    Context,
    Deleted,
    Added,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<(LineTag, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFile {
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedPatch {
    pub files: Vec<PatchFile>,
}

/// Deleted lines located inside the record's own code, 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnLines {
    pub record_id: String,
    pub entries: Vec<VulnLineEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnLineEntry {
    pub line_no: usize,
    pub text: String,
}

impl VulnLines {
    /// "line_no: text" per entry, the rendering used in prompts and
    /// localization outputs.
    pub fn rendered(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}: {}", e.line_no, e.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn line_numbers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.line_no).collect()
    }
}

/// Extraction result: matched entries plus deleted lines that matched nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct VulnLineExtraction {
    pub lines: VulnLines,
    pub unmatched: Vec<String>,
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize, usize)> {
    let rest = line.strip_prefix("@@ -")?;
    let (old_part, rest) = rest.split_once(" +")?;
    let (new_part, _) = rest.split_once(" @@")?;
    let parse_range = |s: &str| -> Option<(usize, usize)> {
        match s.split_once(',') {
            Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
            None => Some((s.parse().ok()?, 1)),
        }
    };
    let (old_start, old_len) = parse_range(old_part)?;
    let (new_start, new_len) = parse_range(new_part)?;
    Some((old_start, old_len, new_start, new_len))
}

/// Parses a GNU/git-style unified diff. File headers are optional: corpora
/// often store bare hunks, which attach to an anonymous file.
pub fn parse_unified_diff(text: &str) -> Result<UnifiedPatch, PatchError> {
    if text.trim().is_empty() {
        return Err(PatchError::Empty);
    }
    let lines: Vec<&str> = text.lines().collect();
    let mut files: Vec<PatchFile> = Vec::new();
    let mut hunk_counter = 0usize;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if let Some(old) = line.strip_prefix("--- ") {
            let new = lines
                .get(i + 1)
                .and_then(|l| l.strip_prefix("+++ "))
                .map(str::to_string);
            files.push(PatchFile {
                old_path: Some(old.trim().to_string()),
                new_path: new.map(|n| n.trim().to_string()),
                hunks: Vec::new(),
            });
            i += if files.last().unwrap().new_path.is_some() { 2 } else { 1 };
            continue;
        }
        if line.starts_with("@@") {
            let (old_start, old_len, new_start, new_len) = parse_hunk_header(line)
                .ok_or_else(|| PatchError::MalformedHunkHeader {
                    line_no: i + 1,
                    text: line.to_string(),
                })?;
            hunk_counter += 1;
            let hunk_index = hunk_counter;
            i += 1;
            let mut hunk = Hunk {
                old_start,
                old_len,
                new_start,
                new_len,
                lines: Vec::new(),
            };
            let (mut old_seen, mut new_seen) = (0usize, 0usize);
            while old_seen < old_len || new_seen < new_len {
                let body = lines.get(i).ok_or(PatchError::TruncatedHunk { hunk_index })?;
                let (tag, text) = match body.chars().next() {
                    Some(' ') | None => (LineTag::Context, body.get(1..).unwrap_or("")),
                    Some('-') => (LineTag::Deleted, &body[1..]),
                    Some('+') => (LineTag::Added, &body[1..]),
                    Some('\\') => {
                        // "\ No newline at end of file" markers carry no content.
                        i += 1;
                        continue;
                    }
                    Some(p) => {
                        return Err(PatchError::BadLinePrefix {
                            line_no: i + 1,
                            prefix: p,
                        })
                    }
                };
                match tag {
                    LineTag::Context => {
                        old_seen += 1;
                        new_seen += 1;
                    }
                    LineTag::Deleted => old_seen += 1,
                    LineTag::Added => new_seen += 1,
                }
                if old_seen > old_len || new_seen > new_len {
                    return Err(PatchError::CountMismatch {
                        hunk_index,
                        detail: format!(
                            "saw {old_seen}/{old_len} old and {new_seen}/{new_len} new lines"
                        ),
                    });
                }
                hunk.lines.push((tag, text.to_string()));
                i += 1;
            }
            if files.is_empty() {
                files.push(PatchFile {
                    old_path: None,
                    new_path: None,
                    hunks: Vec::new(),
                });
            }
            files.last_mut().unwrap().hunks.push(hunk);
            continue;
        }
        i += 1;
    }
    Ok(UnifiedPatch { files })
}

impl fmt::Display for UnifiedPatch {
    /// Canonical re-rendering: hunk bodies byte-for-byte, headers in the
    /// minimal "@@ -a,b +c,d @@" form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for file in &self.files {
            if let Some(old) = &file.old_path {
                writeln!(f, "--- {old}")?;
            }
            if let Some(new) = &file.new_path {
                writeln!(f, "+++ {new}")?;
            }
            for h in &file.hunks {
                writeln!(
                    f,
                    "@@ -{},{} +{},{} @@",
                    h.old_start, h.old_len, h.new_start, h.new_len
                )?;
                for (tag, text) in &h.lines {
                    let prefix = match tag {
                        LineTag::Context => ' ',
                        LineTag::Deleted => '-',
                        LineTag::Added => '+',
                    };
                    writeln!(f, "{prefix}{text}")?;
                }
            }
        }
        Ok(())
    }
}

/// True for deleted lines that carry no code: blank, or nothing but comment.
fn is_blank_or_comment(text: &str) -> bool {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return true;
    }
    if lexer::mask_code(trimmed).trim().is_empty() {
        return true;
    }
    // Interior block-comment continuation lines: "* words", no statement.
    trimmed.starts_with('*') && !trimmed.contains(';') && !trimmed.contains('=')
}

/// Maps the patch's deleted lines into the record's function-local line
/// numbers. Context lines advance a forward cursor; each deleted line takes
/// the first unused trimmed-equal code line at or after the cursor, falling
/// back to the first unused occurrence anywhere. Hunks run in old_start
/// order, so earlier hunks claim earlier occurrences.
pub fn extract_vuln_lines(
    patch: &UnifiedPatch,
    record: &VulnRecord,
) -> Result<VulnLineExtraction, PatchError> {
    let code_lines: Vec<String> = record.code.lines().map(|l| l.trim().to_string()).collect();
    let mut used = vec![false; code_lines.len()];
    let mut entries: Vec<VulnLineEntry> = Vec::new();
    let mut unmatched: Vec<String> = Vec::new();

    for file in &patch.files {
        let mut cursor = 0usize;
        let mut hunks: Vec<&Hunk> = file.hunks.iter().collect();
        hunks.sort_by_key(|h| h.old_start);
        for hunk in hunks {
            for (tag, text) in &hunk.lines {
                let trimmed = text.trim();
                match tag {
                    LineTag::Added => {}
                    LineTag::Context => {
                        if let Some(idx) = (cursor..code_lines.len())
                            .find(|&i| code_lines[i] == trimmed)
                        {
                            cursor = idx + 1;
                        }
                    }
                    LineTag::Deleted => {
                        if is_blank_or_comment(text) {
                            continue;
                        }
                        let found = (cursor..code_lines.len())
                            .find(|&i| !used[i] && code_lines[i] == trimmed)
                            .or_else(|| {
                                (0..code_lines.len())
                                    .find(|&i| !used[i] && code_lines[i] == trimmed)
                            });
                        match found {
                            Some(idx) => {
                                used[idx] = true;
                                cursor = idx + 1;
                                entries.push(VulnLineEntry {
                                    line_no: idx + 1,
                                    text: code_lines[idx].clone(),
                                });
                            }
                            None => unmatched.push(trimmed.to_string()),
                        }
                    }
                }
            }
        }
    }

    if entries.is_empty() {
        return Err(PatchError::NoVulnLines);
    }
    entries.sort_by_key(|e| e.line_no);
    Ok(VulnLineExtraction {
        lines: VulnLines {
            record_id: record.record_id.clone(),
            entries,
        },
        unmatched,
    })
}
