//! Lightweight token scanner for C-like source.
//!
//! The rest of the crate never parses C properly; it works on token streams
//! and on a masked copy of the source where string/char literals and comments
//! are blanked out. Masking preserves byte offsets and line structure, so
//! positions computed on the masked text are valid in the original.

/// Token categories. Operators longer than one byte (`+=`, `->`, ...) are a
/// single `Punct` token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokKind {
    Ident,
    Number,
    Str,
    CharLit,
    Punct,
}

/// One token with its byte range in the original source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokKind,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// C keywords that never act as variable identifiers.
pub const C_KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while", "_Bool", "bool", "true", "false", "NULL",
];

/// Typedef names treated as types by default; callers can extend the list.
pub const DEFAULT_TYPE_NAMES: &[&str] = &[
    "size_t", "ssize_t", "ptrdiff_t", "intptr_t", "uintptr_t", "wchar_t", "va_list", "FILE",
    "int8_t", "int16_t", "int32_t", "int64_t", "uint8_t", "uint16_t", "uint32_t", "uint64_t",
    "u8", "u16", "u32", "u64", "s8", "s16", "s32", "s64",
];

pub fn is_keyword(s: &str) -> bool {
    C_KEYWORDS.contains(&s)
}

/// True for keywords and known type names: tokens that never name a variable.
pub fn is_reserved(s: &str, extra_types: &[String]) -> bool {
    is_keyword(s) || DEFAULT_TYPE_NAMES.contains(&s) || extra_types.iter().any(|t| t == s)
}

pub fn is_valid_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_') && !is_keyword(s)
}

const MULTI_PUNCT: &[&str] = &[
    "<<=", ">>=", "...", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=",
    "-=", "*=", "/=", "%=", "&=", "|=", "^=",
];

/// Returns a same-length copy with comment bodies and literal contents
/// replaced by spaces. Quote characters survive as literal markers; newlines
/// survive everywhere so line numbers stay aligned. Preprocessor lines are
/// blanked entirely.
pub fn mask_code(code: &str) -> String {
    #[derive(PartialEq)]
    enum St {
        Normal,
        LineComment,
        BlockComment,
        Str,
        Chr,
    }
    let bytes = code.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut st = St::Normal;
    let mut escaped = false;
    let mut at_line_start = true;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let next = bytes.get(i + 1).copied();
        match st {
            St::Normal => {
                if at_line_start && b == b'#' {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        out.push(b' ');
                        i += 1;
                    }
                    continue;
                }
                match (b, next) {
                    (b'/', Some(b'/')) => {
                        st = St::LineComment;
                        out.push(b' ');
                    }
                    (b'/', Some(b'*')) => {
                        st = St::BlockComment;
                        out.push(b' ');
                        out.push(b' ');
                        i += 2;
                        at_line_start = false;
                        continue;
                    }
                    (b'"', _) => {
                        st = St::Str;
                        out.push(b'"');
                    }
                    (b'\'', _) => {
                        st = St::Chr;
                        out.push(b'\'');
                    }
                    _ => out.push(b),
                }
            }
            St::LineComment => {
                if b == b'\n' {
                    st = St::Normal;
                    out.push(b'\n');
                } else {
                    out.push(b' ');
                }
            }
            St::BlockComment => {
                if b == b'*' && next == Some(b'/') {
                    st = St::Normal;
                    out.push(b' ');
                    out.push(b' ');
                    i += 2;
                    at_line_start = false;
                    continue;
                }
                out.push(if b == b'\n' { b'\n' } else { b' ' });
            }
            St::Str | St::Chr => {
                let quote = if st == St::Str { b'"' } else { b'\'' };
                if escaped {
                    escaped = false;
                    out.push(if b == b'\n' { b'\n' } else { b' ' });
                } else if b == b'\\' {
                    escaped = true;
                    out.push(b' ');
                } else if b == quote {
                    st = St::Normal;
                    out.push(quote);
                } else {
                    out.push(if b == b'\n' { b'\n' } else { b' ' });
                }
            }
        }
        at_line_start = b == b'\n';
        i += 1;
    }
    String::from_utf8(out).expect("masking only writes ascii over ascii")
}

/// Tokenizes C-like source. String and char literals come through as single
/// tokens carrying their original text; comments and preprocessor lines are
/// dropped.
pub fn tokenize(code: &str) -> Vec<Token> {
    let masked = mask_code(code);
    let mb = masked.as_bytes();
    let ob = code.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < mb.len() {
        let b = mb[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if b == b'"' || b == b'\'' {
            // Literal contents are masked; find the closing marker.
            let quote = b;
            let mut j = i + 1;
            while j < mb.len() && mb[j] != quote {
                j += 1;
            }
            let end = (j + 1).min(mb.len());
            toks.push(Token {
                kind: if quote == b'"' { TokKind::Str } else { TokKind::CharLit },
                text: String::from_utf8_lossy(&ob[i..end]).into_owned(),
                start: i,
                end,
            });
            i = end;
            continue;
        }
        if b.is_ascii_alphabetic() || b == b'_' {
            let mut j = i + 1;
            while j < mb.len() && (mb[j].is_ascii_alphanumeric() || mb[j] == b'_') {
                j += 1;
            }
            toks.push(Token {
                kind: TokKind::Ident,
                text: String::from_utf8_lossy(&ob[i..j]).into_owned(),
                start: i,
                end: j,
            });
            i = j;
            continue;
        }
        if b.is_ascii_digit() {
            let mut j = i + 1;
            while j < mb.len()
                && (mb[j].is_ascii_alphanumeric() || mb[j] == b'.' || mb[j] == b'_')
            {
                j += 1;
            }
            toks.push(Token {
                kind: TokKind::Number,
                text: String::from_utf8_lossy(&ob[i..j]).into_owned(),
                start: i,
                end: j,
            });
            i = j;
            continue;
        }
        let rest = &masked[i..];
        let mut matched = 1;
        for op in MULTI_PUNCT {
            if rest.starts_with(op) {
                matched = op.len();
                break;
            }
        }
        toks.push(Token {
            kind: TokKind::Punct,
            text: String::from_utf8_lossy(&ob[i..i + matched]).into_owned(),
            start: i,
            end: i + matched,
        });
        i += matched;
    }
    toks
}

/// Token texts only, for stream comparisons.
pub fn token_texts(code: &str) -> Vec<String> {
    tokenize(code).into_iter().map(|t| t.text).collect()
}

/// 1-based line number of a byte offset.
pub fn line_of_offset(code: &str, offset: usize) -> usize {
    code.as_bytes()[..offset.min(code.len())]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1
}
