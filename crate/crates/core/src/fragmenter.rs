//! SQL tokenization, clause-boundary segmentation and terminality checks.
//!
//! A partial query is grown one clause fragment at a time. The boundary
//! keywords decide where fragments start and stop, where progressive
//! training prefixes are cut, and how a raw policy completion is clipped
//! back to a single fragment.

use std::cell::RefCell;
use std::fmt;

use rusqlite::Connection;
use thiserror::Error;

/// Markers that end a generated sequence besides a `;` terminator.
pub const END_OF_SEQUENCE_MARKERS: &[&str] = &["</s>", "<|endoftext|>", "<|im_end|>", "<|eot_id|>", "<eos>"];

const KEYWORDS: &[&str] = &[
    "ALL", "AND", "AS", "ASC", "BETWEEN", "BY", "CASE", "CAST", "COLLATE", "CREATE", "CROSS", "DELETE",
    "DESC", "DISTINCT", "DROP", "ELSE", "END", "ESCAPE", "EXCEPT", "EXISTS", "FROM", "FULL", "GLOB",
    "GROUP", "HAVING", "IN", "INNER", "INSERT", "INTERSECT", "INTO", "IS", "ISNULL", "JOIN", "LEFT",
    "LIKE", "LIMIT", "NATURAL", "NOT", "NOTNULL", "NULL", "OFFSET", "ON", "OR", "ORDER", "OUTER",
    "RECURSIVE", "REPLACE", "RIGHT", "SELECT", "SET", "TABLE", "THEN", "UNION", "UPDATE", "USING",
    "VALUES", "WHEN", "WHERE", "WITH",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizeError {
    #[error("unterminated string literal starting at byte {0}")]
    UnterminatedString(usize),
    #[error("unterminated quoted identifier starting at byte {0}")]
    UnterminatedIdentifier(usize),
    #[error("unterminated block comment starting at byte {0}")]
    UnterminatedComment(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Keyword,
    Identifier,
    Literal,
    Operator,
    Punctuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub kind: TokenKind,
    pub offset: usize,
}

impl Token<'_> {
    /// True for a keyword token whose uppercase form is `word`.
    pub fn is_keyword(&self, word: &str) -> bool {
        self.kind == TokenKind::Keyword && self.text.eq_ignore_ascii_case(word)
    }
}

/// Tokens of one SQL text. Whitespace and comments live in the gaps between
/// token spans, so `source` is always recoverable from the offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlTokenStream<'a> {
    source: &'a str,
    tokens: Vec<Token<'a>>,
}

impl<'a> SqlTokenStream<'a> {
    pub fn source(&self) -> &'a str {
        self.source
    }

    pub fn tokens(&self) -> &[Token<'a>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token<'a>> {
        self.tokens.iter()
    }

    /// Rebuilds the source from token spans and the gaps between them.
    pub fn reassemble(&self) -> String {
        let mut out = String::with_capacity(self.source.len());
        let mut pos = 0;
        for tok in &self.tokens {
            out.push_str(&self.source[pos..tok.offset]);
            out.push_str(tok.text);
            pos = tok.offset + tok.text.len();
        }
        out.push_str(&self.source[pos..]);
        out
    }
}

/// Uppercase clause-head keywords at which fragments are cut.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundarySet {
    keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoundarySetError {
    #[error("boundary keyword {0:?} is not uppercase")]
    NotUppercase(String),
    #[error("boundary keyword {0:?} listed twice")]
    Duplicate(String),
    #[error("boundary keyword {0:?} is not a recognised SQL keyword")]
    UnknownKeyword(String),
}

impl BoundarySet {
    pub const DEFAULT_KEYWORDS: &'static [&'static str] = &[
        "SELECT", "FROM", "WHERE", "GROUP", "HAVING", "ORDER", "LIMIT", "UNION", "INTERSECT", "EXCEPT",
        "JOIN", "AND", "OR", "ON",
    ];

    pub fn new<I, S>(keywords: I) -> Result<Self, BoundarySetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for kw in keywords {
            let kw = kw.into();
            if kw != kw.to_ascii_uppercase() {
                return Err(BoundarySetError::NotUppercase(kw));
            }
            if !KEYWORDS.contains(&kw.as_str()) {
                return Err(BoundarySetError::UnknownKeyword(kw));
            }
            if out.contains(&kw) {
                return Err(BoundarySetError::Duplicate(kw));
            }
            out.push(kw);
        }
        Ok(Self { keywords: out })
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn contains(&self, word: &str) -> bool {
        self.keywords.iter().any(|k| k.eq_ignore_ascii_case(word))
    }

    /// True when `tok` is a keyword token in this set.
    pub fn matches(&self, tok: &Token<'_>) -> bool {
        tok.kind == TokenKind::Keyword && self.contains(tok.text)
    }
}

impl Default for BoundarySet {
    fn default() -> Self {
        Self {
            keywords: Self::DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for BoundarySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.keywords.join(","))
    }
}

fn is_keyword(word: &str) -> bool {
    let upper = word.to_ascii_uppercase();
    KEYWORDS.binary_search(&upper.as_str()).is_ok()
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    tokens: Vec<Token<'a>>,
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, skip: usize) -> Option<char> {
        self.src[self.pos..].chars().nth(skip)
    }

    fn push(&mut self, start: usize, kind: TokenKind) {
        self.tokens.push(Token {
            text: &self.src[start..self.pos],
            kind,
            offset: start,
        });
    }

    fn advance_while(&mut self, pred: impl Fn(char) -> bool) {
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    /// Consumes a delimited span where a doubled closing delimiter escapes it.
    fn quoted(&mut self, close: char) -> bool {
        self.pos += 1;
        while let Some(c) = self.peek() {
            self.pos += c.len_utf8();
            if c == close {
                if close != ']' && self.peek() == Some(close) {
                    self.pos += 1;
                    continue;
                }
                return true;
            }
        }
        false
    }

    fn number(&mut self) {
        if self.peek() == Some('0') && matches!(self.peek_at(1), Some('x' | 'X')) {
            self.pos += 2;
            self.advance_while(|c| c.is_ascii_hexdigit());
            return;
        }
        self.advance_while(|c| c.is_ascii_digit());
        if self.peek() == Some('.') {
            self.pos += 1;
            self.advance_while(|c| c.is_ascii_digit());
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let sign = matches!(self.peek_at(1), Some('+' | '-'));
            let digit_at = if sign { 2 } else { 1 };
            if self.peek_at(digit_at).is_some_and(|c| c.is_ascii_digit()) {
                self.pos += digit_at;
                self.advance_while(|c| c.is_ascii_digit());
            }
        }
    }

    fn run(&mut self) -> Result<(), TokenizeError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                c if c.is_whitespace() => self.pos += c.len_utf8(),
                '-' if self.peek_at(1) == Some('-') => {
                    self.advance_while(|c| c != '\n');
                }
                '/' if self.peek_at(1) == Some('*') => match self.src[start + 2..].find("*/") {
                    Some(end) => self.pos = start + 2 + end + 2,
                    None => return Err(TokenizeError::UnterminatedComment(start)),
                },
                '\'' => {
                    if !self.quoted('\'') {
                        return Err(TokenizeError::UnterminatedString(start));
                    }
                    self.push(start, TokenKind::Literal);
                }
                '"' | '`' | '[' => {
                    let close = match c {
                        '[' => ']',
                        other => other,
                    };
                    if !self.quoted(close) {
                        return Err(TokenizeError::UnterminatedIdentifier(start));
                    }
                    self.push(start, TokenKind::Identifier);
                }
                c if c.is_ascii_digit() => {
                    self.number();
                    self.push(start, TokenKind::Literal);
                }
                '.' if self.peek_at(1).is_some_and(|c| c.is_ascii_digit()) => {
                    self.number();
                    self.push(start, TokenKind::Literal);
                }
                c if is_ident_start(c) => {
                    self.advance_while(is_ident_continue);
                    let word = &self.src[start..self.pos];
                    let after_dot = self.tokens.last().is_some_and(|t| t.text == ".");
                    let kind = if !after_dot && is_keyword(word) {
                        TokenKind::Keyword
                    } else {
                        TokenKind::Identifier
                    };
                    self.push(start, kind);
                }
                '?' | ':' | '@' | '$' => {
                    self.pos += 1;
                    self.advance_while(is_ident_continue);
                    self.push(start, TokenKind::Literal);
                }
                '(' | ')' | ',' | ';' | '.' => {
                    self.pos += 1;
                    self.push(start, TokenKind::Punctuation);
                }
                _ => {
                    let two = self.src.get(start..start + 2).unwrap_or("");
                    if matches!(two, "<=" | ">=" | "<>" | "!=" | "==" | "||" | "<<" | ">>") {
                        self.pos += 2;
                    } else {
                        self.pos += c.len_utf8();
                    }
                    self.push(start, TokenKind::Operator);
                }
            }
        }
        Ok(())
    }
}

/// Splits `sql` into tokens.
pub fn tokenize(sql: &str) -> Result<SqlTokenStream<'_>, TokenizeError> {
    let mut lexer = Lexer {
        src: sql,
        pos: 0,
        tokens: Vec::new(),
    };
    lexer.run()?;
    Ok(SqlTokenStream {
        source: sql,
        tokens: lexer.tokens,
    })
}

/// Like [`tokenize`], but an unterminated trailing span becomes one literal
/// token instead of an error. Used on raw model output, which is routinely
/// cut mid-string.
pub fn tokenize_lenient(sql: &str) -> SqlTokenStream<'_> {
    let mut lexer = Lexer {
        src: sql,
        pos: 0,
        tokens: Vec::new(),
    };
    if let Err(
        TokenizeError::UnterminatedString(at)
        | TokenizeError::UnterminatedIdentifier(at)
        | TokenizeError::UnterminatedComment(at),
    ) = lexer.run()
    {
        lexer.tokens.push(Token {
            text: &sql[at..],
            kind: TokenKind::Literal,
            offset: at,
        });
    }
    SqlTokenStream {
        source: sql,
        tokens: lexer.tokens,
    }
}

/// Byte offsets at which `sql` can be cut: immediately before every boundary
/// keyword, at any nesting depth. A cut leaving only whitespace in front of
/// it is skipped, so every prefix carries at least one token.
pub fn segment_at_boundaries(sql: &str, boundaries: &BoundarySet) -> Result<Vec<usize>, TokenizeError> {
    let stream = tokenize(sql)?;
    Ok(stream
        .iter()
        .filter(|t| boundaries.matches(t) && !sql[..t.offset].trim().is_empty())
        .map(|t| t.offset)
        .collect())
}

/// One progressive-generation training pair: `prefix + completion == gold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixPair {
    pub prefix: String,
    pub completion: String,
}

/// Cuts a gold query at every boundary, in ascending prefix length.
pub fn truncate_for_psg(gold_sql: &str, boundaries: &BoundarySet) -> Result<Vec<PrefixPair>, TokenizeError> {
    Ok(segment_at_boundaries(gold_sql, boundaries)?
        .into_iter()
        .map(|cut| PrefixPair {
            prefix: gold_sql[..cut].to_string(),
            completion: gold_sql[cut..].to_string(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub fragment: String,
    pub ends_sequence: bool,
}

/// Trims a raw completion to a single fragment.
///
/// The fragment keeps whatever clause it opens with and stops right before
/// the next boundary keyword. A `;` or an end-of-sequence marker seen before
/// that point ends the sequence; the terminator is kept, markers are dropped.
pub fn clip_continuation(raw: &str, boundaries: &BoundarySet) -> Clip {
    let (body, marker_hit) = match END_OF_SEQUENCE_MARKERS.iter().filter_map(|m| raw.find(m)).min() {
        Some(at) => (&raw[..at], true),
        None => (raw, false),
    };
    let stream = tokenize_lenient(body);
    let cut = stream
        .iter()
        .skip(1)
        .find(|t| boundaries.matches(t))
        .map(|t| t.offset);
    let terminator = stream
        .iter()
        .find(|t| t.kind == TokenKind::Punctuation && t.text == ";")
        .map(|t| t.offset);

    match (terminator, cut) {
        (Some(semi), cut) if cut.is_none_or(|c| semi < c) => Clip {
            fragment: body[..=semi].to_string(),
            ends_sequence: true,
        },
        (_, Some(c)) => Clip {
            fragment: body[..c].to_string(),
            ends_sequence: false,
        },
        _ => Clip {
            fragment: body.to_string(),
            ends_sequence: marker_hit,
        },
    }
}

/// True when an `ORDER` keyword appears outside every parenthesis.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let mut depth = 0i32;
    for tok in tokenize_lenient(sql).iter() {
        match tok.text {
            "(" => depth += 1,
            ")" => depth -= 1,
            _ if depth == 0 && tok.is_keyword("ORDER") => return true,
            _ => {}
        }
    }
    false
}

thread_local! {
    static PARSER: RefCell<Option<Connection>> = const { RefCell::new(None) };
}

fn is_parse_failure(message: &str) -> bool {
    message.contains("syntax error") || message.contains("incomplete input") || message.contains("unrecognized token")
}

/// True iff `text` is exactly one complete `SELECT` (or `WITH … SELECT`)
/// statement.
///
/// The statement is prepared, never run, against an empty in-memory
/// database. Unknown tables or columns are name-resolution failures that
/// happen after a full parse, so they still count as complete.
pub fn is_complete_sql(text: &str) -> bool {
    let stream = tokenize_lenient(text);
    let Some(first) = stream.tokens().first() else {
        return false;
    };
    if !(first.is_keyword("SELECT") || first.is_keyword("WITH")) {
        return false;
    }
    PARSER.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.is_none() {
            match Connection::open_in_memory() {
                Ok(conn) => *slot = Some(conn),
                Err(e) => {
                    log::error!("cannot open in-memory parser database: {e}");
                    return false;
                }
            }
        }
        let conn = slot.as_ref().expect("parser connection initialised above");
        let verdict = match conn.prepare(text) {
            Ok(_) => true,
            Err(rusqlite::Error::SqliteFailure(_, Some(msg))) => !is_parse_failure(&msg),
            Err(rusqlite::Error::SqlInputError { msg, .. }) => !is_parse_failure(&msg),
            Err(_) => false,
        };
        verdict
    })
}
