//! Tokenizer for the supported SQL subset.
//!
//! Whitespace and comments (`-- ...` and `/* ... */`) are dropped, so the
//! token count of a statement does not depend on its formatting.

use super::SqlError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    /// Bare identifier or keyword.
    Word,
    /// `"name"`, `` `name` `` or `[name]`.
    QuotedIdent,
    Number,
    /// Single-quoted string literal, stored unescaped.
    String,
    Symbol,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub offset: usize,
}

impl Token {
    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Word && self.text.eq_ignore_ascii_case(kw)
    }

    pub fn is_symbol(&self, sym: &str) -> bool {
        self.kind == TokenKind::Symbol && self.text == sym
    }
}

pub fn tokenize(sql: &str) -> Result<Vec<Token>, SqlError> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let close = sql[i + 2..]
                .find("*/")
                .ok_or_else(|| SqlError::parse(i, "unterminated block comment"))?;
            i += close + 4;
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == b'_' || c >= 0x80 {
            while i < bytes.len()
                && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'$' || bytes[i] >= 0x80)
            {
                i += 1;
            }
            tokens.push(Token { kind: TokenKind::Word, text: sql[start..i].to_string(), offset: start });
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            tokens.push(Token { kind: TokenKind::Number, text: sql[start..i].to_string(), offset: start });
            continue;
        }
        match c {
            b'\'' => {
                let (text, end) = read_quoted(sql, i, b'\'')?;
                tokens.push(Token { kind: TokenKind::String, text, offset: start });
                i = end;
            }
            b'"' | b'`' => {
                let (text, end) = read_quoted(sql, i, c)?;
                tokens.push(Token { kind: TokenKind::QuotedIdent, text, offset: start });
                i = end;
            }
            b'[' => {
                let close = sql[i + 1..]
                    .find(']')
                    .ok_or_else(|| SqlError::parse(i, "unterminated bracket identifier"))?;
                tokens.push(Token {
                    kind: TokenKind::QuotedIdent,
                    text: sql[i + 1..i + 1 + close].to_string(),
                    offset: start,
                });
                i += close + 2;
            }
            _ => {
                let two = sql.get(i..i + 2).unwrap_or("");
                let sym = match two {
                    "<=" | ">=" | "<>" | "!=" | "==" | "||" => two,
                    _ => match c {
                        b',' | b'.' | b'(' | b')' | b'*' | b'+' | b'-' | b'/' | b'%' | b'=' | b'<' | b'>'
                        | b';' => &sql[i..i + 1],
                        _ => {
                            return Err(SqlError::parse(i, format!("unexpected character {:?}", c as char)));
                        }
                    },
                };
                tokens.push(Token { kind: TokenKind::Symbol, text: sym.to_string(), offset: start });
                i += sym.len();
            }
        }
    }
    Ok(tokens)
}

/// Reads a quoted run starting at `start` (which holds the quote). A doubled
/// quote inside the run stands for one literal quote.
fn read_quoted(sql: &str, start: usize, quote: u8) -> Result<(String, usize), SqlError> {
    let bytes = sql.as_bytes();
    let mut out = String::new();
    let mut i = start + 1;
    let mut run = i;
    loop {
        if i >= bytes.len() {
            return Err(SqlError::parse(start, "unterminated quoted text"));
        }
        if bytes[i] == quote {
            out.push_str(&sql[run..i]);
            if bytes.get(i + 1) == Some(&quote) {
                out.push(quote as char);
                i += 2;
                run = i;
                continue;
            }
            return Ok((out, i + 1));
        }
        i += 1;
    }
}

/// Number of lexer tokens in `sql`, ignoring whitespace and comments.
pub fn token_count(sql: &str) -> Result<usize, SqlError> {
    Ok(tokenize(sql)?.len())
}
