//! Tokenizer for the declarative surface. Keywords are matched
//! case-insensitively by the parser; identifiers stay case-sensitive.

use super::QueryError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    Float(f64),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Colon,
    Dot,
    Star,
    Hash,
    Plus,
    Minus,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: u32,
    pub col: u32,
}

pub fn tokenize(text: &str) -> Result<Vec<Token>, QueryError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0usize;
    let mut line = 1u32;
    let mut col = 1u32;

    macro_rules! push {
        ($tok:expr, $line:expr, $col:expr) => {
            tokens.push(Token {
                tok: $tok,
                line: $line,
                col: $col,
            })
        };
    }
    macro_rules! advance {
        ($n:expr) => {{
            pos += $n;
            col += $n as u32;
        }};
    }

    while pos < bytes.len() {
        let b = bytes[pos];
        let (tline, tcol) = (line, col);
        match b {
            b'\n' => {
                pos += 1;
                line += 1;
                col = 1;
            }
            b' ' | b'\t' | b'\r' => advance!(1),
            b'-' if bytes.get(pos + 1) == Some(&b'-') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b'(' => {
                advance!(1);
                push!(Tok::LParen, tline, tcol);
            }
            b')' => {
                advance!(1);
                push!(Tok::RParen, tline, tcol);
            }
            b'{' => {
                advance!(1);
                push!(Tok::LBrace, tline, tcol);
            }
            b'}' => {
                advance!(1);
                push!(Tok::RBrace, tline, tcol);
            }
            b'[' => {
                advance!(1);
                push!(Tok::LBracket, tline, tcol);
            }
            b']' => {
                advance!(1);
                push!(Tok::RBracket, tline, tcol);
            }
            b',' => {
                advance!(1);
                push!(Tok::Comma, tline, tcol);
            }
            b';' => {
                advance!(1);
                push!(Tok::Semi, tline, tcol);
            }
            b':' => {
                advance!(1);
                push!(Tok::Colon, tline, tcol);
            }
            b'.' => {
                advance!(1);
                push!(Tok::Dot, tline, tcol);
            }
            b'*' => {
                advance!(1);
                push!(Tok::Star, tline, tcol);
            }
            b'#' => {
                advance!(1);
                push!(Tok::Hash, tline, tcol);
            }
            b'+' => {
                advance!(1);
                push!(Tok::Plus, tline, tcol);
            }
            b'-' => {
                advance!(1);
                push!(Tok::Minus, tline, tcol);
            }
            b'=' => {
                advance!(1);
                push!(Tok::Eq, tline, tcol);
            }
            b'!' if bytes.get(pos + 1) == Some(&b'=') => {
                advance!(2);
                push!(Tok::Ne, tline, tcol);
            }
            b'<' => {
                if bytes.get(pos + 1) == Some(&b'=') {
                    advance!(2);
                    push!(Tok::Le, tline, tcol);
                } else if bytes.get(pos + 1) == Some(&b'>') {
                    advance!(2);
                    push!(Tok::Ne, tline, tcol);
                } else {
                    advance!(1);
                    push!(Tok::Lt, tline, tcol);
                }
            }
            b'>' => {
                if bytes.get(pos + 1) == Some(&b'=') {
                    advance!(2);
                    push!(Tok::Ge, tline, tcol);
                } else {
                    advance!(1);
                    push!(Tok::Gt, tline, tcol);
                }
            }
            b'"' => {
                let (s, consumed, newlines, endcol) = lex_string(&text[pos..], tline, tcol)?;
                pos += consumed;
                if newlines > 0 {
                    line += newlines;
                    col = endcol;
                } else {
                    col += consumed as u32;
                }
                push!(Tok::Str(s), tline, tcol);
            }
            b'0'..=b'9' => {
                let start = pos;
                let mut is_float = false;
                while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                    pos += 1;
                }
                if pos < bytes.len()
                    && bytes[pos] == b'.'
                    && bytes.get(pos + 1).is_some_and(|b| b.is_ascii_digit())
                {
                    is_float = true;
                    pos += 1;
                    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                        pos += 1;
                    }
                }
                if pos < bytes.len() && matches!(bytes[pos], b'e' | b'E') {
                    let mut look = pos + 1;
                    if matches!(bytes.get(look), Some(b'+' | b'-')) {
                        look += 1;
                    }
                    if bytes.get(look).is_some_and(|b| b.is_ascii_digit()) {
                        is_float = true;
                        pos = look;
                        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                            pos += 1;
                        }
                    }
                }
                let lexeme = &text[start..pos];
                col += (pos - start) as u32;
                let tok = if is_float {
                    Tok::Float(
                        lexeme
                            .parse()
                            .map_err(|_| QueryError::syntax(tline, tcol, "a valid number"))?,
                    )
                } else {
                    Tok::Int(
                        lexeme
                            .parse()
                            .map_err(|_| QueryError::syntax(tline, tcol, "an integer in range"))?,
                    )
                };
                push!(tok, tline, tcol);
            }
            b'A'..=b'Z' | b'a'..=b'z' | b'_' | b'$' => {
                let start = pos;
                while pos < bytes.len()
                    && matches!(bytes[pos], b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'_' | b'$')
                {
                    pos += 1;
                }
                col += (pos - start) as u32;
                push!(Tok::Ident(text[start..pos].to_string()), tline, tcol);
            }
            _ => {
                return Err(QueryError::syntax(
                    tline,
                    tcol,
                    format!("a token, found {:?}", b as char),
                ))
            }
        }
    }
    tokens.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(tokens)
}

// Returns (value, bytes consumed, newlines crossed, column after).
fn lex_string(text: &str, line: u32, col: u32) -> Result<(String, usize, u32, u32), QueryError> {
    let bytes = text.as_bytes();
    debug_assert_eq!(bytes[0], b'"');
    let mut out = String::new();
    let mut i = 1usize;
    let mut newlines = 0u32;
    let mut curcol = col + 1;
    loop {
        match bytes.get(i) {
            None => return Err(QueryError::syntax(line, col, "a closing '\"'")),
            Some(b'"') => return Ok((out, i + 1, newlines, curcol + 1)),
            Some(b'\\') => {
                let esc = bytes
                    .get(i + 1)
                    .ok_or_else(|| QueryError::syntax(line, col, "an escape character"))?;
                match esc {
                    b'"' => out.push('"'),
                    b'\\' => out.push('\\'),
                    b'/' => out.push('/'),
                    b'n' => out.push('\n'),
                    b'r' => out.push('\r'),
                    b't' => out.push('\t'),
                    b'u' => {
                        let hex = text
                            .get(i + 2..i + 6)
                            .ok_or_else(|| QueryError::syntax(line, col, "4 hex digits"))?;
                        let cp = u32::from_str_radix(hex, 16)
                            .map_err(|_| QueryError::syntax(line, col, "4 hex digits"))?;
                        out.push(char::from_u32(cp).ok_or_else(|| {
                            QueryError::syntax(line, col, "a valid code point")
                        })?);
                        i += 4;
                        curcol += 4;
                    }
                    _ => return Err(QueryError::syntax(line, col, "a valid escape")),
                }
                i += 2;
                curcol += 2;
            }
            Some(b'\n') => {
                out.push('\n');
                i += 1;
                newlines += 1;
                curcol = 1;
            }
            Some(&b) if b < 0x80 => {
                out.push(b as char);
                i += 1;
                curcol += 1;
            }
            Some(&b) => {
                let len = match b {
                    0xC0..=0xDF => 2,
                    0xE0..=0xEF => 3,
                    0xF0..=0xF7 => 4,
                    _ => return Err(QueryError::syntax(line, col, "valid utf-8")),
                };
                let chunk = text
                    .get(i..i + len)
                    .ok_or_else(|| QueryError::syntax(line, col, "valid utf-8"))?;
                out.push_str(chunk);
                i += len;
                curcol += 1;
            }
        }
    }
}
