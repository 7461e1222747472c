use alloc::string::String;
use alloc::vec::Vec;

use super::ParseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Keyword {
    Select,
    From,
    Where,
    And,
    Insert,
    Into,
    Values,
    Update,
    Set,
    Delete,
    Create,
    Table,
    Drop,
    Replication,
    Int,
    Text,
}

const KEYWORDS: &[(&str, Keyword)] = &[
    ("SELECT", Keyword::Select),
    ("FROM", Keyword::From),
    ("WHERE", Keyword::Where),
    ("AND", Keyword::And),
    ("INSERT", Keyword::Insert),
    ("INTO", Keyword::Into),
    ("VALUES", Keyword::Values),
    ("UPDATE", Keyword::Update),
    ("SET", Keyword::Set),
    ("DELETE", Keyword::Delete),
    ("CREATE", Keyword::Create),
    ("TABLE", Keyword::Table),
    ("DROP", Keyword::Drop),
    ("REPLICATION", Keyword::Replication),
    ("INT", Keyword::Int),
    ("TEXT", Keyword::Text),
];

impl Keyword {
    pub(super) fn name(self) -> &'static str {
        KEYWORDS.iter().find(|(_, k)| *k == self).map(|(s, _)| *s).unwrap_or("?")
    }
}

/// True if `word` is reserved (case-insensitive).
pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.iter().any(|(s, _)| s.eq_ignore_ascii_case(word))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) enum Tok {
    Keyword(Keyword),
    Ident(String),
    /// Unsigned digit run; sign and range are handled by the parser.
    Number(String),
    Str(String),
    LParen,
    RParen,
    Comma,
    Semi,
    Star,
    Dot,
    Minus,
    Eq,
    Lt,
    Gt,
    Le,
    Ge,
    Ne,
}

impl Tok {
    pub(super) fn describe(&self) -> String {
        use alloc::format;
        match self {
            Tok::Keyword(k) => String::from(k.name()),
            Tok::Ident(s) => format!("identifier {s}"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Str(_) => String::from("string literal"),
            other => String::from(symbol(other)),
        }
    }
}

pub(super) fn symbol(t: &Tok) -> &'static str {
    match t {
        Tok::LParen => "(",
        Tok::RParen => ")",
        Tok::Comma => ",",
        Tok::Semi => ";",
        Tok::Star => "*",
        Tok::Dot => ".",
        Tok::Minus => "-",
        Tok::Eq => "=",
        Tok::Lt => "<",
        Tok::Gt => ">",
        Tok::Le => "<=",
        Tok::Ge => ">=",
        Tok::Ne => "<>",
        _ => "?",
    }
}

/// Token plus its 1-based byte offset.
#[derive(Debug, Clone)]
pub(super) struct Spanned {
    pub tok: Tok,
    pub offset: usize,
}

pub(super) fn tokenize(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let offset = i + 1;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let tok = if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &text[start..i];
            match KEYWORDS.iter().find(|(s, _)| s.eq_ignore_ascii_case(word)) {
                Some((_, kw)) => Tok::Keyword(*kw),
                None => Tok::Ident(String::from(word)),
            }
        } else if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
                return Err(ParseError::Syntax {
                    offset: i + 1,
                    expected: alloc::vec![String::from("delimiter after number")],
                    found: String::from("identifier character"),
                });
            }
            Tok::Number(String::from(&text[start..i]))
        } else if c == b'\'' {
            i += 1;
            let mut s = String::new();
            let mut seg = i;
            loop {
                if i >= bytes.len() {
                    return Err(ParseError::Syntax {
                        offset: text.len() + 1,
                        expected: alloc::vec![String::from("'")],
                        found: String::from("end of input"),
                    });
                }
                if bytes[i] == b'\'' {
                    s.push_str(&text[seg..i]);
                    if bytes.get(i + 1) == Some(&b'\'') {
                        s.push('\'');
                        i += 2;
                        seg = i;
                    } else {
                        i += 1;
                        break;
                    }
                } else {
                    i += 1;
                }
            }
            Tok::Str(s)
        } else {
            i += 1;
            match c {
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                b',' => Tok::Comma,
                b';' => Tok::Semi,
                b'*' => Tok::Star,
                b'.' => Tok::Dot,
                b'-' => Tok::Minus,
                b'=' => Tok::Eq,
                b'<' => match bytes.get(i) {
                    Some(b'=') => {
                        i += 1;
                        Tok::Le
                    }
                    Some(b'>') => {
                        i += 1;
                        Tok::Ne
                    }
                    _ => Tok::Lt,
                },
                b'>' => {
                    if bytes.get(i) == Some(&b'=') {
                        i += 1;
                        Tok::Ge
                    } else {
                        Tok::Gt
                    }
                }
                _ => {
                    let ch = text[start..].chars().next().unwrap_or('?');
                    return Err(ParseError::Syntax {
                        offset,
                        expected: alloc::vec![String::from("token")],
                        found: alloc::format!("character {ch:?}"),
                    });
                }
            }
        };
        out.push(Spanned { tok, offset });
    }
    Ok(out)
}
