use std::fmt;

use super::{CmpOp, Pos, QueryError};

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Ident(String),
    Int(i64),
    Decimal(f64),
    Str(String),
    Assign,
    LParen,
    RParen,
    Comma,
    Semi,
    LBracket,
    RBracket,
    Dot,
    Hash,
    Cmp(CmpOp),
    If,
    Then,
    Else,
    Fi,
    Eval,
    Parametric,
    Expect,
    State,
    Rval,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Ident(s) => write!(f, "identifier `{s}`"),
            TokenKind::Int(i) => write!(f, "integer {i}"),
            TokenKind::Decimal(d) => write!(f, "number {d}"),
            TokenKind::Str(s) => write!(f, "string {s:?}"),
            TokenKind::Assign => f.write_str("`=`"),
            TokenKind::LParen => f.write_str("`(`"),
            TokenKind::RParen => f.write_str("`)`"),
            TokenKind::Comma => f.write_str("`,`"),
            TokenKind::Semi => f.write_str("`;`"),
            TokenKind::LBracket => f.write_str("`[`"),
            TokenKind::RBracket => f.write_str("`]`"),
            TokenKind::Dot => f.write_str("`.`"),
            TokenKind::Hash => f.write_str("`#`"),
            TokenKind::Cmp(op) => write!(f, "`{op}`"),
            TokenKind::If => f.write_str("`if`"),
            TokenKind::Then => f.write_str("`then`"),
            TokenKind::Else => f.write_str("`else`"),
            TokenKind::Fi => f.write_str("`fi`"),
            TokenKind::Eval => f.write_str("`eval`"),
            TokenKind::Parametric => f.write_str("`parametric`"),
            TokenKind::Expect => f.write_str("`E`"),
            TokenKind::State => f.write_str("`s`"),
            TokenKind::Rval => f.write_str("`rval`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub pos: Pos,
}

fn keyword(word: &str) -> Option<TokenKind> {
    Some(match word {
        "if" => TokenKind::If,
        "then" => TokenKind::Then,
        "else" => TokenKind::Else,
        "fi" => TokenKind::Fi,
        "eval" => TokenKind::Eval,
        "parametric" => TokenKind::Parametric,
        "E" => TokenKind::Expect,
        "s" => TokenKind::State,
        "rval" => TokenKind::Rval,
        _ => return None,
    })
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl Cursor<'_> {
    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn peek2(&self) -> Option<char> {
        let mut it = self.chars.clone();
        it.next();
        it.next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }
}

/// Splits query text into tokens. `--` starts a comment running to the end
/// of the line.
pub fn tokenize(source: &str) -> Result<Vec<Token>, QueryError> {
    let mut cur = Cursor {
        chars: source.chars().peekable(),
        line: 1,
        col: 1,
    };
    let mut tokens = Vec::new();
    while let Some(c) = cur.peek() {
        let pos = cur.pos();
        let single = |kind| Token { kind, pos };
        match c {
            c if c.is_whitespace() => {
                cur.bump();
            }
            '-' if cur.peek2() == Some('-') => {
                while let Some(c) = cur.peek() {
                    if c == '\n' {
                        break;
                    }
                    cur.bump();
                }
            }
            '-' if cur.peek2().is_some_and(|d| d.is_ascii_digit()) => {
                cur.bump();
                tokens.push(number(&mut cur, pos, true)?);
            }
            '0'..='9' => tokens.push(number(&mut cur, pos, false)?),
            '"' => {
                cur.bump();
                let mut text = String::new();
                loop {
                    match cur.bump() {
                        None | Some('\n') => {
                            return Err(QueryError::Lex {
                                pos,
                                message: "unterminated string literal".into(),
                            })
                        }
                        Some('"') => break,
                        Some('\\') => match cur.bump() {
                            Some(e @ ('"' | '\\')) => text.push(e),
                            Some('n') => text.push('\n'),
                            _ => {
                                return Err(QueryError::Lex {
                                    pos: cur.pos(),
                                    message: "invalid escape in string literal".into(),
                                })
                            }
                        },
                        Some(ch) => text.push(ch),
                    }
                }
                tokens.push(single(TokenKind::Str(text)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut word = String::new();
                while let Some(c) = cur.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        word.push(c);
                        cur.bump();
                    } else {
                        break;
                    }
                }
                let kind = keyword(&word).unwrap_or(TokenKind::Ident(word));
                tokens.push(single(kind));
            }
            '=' | '!' | '<' | '>' => {
                cur.bump();
                let followed_by_eq = cur.peek() == Some('=');
                let kind = match (c, followed_by_eq) {
                    ('=', true) => TokenKind::Cmp(CmpOp::Eq),
                    ('=', false) => TokenKind::Assign,
                    ('!', true) => TokenKind::Cmp(CmpOp::Ne),
                    ('<', true) => TokenKind::Cmp(CmpOp::Le),
                    ('<', false) => TokenKind::Cmp(CmpOp::Lt),
                    ('>', true) => TokenKind::Cmp(CmpOp::Ge),
                    ('>', false) => TokenKind::Cmp(CmpOp::Gt),
                    _ => {
                        return Err(QueryError::Lex {
                            pos,
                            message: "illegal character `!`".into(),
                        })
                    }
                };
                if followed_by_eq {
                    cur.bump();
                }
                tokens.push(single(kind));
            }
            _ => {
                let kind = match c {
                    '(' => TokenKind::LParen,
                    ')' => TokenKind::RParen,
                    ',' => TokenKind::Comma,
                    ';' => TokenKind::Semi,
                    '[' => TokenKind::LBracket,
                    ']' => TokenKind::RBracket,
                    '.' => TokenKind::Dot,
                    '#' => TokenKind::Hash,
                    other => {
                        return Err(QueryError::Lex {
                            pos,
                            message: format!("illegal character {other:?}"),
                        })
                    }
                };
                cur.bump();
                tokens.push(single(kind));
            }
        }
    }
    Ok(tokens)
}

fn number(cur: &mut Cursor<'_>, pos: Pos, negative: bool) -> Result<Token, QueryError> {
    let mut text = String::new();
    if negative {
        text.push('-');
    }
    let mut integral = true;
    let digits = |cur: &mut Cursor<'_>, text: &mut String| {
        while let Some(c) = cur.peek() {
            if c.is_ascii_digit() {
                text.push(c);
                cur.bump();
            } else {
                break;
            }
        }
    };
    digits(cur, &mut text);
    if cur.peek() == Some('.') && cur.peek2().is_some_and(|d| d.is_ascii_digit()) {
        integral = false;
        text.push('.');
        cur.bump();
        digits(cur, &mut text);
    }
    if matches!(cur.peek(), Some('e' | 'E')) {
        let mut look = cur.chars.clone();
        look.next();
        let mut next = look.next();
        if matches!(next, Some('+' | '-')) {
            next = look.next();
        }
        if next.is_some_and(|d| d.is_ascii_digit()) {
            integral = false;
            text.push('e');
            cur.bump();
            if let Some(sign @ ('+' | '-')) = cur.peek() {
                text.push(sign);
                cur.bump();
            }
            digits(cur, &mut text);
        }
    }
    let bad = || QueryError::Lex {
        pos,
        message: format!("numeric literal `{text}` out of range"),
    };
    let kind = if integral {
        TokenKind::Int(text.parse().map_err(|_| bad())?)
    } else {
        let v: f64 = text.parse().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
        TokenKind::Decimal(v)
    };
    Ok(Token { kind, pos })
}
