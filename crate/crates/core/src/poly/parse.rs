//! Recursive-descent parser for polynomial expressions.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary ('*' unary)*
//! unary  := ('+' | '-') unary | power
//! power  := atom ('^' INT)?
//! atom   := NUMBER | IDENT | '(' expr ')'
//! ```
//!
//! Numbers accept an optional fraction and exponent (`1.5e-3`). The Unicode
//! minus sign is accepted as `-`.

use std::sync::Arc;

use super::{PolyError, Polynomial, VarUniverse};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
    text: String,
}

fn lex(text: &str) -> Result<Vec<Token>, PolyError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' | '\u{2212}' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token {
                tok,
                col,
                text: c.to_string(),
            });
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| PolyError::Syntax {
                col,
                msg: format!("malformed number `{s}`"),
            })?;
            out.push(Token {
                tok: Tok::Num(v),
                col,
                text: s,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            out.push(Token {
                tok: Tok::Ident(s.clone()),
                col,
                text: s,
            });
            continue;
        }
        return Err(PolyError::Syntax {
            col,
            msg: format!("unexpected character `{c}`"),
        });
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    end_col: usize,
    universe: &'a Arc<VarUniverse>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |t| t.col)
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?)?;
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    acc = acc.sub(&self.term()?)?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.unary()?;
        while let Some(Tok::Star) = self.peek() {
            self.pos += 1;
            acc = acc.mul(&self.unary()?)?;
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(self.unary()?.neg())
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.pos += 1;
            let col = self.col();
            let Some(tok) = self.toks.get(self.pos).cloned() else {
                return Err(PolyError::Syntax {
                    col,
                    msg: "expected exponent after `^`".into(),
                });
            };
            self.pos += 1;
            let exp = match &tok.tok {
                Tok::Num(_) if tok.text.bytes().all(|b| b.is_ascii_digit()) => {
                    tok.text.parse::<u32>().map_err(|_| PolyError::InvalidExponent {
                        col,
                        text: tok.text.clone(),
                    })?
                }
                Tok::Num(_) => {
                    return Err(PolyError::InvalidExponent {
                        col,
                        text: tok.text.clone(),
                    })
                }
                Tok::Minus => {
                    let next = self.toks.get(self.pos).map_or("", |t| t.text.as_str());
                    return Err(PolyError::InvalidExponent {
                        col,
                        text: format!("-{next}"),
                    });
                }
                _ => {
                    return Err(PolyError::Syntax {
                        col,
                        msg: format!("expected integer exponent, found `{}`", tok.text),
                    })
                }
            };
            return base.pow(exp);
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, PolyError> {
        let col = self.col();
        let Some(tok) = self.toks.get(self.pos).cloned() else {
            return Err(PolyError::Syntax {
                col,
                msg: "unexpected end of expression".into(),
            });
        };
        self.pos += 1;
        match tok.tok {
            Tok::Num(v) => {
                if !v.is_finite() {
                    return Err(PolyError::NonFinite);
                }
                Ok(Polynomial::constant(self.universe, v))
            }
            Tok::Ident(name) => {
                let idx = self
                    .universe
                    .index_of(&name)
                    .ok_or(PolyError::UnknownVariable(name))?;
                Ok(Polynomial::var(self.universe, idx))
            }
            Tok::LParen => {
                let inner = self.expr()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(PolyError::Syntax {
                        col: self.col(),
                        msg: "expected `)`".into(),
                    }),
                }
            }
            _ => Err(PolyError::Syntax {
                col,
                msg: format!("unexpected `{}`", tok.text),
            }),
        }
    }
}

/// Parses an arithmetic expression over the universe's variable names.
pub fn parse_poly(text: &str, universe: &Arc<VarUniverse>) -> Result<Polynomial, PolyError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end_col: text.chars().count() + 1,
        universe,
    };
    let out = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(PolyError::Syntax {
            col: p.col(),
            msg: format!("unexpected `{}`", p.toks[p.pos].text),
        });
    }
    Ok(out)
}
