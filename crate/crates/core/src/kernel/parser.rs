//! Recursive-descent parser for kernel signatures and body expressions.
//!
//! The expression grammar, lowest precedence first:
//!
//! ```text
//! assignment := ident '=' expr
//! expr       := term (('+' | '-') term)*
//! term       := unary (('*' | '/') unary)*
//! unary      := '-' unary | primary
//! primary    := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! All operators are left-associative; unary minus binds tightest.

use std::fmt;

use super::{KernelError, Result};
use crate::tensor::DType;

/// Parameter type specifier: a concrete float type or a generic letter.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TypeSpec {
    Concrete(DType),
    Generic(char),
}

impl fmt::Display for TypeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeSpec::Concrete(DType::F32) => write!(f, "float32"),
            TypeSpec::Concrete(DType::F64) => write!(f, "float64"),
            TypeSpec::Generic(c) => write!(f, "{}", c),
        }
    }
}

/// One `type name` declaration from a kernel signature.
#[derive(Clone, PartialEq, Debug)]
pub struct ParamDecl {
    pub ty: TypeSpec,
    pub name: String,
}

impl fmt::Display for ParamDecl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.ty, self.name)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

/// Built-in functions callable from kernel bodies.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FuncName {
    Abs,
    Exp,
    Log,
    Tanh,
    Min,
    Max,
}

impl FuncName {
    fn lookup(name: &str) -> Option<(FuncName, usize)> {
        match name {
            "abs" => Some((FuncName::Abs, 1)),
            "exp" => Some((FuncName::Exp, 1)),
            "log" => Some((FuncName::Log, 1)),
            "tanh" => Some((FuncName::Tanh, 1)),
            "min" => Some((FuncName::Min, 2)),
            "max" => Some((FuncName::Max, 2)),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            FuncName::Abs => "abs",
            FuncName::Exp => "exp",
            FuncName::Log => "log",
            FuncName::Tanh => "tanh",
            FuncName::Min => "min",
            FuncName::Max => "max",
        }
    }
}

/// Body expression AST.
#[derive(Clone, PartialEq, Debug)]
pub enum Expr {
    Lit(f64),
    Ident(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(FuncName, Vec<Expr>),
}

impl Expr {
    /// Visit every identifier in the expression.
    pub fn for_each_ident(&self, f: &mut impl FnMut(&str)) {
        match self {
            Expr::Lit(_) => {}
            Expr::Ident(name) => f(name),
            Expr::Neg(inner) => inner.for_each_ident(f),
            Expr::Bin(_, lhs, rhs) => {
                lhs.for_each_ident(f);
                rhs.for_each_ident(f);
            }
            Expr::Call(_, args) => {
                for a in args {
                    a.for_each_ident(f);
                }
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized form; reparsing it yields a structurally equal AST.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => write!(f, "{:?}", v),
            Expr::Ident(name) => write!(f, "{}", name),
            Expr::Neg(inner) => write!(f, "(-{})", inner),
            Expr::Bin(op, lhs, rhs) => write!(f, "({} {} {})", lhs, op.symbol(), rhs),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.as_str())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{}", a)?;
                }
                write!(f, ")")
            }
        }
    }
}

/// The single top-level assignment of a kernel body.
#[derive(Clone, PartialEq, Debug)]
pub struct Assignment {
    pub target: String,
    pub value: Expr,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.target, self.value)
    }
}

#[derive(Clone, PartialEq, Debug)]
enum Tok {
    Ident(String),
    Num(f64),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
    Eq,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier '{}'", s),
            Tok::Num(v) => format!("number {}", v),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Eq => "'='".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn syntax(offset: usize, message: impl Into<String>) -> KernelError {
    KernelError::Syntax {
        offset,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' | '-' | '*' | '/' | '(' | ')' | ',' | '=' => {
                let tok = match c {
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    '*' => Tok::Star,
                    '/' => Tok::Slash,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    _ => Tok::Eq,
                };
                tokens.push(Token { tok, offset: start });
                i += 1;
            }
            '0'..='9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
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
                let value: f64 = text[start..i]
                    .parse()
                    .map_err(|_| syntax(start, format!("invalid number '{}'", &text[start..i])))?;
                tokens.push(Token {
                    tok: Tok::Num(value),
                    offset: start,
                });
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                tokens.push(Token {
                    tok: Tok::Ident(text[start..i].to_string()),
                    offset: start,
                });
            }
            other => return Err(syntax(start, format!("unexpected character '{}'", other))),
        }
    }
    Ok(tokens)
}

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
    end: usize,
}

impl<'t> Parser<'t> {
    fn new(tokens: &'t [Token], end: usize) -> Self {
        Parser { tokens, pos: 0, end }
    }

    fn peek(&self) -> Option<&'t Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<&'t Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.peek().map(|t| t.offset).unwrap_or(self.end)
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<usize> {
        match self.peek() {
            Some(t) if t.tok == want => {
                let off = t.offset;
                self.pos += 1;
                Ok(off)
            }
            Some(t) => Err(syntax(t.offset, format!("expected {} before {}", what, t.tok.describe()))),
            None => Err(syntax(self.end, format!("expected {} at end of input", what))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if matches!(self.peek().map(|t| &t.tok), Some(Tok::Minus)) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        let offset = self.here();
        let Some(token) = self.bump() else {
            return Err(syntax(offset, "expected expression at end of input"));
        };
        match token.tok.clone() {
            Tok::Num(v) => Ok(Expr::Lit(v)),
            Tok::Ident(name) => {
                if matches!(self.peek().map(|t| &t.tok), Some(Tok::LParen)) {
                    self.pos += 1;
                    let Some((func, arity)) = FuncName::lookup(&name) else {
                        return Err(syntax(offset, format!("unknown function '{}'", name)));
                    };
                    let mut args = vec![self.expr()?];
                    while matches!(self.peek().map(|t| &t.tok), Some(Tok::Comma)) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "')'")?;
                    if args.len() != arity {
                        return Err(syntax(
                            offset,
                            format!("{} takes {} argument(s), got {}", name, arity, args.len()),
                        ));
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    Ok(Expr::Ident(name))
                }
            }
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            other => Err(syntax(offset, format!("expected expression, found {}", other.describe()))),
        }
    }
}

/// Parse a comma-separated list of `type name` declarations.
pub fn parse_signature(text: &str) -> Result<Vec<ParamDecl>> {
    let tokens = lex(text)?;
    let mut parser = Parser::new(&tokens, text.len());
    let mut decls: Vec<ParamDecl> = Vec::new();
    if parser.peek().is_none() {
        return Ok(decls);
    }
    loop {
        let ty_offset = parser.here();
        let ty = match parser.bump().map(|t| t.tok.clone()) {
            Some(Tok::Ident(s)) => match s.as_str() {
                "float32" => TypeSpec::Concrete(DType::F32),
                "float64" => TypeSpec::Concrete(DType::F64),
                _ => {
                    let mut chars = s.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) if c.is_ascii_uppercase() => TypeSpec::Generic(c),
                        _ => {
                            return Err(KernelError::UnknownType {
                                offset: ty_offset,
                                text: s,
                            })
                        }
                    }
                }
            },
            Some(t) => return Err(syntax(ty_offset, format!("expected type specifier, found {}", t.describe()))),
            None => return Err(syntax(ty_offset, "expected type specifier at end of input")),
        };
        let name_offset = parser.here();
        let name = match parser.bump().map(|t| t.tok.clone()) {
            Some(Tok::Ident(s)) => s,
            Some(t) => return Err(syntax(name_offset, format!("expected parameter name, found {}", t.describe()))),
            None => return Err(syntax(name_offset, "expected parameter name at end of input")),
        };
        if decls.iter().any(|d| d.name == name) {
            return Err(KernelError::DuplicateParam(name));
        }
        decls.push(ParamDecl { ty, name });
        match parser.peek() {
            None => break,
            Some(t) if t.tok == Tok::Comma => {
                parser.pos += 1;
            }
            Some(t) => {
                return Err(syntax(t.offset, format!("expected ',' before {}", t.tok.describe())));
            }
        }
    }
    Ok(decls)
}

/// Parse a kernel body: exactly one `target = expr` assignment.
pub fn parse_expr(text: &str) -> Result<Assignment> {
    let tokens = lex(text)?;
    let mut parser = Parser::new(&tokens, text.len());
    let target_offset = parser.here();
    let target = match parser.bump().map(|t| t.tok.clone()) {
        Some(Tok::Ident(s)) => s,
        Some(t) => return Err(syntax(target_offset, format!("expected assignment target, found {}", t.describe()))),
        None => return Err(syntax(target_offset, "empty kernel body")),
    };
    parser.expect(Tok::Eq, "'='")?;
    let value = parser.expr()?;
    match parser.peek() {
        None => Ok(Assignment { target, value }),
        Some(t) if t.tok == Tok::Eq => Err(KernelError::MultipleAssignments { offset: t.offset }),
        Some(t) => Err(syntax(t.offset, format!("unexpected {} after expression", t.tok.describe()))),
    }
}
