//! Minimal expression language for scalar functions of `(x1..xn, z, p1..pn)`.
//!
//! Config files describe the right-hand side `f`, boundary data, metric
//! entries, augmented-tensor entries and the subsolution as strings in this
//! language. The grammar is a conventional infix calculator: `+ - * / ^`,
//! unary minus, parentheses, and the calls `sin cos exp log sqrt abs min max`.
//! `^` binds tighter than unary minus and associates to the right.
//!
//! Derivatives are taken by central finite differences on the evaluator, not
//! symbolically; the solver only ever needs pointwise partials.

use std::fmt::Write as _;

use thiserror::Error;

/// Variables recognized by the language, with zero-based coordinate indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Chart coordinate `x{i+1}`.
    X(usize),
    /// Function value slot `z`.
    Z,
    /// Gradient slot `p{i+1}`.
    P(usize),
}

impl std::fmt::Display for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Z => write!(f, "z"),
            Var::P(i) => write!(f, "p{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
}

impl Func {
    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }
}

/// One AST node; `offset` is the byte position in the source text used for
/// error reporting (synthesized nodes carry offset 0).
#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Parsed expression together with the dimension it was validated against.
#[derive(Debug, Clone)]
pub struct ExprAst {
    root: Node,
    n: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("`{name}` expects {expected} argument(s), got {got} (offset {offset})")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
        offset: usize,
    },
    #[error("domain error at offset {offset}: {message}")]
    Domain { offset: usize, message: String },
}

/// Variable bindings for evaluation. `x` and `p` must have length `n`.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub z: f64,
    pub p: &'a [f64],
}

impl<'a> Env<'a> {
    pub fn new(x: &'a [f64], z: f64, p: &'a [f64]) -> Self {
        Env { x, z, p }
    }

    /// Bindings for expressions that only reference `x` variables.
    pub fn x_only(x: &'a [f64]) -> Self {
        Env { x, z: 0.0, p: &[] }
    }

    fn get(&self, var: Var) -> f64 {
        match var {
            Var::X(i) => self.x[i],
            Var::Z => self.z,
            Var::P(i) => *self.p.get(i).unwrap_or(&0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<(Tok, usize), ExprError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::Eof, start));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_digit() || self.src[end] == b'.')
                {
                    end += 1;
                }
                // optional exponent
                if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e < self.src.len() && self.src[e].is_ascii_digit() {
                        while e < self.src.len() && self.src[e].is_ascii_digit() {
                            e += 1;
                        }
                        end = e;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..end]).unwrap();
                let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("invalid number `{text}`"),
                })?;
                self.pos = end;
                return Ok((Tok::Num(value), start));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[start..end]).unwrap().to_string();
                self.pos = end;
                return Ok((Tok::Ident(text), start));
            }
            other => {
                return Err(ExprError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{}`", other as char),
                })
            }
        };
        self.pos += 1;
        Ok((tok, start))
    }
}

// ---------------------------------------------------------------------------
// Parser (recursive descent)
// ---------------------------------------------------------------------------

struct Parser<'a> {
    lexer: Lexer<'a>,
    cur: (Tok, usize),
    n: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, n: usize) -> Result<Self, ExprError> {
        let mut lexer = Lexer::new(src);
        let cur = lexer.next()?;
        Ok(Parser { lexer, cur, n })
    }

    fn bump(&mut self) -> Result<(), ExprError> {
        self.cur = self.lexer.next()?;
        Ok(())
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let (op, offset) = match self.cur {
                (Tok::Plus, o) => (BinOp::Add, o),
                (Tok::Minus, o) => (BinOp::Sub, o),
                _ => break,
            };
            self.bump()?;
            let rhs = self.term()?;
            lhs = Node {
                kind: NodeKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            let (op, offset) = match self.cur {
                (Tok::Star, o) => (BinOp::Mul, o),
                (Tok::Slash, o) => (BinOp::Div, o),
                _ => break,
            };
            self.bump()?;
            let rhs = self.factor()?;
            lhs = Node {
                kind: NodeKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
        Ok(lhs)
    }

    // factor := '-' factor | power ; keeps `^` above unary minus.
    fn factor(&mut self) -> Result<Node, ExprError> {
        if let (Tok::Minus, offset) = self.cur {
            self.bump()?;
            let inner = self.factor()?;
            return Ok(Node {
                kind: NodeKind::Neg(Box::new(inner)),
                offset,
            });
        }
        self.power()
    }

    // power := atom ('^' factor)? ; right associative, exponent may be signed.
    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if let (Tok::Caret, offset) = self.cur {
            self.bump()?;
            let exponent = self.factor()?;
            return Ok(Node {
                kind: NodeKind::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)),
                offset,
            });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let (tok, offset) = self.cur.clone();
        match tok {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Node {
                    kind: NodeKind::Const(v),
                    offset,
                })
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.expr()?;
                match self.cur {
                    (Tok::RParen, _) => {
                        self.bump()?;
                        Ok(inner)
                    }
                    (_, o) => Err(ExprError::Syntax {
                        offset: o,
                        message: "expected `)`".into(),
                    }),
                }
            }
            Tok::Ident(name) => {
                self.bump()?;
                if let (Tok::LParen, _) = self.cur {
                    let func = Func::from_name(&name).ok_or_else(|| {
                        ExprError::UnknownIdentifier {
                            name: name.clone(),
                            offset,
                        }
                    })?;
                    self.bump()?;
                    let mut args = vec![self.expr()?];
                    while let (Tok::Comma, _) = self.cur {
                        self.bump()?;
                        args.push(self.expr()?);
                    }
                    match self.cur {
                        (Tok::RParen, _) => self.bump()?,
                        (_, o) => {
                            return Err(ExprError::Syntax {
                                offset: o,
                                message: "expected `)` or `,`".into(),
                            })
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(ExprError::ArityMismatch {
                            name: name.clone(),
                            expected: func.arity(),
                            got: args.len(),
                            offset,
                        });
                    }
                    Ok(Node {
                        kind: NodeKind::Call(func, args),
                        offset,
                    })
                } else {
                    self.variable(&name, offset)
                }
            }
            Tok::Eof => Err(ExprError::Syntax {
                offset,
                message: "unexpected end of expression".into(),
            }),
            other => Err(ExprError::Syntax {
                offset,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }

    fn variable(&self, name: &str, offset: usize) -> Result<Node, ExprError> {
        if name == "z" {
            return Ok(Node {
                kind: NodeKind::Var(Var::Z),
                offset,
            });
        }
        if name == "pi" {
            return Ok(Node {
                kind: NodeKind::Const(std::f64::consts::PI),
                offset,
            });
        }
        let indexed = |prefix: char| -> Option<usize> {
            name.strip_prefix(prefix)
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&i| i >= 1)
        };
        if let Some(i) = indexed('x') {
            if i > self.n {
                return Err(ExprError::UnknownIdentifier {
                    name: name.to_string(),
                    offset,
                });
            }
            return Ok(Node {
                kind: NodeKind::Var(Var::X(i - 1)),
                offset,
            });
        }
        if let Some(i) = indexed('p') {
            if i > self.n {
                return Err(ExprError::UnknownIdentifier {
                    name: name.to_string(),
                    offset,
                });
            }
            return Ok(Node {
                kind: NodeKind::Var(Var::P(i - 1)),
                offset,
            });
        }
        Err(ExprError::UnknownIdentifier {
            name: name.to_string(),
            offset,
        })
    }
}

/// Parse `text` against dimension `n`, rejecting out-of-range variables.
pub fn parse(text: &str, n: usize) -> Result<ExprAst, ExprError> {
    let mut parser = Parser::new(text, n)?;
    let root = parser.expr()?;
    match parser.cur {
        (Tok::Eof, _) => Ok(ExprAst { root, n }),
        (_, offset) => Err(ExprError::Syntax {
            offset,
            message: "trailing input".into(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn eval_node(node: &Node, env: &Env) -> Result<f64, ExprError> {
    let v = match &node.kind {
        NodeKind::Const(c) => *c,
        NodeKind::Var(var) => env.get(*var),
        NodeKind::Neg(inner) => -eval_node(inner, env)?,
        NodeKind::Binary(op, lhs, rhs) => {
            let a = eval_node(lhs, env)?;
            let b = eval_node(rhs, env)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(ExprError::Domain {
                            offset: node.offset,
                            message: "division by zero".into(),
                        });
                    }
                    a / b
                }
                BinOp::Pow => {
                    if b == 1.0 {
                        a
                    } else {
                        a.powf(b)
                    }
                }
            }
        }
        NodeKind::Call(func, args) => {
            let a = eval_node(&args[0], env)?;
            match func {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Log => {
                    if a <= 0.0 {
                        return Err(ExprError::Domain {
                            offset: node.offset,
                            message: format!("log of non-positive value {a}"),
                        });
                    }
                    a.ln()
                }
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(ExprError::Domain {
                            offset: node.offset,
                            message: format!("sqrt of negative value {a}"),
                        });
                    }
                    a.sqrt()
                }
                Func::Abs => a.abs(),
                Func::Min => a.min(eval_node(&args[1], env)?),
                Func::Max => a.max(eval_node(&args[1], env)?),
            }
        }
    };
    if v.is_nan() {
        return Err(ExprError::Domain {
            offset: node.offset,
            message: "evaluation produced NaN".into(),
        });
    }
    Ok(v)
}

/// Evaluate `ast` at the bindings in `env`.
pub fn eval(ast: &ExprAst, env: &Env) -> Result<f64, ExprError> {
    eval_node(&ast.root, env)
}

fn with_shift<T>(
    ast: &ExprAst,
    env: &Env,
    var: Var,
    delta: f64,
    k: impl FnOnce(&Env) -> Result<T, ExprError>,
) -> Result<T, ExprError> {
    let mut x: Vec<f64> = env.x.to_vec();
    let mut p: Vec<f64> = env.p.to_vec();
    let mut z = env.z;
    match var {
        Var::X(i) => x[i] += delta,
        Var::Z => z += delta,
        Var::P(i) => {
            if p.len() <= i {
                p.resize(ast.n, 0.0);
            }
            p[i] += delta;
        }
    }
    k(&Env::new(&x, z, &p))
}

/// Default step for first partials: `1e-6 * (1 + |value of var|)`.
pub fn default_step(env: &Env, var: Var) -> f64 {
    1e-6 * (1.0 + env.get(var).abs())
}

/// Central finite-difference partial derivative of `ast` w.r.t. `var`.
pub fn partial(ast: &ExprAst, var: Var, env: &Env, step: Option<f64>) -> Result<f64, ExprError> {
    let h = step.unwrap_or_else(|| default_step(env, var));
    let fwd = with_shift(ast, env, var, h, |e| eval(ast, e))?;
    let bwd = with_shift(ast, env, var, -h, |e| eval(ast, e))?;
    Ok((fwd - bwd) / (2.0 * h))
}

/// Step for second partials, balancing truncation against rounding for a
/// nested second-order central stencil.
pub fn second_step(env: &Env, var: Var) -> f64 {
    2e-4 * (1.0 + env.get(var).abs())
}

/// Central finite-difference second partial `d^2 ast / (d va d vb)`.
///
/// Uses the plain three-point stencil on the diagonal and nested central
/// first differences off it.
pub fn second_partial(
    ast: &ExprAst,
    va: Var,
    vb: Var,
    env: &Env,
    step: Option<f64>,
) -> Result<f64, ExprError> {
    if va == vb {
        let h = step.unwrap_or_else(|| second_step(env, va));
        let fwd = with_shift(ast, env, va, h, |e| eval(ast, e))?;
        let mid = eval(ast, env)?;
        let bwd = with_shift(ast, env, va, -h, |e| eval(ast, e))?;
        Ok((fwd - 2.0 * mid + bwd) / (h * h))
    } else {
        let ha = step.unwrap_or_else(|| second_step(env, va));
        let hb = step.unwrap_or_else(|| second_step(env, vb));
        let pp = with_shift(ast, env, va, ha, |e| {
            with_shift(ast, e, vb, hb, |e2| eval(ast, e2))
        })?;
        let pm = with_shift(ast, env, va, ha, |e| {
            with_shift(ast, e, vb, -hb, |e2| eval(ast, e2))
        })?;
        let mp = with_shift(ast, env, va, -ha, |e| {
            with_shift(ast, e, vb, hb, |e2| eval(ast, e2))
        })?;
        let mm = with_shift(ast, env, va, -ha, |e| {
            with_shift(ast, e, vb, -hb, |e2| eval(ast, e2))
        })?;
        Ok((pp - pm - mp + mm) / (4.0 * ha * hb))
    }
}

// ---------------------------------------------------------------------------
// Rendering, construction and inspection helpers
// ---------------------------------------------------------------------------

fn render_node(node: &Node, out: &mut String) {
    match &node.kind {
        NodeKind::Const(c) => {
            let _ = write!(out, "{c}");
        }
        NodeKind::Var(v) => {
            let _ = write!(out, "{v}");
        }
        NodeKind::Neg(inner) => {
            out.push_str("(-");
            render_node(inner, out);
            out.push(')');
        }
        NodeKind::Binary(op, lhs, rhs) => {
            out.push('(');
            render_node(lhs, out);
            out.push_str(match op {
                BinOp::Add => " + ",
                BinOp::Sub => " - ",
                BinOp::Mul => " * ",
                BinOp::Div => " / ",
                BinOp::Pow => " ^ ",
            });
            render_node(rhs, out);
            out.push(')');
        }
        NodeKind::Call(func, args) => {
            out.push_str(func.name());
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_node(a, out);
            }
            out.push(')');
        }
    }
}

fn nodes_equivalent(a: &Node, b: &Node) -> bool {
    match (&a.kind, &b.kind) {
        (NodeKind::Const(x), NodeKind::Const(y)) => x.to_bits() == y.to_bits(),
        (NodeKind::Var(x), NodeKind::Var(y)) => x == y,
        (NodeKind::Neg(x), NodeKind::Neg(y)) => nodes_equivalent(x, y),
        (NodeKind::Binary(o1, l1, r1), NodeKind::Binary(o2, l2, r2)) => {
            o1 == o2 && nodes_equivalent(l1, l2) && nodes_equivalent(r1, r2)
        }
        (NodeKind::Call(f1, a1), NodeKind::Call(f2, a2)) => {
            f1 == f2 && a1.len() == a2.len() && a1.iter().zip(a2).all(|(x, y)| nodes_equivalent(x, y))
        }
        _ => false,
    }
}

impl ExprAst {
    /// Dimension the expression was validated against.
    pub fn dimension(&self) -> usize {
        self.n
    }

    /// Fully parenthesized text form; `parse(render(ast))` reproduces an
    /// equivalent tree.
    pub fn render(&self) -> String {
        let mut out = String::new();
        render_node(&self.root, &mut out);
        out
    }

    /// Structural equality ignoring source offsets.
    pub fn equivalent(&self, other: &ExprAst) -> bool {
        self.n == other.n && nodes_equivalent(&self.root, &other.root)
    }

    /// True if the expression references `z` or any `p` variable.
    pub fn references_zp(&self) -> bool {
        fn walk(node: &Node) -> bool {
            match &node.kind {
                NodeKind::Var(Var::Z) | NodeKind::Var(Var::P(_)) => true,
                NodeKind::Var(_) | NodeKind::Const(_) => false,
                NodeKind::Neg(inner) => walk(inner),
                NodeKind::Binary(_, l, r) => walk(l) || walk(r),
                NodeKind::Call(_, args) => args.iter().any(walk),
            }
        }
        walk(&self.root)
    }

    /// Constant literal.
    pub fn constant(c: f64, n: usize) -> ExprAst {
        ExprAst {
            root: Node {
                kind: NodeKind::Const(c),
                offset: 0,
            },
            n,
        }
    }

    /// Single variable reference.
    pub fn variable(var: Var, n: usize) -> ExprAst {
        ExprAst {
            root: Node {
                kind: NodeKind::Var(var),
                offset: 0,
            },
            n,
        }
    }

    fn combine(op: BinOp, lhs: ExprAst, rhs: ExprAst) -> ExprAst {
        assert_eq!(lhs.n, rhs.n, "dimension mismatch in AST combination");
        ExprAst {
            n: lhs.n,
            root: Node {
                kind: NodeKind::Binary(op, Box::new(lhs.root), Box::new(rhs.root)),
                offset: 0,
            },
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(lhs: ExprAst, rhs: ExprAst) -> ExprAst {
        Self::combine(BinOp::Add, lhs, rhs)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(lhs: ExprAst, rhs: ExprAst) -> ExprAst {
        Self::combine(BinOp::Sub, lhs, rhs)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(lhs: ExprAst, rhs: ExprAst) -> ExprAst {
        Self::combine(BinOp::Mul, lhs, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(text: &str, n: usize, x: &[f64], z: f64, p: &[f64]) -> Result<f64, ExprError> {
        let ast = parse(text, n)?;
        eval(&ast, &Env::new(x, z, p))
    }

    #[test]
    fn polynomial_value() {
        let v = ev("x1^2 + x2^2", 2, &[1.0, 2.0], 0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(v, 5.0);
    }

    #[test]
    fn exp_times_gradient_slot() {
        let v = ev("exp(z) * p1", 2, &[0.0, 0.0], 0.0, &[3.0, 0.0]).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn caret_is_right_associative() {
        let v = ev("2^3^2", 1, &[0.0], 0.0, &[0.0]).unwrap();
        assert_eq!(v, 512.0);
    }

    #[test]
    fn min_of_two() {
        let v = ev("min(x1, x2)", 2, &[2.0, 1.0], 0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn unary_minus_binds_below_pow() {
        let v = ev("-x1^2", 1, &[3.0], 0.0, &[0.0]).unwrap();
        assert_eq!(v, -9.0);
        let v = ev("2^-1", 1, &[0.0], 0.0, &[0.0]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn pi_constant() {
        let v = ev("sin(pi/2)", 1, &[0.0], 0.0, &[0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_input_reports_offset() {
        let err = parse("x1 +", 2).unwrap_err();
        match err {
            ExprError::Syntax { offset, .. } => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_variable_rejected() {
        let err = parse("x3 + 1", 2).unwrap_err();
        assert!(matches!(err, ExprError::UnknownIdentifier { ref name, .. } if name == "x3"));
    }

    #[test]
    fn arity_mismatch_reported() {
        let err = parse("min(x1)", 2).unwrap_err();
        assert!(matches!(err, ExprError::ArityMismatch { expected: 2, got: 1, .. }));
        let err = parse("sin(x1, x2)", 2).unwrap_err();
        assert!(matches!(err, ExprError::ArityMismatch { expected: 1, got: 2, .. }));
    }

    #[test]
    fn log_of_zero_is_domain_error() {
        let err = ev("log(x1)", 1, &[0.0], 0.0, &[0.0]).unwrap_err();
        assert!(matches!(err, ExprError::Domain { .. }));
    }

    #[test]
    fn division_by_zero_is_domain_error() {
        let err = ev("1 / x1", 1, &[0.0], 0.0, &[0.0]).unwrap_err();
        assert!(matches!(err, ExprError::Domain { .. }));
    }

    #[test]
    fn partial_of_square() {
        let ast = parse("x1^2", 1).unwrap();
        let env = Env::new(&[3.0], 0.0, &[0.0]);
        let d = partial(&ast, Var::X(0), &env, None).unwrap();
        assert!((d - 6.0).abs() < 1e-6);
    }

    #[test]
    fn partial_of_exp_in_z() {
        let ast = parse("exp(z)", 1).unwrap();
        let env = Env::new(&[0.0], 0.0, &[0.0]);
        let d = partial(&ast, Var::Z, &env, None).unwrap();
        assert!((d - 1.0).abs() < 1e-6);
    }

    #[test]
    fn partial_wrt_absent_variable_is_exactly_zero() {
        let ast = parse("p1", 2).unwrap();
        let env = Env::new(&[0.5, 0.5], 0.0, &[2.0, 7.0]);
        let d = partial(&ast, Var::P(1), &env, None).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn second_partials_of_polynomial() {
        let ast = parse("x1^2 * x2 + x2^3", 2).unwrap();
        let env = Env::new(&[1.5, 2.0], 0.0, &[0.0, 0.0]);
        let dxx = second_partial(&ast, Var::X(0), Var::X(0), &env, None).unwrap();
        let dxy = second_partial(&ast, Var::X(0), Var::X(1), &env, None).unwrap();
        let dyy = second_partial(&ast, Var::X(1), Var::X(1), &env, None).unwrap();
        assert!((dxx - 4.0).abs() < 1e-6, "dxx = {dxx}");
        assert!((dxy - 3.0).abs() < 1e-6, "dxy = {dxy}");
        assert!((dyy - 12.0).abs() < 1e-6, "dyy = {dyy}");
    }

    #[test]
    fn polynomial_partials_reach_fd_accuracy() {
        // central differences on polynomials against the symbolic answer
        let cases = [
            ("x1^3 + 2*x2^2", Var::X(0), [1.25_f64, 0.5], 3.0 * 1.25 * 1.25),
            ("x1^3 + 2*x2^2", Var::X(1), [1.25, 0.5], 2.0),
            ("x1*x2 - 4*x1", Var::X(0), [0.75, 2.0], -2.0),
        ];
        for (text, var, x, exact) in cases {
            let ast = parse(text, 2).unwrap();
            let env = Env::new(&x, 0.0, &[0.0, 0.0]);
            let d = partial(&ast, var, &env, None).unwrap();
            let rel = (d - exact).abs() / exact.abs().max(1.0);
            assert!(rel <= 1e-8, "{text} d{var}: rel err {rel:e}");
        }
    }

    #[test]
    fn render_round_trip_corpus() {
        let corpus = [
            "x1^2 + x2^2",
            "exp(z) * p1",
            "2^3^2",
            "min(x1, max(x2, 0.5))",
            "-x1^2 - -x2",
            "sqrt(abs(x1 - x2))",
            "1 + 2*x1 - 3/x2 ^ 2",
            "sin(pi*x1)*cos(pi*x2)",
            "log(1 + exp(z))",
            "0.25*(1 - x1)*x1*(1 - x2)*x2",
        ];
        for text in corpus {
            let ast = parse(text, 2).unwrap();
            let rendered = ast.render();
            let reparsed = parse(&rendered, 2).unwrap();
            assert!(
                ast.equivalent(&reparsed),
                "round trip failed for `{text}` -> `{rendered}`"
            );
        }
    }

    #[test]
    fn builder_matches_parser() {
        let built = ExprAst::mul(
            ExprAst::constant(2.0, 2),
            ExprAst::variable(Var::X(1), 2),
        );
        let parsed = parse("2 * x2", 2).unwrap();
        assert!(built.equivalent(&parsed));
    }
}
