//! ListOps: nested prefix expressions over digits whose value is the label.
//!
//! Vocabulary: `0` pad, `1..=10` the digits 0–9, then `[MAX`, `[MIN`,
//! `[MED`, `[SM` and `]`. `MED` of an even-length list is the floor of the
//! mean of the two middle values; `SM` is the sum modulo 10.
//!
//! Length control: each expression is generated to fill a target length
//! drawn uniformly from `3..=max_len`, so the mean length is about
//! `max_len / 2`. While filling, an argument becomes a sub-expression with
//! probability [`SUB_EXPR_PROB`] when the depth limit and remaining budget
//! allow, otherwise a digit.

use super::{Dataset, Example, Schema};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SUB_EXPR_PROB: f64 = 0.25;

const DIGIT0: u32 = 1;
pub const OPEN_MAX: u32 = 11;
pub const OPEN_MIN: u32 = 12;
pub const OPEN_MED: u32 = 13;
pub const OPEN_SM: u32 = 14;
pub const CLOSE: u32 = 15;
pub const VOCAB_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ListOp {
    Max,
    Min,
    Med,
    Sm,
}

impl ListOp {
    const ALL: [ListOp; 4] = [ListOp::Max, ListOp::Min, ListOp::Med, ListOp::Sm];

    fn token(self) -> u32 {
        match self {
            ListOp::Max => OPEN_MAX,
            ListOp::Min => OPEN_MIN,
            ListOp::Med => OPEN_MED,
            ListOp::Sm => OPEN_SM,
        }
    }

    pub fn apply(self, args: &[u8]) -> u8 {
        assert!(!args.is_empty());
        match self {
            ListOp::Max => *args.iter().max().unwrap(),
            ListOp::Min => *args.iter().min().unwrap(),
            ListOp::Med => {
                let mut s = args.to_vec();
                s.sort_unstable();
                let n = s.len();
                if n % 2 == 1 {
                    s[n / 2]
                } else {
                    ((s[n / 2 - 1] as u16 + s[n / 2] as u16) / 2) as u8
                }
            }
            ListOp::Sm => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
        }
    }
}

pub fn vocab() -> Vec<String> {
    let mut v = vec!["<pad>".to_string()];
    v.extend((0..10).map(|d| d.to_string()));
    v.extend(["[MAX", "[MIN", "[MED", "[SM", "]"].map(String::from));
    v
}

/// Generation tree; its value is computed structurally.
enum Expr {
    Digit(u8),
    Apply(ListOp, Vec<Expr>),
}

impl Expr {
    fn value(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Apply(op, args) => op.apply(&args.iter().map(Expr::value).collect::<Vec<_>>()),
        }
    }

    fn emit(&self, out: &mut Vec<u32>) {
        match self {
            Expr::Digit(d) => out.push(DIGIT0 + *d as u32),
            Expr::Apply(op, args) => {
                out.push(op.token());
                for a in args {
                    a.emit(out);
                }
                out.push(CLOSE);
            }
        }
    }
}

/// Builds an operator expression of exactly `budget` tokens (`budget >= 3`).
fn gen_expr(rng: &mut Rng, budget: usize, depth: usize, max_depth: usize) -> Expr {
    let op = ListOp::ALL[rng::index(rng, 4)];
    let mut remaining = budget - 2;
    let mut args = Vec::new();
    while remaining > 0 {
        let nest = remaining >= 3 && depth < max_depth && rng::unit(rng) < SUB_EXPR_PROB;
        if nest {
            let sub = 3 + rng::index(rng, remaining - 2);
            args.push(gen_expr(rng, sub, depth + 1, max_depth));
            remaining -= sub;
        } else {
            args.push(Expr::Digit(rng::index(rng, 10) as u8));
            remaining -= 1;
        }
    }
    Expr::Apply(op, args)
}

pub fn gen_listops(seed: u64, count: usize, max_len: usize, max_depth: usize) -> Result<Dataset> {
    if max_depth < 1 {
        return Err(Error::config("task.max_depth", "must be at least 1"));
    }
    if max_len < 8 {
        return Err(Error::config("task.len", format!("ListOps needs max_len >= 8, got {max_len}")));
    }
    if count == 0 {
        return Err(Error::config("task.train_size", "must be positive"));
    }
    let mut rng = rng::seeded(seed);
    let examples = (0..count)
        .map(|_| {
            let budget = 3 + rng::index(&mut rng, max_len - 2);
            let e = gen_expr(&mut rng, budget, 1, max_depth);
            let mut tokens = Vec::with_capacity(budget);
            e.emit(&mut tokens);
            Example {
                tokens,
                pair: None,
                label: e.value() as usize,
            }
        })
        .collect();
    Dataset::new(Schema::Classify, examples, vocab(), 10)
}

/// Tokenizes text such as `[MAX 2 4 [MIN 3 1]]`.
pub fn parse(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let mut rest = text.trim_start();
    while !rest.is_empty() {
        let (tok, len) = if let Some(r) = rest.strip_prefix('[') {
            let op_len = r.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(r.len());
            let tok = match &r[..op_len] {
                "MAX" => OPEN_MAX,
                "MIN" => OPEN_MIN,
                "MED" => OPEN_MED,
                "SM" => OPEN_SM,
                other => return Err(Error::data(None, format!("unknown operator `[{other}`"))),
            };
            (tok, 1 + op_len)
        } else if rest.starts_with(']') {
            (CLOSE, 1)
        } else {
            let c = rest.chars().next().unwrap();
            let d = c
                .to_digit(10)
                .ok_or_else(|| Error::data(None, format!("unexpected character `{c}`")))?;
            (DIGIT0 + d, 1)
        };
        out.push(tok);
        rest = rest[len..].trim_start();
    }
    Ok(out)
}

pub fn render(tokens: &[u32]) -> String {
    let syms = vocab();
    let mut s = String::new();
    for (i, &t) in tokens.iter().enumerate() {
        if i > 0 && t != CLOSE {
            s.push(' ');
        }
        s.push_str(&syms[t as usize]);
    }
    s
}

/// Recursive-descent evaluator over token ids; the reference for labels.
pub fn evaluate(tokens: &[u32]) -> Result<u8> {
    fn term(tokens: &[u32], pos: &mut usize) -> Result<u8> {
        let at = *pos;
        let bad = |m: &str| Error::data(None, format!("malformed ListOps at token {at}: {m}"));
        let &t = tokens.get(*pos).ok_or_else(|| bad("unexpected end"))?;
        *pos += 1;
        if (DIGIT0..DIGIT0 + 10).contains(&t) {
            return Ok((t - DIGIT0) as u8);
        }
        let op = match t {
            OPEN_MAX => ListOp::Max,
            OPEN_MIN => ListOp::Min,
            OPEN_MED => ListOp::Med,
            OPEN_SM => ListOp::Sm,
            _ => return Err(bad("expected digit or operator")),
        };
        let mut args = Vec::new();
        loop {
            match tokens.get(*pos) {
                Some(&CLOSE) => {
                    *pos += 1;
                    break;
                }
                Some(_) => args.push(term(tokens, pos)?),
                None => return Err(bad("unclosed bracket")),
            }
        }
        if args.is_empty() {
            return Err(bad("operator without arguments"));
        }
        Ok(op.apply(&args))
    }
    let mut pos = 0;
    let v = term(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::data(None, "trailing tokens after expression"));
    }
    Ok(v)
}
