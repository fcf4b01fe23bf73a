//! The Countdown arithmetic puzzle: generation, exhaustive solving,
//! prompt formatting and scoring.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tokenizer::{Tokenizer, ANSWER_CLOSE, ANSWER_OPEN, ANSWER_SEP};

pub const OPERAND_MIN: i64 = 1;
pub const OPERAND_MAX: i64 = 50;
pub const TARGET_MAX: i64 = 100;
pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
            Op::Div => "/",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            Op::Add | Op::Sub => 1,
            Op::Mul | Op::Div => 2,
        }
    }

    /// Exact integer semantics; `None` for a fractional or undefined result.
    pub fn apply(self, a: i64, b: i64) -> Option<i64> {
        match self {
            Op::Add => a.checked_add(b),
            Op::Sub => a.checked_sub(b),
            Op::Mul => a.checked_mul(b),
            Op::Div => {
                if b == 0 || a % b != 0 {
                    None
                } else {
                    Some(a / b)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Num(i64),
    Bin(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn bin(op: Op, a: Expr, b: Expr) -> Self {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn eval(&self) -> Option<i64> {
        match self {
            Expr::Num(v) => Some(*v),
            Expr::Bin(op, a, b) => op.apply(a.eval()?, b.eval()?),
        }
    }

    /// Operand leaves, left to right.
    pub fn operands(&self) -> Vec<i64> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect(&self, out: &mut Vec<i64>) {
        match self {
            Expr::Num(v) => out.push(*v),
            Expr::Bin(_, a, b) => {
                a.collect(out);
                b.collect(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Num(_) => 3,
            Expr::Bin(op, _, _) => op.precedence(),
        }
    }

    /// Parses `+ - * /` (also `−`, `×`, `÷`) with parentheses; whitespace is free.
    pub fn parse(text: &str) -> Option<Expr> {
        let tokens = lex(text)?;
        let mut p = Parser {
            tokens: &tokens,
            pos: 0,
        };
        let e = p.expr()?;
        (p.pos == tokens.len()).then_some(e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{}", v),
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                if a.precedence() < p {
                    write!(f, "({})", a)?;
                } else {
                    write!(f, "{}", a)?;
                }
                write!(f, " {} ", op.symbol())?;
                let right_parens = b.precedence() < p || (b.precedence() == p && matches!(op, Op::Sub | Op::Div));
                if right_parens {
                    write!(f, "({})", b)
                } else {
                    write!(f, "{}", b)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Tok {
    Num(i64),
    Op(Op),
    Open,
    Close,
}

fn lex(text: &str) -> Option<Vec<Tok>> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c.is_ascii_digit() {
            let mut v: i64 = 0;
            while let Some(&d) = chars.peek() {
                match d.to_digit(10) {
                    Some(x) => {
                        v = v.checked_mul(10)?.checked_add(x as i64)?;
                        chars.next();
                    }
                    None => break,
                }
            }
            out.push(Tok::Num(v));
        } else {
            let t = match c {
                '+' => Tok::Op(Op::Add),
                '-' | '−' => Tok::Op(Op::Sub),
                '*' | '×' => Tok::Op(Op::Mul),
                '/' | '÷' => Tok::Op(Op::Div),
                '(' => Tok::Open,
                ')' => Tok::Close,
                _ => return None,
            };
            out.push(t);
            chars.next();
        }
    }
    Some(out)
}

struct Parser<'a> {
    tokens: &'a [Tok],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Tok> {
        self.tokens.get(self.pos).copied()
    }

    fn expr(&mut self) -> Option<Expr> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ (Op::Add | Op::Sub))) = self.peek() {
            self.pos += 1;
            lhs = Expr::bin(op, lhs, self.term()?);
        }
        Some(lhs)
    }

    fn term(&mut self) -> Option<Expr> {
        let mut lhs = self.atom()?;
        while let Some(Tok::Op(op @ (Op::Mul | Op::Div))) = self.peek() {
            self.pos += 1;
            lhs = Expr::bin(op, lhs, self.atom()?);
        }
        Some(lhs)
    }

    fn atom(&mut self) -> Option<Expr> {
        match self.peek()? {
            Tok::Num(v) => {
                self.pos += 1;
                Some(Expr::Num(v))
            }
            Tok::Open => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek()? != Tok::Close {
                    return None;
                }
                self.pos += 1;
                Some(e)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountdownInstance {
    pub nums: Vec<i64>,
    pub target: i64,
    /// Witness expression; `None` only for unfiltered instances with no solution.
    pub solution: Option<String>,
    pub n_operands: usize,
}

impl CountdownInstance {
    /// Checks the stored solution against the operands and target.
    pub fn verify(&self) -> bool {
        self.n_operands == self.nums.len()
            && self
                .solution
                .as_deref()
                .is_some_and(|s| check_expression(s, &self.nums, self.target) == ScoreOutcome::Correct)
    }
}

fn random_tree<R: Rng + ?Sized>(leaves: &[i64], rng: &mut R) -> Expr {
    if leaves.len() == 1 {
        return Expr::Num(leaves[0]);
    }
    let split = rng.random_range(1..leaves.len());
    let op = Op::ALL[rng.random_range(0..4)];
    Expr::bin(
        op,
        random_tree(&leaves[..split], rng),
        random_tree(&leaves[split..], rng),
    )
}

fn check_operand_count(n: usize) -> Result<()> {
    if !(3..=5).contains(&n) {
        return Err(Error::contract(format!("countdown needs 3 to 5 operands, got {}", n)));
    }
    Ok(())
}

/// Expression-first sampling: the result is solvable by construction.
pub fn gen_countdown<R: Rng + ?Sized>(n_operands: usize, rng: &mut R) -> Result<CountdownInstance> {
    check_operand_count(n_operands)?;
    for _ in 0..MAX_ATTEMPTS {
        let nums: Vec<i64> = (0..n_operands)
            .map(|_| rng.random_range(OPERAND_MIN..=OPERAND_MAX))
            .collect();
        let mut order = nums.clone();
        order.shuffle(rng);
        let expr = random_tree(&order, rng);
        match expr.eval() {
            Some(v) if (0..=TARGET_MAX).contains(&v) => {
                return Ok(CountdownInstance {
                    nums,
                    target: v,
                    solution: Some(expr.to_string()),
                    n_operands,
                });
            }
            _ => continue,
        }
    }
    Err(Error::Generation(format!(
        "no countdown instance with {} operands after {} attempts",
        n_operands, MAX_ATTEMPTS
    )))
}

/// Independent operand and target draws; the solution is whatever the
/// solver finds, possibly none.
pub fn gen_countdown_unfiltered<R: Rng + ?Sized>(n_operands: usize, rng: &mut R) -> Result<CountdownInstance> {
    check_operand_count(n_operands)?;
    let nums: Vec<i64> = (0..n_operands)
        .map(|_| rng.random_range(OPERAND_MIN..=OPERAND_MAX))
        .collect();
    let target = rng.random_range(0..=TARGET_MAX);
    let solution = solve_countdown(&nums, target);
    Ok(CountdownInstance {
        nums,
        target,
        solution,
        n_operands,
    })
}

/// Candidate expressions for `n` operands: `Catalan(n-1) * 2^(n-1) * n!`.
pub fn branching_factor(n: usize) -> Result<u128> {
    if n < 1 {
        return Err(Error::contract("branching factor needs at least one operand"));
    }
    let m = (n - 1) as u128;
    // Catalan(m) = C(2m, m) / (m + 1)
    let mut binom: u128 = 1;
    for i in 0..m {
        binom = binom * (2 * m - i) / (i + 1);
    }
    let catalan = binom / (m + 1);
    let factorial: u128 = (1..=n as u128).product();
    Ok(catalan * (1u128 << m) * factorial)
}

/// One way to build a value over an operand subset.
#[derive(Clone, Copy, Debug)]
enum Build {
    Leaf(usize),
    Node {
        op: Op,
        left: (usize, usize),
        right: (usize, usize),
        swap: bool,
    },
}

/// Operator semantics on unordered pairs: subtraction and division always
/// take the larger operand first, so values stay non-negative. Every
/// ordinary expression's absolute value is reachable this way.
fn combine(op: Op, a: i64, b: i64) -> (Option<i64>, bool) {
    let (hi, lo, swap) = if a >= b { (a, b, false) } else { (b, a, true) };
    match op {
        Op::Add => (a.checked_add(b), false),
        Op::Mul => (a.checked_mul(b), false),
        Op::Sub => (Some(hi - lo), swap),
        Op::Div => (Op::Div.apply(hi, lo), swap),
    }
}

/// Splits of `mask` into (part with the lowest bit, rest), both non-empty.
fn splits(mask: usize) -> impl Iterator<Item = (usize, usize)> {
    let low = mask & mask.wrapping_neg();
    let rest = mask ^ low;
    let mut sub = rest;
    let mut done = false;
    std::iter::from_fn(move || loop {
        if done {
            return None;
        }
        let part = low | sub;
        if sub == 0 {
            done = true;
        } else {
            sub = (sub - 1) & rest;
        }
        if part != mask {
            return Some((part, mask ^ part));
        }
    })
}

/// Unpruned enumeration size over `n` operands: every unordered tree shape
/// with every operator assignment.
pub fn enumeration_count(n: usize) -> u128 {
    if n == 0 {
        return 0;
    }
    let full = (1usize << n) - 1;
    let mut count = vec![0u128; full + 1];
    for mask in 1..=full {
        if mask.count_ones() == 1 {
            count[mask] = 1;
            continue;
        }
        count[mask] = splits(mask).map(|(a, b)| count[a] * count[b] * 4).sum();
    }
    count[full]
}

/// Exhaustive search with exact-division pruning.
///
/// Intermediate values are kept non-negative (see [`combine`]), so only
/// targets `>= 0` can be found; Countdown targets always are.
pub fn solve_countdown(nums: &[i64], target: i64) -> Option<String> {
    let n = nums.len();
    if n == 0 || n > 8 {
        return None;
    }
    let full = (1usize << n) - 1;
    // distinct reachable values per subset, each with one way to build it
    let mut table: Vec<Vec<(i64, Build)>> = vec![Vec::new(); full + 1];
    for mask in 1..=full {
        if mask.count_ones() == 1 {
            let i = mask.trailing_zeros() as usize;
            table[mask].push((nums[i], Build::Leaf(i)));
            continue;
        }
        let mut seen: HashMap<i64, Build> = HashMap::new();
        let mut order = Vec::new();
        for (a, b) in splits(mask) {
            for (ia, &(va, _)) in table[a].iter().enumerate() {
                for (ib, &(vb, _)) in table[b].iter().enumerate() {
                    for op in Op::ALL {
                        if let (Some(v), swap) = combine(op, va, vb) {
                            seen.entry(v).or_insert_with(|| {
                                order.push(v);
                                Build::Node {
                                    op,
                                    left: (a, ia),
                                    right: (b, ib),
                                    swap,
                                }
                            });
                        }
                    }
                }
            }
        }
        table[mask] = order.into_iter().map(|v| (v, seen[&v])).collect();
    }
    let idx = table[full].iter().position(|&(v, _)| v == target)?;
    Some(rebuild(&table, nums, full, idx).to_string())
}

fn rebuild(table: &[Vec<(i64, Build)>], nums: &[i64], mask: usize, idx: usize) -> Expr {
    match table[mask][idx].1 {
        Build::Leaf(i) => Expr::Num(nums[i]),
        Build::Node { op, left, right, swap } => {
            let a = rebuild(table, nums, left.0, left.1);
            let b = rebuild(table, nums, right.0, right.1);
            if swap {
                Expr::bin(op, b, a)
            } else {
                Expr::bin(op, a, b)
            }
        }
    }
}

pub fn prompt_text(inst: &CountdownInstance) -> String {
    let nums: Vec<String> = inst.nums.iter().map(|n| n.to_string()).collect();
    format!(
        "User: Using the numbers [{}], create an equation that equals {}.\nAssistant: Let me solve this step by step.\n",
        nums.join(", "),
        inst.target
    )
}

/// Prompt, latent slot count and answer tokens of one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormattedExample {
    pub prompt: Vec<usize>,
    pub n_latents: usize,
    /// Answer stream: separator, open tag, expression, close tag.
    pub answer: Vec<usize>,
}

impl FormattedExample {
    /// Full layout with latent placeholders in the thinking region.
    pub fn layout(&self) -> Vec<usize> {
        let mut out = self.prompt.clone();
        out.extend(std::iter::repeat_n(super::tokenizer::LATENT, self.n_latents));
        out.extend_from_slice(&self.answer);
        out
    }
}

pub fn answer_tokens(expression: &str) -> Vec<usize> {
    let tok = Tokenizer;
    let mut out = vec![ANSWER_SEP, ANSWER_OPEN];
    out.extend(tok.encode(&format!(" {} ", expression)));
    out.push(ANSWER_CLOSE);
    out
}

pub fn format_countdown(inst: &CountdownInstance, n_latents: usize) -> Result<FormattedExample> {
    let solution = inst
        .solution
        .as_deref()
        .ok_or_else(|| Error::contract("cannot format a countdown instance without a solution"))?;
    Ok(FormattedExample {
        prompt: Tokenizer.encode(&prompt_text(inst)),
        n_latents,
        answer: answer_tokens(solution),
    })
}

/// Human-readable rendering with the latent region collapsed to one marker.
pub fn render_countdown(inst: &CountdownInstance) -> String {
    format!(
        "{}<latent thinking>\n<answer> {} </answer>",
        prompt_text(inst),
        inst.solution.as_deref().unwrap_or("")
    )
}

/// Contents of the first `<answer> ... </answer>` span, trimmed.
pub fn parse_answer(text: &str) -> Option<&str> {
    let start = text.find("<answer>")? + "<answer>".len();
    let len = text[start..].find("</answer>")?;
    Some(text[start..start + len].trim())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreOutcome {
    Correct,
    Wrong,
    ParseFailure,
}

impl ScoreOutcome {
    pub fn is_correct(self) -> bool {
        self == ScoreOutcome::Correct
    }
}

fn check_expression(expr: &str, nums: &[i64], target: i64) -> ScoreOutcome {
    let Some(e) = Expr::parse(expr) else {
        return ScoreOutcome::ParseFailure;
    };
    let mut used = e.operands();
    let mut want = nums.to_vec();
    used.sort_unstable();
    want.sort_unstable();
    if used == want && e.eval() == Some(target) {
        ScoreOutcome::Correct
    } else {
        ScoreOutcome::Wrong
    }
}

/// Scores model output text against an instance.
pub fn score_countdown(output: &str, inst: &CountdownInstance) -> ScoreOutcome {
    match parse_answer(output) {
        Some(span) => check_expression(span, &inst.nums, inst.target),
        None => ScoreOutcome::ParseFailure,
    }
}
