//! Instance-wise token augmentation: a keyed bank of learnable tokens,
//! frequency-penalised top-K lookup, and the key-pull surrogate loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::error::{OfclError, Result};
use crate::geometry::{self, Embedding};
use crate::scalar::{fmt_full, Scalar};

pub const TOKEN_INIT_RANGE: f64 = 0.1;
pub const DUMP_MAGIC: &str = "OFCL-TOKENS v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Token<T> {
    pub key: Embedding<T>,
    /// `token_len x dim`, row-major.
    pub values: Vec<T>,
    pub task_of_origin: usize,
    pub frequency: u64,
}

impl<T: Scalar> Token<T> {
    pub fn token_len(&self) -> usize {
        self.values.len() / self.key.dim()
    }

    /// Mean over the token's rows.
    pub fn pooled(&self) -> Vec<T> {
        let dim = self.key.dim();
        let rows = self.token_len();
        let mut out = vec![T::zero(); dim];
        for row in self.values.chunks_exact(dim) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = T::from_count(rows);
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Which tokens a lookup may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Training: only the tokens minted for this task.
    Task(usize),
    /// Testing: the whole bank.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank<T> {
    dim: usize,
    token_len: usize,
    tokens: Vec<Token<T>>,
    tasks: BTreeMap<usize, Range<usize>>,
    closed: BTreeSet<usize>,
}

impl<T: Scalar> TokenBank<T> {
    pub fn new(dim: usize, token_len: usize) -> Result<Self> {
        if dim == 0 || token_len == 0 {
            return Err(OfclError::usage(
                "token bank needs positive dim and token length",
            ));
        }
        Ok(Self {
            dim,
            token_len,
            tokens: Vec::new(),
            tasks: BTreeMap::new(),
            closed: BTreeSet::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_len(&self) -> usize {
        self.token_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token<T>] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> Result<&Token<T>> {
        self.tokens
            .get(index)
            .ok_or_else(|| OfclError::usage(format!("token index {index} out of range")))
    }

    pub fn task_range(&self, task: usize) -> Option<Range<usize>> {
        self.tasks.get(&task).cloned()
    }

    pub fn is_closed(&self, task: usize) -> bool {
        self.closed.contains(&task)
    }

    /// Mutable access to a token whose task is still open.
    pub fn token_mut(&mut self, index: usize) -> Result<&mut Token<T>> {
        let task = self.token(index)?.task_of_origin;
        if self.closed.contains(&task) {
            return Err(OfclError::usage(format!(
                "token {index} belongs to closed task {task}"
            )));
        }
        Ok(&mut self.tokens[index])
    }

    /// Appends `count` tokens for `task` with keys and values drawn
    /// uniformly from `[-0.1, 0.1]` and unit frequency.
    pub fn init_task_tokens<R: Rng>(
        &mut self,
        task: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(OfclError::usage(format!(
                "tokens for task {task} already initialized"
            )));
        }
        if count == 0 {
            return Err(OfclError::usage("a task needs at least one token"));
        }
        let start = self.tokens.len();
        let mut draw = || T::lit(rng.random_range(-TOKEN_INIT_RANGE..=TOKEN_INIT_RANGE));
        for _ in 0..count {
            let key: Vec<T> = (0..self.dim).map(|_| draw()).collect();
            let values: Vec<T> = (0..self.dim * self.token_len).map(|_| draw()).collect();
            self.tokens.push(Token {
                key: Embedding::new(key)?,
                values,
                task_of_origin: task,
                frequency: 1,
            });
        }
        self.tasks.insert(task, start..self.tokens.len());
        Ok(())
    }

    /// Freezes a task's tokens; later mutation attempts are usage errors.
    pub fn close_task(&mut self, task: usize) {
        self.closed.insert(task);
    }

    fn scope_range(&self, scope: Scope) -> Result<Range<usize>> {
        match scope {
            Scope::All => Ok(0..self.tokens.len()),
            Scope::Task(t) => self
                .task_range(t)
                .ok_or_else(|| OfclError::usage(format!("no tokens for task {t}"))),
        }
    }

    /// Lookup score `(1 - cos(h, key)) * frequency`; lower is better.
    pub fn score(&self, h: &[T], index: usize) -> Result<T> {
        let tok = self.token(index)?;
        let cos = geometry::cosine_similarity(h, &tok.key)?;
        Ok((T::one() - cos) * T::from_count(tok.frequency as usize))
    }

    /// The `k` in-scope tokens with the lowest score, best first. Ties go to
    /// the lower index.
    pub fn select_tokens(&self, h: &[T], k: usize, scope: Scope) -> Result<Vec<usize>> {
        let range = self.scope_range(scope)?;
        if range.len() < k || k == 0 {
            return Err(OfclError::usage(format!(
                "cannot select {k} tokens from a scope of {}",
                range.len()
            )));
        }
        let mut scored = range
            .map(|i| self.score(h, i).map(|s| (s, i)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
    }

    pub fn record_selection(&mut self, indices: &[usize]) -> Result<()> {
        for &i in indices {
            self.token_mut(i)?;
        }
        for &i in indices {
            self.tokens[i].frequency += 1;
        }
        Ok(())
    }

    /// `lambda * sum_i (1 - cos(h, key_i))` over `selected`, with the
    /// gradient for each selected key in the same order.
    pub fn key_pull_loss(&self, h: &[T], selected: &[usize], lambda: T) -> Result<KeyPull<T>> {
        if selected.is_empty() {
            return Err(OfclError::usage(
                "key-pull loss needs at least one selected token",
            ));
        }
        let nh = geometry::norm(h);
        if !(nh > T::zero()) {
            return Err(OfclError::degenerate("zero-norm query"));
        }
        let mut loss = T::zero();
        let mut key_grads = Vec::with_capacity(selected.len());
        for &i in selected {
            let key = &self.token(i)?.key;
            if key.dim() != h.len() {
                return Err(OfclError::usage("query and key dimensions differ"));
            }
            let nk = geometry::norm(key);
            if !(nk > T::zero()) {
                return Err(OfclError::degenerate(format!(
                    "token {i} has a zero-norm key"
                )));
            }
            let cos = geometry::dot(h, key) / (nh * nk);
            loss += lambda * (T::one() - cos);
            // d cos / d k = h / (|h||k|) - cos * k / |k|^2
            let grad = h
                .iter()
                .zip(key.iter())
                .map(|(&hv, &kv)| -lambda * (hv / (nh * nk) - cos * kv / (nk * nk)))
                .collect();
            key_grads.push(grad);
        }
        Ok(KeyPull { loss, key_grads })
    }

    /// Versioned text dump, one record per token.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{DUMP_MAGIC}").unwrap();
        writeln!(
            out,
            "dim {} token_len {} tokens {}",
            self.dim,
            self.token_len,
            self.tokens.len()
        )
        .unwrap();
        let closed: Vec<String> = self.closed.iter().map(|t| t.to_string()).collect();
        writeln!(
            out,
            "closed {}",
            if closed.is_empty() {
                "-".into()
            } else {
                closed.join(",")
            }
        )
        .unwrap();
        for tok in &self.tokens {
            write!(out, "token {} {} key", tok.task_of_origin, tok.frequency).unwrap();
            for &v in tok.key.iter() {
                write!(out, " {}", fmt_full(v)).unwrap();
            }
            out.push_str(" values");
            for &v in &tok.values {
                write!(out, " {}", fmt_full(v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, magic) = lines
            .next()
            .ok_or_else(|| OfclError::parse(1, "empty token dump"))?;
        if magic != DUMP_MAGIC {
            return Err(OfclError::parse(
                n,
                format!("expected header {DUMP_MAGIC:?}"),
            ));
        }
        let (n, header) = lines
            .next()
            .ok_or_else(|| OfclError::parse(2, "missing size header"))?;
        let h: Vec<&str> = header.split(' ').collect();
        if h.len() != 6 || h[0] != "dim" || h[2] != "token_len" || h[4] != "tokens" {
            return Err(OfclError::parse(n, "malformed size header"));
        }
        let dim: usize = parse_field(n, h[1])?;
        let token_len: usize = parse_field(n, h[3])?;
        let count: usize = parse_field(n, h[5])?;
        let mut bank = Self::new(dim, token_len).map_err(|e| OfclError::parse(n, e.to_string()))?;

        let (n, closed) = lines
            .next()
            .ok_or_else(|| OfclError::parse(3, "missing closed-task line"))?;
        let closed = closed
            .strip_prefix("closed ")
            .ok_or_else(|| OfclError::parse(n, "expected closed-task line"))?;
        if closed != "-" {
            for t in closed.split(',') {
                bank.closed.insert(parse_field(n, t)?);
            }
        }

        for _ in 0..count {
            let (n, line) = lines.next().ok_or_else(|| {
                OfclError::parse(text.lines().count() + 1, "truncated token list")
            })?;
            let f: Vec<&str> = line.split(' ').collect();
            let expected = 5 + dim + dim * token_len;
            if f.len() != expected || f[0] != "token" || f[3] != "key" || f[4 + dim] != "values" {
                return Err(OfclError::parse(
                    n,
                    format!(
                        "malformed token record ({} fields, expected {expected})",
                        f.len()
                    ),
                ));
            }
            let task: usize = parse_field(n, f[1])?;
            let frequency: u64 = parse_field(n, f[2])?;
            if frequency == 0 {
                return Err(OfclError::parse(n, "token frequency must be at least 1"));
            }
            let key = f[4..4 + dim]
                .iter()
                .map(|s| parse_field(n, s))
                .collect::<Result<Vec<T>>>()?;
            let values = f[5 + dim..]
                .iter()
                .map(|s| parse_field(n, s))
                .collect::<Result<Vec<T>>>()?;
            let idx = bank.tokens.len();
            match bank.tasks.get_mut(&task) {
                Some(r) if r.end == idx => r.end += 1,
                Some(_) => {
                    return Err(OfclError::parse(
                        n,
                        format!("tokens of task {task} are not contiguous"),
                    ))
                }
                None => {
                    bank.tasks.insert(task, idx..idx + 1);
                }
            }
            bank.tokens.push(Token {
                key: Embedding::new(key).map_err(|e| OfclError::parse(n, e.to_string()))?,
                values,
                task_of_origin: task,
                frequency,
            });
        }
        if let Some((n, _)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(OfclError::parse(n, "trailing content after token list"));
        }
        Ok(bank)
    }
}

pub(crate) fn parse_field<V: std::str::FromStr>(line: usize, s: &str) -> Result<V> {
    s.parse()
        .map_err(|_| OfclError::parse(line, format!("cannot parse field {s:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyPull<T> {
    pub loss: T,
    /// Gradient per selected key, aligned with the `selected` argument.
    pub key_grads: Vec<Vec<T>>,
}
