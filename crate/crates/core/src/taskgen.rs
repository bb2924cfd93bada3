//! Deterministic synthetic multi-task corpus.
//!
//! Four tasks with deliberately different input/output formats share one
//! character-level vocabulary:
//!
//! | task    | prompt     | target |
//! |---------|------------|--------|
//! | copy    | `Cdbf=`    | `dbf`  |
//! | reverse | `Rdbf=`    | `fbd`  |
//! | sort    | `Sdbf=`    | `bdf`  |
//! | add     | `A12+34=`  | `46`   |
//!
//! A sample's full token sequence is `prompt ++ target ++ [EOS]`; the loss
//! mask covers the target span and its terminating EOS.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS: usize = 0;
pub const SEP: usize = 1;
const PLUS: usize = 6;
const DIGIT0: usize = 7;
const LETTER_A: usize = 17;
pub const N_LETTERS: usize = 26;
pub const VOCAB_SIZE: usize = LETTER_A + N_LETTERS;

const EOS_CHAR: char = '.';
const SEP_CHAR: char = '=';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    Add,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort, TaskKind::Add];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::Add => "add",
        }
    }

    /// Task-tag token that opens every prompt of this task.
    pub fn tag(self) -> usize {
        2 + self as usize
    }

    fn tag_char(self) -> char {
        match self {
            TaskKind::Copy => 'C',
            TaskKind::Reverse => 'R',
            TaskKind::Sort => 'S',
            TaskKind::Add => 'A',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("task_id", format!("unknown task {s:?}")))
    }
}

/// Character for a token id.
pub fn token_char(id: usize) -> Option<char> {
    match id {
        EOS => Some(EOS_CHAR),
        SEP => Some(SEP_CHAR),
        2..=5 => Some(TaskKind::ALL[id - 2].tag_char()),
        PLUS => Some('+'),
        DIGIT0..LETTER_A => Some((b'0' + (id - DIGIT0) as u8) as char),
        LETTER_A..VOCAB_SIZE => Some((b'a' + (id - LETTER_A) as u8) as char),
        _ => None,
    }
}

/// Token id for a character.
pub fn char_token(c: char) -> Option<usize> {
    match c {
        EOS_CHAR => Some(EOS),
        SEP_CHAR => Some(SEP),
        'C' => Some(TaskKind::Copy.tag()),
        'R' => Some(TaskKind::Reverse.tag()),
        'S' => Some(TaskKind::Sort.tag()),
        'A' => Some(TaskKind::Add.tag()),
        '+' => Some(PLUS),
        '0'..='9' => Some(DIGIT0 + (c as usize - '0' as usize)),
        'a'..='z' => Some(LETTER_A + (c as usize - 'a' as usize)),
        _ => None,
    }
}

pub fn decode(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_char(t).unwrap_or('?')).collect()
}

pub fn encode(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| {
            char_token(c).ok_or_else(|| Error::config("corpus", format!("character {c:?} is not in the vocabulary")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSample {
    pub task: TaskKind,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

impl TaskSample {
    /// `prompt ++ target ++ [EOS]`
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.prompt.len() + self.target.len() + 1);
        t.extend_from_slice(&self.prompt);
        t.extend_from_slice(&self.target);
        t.push(EOS);
        t
    }

    /// True exactly on the target span (including its EOS) of [`Self::tokens`].
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.prompt.len()];
        m.resize(self.prompt.len() + self.target.len() + 1, true);
        m
    }

    /// Teacher-forced `(inputs, targets)` where `targets[i]` is the token
    /// following `inputs[..=i]`, restricted to masked positions:
    /// returns the inputs and the `(position, label)` pairs that carry loss.
    pub fn training_pairs(&self) -> (Vec<usize>, Vec<(usize, usize)>) {
        let tokens = self.tokens();
        let mask = self.loss_mask();
        let inputs = tokens[..tokens.len() - 1].to_vec();
        let labels = (1..tokens.len())
            .filter(|&i| mask[i])
            .map(|i| (i - 1, tokens[i]))
            .collect();
        (inputs, labels)
    }

    pub fn prompt_string(&self) -> String {
        decode(&self.prompt)
    }

    pub fn target_string(&self) -> String {
        decode(&self.target)
    }

    /// Recompute the target from the prompt body with the task's pure rule.
    pub fn expected_target(&self) -> Result<Vec<usize>> {
        let body = self
            .prompt
            .get(1..self.prompt.len().saturating_sub(1))
            .ok_or_else(|| Error::config("prompt", "too short"))?;
        solve(self.task, body)
    }
}

/// The pure function of each task, on a prompt body (between tag and `=`).
pub fn solve(task: TaskKind, body: &[usize]) -> Result<Vec<usize>> {
    Ok(match task {
        TaskKind::Copy => body.to_vec(),
        TaskKind::Reverse => body.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut v = body.to_vec();
            v.sort_unstable();
            v
        }
        TaskKind::Add => {
            let s = decode(body);
            let (a, b) = s
                .split_once('+')
                .ok_or_else(|| Error::config("prompt", format!("add prompt {s:?} lacks '+'")))?;
            let parse = |x: &str| {
                x.parse::<u32>()
                    .map_err(|_| Error::config("prompt", format!("bad operand {x:?}")))
            };
            encode(&(parse(a)? + parse(b)?).to_string())?
        }
    })
}

/// Shape of generated symbol strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Letters `a..` available to copy/reverse/sort.
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            alphabet_size: 16,
            min_len: 3,
            max_len: 6,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size == 0 || self.alphabet_size > N_LETTERS {
            return Err(Error::config(
                "data.alphabet_size",
                format!("must lie in [1, {N_LETTERS}]"),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(
                "data.min_len",
                format!("invalid length range {}..={}", self.min_len, self.max_len),
            ));
        }
        if self.max_len > self.alphabet_size {
            return Err(Error::config(
                "data.max_len",
                "strings use distinct symbols, so max_len cannot exceed alphabet_size",
            ));
        }
        Ok(())
    }
}

fn sample_one(task: TaskKind, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> TaskSample {
    let body: Vec<usize> = match task {
        TaskKind::Add => {
            let a: u32 = rng.random_range(10..100);
            let b: u32 = rng.random_range(10..100);
            encode(&format!("{a}+{b}")).expect("digits and '+' are in the vocabulary")
        }
        _ => {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut letters: Vec<usize> = (0..cfg.alphabet_size).map(|i| LETTER_A + i).collect();
            letters.shuffle(rng);
            letters.truncate(len);
            letters
        }
    };
    let target = solve(task, &body).expect("generated bodies are well formed");
    let mut prompt = Vec::with_capacity(body.len() + 2);
    prompt.push(task.tag());
    prompt.extend(body);
    prompt.push(SEP);
    TaskSample { task, prompt, target }
}

/// `n` distinct samples of one task, deterministic in `seed`.
pub fn generate(task: TaskKind, n: usize, cfg: &GenConfig, seed: u64) -> Result<Vec<TaskSample>> {
    if n == 0 {
        return Err(Error::config("data.counts", "n must be at least 1"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(task.index() as u64 + 1)));
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::config(
                "data.counts",
                format!("cannot draw {n} distinct {task} samples from this length range and alphabet"),
            ));
        }
        let s = sample_one(task, cfg, &mut rng);
        if seen.insert(s.prompt.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<TaskSample>,
    pub held_out: Vec<TaskSample>,
}

/// Multi-task corpus with `counts[i]` samples of `TaskKind::ALL[i]`, split
/// 90/10 per task and shuffled deterministically.
pub fn mixture(counts: [usize; 4], cfg: &GenConfig, seed: u64) -> Result<Split> {
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::config("data.counts", "at least one task count must be positive"));
    }
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for (task, &count) in TaskKind::ALL.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let samples = generate(*task, count, cfg, seed)?;
        let n_held = count / 10;
        held_out.extend_from_slice(&samples[..n_held]);
        train.extend_from_slice(&samples[n_held..]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    train.shuffle(&mut rng);
    held_out.shuffle(&mut rng);
    Ok(Split { train, held_out })
}

/// One `task_id<TAB>prompt<TAB>target` line per sample.
pub fn export_tsv(samples: &[TaskSample], mut out: impl Write) -> Result<()> {
    for s in samples {
        writeln!(out, "{}\t{}\t{}", s.task, s.prompt_string(), s.target_string())?;
    }
    Ok(())
}

pub fn import_tsv(input: impl BufRead) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(task), Some(prompt), Some(target), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::config(
                format!("corpus line {}", n + 1),
                "expected three tab-separated fields",
            ));
        };
        out.push(TaskSample {
            task: task.parse()?,
            prompt: encode(prompt)?,
            target: encode(target)?,
        });
    }
    Ok(out)
}
