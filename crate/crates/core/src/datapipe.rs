//! Q-R-A triples, the rationale-curation pipeline (prompt templates,
//! pluggable completion backend with a deterministic mock, score parsing,
//! filtering), and the synthetic task generators that make desk-scale
//! learning verifiable.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision::SyntheticImage;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// One question-rationale-answer sample with optional synthetic image,
/// curation score, and human-review flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QRATriple {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image: Option<SyntheticImage>,
    pub question: String,
    pub rationale: String,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub human_approved: Option<bool>,
}

impl QRATriple {
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() || self.answer.is_empty() {
            return Err(Error::contract("qra_triple", format!("{}: question and answer must be non-empty", self.id)));
        }
        if let Some(s) = self.score {
            if s > 10 {
                return Err(Error::contract("qra_triple", format!("{}: score {s} outside 0..=10", self.id)));
            }
        }
        if let Some(img) = &self.image {
            img.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- prompts

/// Rationale-generation prompt, byte-for-byte.
pub fn make_rationale_prompt(question: &str, answer: &str) -> Result<String> {
    if question.is_empty() || answer.is_empty() {
        return Err(Error::contract("make_rationale_prompt", "question and answer must be non-empty"));
    }
    Ok(format!(
        "Question: {question}. Answer: {answer}. Based on the question and answer, \
         carefully provide an explanation about how to answer the question in detail."
    ))
}

/// Rationale-scoring prompt, byte-for-byte.
pub fn make_score_prompt(question: &str, rationale: &str, answer: &str) -> Result<String> {
    if question.is_empty() || rationale.is_empty() || answer.is_empty() {
        return Err(Error::contract("make_score_prompt", "question, rationale, and answer must be non-empty"));
    }
    Ok(format!(
        "Question: {question}. Rationale: {rationale}. Answer: {answer}. Based on the question, \
         rationale, and answer, provide a score from 0 to 10, evaluating how well the rationale \
         is described to solve the question. If the given rationale is insufficient, you should \
         rigorously give a score below 5."
    ))
}

/// First integer literal in the response, required to lie in [0, 10].
pub fn parse_score(response: &str) -> Result<u8> {
    let bytes = response.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let neg = i > 0 && bytes[i - 1] == b'-';
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let lit: i64 = response[start..i]
                .parse()
                .map_err(|_| Error::ScoreParse(format!("integer literal too large in {response:?}")))?;
            let value = if neg { -lit } else { lit };
            if !(0..=10).contains(&value) {
                return Err(Error::ScoreParse(format!("score {value} outside 0..=10 in {response:?}")));
            }
            return Ok(value as u8);
        }
        i += 1;
    }
    Err(Error::ScoreParse(format!("no integer literal in {response:?}")))
}

// ---------------------------------------------------------------- filtering

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub total: usize,
    pub kept: usize,
    pub dropped_score: usize,
    pub dropped_review: usize,
    pub failed: usize,
}

/// Keep triples with score >= 5 that were not rejected in human review.
/// Triples missing a score are counted as failed and dropped.
pub fn filter_triples(triples: &[QRATriple]) -> (Vec<QRATriple>, FilterSummary) {
    let mut summary = FilterSummary { total: triples.len(), ..Default::default() };
    let mut kept = Vec::new();
    for t in triples {
        match t.score {
            None => summary.failed += 1,
            Some(s) if s < 5 => summary.dropped_score += 1,
            Some(_) if t.human_approved == Some(false) => summary.dropped_review += 1,
            Some(_) => {
                summary.kept += 1;
                kept.push(t.clone());
            }
        }
    }
    (kept, summary)
}

// ---------------------------------------------------------------- curation

/// Completion backend behind the curation client.
pub trait CurationTransport: Sync {
    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String>;
}

/// Deterministic offline backend: responses are a pure function of
/// (seed, prompt), so concurrent runs commit identical results.
pub struct MockTransport {
    pub seed: u64,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl CurationTransport for MockTransport {
    fn complete(&self, prompt: &str, _max_tokens: usize) -> Result<String> {
        let h = fnv1a(prompt.as_bytes()) ^ self.seed.wrapping_mul(0x9e3779b97f4a7c15);
        if prompt.contains("provide a score from 0 to 10") {
            Ok(format!("Score: {}/10", h % 11))
        } else {
            Ok(format!(
                "First, restate what the question asks. Then work through the needed facts \
                 step by step and check each intermediate result. Combining the steps gives \
                 the stated answer. (mock rationale {:x})",
                h % 0x10000
            ))
        }
    }
}

/// POST {endpoint} with JSON {"prompt", "max_tokens"}; expects {"text"}.
pub struct HttpTransport {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: std::time::Duration,
}

impl CurationTransport for HttpTransport {
    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let mut req = client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "prompt": prompt, "max_tokens": max_tokens }));
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Transport(format!("HTTP {}", resp.status().as_u16())));
        }
        let body: serde_json::Value = resp.json().map_err(|e| Error::Transport(e.to_string()))?;
        body.get("text")
            .and_then(|t| t.as_str())
            .map(str::to_owned)
            .ok_or_else(|| Error::Transport("response missing `text` field".into()))
    }
}

pub enum Backend {
    Mock(MockTransport),
    Http(HttpTransport),
}

/// Client configuration for the curation pipeline. The HTTP backend reads
/// METEOR_API_URL and METEOR_API_KEY from the environment.
pub struct CurationClient {
    pub backend: Backend,
    pub max_tokens: usize,
    pub concurrency: usize,
}

impl CurationClient {
    pub fn mock(seed: u64) -> Self {
        CurationClient { backend: Backend::Mock(MockTransport { seed }), max_tokens: 512, concurrency: 1 }
    }

    pub fn http_from_env() -> Result<Self> {
        let endpoint = std::env::var("METEOR_API_URL")
            .map_err(|_| Error::Config("METEOR_API_URL not set".into()))?;
        let api_key = std::env::var("METEOR_API_KEY").ok();
        Ok(CurationClient {
            backend: Backend::Http(HttpTransport {
                endpoint,
                api_key,
                timeout: std::time::Duration::from_secs(30),
            }),
            max_tokens: 512,
            concurrency: 4,
        })
    }

    fn transport(&self) -> &dyn CurationTransport {
        match &self.backend {
            Backend::Mock(t) => t,
            Backend::Http(t) => t,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CurateSummary {
    pub total: usize,
    pub ok: usize,
    pub failed: usize,
    pub failures: Vec<(usize, String)>,
}

/// Generate a rationale and a score for each (question, answer) pair.
/// Failed samples keep their input fields and are surfaced in the summary;
/// nothing is dropped here (filtering is explicit and separate).
pub fn curate(client: &CurationClient, pairs: &[QRATriple]) -> (Vec<QRATriple>, CurateSummary) {
    let transport = client.transport();
    let one = |t: &QRATriple| -> Result<(String, u8)> {
        let rationale = transport.complete(&make_rationale_prompt(&t.question, &t.answer)?, client.max_tokens)?;
        let score_resp =
            transport.complete(&make_score_prompt(&t.question, &rationale, &t.answer)?, client.max_tokens)?;
        Ok((rationale, parse_score(&score_resp)?))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(String, u8)>> = {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(client.concurrency.max(1))
            .build()
            .expect("curation thread pool");
        pool.install(|| pairs.par_iter().map(one).collect())
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(String, u8)>> = pairs.iter().map(one).collect();

    let mut out = Vec::with_capacity(pairs.len());
    let mut summary = CurateSummary { total: pairs.len(), ..Default::default() };
    for (i, (pair, res)) in pairs.iter().zip(results).enumerate() {
        let mut t = pair.clone();
        match res {
            Ok((rationale, score)) => {
                t.rationale = rationale;
                t.score = Some(score);
                summary.ok += 1;
            }
            Err(e) => {
                summary.failed += 1;
                summary.failures.push((i, e.to_string()));
            }
        }
        out.push(t);
    }
    (out, summary)
}

// ---------------------------------------------------------------- synthetic tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Arith,
    Count,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arith" => Ok(Task::Arith),
            "count" => Ok(Task::Count),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

pub const GRID_CELLS: usize = 4; // 4x4 cells of 4x4 pixels = 16x16 image
pub const PALETTE: [(&str, [f32; 3]); 3] =
    [("red", [0.9, 0.1, 0.1]), ("green", [0.1, 0.9, 0.1]), ("blue", [0.1, 0.1, 0.9])];
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

/// Deterministic synthetic corpus. Rationales spell out every intermediate
/// step so they run roughly an order of magnitude longer than answers.
pub fn gen_synthetic(n: usize, seed: u64, task: Task) -> Result<Vec<QRATriple>> {
    if n < 1 {
        return Err(Error::contract("gen_synthetic", format!("n must be >= 1, got {n}")));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = match task {
            Task::Arith => gen_arith(&mut rng, format!("arith-{seed}-{i}")),
            Task::Count => gen_count(&mut rng, format!("count-{seed}-{i}")),
        };
        debug_assert!(t.validate().is_ok());
        out.push(t);
    }
    Ok(out)
}

/// Left-nested integer expression with 3..=6 operations over small operands;
/// intermediates are kept within +-99 by falling back from `*` to `-`/`+`.
fn gen_arith(rng: &mut ChaCha8Rng, id: String) -> QRATriple {
    let n_ops = rng.random_range(3..=6);
    let mut value: i64 = rng.random_range(2..=9);
    let mut expr = value.to_string();
    let mut steps = Vec::with_capacity(n_ops);
    for _ in 0..n_ops {
        let operand: i64 = rng.random_range(2..=9);
        let mut op = *['+', '-', '*'].get(rng.random_range(0..3)).unwrap();
        let apply = |op: char, a: i64, b: i64| match op {
            '+' => a + b,
            '-' => a - b,
            _ => a * b,
        };
        let mut next = apply(op, value, operand);
        if next.abs() > 99 {
            op = if value > 0 { '-' } else { '+' };
            next = apply(op, value, operand);
        }
        steps.push(format!("{value}{op}{operand}={next}"));
        expr = format!("({expr}{op}{operand})");
        value = next;
    }
    QRATriple {
        id,
        image: None,
        question: format!("Compute {expr}."),
        rationale: steps.join("; "),
        answer: value.to_string(),
        score: None,
        human_approved: None,
    }
}

/// Colored-cell counting over a 4x4 cell grid rendered at 16x16 pixels.
fn gen_count(rng: &mut ChaCha8Rng, id: String) -> QRATriple {
    let target = rng.random_range(0..PALETTE.len());
    let want: usize = rng.random_range(0..=6);
    // lay out cell colors: exactly `want` target cells, remainder background
    // or one of the other palette colors
    let mut cells = vec![usize::MAX; GRID_CELLS * GRID_CELLS]; // MAX = background
    let mut placed = 0;
    while placed < want {
        let at = rng.random_range(0..cells.len());
        if cells[at] != target {
            if cells[at] != usize::MAX {
                continue; // only overwrite background
            }
            cells[at] = target;
            placed += 1;
        }
    }
    for c in cells.iter_mut() {
        if *c == usize::MAX && rng.random_range(0..100) < 30 {
            let other = (target + 1 + rng.random_range(0..PALETTE.len() - 1)) % PALETTE.len();
            *c = other;
        }
    }

    let px = |cell: usize| -> [f32; 3] {
        if cell == usize::MAX {
            BACKGROUND
        } else {
            PALETTE[cell].1
        }
    };
    let side = GRID_CELLS * crate::vision::PATCH;
    let mut pixels = vec![vec![vec![0.0f32; 3]; side]; side];
    for (idx, &cell) in cells.iter().enumerate() {
        let (cy, cx) = (idx / GRID_CELLS, idx % GRID_CELLS);
        let color = px(cell);
        for dy in 0..crate::vision::PATCH {
            for dx in 0..crate::vision::PATCH {
                pixels[cy * crate::vision::PATCH + dy][cx * crate::vision::PATCH + dx] =
                    color.to_vec();
            }
        }
    }

    let color_name = PALETTE[target].0;
    let mut row_counts = Vec::with_capacity(GRID_CELLS);
    for row in 0..GRID_CELLS {
        let count = (0..GRID_CELLS).filter(|&col| cells[row * GRID_CELLS + col] == target).count();
        row_counts.push(format!("row {row}: {count}"));
    }
    let total: usize = cells.iter().filter(|&&c| c == target).count();
    debug_assert_eq!(total, want);

    QRATriple {
        id,
        image: Some(SyntheticImage { pixels }),
        question: format!("How many {color_name} cells are in the grid?"),
        rationale: format!("{}; total {total}", row_counts.join("; ")),
        answer: total.to_string(),
        score: None,
        human_approved: None,
    }
}

// ---------------------------------------------------------------- dataset files

/// One QRATriple JSON object per line.
pub fn write_jsonl(path: &Path, triples: &[QRATriple]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in triples {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QRATriple>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: QRATriple = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}
