// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::classify::classify_for;
use super::client::{api_key_from_env, ChatClient, Reply};
use super::prompt::{build_prompt, gen_probe_problems, PromptVariant, PROBE_STEPS};
use crate::error::{Error, Result};
use crate::plot::{line_chart, Series};
use crate::taskgen::{hex_digest, write_json, OrderMode, Problem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key; `None` sends no auth header.
    pub api_key_env: Option<String>,
    /// Must be 0.
    pub temperature: f64,
    pub prompt_variant: PromptVariant,
    /// Problems per VAS count.
    pub per_cell: usize,
    pub orders: Vec<OrderMode>,
    /// Numbers of variable subtrahends out of the two chained steps.
    pub vas_counts: Vec<usize>,
    pub seed: u64,
    /// Concurrent requests.
    pub parallelism: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-2024-08-06".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            temperature: 0.0,
            prompt_variant: PromptVariant::DirectStrict,
            per_cell: 100,
            orders: vec![OrderMode::Forward, OrderMode::Reverse, OrderMode::FixedShuffled],
            vas_counts: vec![0, 1, 2],
            seed: 0,
            parallelism: 4,
            max_retries: 4,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature != 0.0 {
            return Err(Error::Config(format!("probe temperature must be 0, got {}", self.temperature)));
        }
        if self.per_cell == 0 || self.parallelism == 0 {
            return Err(Error::Config("per_cell and parallelism must be >= 1".into()));
        }
        if self.orders.is_empty() || self.vas_counts.is_empty() {
            return Err(Error::Config("orders and vas_counts must be non-empty".into()));
        }
        if self.vas_counts.iter().any(|&v| v >= PROBE_STEPS) {
            return Err(Error::Config(format!("vas_counts must lie in 0..={}", PROBE_STEPS - 1)));
        }
        Ok(())
    }
}

/// One query and its classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    /// `problem_sha256|order|variant`, the resume key.
    pub key: String,
    /// Forward-order problem text.
    pub problem: String,
    pub problem_sha256: String,
    pub order_mode: OrderMode,
    pub n_vas: usize,
    pub variant: PromptVariant,
    pub prompt: String,
    pub expected: u8,
    pub raw_response: Option<String>,
    pub error: Option<String>,
    pub answer: Option<i64>,
    pub cot_flag: bool,
    /// Present only for parsed, non-CoT answers.
    pub correct: Option<bool>,
}

impl ProbeRecord {
    fn pending(base: &Problem, shown: &Problem, variant: PromptVariant) -> Self {
        let text = base.text();
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let problem_sha256 = hex_digest(h);
        ProbeRecord {
            key: format!("{problem_sha256}|{}|{}", shown.order_mode, variant.as_str()),
            problem: text,
            problem_sha256,
            order_mode: shown.order_mode,
            n_vas: base.n_vas(),
            variant,
            prompt: build_prompt(shown, variant),
            expected: base.answer(),
            raw_response: None,
            error: None,
            answer: None,
            cot_flag: false,
            correct: None,
        }
    }

    /// Fill the classification fields from a reply.
    pub fn apply(&mut self, reply: Reply, query_letter: char) {
        match reply {
            Reply::Text(t) => {
                let c = classify_for(&t, query_letter, self.variant);
                self.answer = c.answer;
                self.cot_flag = c.cot_flag;
                self.correct = match (c.cot_flag, c.answer) {
                    (false, Some(a)) => Some(a == self.expected as i64),
                    _ => None,
                };
                self.raw_response = Some(t);
                self.error = None;
            }
            Reply::Failed(e) => {
                self.error = Some(e);
            }
        }
    }

    fn done(&self) -> bool {
        self.raw_response.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub model: String,
    pub endpoint: String,
    pub variant: PromptVariant,
    pub temperature: f64,
    pub per_cell: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub order_mode: OrderMode,
    pub n_vas: usize,
    /// `n_vas/2`.
    pub ratio: String,
    pub records: usize,
    /// Parsed, non-CoT records: the accuracy denominator.
    pub scored: usize,
    pub correct: usize,
    /// `None` when nothing could be scored.
    pub accuracy: Option<f64>,
    pub cot_excluded: usize,
    pub unparsed: usize,
    pub errors: usize,
}

/// Accuracy by premise order and VAS ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: ProbeMeta,
    pub cells: Vec<ProbeCell>,
    pub total_records: usize,
    /// Some cell has no scorable record.
    pub insufficient_data: bool,
}

impl ProbeReport {
    pub fn from_records(meta: ProbeMeta, orders: &[OrderMode], vas_counts: &[usize], records: &[ProbeRecord]) -> Self {
        let mut cells = Vec::new();
        for &order in orders {
            for &v in vas_counts {
                let rs: Vec<&ProbeRecord> = records.iter().filter(|r| r.order_mode == order && r.n_vas == v).collect();
                let errors = rs.iter().filter(|r| !r.done()).count();
                let cot_excluded = rs.iter().filter(|r| r.done() && r.cot_flag).count();
                let unparsed = rs.iter().filter(|r| r.done() && !r.cot_flag && r.answer.is_none()).count();
                let scored = rs.iter().filter(|r| r.correct.is_some()).count();
                let correct = rs.iter().filter(|r| r.correct == Some(true)).count();
                cells.push(ProbeCell {
                    order_mode: order,
                    n_vas: v,
                    ratio: format!("{v}/{}", PROBE_STEPS - 1),
                    records: rs.len(),
                    scored,
                    correct,
                    accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
                    cot_excluded,
                    unparsed,
                    errors,
                });
            }
        }
        let insufficient_data = cells.iter().any(|c| c.scored == 0);
        ProbeReport { probe: meta, cells, total_records: records.len(), insufficient_data }
    }

    pub fn cell(&self, order: OrderMode, n_vas: usize) -> Option<&ProbeCell> {
        self.cells.iter().find(|c| c.order_mode == order && c.n_vas == n_vas)
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("order_mode,n_vas,ratio,records,scored,correct,accuracy,cot_excluded,unparsed,errors\n");
        for c in &self.cells {
            let acc = c.accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{acc},{},{},{}",
                c.order_mode, c.n_vas, c.ratio, c.records, c.scored, c.correct, c.cot_excluded, c.unparsed, c.errors
            );
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let mut by_order: BTreeMap<OrderMode, Vec<(f64, f64)>> = BTreeMap::new();
        for c in &self.cells {
            let e = by_order.entry(c.order_mode).or_default();
            if let Some(a) = c.accuracy {
                e.push((c.n_vas as f64, a));
            }
        }
        let series: Vec<Series> = by_order.into_iter().map(|(o, points)| Series { name: o.as_str(), points }).collect();
        let title = format!("{} ({})", self.probe.model, self.probe.variant.as_str());
        line_chart(&title, "equations with a variable as subtrahend (of 2)", "accuracy", (0.0, 1.0), &series)
    }
}

/// Records file inside a probe output directory.
pub fn records_path(out_dir: &Path) -> PathBuf {
    out_dir.join("records.jsonl")
}

/// All records in a JSONL file; a later line replaces an earlier one with
/// the same key.
pub fn read_records(path: &Path) -> Result<Vec<ProbeRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order = Vec::new();
    let mut by_key: HashMap<String, ProbeRecord> = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ProbeRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if !by_key.contains_key(&r.key) {
            order.push(r.key.clone());
        }
        by_key.insert(r.key.clone(), r);
    }
    Ok(order.into_iter().filter_map(|k| by_key.remove(&k)).collect())
}

pub struct ProbeOutput {
    pub records: Vec<ProbeRecord>,
    pub report: ProbeReport,
    /// Requests sent in this invocation.
    pub queried: usize,
}

/// Query every (problem, order) once, skipping keys already answered in
/// `out_dir/records.jsonl`, then write `report.{json,csv,svg}`.
pub fn run_probe(cfg: &ProbeConfig, out_dir: &Path) -> Result<ProbeOutput> {
    cfg.validate()?;
    let api_key = cfg.api_key_env.as_deref().map(api_key_from_env).transpose()?;
    let items = gen_probe_problems(cfg.per_cell, &cfg.vas_counts, &cfg.orders, cfg.seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = records_path(out_dir);
    let existing: HashMap<String, ProbeRecord> = read_records(&path)?.into_iter().map(|r| (r.key.clone(), r)).collect();

    let mut all: Vec<(ProbeRecord, char)> = Vec::new();
    for item in &items {
        for shown in &item.variants {
            let fresh = ProbeRecord::pending(&item.base, shown, cfg.prompt_variant);
            let rec = existing.get(&fresh.key).filter(|r| r.done()).cloned().unwrap_or(fresh);
            all.push((rec, shown.query_letter()));
        }
    }
    let todo: Vec<usize> = (0..all.len()).filter(|&i| !all[i].0.done()).collect();
    let client = ChatClient::new(
        &cfg.endpoint,
        &cfg.model,
        api_key,
        Duration::from_secs(cfg.timeout_secs),
        cfg.max_retries,
        Duration::from_millis(cfg.backoff_ms),
    );

    let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Reply)>();
    let write_result: Result<()> = thread::scope(|s| {
        for _ in 0..cfg.parallelism.min(todo.len()) {
            let tx = tx.clone();
            let (client, todo, next, all) = (&client, &todo, &next, &all);
            s.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&i) = todo.get(k) else { break };
                if tx.send((i, client.complete(&all[i].0.prompt))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, reply) in rx {
            let mut rec = all[i].0.clone();
            rec.apply(reply, all[i].1);
            serde_json::to_writer(&mut writer, &rec)?;
            writer.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            writer.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    });
    write_result?;

    let records = read_records(&path)?;
    let by_key: HashMap<&str, &ProbeRecord> = records.iter().map(|r| (r.key.as_str(), r)).collect();
    let final_records: Vec<ProbeRecord> = all
        .iter()
        .map(|(r, _)| by_key.get(r.key.as_str()).map(|x| (*x).clone()).unwrap_or_else(|| r.clone()))
        .collect();
    let meta = ProbeMeta {
        model: cfg.model.clone(),
        endpoint: cfg.endpoint.clone(),
        variant: cfg.prompt_variant,
        temperature: cfg.temperature,
        per_cell: cfg.per_cell,
        seed: cfg.seed,
    };
    let report = ProbeReport::from_records(meta, &cfg.orders, &cfg.vas_counts, &final_records);
    write_json(&out_dir.join("report.json"), &report)?;
    for (name, body) in [("report.csv", report.to_csv()), ("report.svg", report.to_svg())] {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(ProbeOutput { records: final_records, report, queried: todo.len() })
}
