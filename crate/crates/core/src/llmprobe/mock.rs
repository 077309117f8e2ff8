// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local chat-completions endpoint for offline runs. It solves the prompt
//! it receives and answers in a configurable style.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock};
use std::thread::{self, JoinHandle};

use regex::Regex;
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MockStyle {
    /// `q = <answer>`.
    Correct,
    /// Always answers 0 in the direct format.
    Wrong,
    /// Lists every intermediate assignment.
    ChainOfThought,
    /// Prose with no parseable answer.
    Unparseable,
}

/// Server handle; stops on drop.
pub struct MockServer {
    addr: String,
    stop: Arc<AtomicBool>,
    hits: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

static EQUATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^([a-z]) = (\d+|[a-z]) ([+-]) (\d+|[a-z])$").expect("valid"));
static APPLES: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^([A-Z])'s number of apples equals (\d+|[A-Z]'s number of apples) (plus|minus) (\d+|[A-Z]'s number of apples)\. $")
        .expect("valid")
});
static QUERY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"What is the value of ([a-z])\?|How many apples does ([A-Z]) have\?").expect("valid"));

/// Query letter (lowercase), every `(target, value)` in chain order, and
/// the answer, computed over plain integers.
pub type Solved = (char, Vec<(char, i64)>, i64);

pub fn solve_prompt(prompt: &str) -> Option<Solved> {
    let mut eqs: Vec<(char, String, bool, String)> = Vec::new();
    for c in EQUATION.captures_iter(prompt) {
        eqs.push((c[1].chars().next()?, c[2].to_string(), &c[3] == "-", c[4].to_string()));
    }
    for c in APPLES.captures_iter(prompt) {
        let term = |s: &str| {
            if s.starts_with(|c: char| c.is_ascii_digit()) {
                s.to_string()
            } else {
                s[..1].to_ascii_lowercase()
            }
        };
        eqs.push((c[1].chars().next()?.to_ascii_lowercase(), term(&c[2]), &c[3] == "minus", term(&c[4])));
    }
    let q = QUERY.captures(prompt)?;
    let query = q.get(1).or(q.get(2))?.as_str().chars().next()?.to_ascii_lowercase();
    let mut known: Vec<(char, i64)> = Vec::new();
    while known.len() < eqs.len() {
        let before = known.len();
        for (t, l, minus, r) in &eqs {
            if known.iter().any(|k| k.0 == *t) {
                continue;
            }
            let val = |s: &str| -> Option<i64> {
                s.parse().ok().or_else(|| {
                    let c = s.chars().next()?;
                    known.iter().find(|k| k.0 == c).map(|k| k.1)
                })
            };
            if let (Some(a), Some(b)) = (val(l), val(r)) {
                known.push((*t, if *minus { a - b } else { a + b }));
            }
        }
        if known.len() == before {
            return None;
        }
    }
    let answer = known.iter().find(|k| k.0 == query)?.1;
    Some((query, known, answer))
}

fn reply_text(prompt: &str, style: MockStyle) -> String {
    let Some((q, steps, ans)) = solve_prompt(prompt) else {
        return "I cannot parse this question.".into();
    };
    match style {
        MockStyle::Correct => format!("{q} = {ans}"),
        MockStyle::Wrong => format!("{q} = {}", if ans == 0 { 1 } else { 0 }),
        MockStyle::ChainOfThought => steps.iter().map(|(t, v)| format!("{t} = {v}")).collect::<Vec<_>>().join("\n"),
        MockStyle::Unparseable => "The value cannot be determined without more context.".into(),
    }
}

fn handle(mut stream: TcpStream, style: MockStyle, fail_first: usize, hits: &AtomicUsize) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let n = hits.fetch_add(1, Ordering::SeqCst);
    let (status, payload) = if n < fail_first {
        ("503 Service Unavailable", json!({"error": {"message": "try again"}}))
    } else {
        let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let prompt = req.pointer("/messages/0/content").and_then(Value::as_str).unwrap_or("");
        let text = reply_text(prompt, style);
        ("200 OK", json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}))
    };
    let body = payload.to_string();
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

impl MockServer {
    /// Listen on an ephemeral localhost port. The first `fail_first`
    /// requests get HTTP 503.
    pub fn start(style: MockStyle, fail_first: usize) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| Error::Probe(format!("mock bind: {e}")))?;
        listener.set_nonblocking(true).map_err(|e| Error::Probe(format!("mock listener: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Error::Probe(format!("mock address: {e}")))?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let hits = Arc::new(AtomicUsize::new(0));
        let (stop2, hits2) = (stop.clone(), hits.clone());
        let handle = thread::spawn(move || {
            while !stop2.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let hits = hits2.clone();
                        thread::spawn(move || {
                            let _ = handle(stream, style, fail_first, &hits);
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(std::time::Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(MockServer { addr, stop, hits, handle: Some(handle) })
    }

    /// Chat-completions URL of this server.
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    /// Requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
