//! Shared helpers for the integration tests: random inputs, independent
//! oracles, a flaky model wrapper and a stub completions server.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use num_rational::Ratio;
use rand::Rng;
use rand::seq::IndexedRandom;

use mile_core::model::{IclModel, ModelError, Source};
use mile_core::mutators::Shortfall;
use mile_core::{DemoSet, Demonstration, KillMatrix, MockModel, Mutant, MutationConfig, MutatorKind, OodPair, OodPool, TaskSpec, TestCase};

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "nu", "pe", "ri", "so", "ta", "ve", "zu", "ba", "do"];

pub fn word<R: Rng>(rng: &mut R) -> String {
    (0..rng.random_range(1..=3)).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

pub fn sentence<R: Rng>(rng: &mut R, max_tokens: usize) -> String {
    let n = rng.random_range(0..=max_tokens);
    (0..n).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

pub fn random_task<R: Rng>(rng: &mut R) -> TaskSpec {
    let fields = ["Text", "Premise", "Hypothesis"][..rng.random_range(1..=3)]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let labels = ["yes", "no", "maybe", "other", "none"][..rng.random_range(2..=5)]
        .iter()
        .map(|s| s.to_string())
        .collect();
    TaskSpec {
        name: "random".into(),
        system_prompt: if rng.random_bool(0.5) { "Classify.".into() } else { String::new() },
        fields,
        answer_field: "Answer".into(),
        labels,
        ood_label_token: "&".into(),
    }
}

/// `k` demonstrations with pairwise distinct inputs.
pub fn random_demos<R: Rng>(rng: &mut R, task: &TaskSpec, k: usize) -> DemoSet {
    let mut demos = Vec::with_capacity(k);
    for i in 0..k {
        let inputs: Vec<(String, String)> = task
            .fields
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let text = sentence(rng, 9);
                // A unique marker keeps inputs distinct.
                let text = if j == 0 { format!("{text} d{i}") } else { text };
                (f.clone(), text.trim().to_string())
            })
            .collect();
        demos.push(Demonstration::new(inputs, task.labels.choose(rng).unwrap().clone()));
    }
    DemoSet::new(demos)
}

pub fn random_pool<R: Rng>(rng: &mut R) -> OodPool {
    OodPool::new(
        (0..rng.random_range(1..=6))
            .map(|i| OodPair {
                input: format!("{} foreign{i}", sentence(rng, 4)).trim().to_string(),
                output: format!("etranger{i}"),
            })
            .collect(),
    )
}

fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Checks one mutant against its operator's postconditions. Written from the
/// operator definitions, not from the library code.
pub fn check_mutant(src: &DemoSet, task: &TaskSpec, pool: &OodPool, config: &MutationConfig, m: &Mutant) -> Result<(), String> {
    let k = src.demos.len();
    let out = &m.demos.demos;
    if m.group_index != m.kind as usize {
        return Err(format!("{}: group {} does not match kind", m.id, m.group_index));
    }
    let differing = |out: &[Demonstration]| -> Vec<usize> { (0..k).filter(|&i| out[i] != src.demos[i]).collect() };
    match m.kind {
        MutatorKind::NoisyLabel | MutatorKind::OodLabel | MutatorKind::BlurredInput | MutatorKind::OodDemo => {
            if out.len() != k {
                return Err(format!("{}: length {} != {k}", m.id, out.len()));
            }
            let diff = differing(out);
            let [i] = diff[..] else {
                return Err(format!("{}: {} slots changed", m.id, diff.len()));
            };
            let (before, after) = (&src.demos[i], &out[i]);
            match m.kind {
                MutatorKind::NoisyLabel => {
                    if after.inputs != before.inputs || after.label == before.label || !task.labels.contains(&after.label) {
                        return Err(format!("{}: bad noisy label {:?}", m.id, after.label));
                    }
                }
                MutatorKind::OodLabel => {
                    if after.inputs != before.inputs || after.label != task.ood_label_token {
                        return Err(format!("{}: bad ood label {:?}", m.id, after.label));
                    }
                }
                MutatorKind::BlurredInput => {
                    if after.label != before.label {
                        return Err(format!("{}: blur changed the label", m.id));
                    }
                    for field in &task.fields {
                        let (b, a) = (&before.inputs[field], &after.inputs[field]);
                        let n = token_count(b);
                        let want = if n == 0 { 0 } else { n.div_ceil(2).max(1) };
                        let kept: Vec<&str> = a.split_whitespace().collect();
                        let orig: Vec<&str> = b.split_whitespace().collect();
                        if kept.len() != want || kept[..] != orig[..want] {
                            return Err(format!("{}: field {field} kept {} of {n} tokens", m.id, kept.len()));
                        }
                    }
                }
                MutatorKind::OodDemo => {
                    let first = &task.fields[0];
                    let matches_pair = pool.pairs.iter().any(|p| {
                        after.label == p.output
                            && after.inputs.get(first) == Some(&p.input)
                            && task.fields[1..].iter().all(|f| after.inputs.get(f).is_some_and(|v| v.is_empty()))
                    });
                    if !matches_pair {
                        return Err(format!("{}: slot {i} is not a pool pair", m.id));
                    }
                }
                _ => unreachable!(),
            }
        }
        MutatorKind::DemoShuffle => {
            if out == &src.demos {
                return Err(format!("{}: identity permutation", m.id));
            }
            let key = |d: &Demonstration| serde_json::to_string(d).unwrap();
            let mut a: Vec<String> = src.demos.iter().map(key).collect();
            let mut b: Vec<String> = out.iter().map(key).collect();
            a.sort();
            b.sort();
            if a != b {
                return Err(format!("{}: multiset changed", m.id));
            }
        }
        MutatorKind::DemoRepetition => {
            let n = config.repetition_count;
            if out.len() != k + n {
                return Err(format!("{}: length {} != {}", m.id, out.len(), k + n));
            }
            let repeated_at = |i: usize| {
                out[..=i] == src.demos[..=i]
                    && (1..=n).all(|c| out[i + c] == src.demos[i])
                    && out[i + n + 1..] == src.demos[i + 1..]
            };
            if !(0..k).any(repeated_at) {
                return Err(format!("{}: no run of {n} adjacent copies", m.id));
            }
        }
    }
    Ok(())
}

/// Whole-set checks: ids unique, per-kind counts honest, DS distinct.
pub fn check_set(config: &MutationConfig, mutants: &[Mutant], shortfalls: &[Shortfall]) -> Result<(), String> {
    let ids: BTreeSet<&str> = mutants.iter().map(|m| m.id.as_str()).collect();
    if ids.len() != mutants.len() {
        return Err("duplicate mutant ids".into());
    }
    for kind in &config.enabled_kinds {
        let produced = mutants.iter().filter(|m| m.kind == *kind).count();
        let short = shortfalls.iter().find(|s| s.kind == *kind);
        match short {
            None if produced != config.mutants_per_operator => {
                return Err(format!("{kind}: {produced} mutants without a reported shortfall"))
            }
            Some(s) if s.produced != produced || produced >= config.mutants_per_operator => {
                return Err(format!("{kind}: shortfall {s:?} disagrees with {produced}"))
            }
            _ => {}
        }
    }
    let shuffles: BTreeSet<String> = mutants
        .iter()
        .filter(|m| m.kind == MutatorKind::DemoShuffle)
        .map(|m| serde_json::to_string(&m.demos).unwrap())
        .collect();
    if shuffles.len() != mutants.iter().filter(|m| m.kind == MutatorKind::DemoShuffle).count() {
        return Err("repeated DS permutation".into());
    }
    Ok(())
}

/// Scores recomputed from their definitions with exact fractions.
#[derive(Debug, PartialEq, Eq)]
pub struct OracleScores {
    pub standard: Ratio<u64>,
    /// `None` when there are no passed cases.
    pub group: Option<Ratio<u64>>,
    pub individual: BTreeMap<usize, Option<Ratio<u64>>>,
}

pub fn oracle_scores(kills: &[Vec<bool>], group_of: &[usize]) -> OracleScores {
    let m = group_of.len();
    let t = kills.len();
    let mut killed = 0u64;
    for j in 0..m {
        let mut any = false;
        for row in kills {
            any |= row[j];
        }
        killed += any as u64;
    }
    let standard = if t == 0 { Ratio::from_integer(0) } else { Ratio::new(killed, m as u64) };

    let groups: BTreeSet<usize> = group_of.iter().copied().collect();
    let mut individual = BTreeMap::new();
    for &g in &groups {
        let hits = kills.iter().filter(|row| (0..m).any(|j| group_of[j] == g && row[j])).count();
        individual.insert(g, (t > 0).then(|| Ratio::new(hits as u64, t as u64)));
    }
    let group = (t > 0).then(|| {
        let mut sum = Ratio::from_integer(0u64);
        for row in kills {
            let mut hit = BTreeSet::new();
            for j in 0..m {
                if row[j] {
                    hit.insert(group_of[j]);
                }
            }
            sum += Ratio::new(hit.len() as u64, groups.len() as u64);
        }
        sum / t as u64
    });
    OracleScores { standard, group, individual }
}

pub fn random_matrix<R: Rng>(rng: &mut R, t: usize, m: usize) -> KillMatrix {
    let density = rng.random_range(0.0..1.0);
    let rows = (0..t).map(|_| (0..m).map(|_| rng.random_bool(density)).collect()).collect();
    let groups = (0..m).map(|_| rng.random_range(0..6)).collect();
    KillMatrix::from_rows(rows, groups)
}

/// Mock model that counts successful calls and fails every call after `budget`.
pub struct FlakyModel {
    pub inner: MockModel,
    pub budget: usize,
    pub calls: AtomicUsize,
    pub succeeded: AtomicUsize,
}

impl FlakyModel {
    pub fn new(budget: usize) -> Self {
        Self {
            inner: MockModel::new(),
            budget,
            calls: AtomicUsize::new(0),
            succeeded: AtomicUsize::new(0),
        }
    }
}

impl IclModel for FlakyModel {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn source(&self) -> Source {
        Source::Remote
    }

    fn respond(&self, task: &TaskSpec, demos: &DemoSet, query: &TestCase, prompt: &str) -> Result<String, ModelError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(ModelError::Endpoint {
                status: Some(503),
                message: "injected outage".into(),
            });
        }
        let out = self.inner.respond(task, demos, query, prompt)?;
        self.succeeded.fetch_add(1, Ordering::SeqCst);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: serde_json::Value,
}

/// Minimal HTTP/1.1 server speaking the chat-completions shape. Each
/// connection carries one request; `script` maps the request number to a
/// status and completion text.
pub struct StubServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<RecordedRequest>>>,
    handle: Option<JoinHandle<()>>,
}

type Script = dyn Fn(usize, &serde_json::Value) -> (u16, String) + Send + Sync;

impl StubServer {
    pub fn start(expected: usize, script: Box<Script>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for n in 0..expected {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or_default().to_string();
                let path = parts.next().unwrap_or_default().to_string();
                let mut headers = BTreeMap::new();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
                    }
                }
                let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let body: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
                let (status, text) = script(n, &body);
                log.lock().unwrap().push(RecordedRequest { method, path, headers, body });
                let payload = if status == 200 {
                    serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}).to_string()
                } else {
                    serde_json::json!({"error": text}).to_string()
                };
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Self {
            base_url,
            requests,
            handle: Some(handle),
        }
    }

    pub fn join(mut self) -> Vec<RecordedRequest> {
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
        self.requests.lock().unwrap().clone()
    }
}
