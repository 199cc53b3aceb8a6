#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use qmbias::orchestrator::RunConfig;
use qmbias::survey::{Answer, AnswerMatrix};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn appendix_matrix() -> AnswerMatrix {
    let dir = data_dir().join("appendix");
    let (m, _) = qmbias::survey::ingest_corpus(
        dir.join("matrix.csv"),
        dir.join("questions.json"),
        &Default::default(),
    )
    .expect("appendix corpus loads");
    m
}

/// Run config over the appendix corpus with a noiseless synthetic oracle.
pub fn oracle_config(conditions: &[&str], fidelity: f64, base_rate: f64, extra: &str) -> RunConfig {
    let list: Vec<String> = conditions.iter().map(|c| format!("\"{c}\"")).collect();
    let seeds: String = conditions
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{c} = {}\n", 100 + i))
        .collect();
    let text = format!(
        r#"
conditions = [{}]
parallelism = 8
{extra}
[corpus]
matrix = "matrix.csv"
questions = "questions.json"

[backend]
kind = "synthetic"
synthetic = {{ fidelity = {fidelity:?}, base_rate = {base_rate:?}, noise = 0.0, seed = 5 }}

[seeds]
{seeds}"#,
        list.join(", ")
    );
    RunConfig::from_toml_str(&text, data_dir().join("appendix")).expect("valid config")
}

/// Gold answers of every respondent with one, in respondent order.
pub fn gold_column(m: &AnswerMatrix, target: &str) -> Vec<bool> {
    let q = m.question_position(target).unwrap();
    (0..m.respondents().len())
        .filter_map(|r| match m.answer_at(r, q) {
            Answer::Yes => Some(true),
            Answer::No => Some(false),
            Answer::Missing => None,
        })
        .collect()
}

/// Plain two-pass Pearson correlation.
pub fn naive_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Byte contents of every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A minimal OpenAI-compatible server answering chat completions with top
/// logprobs derived from the request body. Counts requests.
pub struct StubServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    handle: Option<thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (r, s) = (requests.clone(), stop.clone());
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let r = r.clone();
                thread::spawn(move || serve(stream, &r));
            }
        });
        StubServer {
            url: format!("http://{addr}/v1"),
            requests,
            stop,
            addr,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, requests: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        requests.fetch_add(1, Ordering::SeqCst);
        let reply = respond(&body).to_string();
        let head = format!(
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            reply.len()
        );
        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(reply.as_bytes()).is_err() {
            return;
        }
    }
}

/// Yes-probability is a deterministic function of the request body.
fn respond(body: &[u8]) -> serde_json::Value {
    let h = body.iter().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(*b as u64));
    let p_yes = 0.05 + 0.9 * ((h % 1000) as f64 / 1000.0);
    let p_no = (1.0 - p_yes) * 0.9;
    serde_json::json!({
        "choices": [{
            "logprobs": {"content": [{
                "token": "yes",
                "logprob": p_yes.ln(),
                "top_logprobs": [
                    {"token": "yes", "logprob": p_yes.ln()},
                    {"token": "No", "logprob": p_no.ln()},
                    {"token": "Maybe", "logprob": (1.0 - p_yes - p_no).ln()}
                ]
            }]}
        }]
    })
}
