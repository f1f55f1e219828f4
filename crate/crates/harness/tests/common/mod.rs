#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use prss_core::toy::{make_memorization_testbed, TestbedConfig};
use prss_harness::config::{LambdaGrid, RunConfig, RUN_SCHEMA_VERSION};
use prss_core::guidance::Policy;

/// Two conditions of each kind in three families of two.
pub fn small_config() -> TestbedConfig {
    TestbedConfig {
        n_global: 2,
        n_local: 2,
        n_normal: 2,
        family_size: 2,
        ..TestbedConfig::default()
    }
}

pub fn write_testbed(dir: &Path, cfg: &TestbedConfig, seed: u64) -> PathBuf {
    let tb = make_memorization_testbed(cfg, seed).unwrap();
    let path = dir.join("testbed.json");
    std::fs::write(&path, tb.to_json().unwrap()).unwrap();
    path
}

pub fn run_config(testbed: PathBuf, out_dir: PathBuf, policies: Vec<Policy>, lambdas: LambdaGrid, seeds: Vec<u64>) -> RunConfig {
    let mut cfg = RunConfig::from_json(&format!(
        r#"{{"schema_version":{RUN_SCHEMA_VERSION},"testbed":"x","policies":["cfg"],"lambda":{{"values":[1.0]}},"seeds":[0],"out_dir":"y"}}"#
    ))
    .unwrap();
    cfg.testbed = testbed;
    cfg.out_dir = out_dir;
    cfg.policies = policies;
    cfg.lambda = lambdas;
    cfg.seeds = seeds;
    cfg.pe.step_size = 20.0;
    cfg
}

#[derive(Debug, Clone)]
pub struct Captured {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Captured {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

/// A one-request-per-connection HTTP server replaying canned responses;
/// the last response repeats once the script runs out.
pub struct MockHttp {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<Captured>>>,
}

impl MockHttp {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        std::thread::spawn(move || {
            for (n, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                    continue;
                }
                let mut headers = Vec::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        headers.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                let len = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .map(|(_, v)| v.parse::<usize>().unwrap())
                    .unwrap_or(0);
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Captured {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body,
                });
                let (status, payload) = script[n.min(script.len() - 1)].clone();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Self { base_url, requests }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn captured(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }
}

pub fn completion(text: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
    })
    .to_string()
}
