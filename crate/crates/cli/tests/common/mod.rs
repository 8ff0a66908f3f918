#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use orchestra_cli::gateway::{router, Gateway};
use orchestra_core::kernel::{Kernel, KernelConfig};
use orchestra_core::seeds;
use reqwest::blocking::{Client, Response};
use serde_json::Value as Json;
use tempfile::TempDir;

pub const TOKEN: &str = "test-token";

pub struct Server {
    pub base: String,
    pub kernel: Arc<Kernel>,
    pub client: Client,
    _dir: TempDir,
}

/// Gateway over default generated seeds on an ephemeral port.
pub fn server() -> Server {
    let dir = TempDir::new().unwrap();
    seeds::generate(seeds::DEFAULT_SEED).write(dir.path()).unwrap();
    let kernel = Arc::new(Kernel::load(KernelConfig::from_seed_dir(dir.path())).unwrap());
    let gateway = Gateway::new(kernel.clone(), Some(TOKEN.to_string()));
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(gateway)).await.unwrap();
        });
    });
    let addr = rx.recv_timeout(Duration::from_secs(10)).unwrap();
    Server {
        base: format!("http://{addr}"),
        kernel,
        client: Client::builder().timeout(Duration::from_secs(30)).build().unwrap(),
        _dir: dir,
    }
}

fn body(r: Response) -> (u16, Json) {
    let status = r.status().as_u16();
    let text = r.text().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Json::String(text)))
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> (u16, Json) {
        body(self.client.get(self.url(path)).send().unwrap())
    }

    pub fn get_text(&self, path: &str) -> (u16, String) {
        let r = self.client.get(self.url(path)).send().unwrap();
        (r.status().as_u16(), r.text().unwrap())
    }

    pub fn post(&self, path: &str, payload: &Json) -> (u16, Json) {
        self.post_with(path, payload.to_string(), Some(TOKEN), None)
    }

    pub fn post_with(&self, path: &str, raw: String, token: Option<&str>, key: Option<&str>) -> (u16, Json) {
        let mut req = self
            .client
            .post(self.url(path))
            .header("content-type", "application/json")
            .body(raw);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        body(req.send().unwrap())
    }

    pub fn delete(&self, path: &str) -> (u16, Json) {
        body(self.client.delete(self.url(path)).bearer_auth(TOKEN).send().unwrap())
    }

    pub fn session(&self, config: Json) -> String {
        let (status, v) = self.post("/v1/sessions", &config);
        assert_eq!(status, 201, "{v}");
        v["session"].as_str().unwrap().to_string()
    }

    /// Opens the session's event feed; events arrive on the receiver as
    /// (id, record, arrival time) until the feed ends.
    pub fn feed(&self, session: &str, from: Option<u64>) -> mpsc::Receiver<(u64, Json, Instant)> {
        let mut url = self.url(&format!("/v1/sessions/{session}/feed"));
        if let Some(f) = from {
            url = format!("{url}?from={f}");
        }
        let resp = Client::builder()
            .timeout(None)
            .build()
            .unwrap()
            .get(url)
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut id = None;
            for line in BufReader::new(resp).lines() {
                let Ok(line) = line else { break };
                if let Some(v) = line.strip_prefix("id:") {
                    id = v.trim().parse::<u64>().ok();
                } else if let Some(d) = line.strip_prefix("data:") {
                    let record: Json = serde_json::from_str(d.trim()).unwrap();
                    if tx.send((id.take().unwrap(), record, Instant::now())).is_err() {
                        break;
                    }
                }
            }
        });
        rx
    }
}

/// Polls `check` until it yields a value or `timeout` passes.
pub fn wait_for<T>(timeout: Duration, mut check: impl FnMut() -> Option<T>) -> Option<T> {
    let end = Instant::now() + timeout;
    loop {
        if let Some(v) = check() {
            return Some(v);
        }
        if Instant::now() >= end {
            return None;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

pub fn has_tag(record: &Json, tag: &str) -> bool {
    record["tags"].as_array().is_some_and(|t| t.iter().any(|x| x == tag))
}
