//! Record/replay HTTP layer shared by tile, source and gateway clients.
//!
//! Every outbound request is addressed by a `(kind, locator)` pair. In
//! [`FetchMode::Replay`] the response comes from a [`ResponseStore`] on disk
//! and no transport is ever touched; [`FetchMode::Record`] goes to the network
//! and writes what it got; [`FetchMode::Live`] only goes to the network.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FetchMode {
    #[default]
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<Vec<u8>>,
}

impl Request {
    pub fn get(url: impl Into<String>) -> Self {
        Request { method: Method::Get, url: url.into(), headers: Vec::new(), body: None }
    }

    pub fn post_json(url: impl Into<String>, body: Vec<u8>) -> Self {
        Request {
            method: Method::Post,
            url: url.into(),
            headers: vec![("Content-Type".into(), "application/json".into())],
            body: Some(body),
        }
    }

    pub fn header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    pub content_type: Option<String>,
    #[serde(skip)]
    pub body: Vec<u8>,
    /// Wall time of the original exchange; preserved across replay.
    #[serde(default)]
    pub latency_ms: u64,
}

impl Response {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("{kind} {locator}: HTTP {status} after {attempts} attempt(s)")]
    Status {
        kind: String,
        locator: String,
        status: u16,
        attempts: u32,
    },
    #[error("{kind} {locator}: transport error after {attempts} attempt(s): {message}")]
    Transport {
        kind: String,
        locator: String,
        message: String,
        attempts: u32,
    },
    #[error("{kind} {locator}: not present in replay store")]
    NotRecorded { kind: String, locator: String },
    #[error("no transport configured for live fetching")]
    NoTransport,
    #[error("store {path}: {source}")]
    Store {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Something that can perform a single HTTP exchange.
pub trait Transport: Send + Sync {
    fn send(&self, request: &Request) -> Result<Response, String>;
}

impl<F> Transport for F
where
    F: Fn(&Request) -> Result<Response, String> + Send + Sync,
{
    fn send(&self, request: &Request) -> Result<Response, String> {
        self(request)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredMeta {
    kind: String,
    locator: String,
    #[serde(flatten)]
    response: Response,
}

/// Directory of recorded responses keyed by `sha256(kind \n locator)`.
///
/// Each entry is a pair of files: `<key>.json` (kind, locator, status,
/// content type, latency) and `<key>.body` (raw bytes).
#[derive(Debug, Clone)]
pub struct ResponseStore {
    dir: PathBuf,
}

impl ResponseStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(kind: &str, locator: &str) -> String {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update(b"\n");
        h.update(locator.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, kind: &str, locator: &str) -> Result<Option<Response>, FetchError> {
        let key = Self::key(kind, locator);
        let meta_path = self.dir.join(format!("{key}.json"));
        let meta = match fs::read(&meta_path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(store_err(&meta_path, source)),
        };
        let meta: StoredMeta = serde_json::from_slice(&meta).map_err(|e| {
            store_err(&meta_path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })?;
        let body_path = self.dir.join(format!("{key}.body"));
        let body = fs::read(&body_path).map_err(|e| store_err(&body_path, e))?;
        Ok(Some(Response { body, ..meta.response }))
    }

    pub fn put(&self, kind: &str, locator: &str, response: &Response) -> Result<(), FetchError> {
        fs::create_dir_all(&self.dir).map_err(|e| store_err(&self.dir, e))?;
        let key = Self::key(kind, locator);
        let body_path = self.dir.join(format!("{key}.body"));
        fs::write(&body_path, &response.body).map_err(|e| store_err(&body_path, e))?;
        let meta = StoredMeta {
            kind: kind.to_string(),
            locator: locator.to_string(),
            response: response.clone(),
        };
        let meta_path = self.dir.join(format!("{key}.json"));
        let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        fs::write(&meta_path, json).map_err(|e| store_err(&meta_path, e))
    }
}

fn store_err(path: &Path, source: std::io::Error) -> FetchError {
    FetchError::Store { path: path.display().to_string(), source }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

/// Mode-aware front end over a transport and a response store.
#[derive(Clone)]
pub struct Fetcher {
    mode: FetchMode,
    store: Option<ResponseStore>,
    transport: Option<Arc<dyn Transport>>,
    retry: RetryPolicy,
    politeness: Duration,
    last_request: Arc<Mutex<Option<Instant>>>,
}

impl std::fmt::Debug for Fetcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fetcher")
            .field("mode", &self.mode)
            .field("store", &self.store)
            .field("retry", &self.retry)
            .finish()
    }
}

impl Fetcher {
    pub fn replay(store: ResponseStore) -> Self {
        Fetcher {
            mode: FetchMode::Replay,
            store: Some(store),
            transport: None,
            retry: RetryPolicy::default(),
            politeness: Duration::ZERO,
            last_request: Arc::default(),
        }
    }

    pub fn live(transport: Arc<dyn Transport>) -> Self {
        Fetcher {
            mode: FetchMode::Live,
            store: None,
            transport: Some(transport),
            retry: RetryPolicy::default(),
            politeness: Duration::ZERO,
            last_request: Arc::default(),
        }
    }

    pub fn record(transport: Arc<dyn Transport>, store: ResponseStore) -> Self {
        Fetcher { mode: FetchMode::Record, store: Some(store), ..Self::live(transport) }
    }

    /// Build from a mode. `transport` may be `None` only in replay mode.
    pub fn with_mode(
        mode: FetchMode,
        store: Option<ResponseStore>,
        transport: Option<Arc<dyn Transport>>,
    ) -> Result<Self, FetchError> {
        match mode {
            FetchMode::Replay => Ok(Self::replay(store.ok_or_else(|| FetchError::NotRecorded {
                kind: "store".into(),
                locator: "replay mode requires a store directory".into(),
            })?)),
            FetchMode::Live => Ok(Self::live(transport.ok_or(FetchError::NoTransport)?)),
            FetchMode::Record => {
                let transport = transport.ok_or(FetchError::NoTransport)?;
                match store {
                    Some(store) => Ok(Self::record(transport, store)),
                    None => Ok(Self::live(transport)),
                }
            }
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Minimum spacing between consecutive network requests made through
    /// this fetcher (and its clones).
    pub fn with_politeness(mut self, delay: Duration) -> Self {
        self.politeness = delay;
        self.last_request = Arc::default();
        self
    }

    pub fn mode(&self) -> FetchMode {
        self.mode
    }

    /// Fetch, returning only successful (2xx) responses.
    pub fn fetch(&self, kind: &str, locator: &str, request: &Request) -> Result<Response, FetchError> {
        if self.mode == FetchMode::Replay {
            let store = self.store.as_ref().expect("replay fetcher has a store");
            let response = store.get(kind, locator)?.ok_or_else(|| FetchError::NotRecorded {
                kind: kind.to_string(),
                locator: locator.to_string(),
            })?;
            if !response.is_success() {
                return Err(FetchError::Status {
                    kind: kind.to_string(),
                    locator: locator.to_string(),
                    status: response.status,
                    attempts: 1,
                });
            }
            return Ok(response);
        }

        let transport = self.transport.as_ref().ok_or(FetchError::NoTransport)?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.wait_politely();
            let started = Instant::now();
            let outcome = transport.send(request);
            let retryable = match &outcome {
                Ok(r) if r.is_success() => {
                    let mut r = r.clone();
                    if r.latency_ms == 0 {
                        r.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    if let (FetchMode::Record, Some(store)) = (self.mode, &self.store) {
                        store.put(kind, locator, &r)?;
                    }
                    return Ok(r);
                }
                Ok(r) => r.status == 429 || r.status >= 500,
                Err(_) => true,
            };
            if !retryable || attempt >= self.retry.attempts.max(1) {
                return Err(match outcome {
                    Ok(r) => FetchError::Status {
                        kind: kind.to_string(),
                        locator: locator.to_string(),
                        status: r.status,
                        attempts: attempt,
                    },
                    Err(message) => FetchError::Transport {
                        kind: kind.to_string(),
                        locator: locator.to_string(),
                        message,
                        attempts: attempt,
                    },
                });
            }
            let backoff = self.retry.base_delay * 2u32.pow(attempt - 1);
            log::debug!("{kind} {locator}: retry {attempt} after {backoff:?}");
            std::thread::sleep(backoff);
        }
    }

    fn wait_politely(&self) {
        if self.politeness.is_zero() {
            return;
        }
        let mut last = self.last_request.lock().unwrap();
        if let Some(prev) = *last {
            let since = prev.elapsed();
            if since < self.politeness {
                std::thread::sleep(self.politeness - since);
            }
        }
        *last = Some(Instant::now());
    }
}

#[cfg(feature = "net")]
mod ureq_transport {
    use super::*;

    /// Blocking HTTP transport backed by `ureq`.
    pub struct UreqTransport {
        agent: ureq::Agent,
        user_agent: String,
    }

    impl UreqTransport {
        pub fn new(user_agent: impl Into<String>, timeout: Duration) -> Self {
            let config = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(false)
                .build();
            UreqTransport { agent: config.into(), user_agent: user_agent.into() }
        }
    }

    impl Transport for UreqTransport {
        fn send(&self, request: &Request) -> Result<Response, String> {
            let result = match request.method {
                Method::Get => {
                    let mut req = self.agent.get(&request.url).header("User-Agent", &self.user_agent);
                    for (k, v) in &request.headers {
                        req = req.header(k, v);
                    }
                    req.call()
                }
                Method::Post => {
                    let mut req = self.agent.post(&request.url).header("User-Agent", &self.user_agent);
                    for (k, v) in &request.headers {
                        req = req.header(k, v);
                    }
                    req.send(request.body.as_deref().unwrap_or_default())
                }
            };
            let mut resp = result.map_err(|e| e.to_string())?;
            let status = resp.status().as_u16();
            let content_type = resp
                .headers()
                .get("content-type")
                .and_then(|v| v.to_str().ok())
                .map(str::to_string);
            let body = resp
                .body_mut()
                .with_config()
                .limit(64 * 1024 * 1024)
                .read_to_vec()
                .map_err(|e| e.to_string())?;
            Ok(Response { status, content_type, body, latency_ms: 0 })
        }
    }
}

#[cfg(feature = "net")]
pub use ureq_transport::UreqTransport;
