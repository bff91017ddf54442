//! Concurrent, polite fetching of HTML pages into a labeled corpus.
//!
//! Redirects are followed here rather than by the transport so every hop
//! is subject to the same per-host spacing and the 5-hop cap. Each task's
//! timeout is a deadline for the whole task, enforced by running transport
//! calls on a helper thread.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use url::Url;

use crate::corpus::{Label, LabeledDocument};
use crate::domain::DomainResolver;
use crate::error::{Error, Result};

pub const MAX_REDIRECTS: usize = 5;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(15);
pub const DEFAULT_MAX_BYTES: usize = 2 * 1024 * 1024;
pub const USER_AGENT: &str = concat!("phishlens/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchTask {
    pub url: String,
    pub label: Label,
    pub timeout: Duration,
    pub max_bytes: usize,
}

impl FetchTask {
    pub fn new(url: impl Into<String>, label: Label) -> Self {
        Self {
            url: url.into(),
            label,
            timeout: DEFAULT_TIMEOUT,
            max_bytes: DEFAULT_MAX_BYTES,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_bytes(mut self, max_bytes: usize) -> Self {
        self.max_bytes = max_bytes;
        self
    }

    fn parsed_url(&self) -> std::result::Result<Url, String> {
        let url = Url::parse(self.url.trim()).map_err(|e| format!("invalid URL: {e}"))?;
        match url.scheme() {
            "http" | "https" => Ok(url),
            other => Err(format!("unsupported scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Ok,
    Timeout,
    NetworkError,
    HttpError,
    TooLarge,
    NotHtml,
}

impl FetchStatus {
    /// Worth another attempt.
    pub fn is_transient(self) -> bool {
        matches!(self, FetchStatus::Timeout | FetchStatus::NetworkError)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOutcome {
    pub task: FetchTask,
    pub status: FetchStatus,
    /// Present iff `status` is `Ok`.
    pub document: Option<LabeledDocument>,
    /// Human-readable failure reason; empty on success.
    pub detail: String,
}

/// One HTTP exchange without redirect handling.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawResponse {
    pub status: u16,
    pub location: Option<String>,
    pub content_type: Option<String>,
    pub content_length: Option<u64>,
    /// At most the requested number of bytes.
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Network(String),
}

/// A single GET. Implementations must not follow redirects, should read at
/// most `max_bytes` of body, and must be safe to call concurrently.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str, timeout: Duration, max_bytes: usize) -> std::result::Result<RawResponse, TransportError>;
}

/// Blocking HTTP(S) transport.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        let config = ureq::Agent::config_builder()
            .max_redirects(0)
            .http_status_as_error(false)
            .user_agent(USER_AGENT)
            .build();
        Self { agent: config.into() }
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str, timeout: Duration, max_bytes: usize) -> std::result::Result<RawResponse, TransportError> {
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut) => TransportError::Timeout,
            other => TransportError::Network(other.to_string()),
        };
        let mut resp = self
            .agent
            .get(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .call()
            .map_err(map_err)?;
        let header = |name: &str| {
            resp.headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        };
        let location = header("location");
        let content_type = header("content-type");
        let content_length = header("content-length").and_then(|v| v.trim().parse().ok());
        let status = resp.status().as_u16();
        let mut body = Vec::new();
        resp.body_mut()
            .as_reader()
            .take(max_bytes as u64)
            .read_to_end(&mut body)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::TimedOut => TransportError::Timeout,
                _ => TransportError::Network(e.to_string()),
            })?;
        Ok(RawResponse {
            status,
            location,
            content_type,
            content_length,
            body,
        })
    }
}

/// Stable document id: label plus the first 16 hex digits of SHA-256(url).
pub fn document_id(label: Label, url: &str) -> String {
    let digest = Sha256::digest(url.as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("{label}-{hex}")
}

fn is_html_media_type(content_type: &str) -> bool {
    let media = content_type.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
    media == "text/html" || media == "application/xhtml+xml"
}

/// Whether the start of a body looks like an HTML document.
pub fn sniff_html(body: &[u8]) -> bool {
    let head = &body[..body.len().min(1024)];
    let text = String::from_utf8_lossy(head).to_ascii_lowercase();
    let trimmed = text.trim_start_matches('\u{feff}').trim_start();
    ["<!doctype html", "<html", "<head", "<body", "<title"]
        .iter()
        .any(|p| trimmed.starts_with(p))
        || text.contains("<html")
}

fn call_with_deadline(
    transport: &Arc<dyn Transport>,
    url: &str,
    deadline: Instant,
    max_bytes: usize,
) -> std::result::Result<RawResponse, TransportError> {
    let remaining = deadline.saturating_duration_since(Instant::now());
    if remaining.is_zero() {
        return Err(TransportError::Timeout);
    }
    let (tx, rx) = mpsc::channel();
    let transport = Arc::clone(transport);
    let url = url.to_string();
    // A transport that overruns the deadline is abandoned; its thread
    // finishes in the background and the send fails harmlessly.
    std::thread::spawn(move || {
        let _ = tx.send(transport.get(&url, remaining, max_bytes));
    });
    match rx.recv_timeout(remaining) {
        Ok(result) => result,
        Err(mpsc::RecvTimeoutError::Timeout) => Err(TransportError::Timeout),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(TransportError::Network("transport panicked".into())),
    }
}

/// Fetches one page, calling `before_request` ahead of every HTTP request
/// (including redirect hops). Never fails; problems land in the status.
pub fn fetch_with(
    task: &FetchTask,
    transport: &Arc<dyn Transport>,
    resolver: &DomainResolver,
    before_request: &dyn Fn(&Url),
) -> FetchOutcome {
    let fail = |status: FetchStatus, detail: String| FetchOutcome {
        task: task.clone(),
        status,
        document: None,
        detail,
    };
    let mut url = match task.parsed_url() {
        Ok(u) => u,
        Err(e) => return fail(FetchStatus::NetworkError, e),
    };
    if task.timeout.is_zero() || task.max_bytes == 0 {
        return fail(FetchStatus::NetworkError, "timeout and max_bytes must be positive".into());
    }
    let deadline = Instant::now() + task.timeout;
    let mut redirects = 0;
    let response = loop {
        before_request(&url);
        let resp = match call_with_deadline(transport, url.as_str(), deadline, task.max_bytes) {
            Ok(r) => r,
            Err(TransportError::Timeout) => return fail(FetchStatus::Timeout, format!("no response within {:?}", task.timeout)),
            Err(TransportError::Network(m)) => return fail(FetchStatus::NetworkError, m),
        };
        if (300..400).contains(&resp.status) {
            if let Some(location) = &resp.location {
                if redirects == MAX_REDIRECTS {
                    return fail(FetchStatus::HttpError, format!("more than {MAX_REDIRECTS} redirects"));
                }
                url = match url.join(location) {
                    Ok(next) if matches!(next.scheme(), "http" | "https") => next,
                    _ => return fail(FetchStatus::HttpError, format!("bad redirect target {location:?}")),
                };
                redirects += 1;
                continue;
            }
        }
        break resp;
    };
    if !(200..300).contains(&response.status) {
        return fail(FetchStatus::HttpError, format!("HTTP {}", response.status));
    }
    if response.content_length.is_some_and(|n| n > task.max_bytes as u64) {
        return fail(
            FetchStatus::TooLarge,
            format!("declared length {} exceeds {}", response.content_length.unwrap_or(0), task.max_bytes),
        );
    }
    let html_type = response.content_type.as_deref().is_some_and(is_html_media_type);
    if !html_type && !sniff_html(&response.body) {
        return fail(
            FetchStatus::NotHtml,
            format!("content type {:?}", response.content_type.as_deref().unwrap_or("")),
        );
    }
    let body = &response.body[..response.body.len().min(task.max_bytes)];
    let html = String::from_utf8_lossy(body).into_owned();
    let id = document_id(task.label, task.url.trim());
    FetchOutcome {
        task: task.clone(),
        status: FetchStatus::Ok,
        document: Some(LabeledDocument::new(id, Some(url.to_string()), html, task.label, resolver)),
        detail: String::new(),
    }
}

pub fn fetch_one(task: &FetchTask, transport: &Arc<dyn Transport>, resolver: &DomainResolver) -> FetchOutcome {
    fetch_with(task, transport, resolver, &|_| {})
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestOptions {
    pub max_concurrency: usize,
    /// Minimum spacing between request starts to the same host.
    pub per_host_interval: Duration,
    /// Extra attempts for timeouts and network errors.
    pub retries: usize,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        Self {
            max_concurrency: 8,
            per_host_interval: Duration::from_millis(1000),
            retries: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HarvestResult {
    /// Successful fetches, in task order.
    pub documents: Vec<LabeledDocument>,
    /// Failed fetches, in task order.
    pub failures: Vec<FetchOutcome>,
}

/// Added to every per-host reservation so jitter in starting the request
/// thread never makes the observed gap undershoot the interval.
const SCHEDULE_SLACK: Duration = Duration::from_millis(2);

/// Per-host reservation of the next permitted request start.
struct HostSchedule {
    interval: Duration,
    next: Mutex<HashMap<String, Instant>>,
}

impl HostSchedule {
    fn wait_turn(&self, url: &Url) {
        if self.interval.is_zero() {
            return;
        }
        let host = url.host_str().unwrap_or("").to_ascii_lowercase();
        let slot = {
            let mut next = self.next.lock().expect("schedule lock");
            let now = Instant::now();
            let slot = next.get(&host).map_or(now, |&t| t.max(now));
            next.insert(host, slot + self.interval + SCHEDULE_SLACK);
            slot
        };
        let wait = slot.saturating_duration_since(Instant::now());
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Fetches every task with at most `max_concurrency` requests in flight.
pub fn harvest(
    tasks: &[FetchTask],
    transport: Arc<dyn Transport>,
    options: &HarvestOptions,
    resolver: &DomainResolver,
) -> Result<HarvestResult> {
    if options.max_concurrency == 0 {
        return Err(Error::Config("max_concurrency must be at least 1".into()));
    }
    let schedule = HostSchedule {
        interval: options.per_host_interval,
        next: Mutex::new(HashMap::new()),
    };
    let next_task = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<FetchOutcome>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let workers = options.max_concurrency.min(tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next_task.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let mut outcome = fetch_with(task, &transport, resolver, &|u| schedule.wait_turn(u));
                for attempt in 0..options.retries {
                    if !outcome.status.is_transient() {
                        break;
                    }
                    log::debug!("retry {} for {}: {}", attempt + 1, task.url, outcome.detail);
                    outcome = fetch_with(task, &transport, resolver, &|u| schedule.wait_turn(u));
                }
                match outcome.status {
                    FetchStatus::Ok => log::info!("fetched {}", task.url),
                    s => log::info!("failed {} ({s:?}): {}", task.url, outcome.detail),
                }
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let mut result = HarvestResult::default();
    for slot in slots {
        let outcome = slot.into_inner().expect("slot lock").expect("every task settled");
        match outcome.document {
            Some(doc) => result.documents.push(doc),
            None => result.failures.push(outcome),
        }
    }
    Ok(result)
}

/// Reads a URL list: one URL per line; blank lines and `#` comments skipped.
pub fn load_url_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut urls = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ok = Url::parse(line).is_ok_and(|u| matches!(u.scheme(), "http" | "https"));
        if !ok {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("not an http(s) URL: {line:?}"),
            });
        }
        urls.push(line.to_string());
    }
    Ok(urls)
}
