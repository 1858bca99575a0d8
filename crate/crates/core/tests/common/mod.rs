#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn pack() -> PathBuf {
    fixtures().join("pack")
}

pub fn mini() -> PathBuf {
    fixtures().join("mini")
}

pub fn pack_manifests() -> Vec<PathBuf> {
    vec![pack().join("s01_day.session.json"), pack().join("s02_night.session.json")]
}

pub fn mini_manifests() -> Vec<PathBuf> {
    vec![mini().join("s01_day.session.json"), mini().join("s02_night.session.json")]
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub received: Instant,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(body: impl Into<String>) -> Self {
        Self {
            status: 200,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: r#"{"error":"stub"}"#.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn after(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn chat(content: &str) -> Self {
        Self::ok(
            serde_json::json!({
                "id": "cmpl-stub",
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
            })
            .to_string(),
        )
    }

    pub fn models(ids: &[&str]) -> Self {
        let data: Vec<_> = ids.iter().map(|id| serde_json::json!({"id": id, "object": "model"})).collect();
        Self::ok(serde_json::json!({"object": "list", "data": data}).to_string())
    }
}

type Handler = dyn Fn(usize, &Request) -> Reply + Send + Sync;

struct State {
    requests: Mutex<Vec<Request>>,
    calls: AtomicUsize,
    active: AtomicUsize,
    peak: AtomicUsize,
    stop: AtomicBool,
}

/// Minimal HTTP/1.1 server: one thread per connection, `Connection: close`.
/// The handler receives a running call number (0-based) and the request.
pub struct StubServer {
    addr: SocketAddr,
    state: Arc<State>,
}

impl StubServer {
    pub fn start(handler: impl Fn(usize, &Request) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        let state = Arc::new(State {
            requests: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let handler: Arc<Handler> = Arc::new(handler);
        let st = Arc::clone(&state);
        thread::spawn(move || {
            for conn in listener.incoming() {
                if st.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let st = Arc::clone(&st);
                let handler = Arc::clone(&handler);
                thread::spawn(move || serve(conn, &st, handler.as_ref()));
            }
        });
        Self { addr, state }
    }

    /// Chat completions answered by `chat`; `/v1/models` lists `models`.
    pub fn openai(models: &'static [&'static str], chat: impl Fn(usize, &Request) -> Reply + Send + Sync + 'static) -> Self {
        let chat_calls = AtomicUsize::new(0);
        Self::start(move |_, req| {
            if req.path.ends_with("/v1/models") {
                Reply::models(models)
            } else {
                chat(chat_calls.fetch_add(1, Ordering::SeqCst), req)
            }
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<Request> {
        self.state.requests.lock().unwrap().clone()
    }

    pub fn requests_to(&self, suffix: &str) -> Vec<Request> {
        self.requests().into_iter().filter(|r| r.path.ends_with(suffix)).collect()
    }

    /// Highest number of requests being handled at the same time.
    pub fn peak_concurrency(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

fn read_request(conn: &TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(conn.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    let mut length = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.eq_ignore_ascii_case("content-length") {
                length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
        received: Instant::now(),
    })
}

fn serve(mut conn: TcpStream, st: &State, handler: &Handler) {
    let Some(req) = read_request(&conn) else { return };
    let now = st.active.fetch_add(1, Ordering::SeqCst) + 1;
    st.peak.fetch_max(now, Ordering::SeqCst);
    st.requests.lock().unwrap().push(req.clone());
    let n = st.calls.fetch_add(1, Ordering::SeqCst);
    let reply = handler(n, &req);
    if !reply.delay.is_zero() {
        thread::sleep(reply.delay);
    }
    // release before replying so a client cannot start its next request
    // while this one still counts as active
    st.active.fetch_sub(1, Ordering::SeqCst);
    let head = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.status,
        reply.body.len()
    );
    let _ = conn.write_all(head.as_bytes());
    let _ = conn.write_all(reply.body.as_bytes());
    let _ = conn.flush();
}

pub mod repair_corpus;
pub mod oracles;
