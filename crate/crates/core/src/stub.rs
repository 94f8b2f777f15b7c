//! A tiny HTTP/1.1 server exposing any [`Backend`] over the completion wire
//! protocol that [`HttpBackend`](crate::backend::HttpBackend) speaks.
//!
//! Meant for offline testing of clients and configs; one thread per connection,
//! keep-alive supported, no TLS.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::thread;

use serde::Deserialize;
use serde_json::json;

use crate::backend::{Backend, DecodeMode, SamplingPolicy};
use crate::prompting::{FallbackEstimator, TokenCounter};

#[derive(Clone, Default)]
pub struct StubOptions {
    /// Require `Authorization: Bearer <token>`.
    pub token: Option<String>,
    /// Answer the first `n` requests with HTTP 503.
    pub fail_first: u32,
    /// Serve `GET /v1/memory` from the backend's probe.
    pub memory: bool,
}

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicU32>,
    handle: Option<thread::JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral localhost port and starts serving.
    pub fn spawn(backend: Arc<dyn Backend>, opts: StubOptions) -> std::io::Result<StubServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicU32::new(0));
        let (stop2, req2) = (stop.clone(), requests.clone());
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let (b, o, r) = (backend.clone(), opts.clone(), req2.clone());
                thread::spawn(move || {
                    let _ = serve(stream, b.as_ref(), &o, &r);
                });
            }
        });
        Ok(StubServer {
            addr,
            stop,
            requests,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received so far, failed ones included.
    pub fn requests(&self) -> u32 {
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

struct Request {
    method: String,
    path: String,
    auth: Option<String>,
    body: Vec<u8>,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> std::io::Result<Option<Request>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut length = 0usize;
    let mut auth = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let v = v.trim();
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => length = v.parse().unwrap_or(0),
                "authorization" => auth = Some(v.to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    Ok(Some(Request {
        method,
        path,
        auth,
        body,
    }))
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        _ => "Service Unavailable",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn serve(
    stream: TcpStream,
    backend: &dyn Backend,
    opts: &StubOptions,
    count: &AtomicU32,
) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    while let Some(req) = read_request(&mut reader)? {
        let n = count.fetch_add(1, Ordering::SeqCst);
        let (status, body) = if n < opts.fail_first {
            (503, json!({"error": "warming up"}).to_string())
        } else if opts
            .token
            .as_ref()
            .is_some_and(|t| req.auth.as_deref() != Some(&format!("Bearer {t}")))
        {
            (401, json!({"error": "bad token"}).to_string())
        } else {
            route(&req, backend, opts)
        };
        respond(&mut writer, status, &body)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct CompletionBody {
    prompt: String,
    #[serde(default)]
    max_tokens: u32,
    #[serde(default)]
    temperature: f64,
    #[serde(default = "one")]
    top_p: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    logprobs: Option<u32>,
    #[serde(default)]
    echo: bool,
}

fn one() -> f64 {
    1.0
}

fn route(req: &Request, backend: &dyn Backend, opts: &StubOptions) -> (u16, String) {
    let bad = |m: String| (400, json!({ "error": m }).to_string());
    match (req.method.as_str(), req.path.as_str()) {
        ("POST", "/v1/completions") => {
            let b: CompletionBody = match serde_json::from_slice(&req.body) {
                Ok(b) => b,
                Err(e) => return bad(e.to_string()),
            };
            match completion(&b, backend) {
                Ok(v) => (200, v.to_string()),
                Err(m) => bad(m),
            }
        }
        ("POST", "/tokenize") => {
            #[derive(Deserialize)]
            struct T {
                prompt: String,
            }
            match serde_json::from_slice::<T>(&req.body) {
                Ok(t) => {
                    let count = backend
                        .count_tokens(&t.prompt)
                        .unwrap_or_else(|| FallbackEstimator.count(&t.prompt));
                    (200, json!({ "count": count }).to_string())
                }
                Err(e) => bad(e.to_string()),
            }
        }
        ("GET", "/v1/memory") if opts.memory => match backend.probe_memory().bytes {
            Some(b) => (200, json!({ "peak_bytes": b }).to_string()),
            None => (404, json!({"error": "no memory stats"}).to_string()),
        },
        _ => (404, json!({"error": "no such route"}).to_string()),
    }
}

fn completion(b: &CompletionBody, backend: &dyn Backend) -> Result<serde_json::Value, String> {
    // echo scoring: the prompt ends with " <LABEL>"
    if b.echo {
        let (base, label) = b
            .prompt
            .rsplit_once(' ')
            .ok_or("echo prompt has no label")?;
        let l = backend.label_logits(base).map_err(|e| e.to_string())?;
        let lp = match label {
            "ERR" => l.err,
            "NOT" => l.not,
            other => return Err(format!("cannot score {other:?}")),
        };
        return Ok(json!({"choices": [{"text": b.prompt, "logprobs": {
            "token_logprobs": [null, lp],
            "text_offset": [0, base.len()],
            "top_logprobs": [null, null],
        }}]}));
    }
    if let Some(_n) = b.logprobs {
        let l = backend.label_logits(&b.prompt).map_err(|e| e.to_string())?;
        let text = if l.err > l.not { "ERR" } else { "NOT" };
        return Ok(json!({"choices": [{"text": text, "logprobs": {
            "token_logprobs": [if l.err > l.not { l.err } else { l.not }],
            "top_logprobs": [{"ERR": l.err, " NOT": l.not}],
            "text_offset": [0],
        }}]}));
    }
    let mode = if b.temperature == 0.0 {
        DecodeMode::Greedy
    } else {
        DecodeMode::Sampled {
            temperature: b.temperature,
            top_p: b.top_p,
        }
    };
    let policy = SamplingPolicy {
        mode,
        max_new_tokens: b.max_tokens,
        seed: b.seed,
    };
    let c = backend
        .complete(&b.prompt, &policy)
        .map_err(|e| e.to_string())?;
    Ok(json!({"choices": [{"text": c.text}]}))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        BackendError, HttpBackend, HttpConfig, LabelScoring, MemorySource, ParametricMock,
        ScriptedMock,
    };

    fn http(url: String) -> HttpBackend {
        HttpBackend::new(HttpConfig {
            base_url: url,
            backoff_ms: 1,
            auth_env: None,
            ..Default::default()
        })
    }

    #[test]
    fn completions_round_trip() {
        let server =
            StubServer::spawn(Arc::new(ScriptedMock::new(["ERR"])), StubOptions::default())
                .unwrap();
        let client = http(server.url());
        let c = client.complete("hello", &SamplingPolicy::greedy()).unwrap();
        assert_eq!(c.text, "ERR");
        let c = client
            .complete("hello", &SamplingPolicy::sampled(3))
            .unwrap();
        assert_eq!(c.text, "ERR");
    }

    #[test]
    fn both_scoring_paths_agree_with_backend() {
        let mock = Arc::new(ParametricMock::constant(0.3));
        let prompt = "Source: It is cold.\nTranslation: Es ist kalt.\nLabel:";
        let want = mock.label_logits(prompt).unwrap();
        let server = StubServer::spawn(mock, StubOptions::default()).unwrap();
        let first = http(server.url()).label_logits(prompt).unwrap();
        assert!((first.err - want.err).abs() < 1e-12 && (first.not - want.not).abs() < 1e-12);
        let joint = HttpBackend::new(HttpConfig {
            base_url: server.url(),
            label_scoring: LabelScoring::JointSequence,
            auth_env: None,
            ..Default::default()
        });
        let j = joint.label_logits(prompt).unwrap();
        assert!((j.err - want.err).abs() < 1e-12);
    }

    #[test]
    fn retries_on_5xx_then_succeeds() {
        let opts = StubOptions {
            fail_first: 2,
            ..Default::default()
        };
        let server = StubServer::spawn(Arc::new(ScriptedMock::new(["NOT"])), opts).unwrap();
        let c = http(server.url())
            .complete("x", &SamplingPolicy::greedy())
            .unwrap();
        assert_eq!(c.text, "NOT");
        assert_eq!(server.requests(), 3);

        let opts = StubOptions {
            fail_first: 10,
            ..Default::default()
        };
        let server = StubServer::spawn(Arc::new(ScriptedMock::new(["NOT"])), opts).unwrap();
        let e = http(server.url())
            .complete("x", &SamplingPolicy::greedy())
            .unwrap_err();
        assert!(
            matches!(e, BackendError::Transport { attempts: 3, .. }),
            "{e}"
        );
    }

    #[test]
    fn auth_token_from_env() {
        let opts = StubOptions {
            token: Some("s3cret".into()),
            ..Default::default()
        };
        let server = StubServer::spawn(Arc::new(ScriptedMock::new(["NOT"])), opts).unwrap();
        let e = http(server.url())
            .complete("x", &SamplingPolicy::greedy())
            .unwrap_err();
        assert!(
            matches!(e, BackendError::Protocol(ref m) if m.contains("401")),
            "{e}"
        );
        let var = "CED_STUB_TEST_TOKEN";
        std::env::set_var(var, "s3cret");
        let client = HttpBackend::new(HttpConfig {
            base_url: server.url(),
            auth_env: Some(var.into()),
            ..Default::default()
        });
        assert_eq!(
            client
                .complete("x", &SamplingPolicy::greedy())
                .unwrap()
                .text,
            "NOT"
        );
    }

    #[test]
    fn tokenize_and_memory() {
        let opts = StubOptions {
            memory: true,
            ..Default::default()
        };
        let server = StubServer::spawn(Arc::new(ScriptedMock::new(["NOT"])), opts).unwrap();
        let client = HttpBackend::new(HttpConfig {
            base_url: server.url(),
            tokenize: true,
            memory_stats: true,
            auth_env: None,
            ..Default::default()
        });
        assert_eq!(
            client.count_tokens("abcd efgh"),
            Some(FallbackEstimator.count("abcd efgh"))
        );
        let m = client.probe_memory();
        if cfg!(target_os = "linux") {
            assert_eq!(m.source, MemorySource::BackendReported);
        }
    }
}
