//! A minimal HTTP/1.1 server for exercising the remote scorer.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

pub struct Request {
    pub path: String,
    pub authorization: Option<String>,
    pub body: serde_json::Value,
}

pub struct Reply {
    pub status: u16,
    pub body: String,
    /// Sleep before answering, to trigger client timeouts.
    pub delay_ms: u64,
}

impl Reply {
    pub fn json(body: serde_json::Value) -> Self {
        Reply {
            status: 200,
            body: body.to_string(),
            delay_ms: 0,
        }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Reply {
            status,
            body: body.to_string(),
            delay_ms: 0,
        }
    }
}

pub struct MockServer {
    pub base: String,
    pub hits: Arc<AtomicUsize>,
}

impl MockServer {
    /// Serves requests on a background thread until the process exits.
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&Request) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let handler = Arc::new(handler);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = handler.clone();
                let counter = counter.clone();
                thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                    let mut len = 0usize;
                    let mut authorization = None;
                    loop {
                        let mut h = String::new();
                        reader.read_line(&mut h).unwrap();
                        let h = h.trim_end();
                        if h.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = h.split_once(':') {
                            match k.to_ascii_lowercase().as_str() {
                                "content-length" => len = v.trim().parse().unwrap(),
                                "authorization" => authorization = Some(v.trim().to_string()),
                                _ => {}
                            }
                        }
                    }
                    let mut body = vec![0u8; len];
                    reader.read_exact(&mut body).unwrap();
                    counter.fetch_add(1, Ordering::SeqCst);
                    let req = Request {
                        path,
                        authorization,
                        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
                    };
                    let reply = handler(&req);
                    if reply.delay_ms > 0 {
                        thread::sleep(std::time::Duration::from_millis(reply.delay_ms));
                    }
                    let out = format!(
                        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                        reply.status,
                        reply.body.len(),
                        reply.body
                    );
                    let _ = stream.write_all(out.as_bytes());
                });
            }
        });
        MockServer { base, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Answers with `table[term]` for every requested term present in it.
pub fn table_reply(req: &Request, table: &[(&str, f64)]) -> Reply {
    let terms = req.body["terms"].as_array().cloned().unwrap_or_default();
    let mut probs = serde_json::Map::new();
    for t in terms {
        let t = t.as_str().unwrap();
        if let Some(&(_, p)) = table.iter().find(|(k, _)| *k == t) {
            probs.insert(t.to_string(), p.into());
        }
    }
    Reply::json(serde_json::json!({"model_id": "mock-lm", "probs": probs}))
}
