//! Local stand-in for a completion endpoint: a `tiny_http` server backed by
//! a [`LanguageModel`], answering `POST /v1/completions` with the top log
//! probabilities of `log_softmax(logprobs + logit_bias)`.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use kcd_core::decoding::LogitBias;
use kcd_core::lm::{next_logprobs, LanguageModel};
use tiny_http::{Header, Method, Response, Server};

use crate::remote::{
    biased_logprobs, check_bias, parse_prompt, top_entries, CompletionChoice, CompletionLogprobs, CompletionRequest,
    CompletionResponse, MAX_TOP_LOGPROBS,
};

#[derive(Clone, Debug, Default)]
pub struct MockOptions {
    /// Bind address; `None` picks a free loopback port.
    pub addr: Option<SocketAddr>,
    /// Answer the first `fail_first` requests with 429.
    pub fail_first: usize,
}

pub struct MockServer {
    server: Arc<Server>,
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

type Reply = (u16, String);

fn error(status: u16, message: impl Into<String>) -> Reply {
    (status, serde_json::json!({"error": {"message": message.into()}}).to_string())
}

/// Handles one request body; shared by the server loop and tests.
pub fn complete<M: LanguageModel + ?Sized>(lm: &M, body: &str) -> Reply {
    let req: CompletionRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return error(400, format!("bad request: {e}")),
    };
    let vocab = lm.vocabulary();
    let mut bias = LogitBias::new();
    for (key, value) in &req.logit_bias {
        match key.parse::<usize>() {
            Ok(id) if id < vocab.len() => {
                bias.insert(id, *value);
            }
            _ => return error(400, format!("bad logit_bias key {key:?}")),
        }
    }
    if let Err(e) = check_bias(&bias) {
        return error(400, e.to_string());
    }
    let (conditioning, prefix) = match parse_prompt(vocab, &req.prompt) {
        Ok(p) => p,
        Err(e) => return error(400, e),
    };
    let lp = match next_logprobs(lm, &prefix, &conditioning) {
        Ok(lp) => lp,
        Err(e) => return error(400, e.to_string()),
    };
    let top = top_entries(&biased_logprobs(&lp, &bias), req.logprobs.clamp(1, MAX_TOP_LOGPROBS));
    let token = |id: usize| vocab.token(id).unwrap_or_default().to_string();
    let (best, best_lp) = top[0];
    let top_map: BTreeMap<String, f64> = top.iter().map(|&(t, v)| (token(t), v)).collect();
    let resp = CompletionResponse {
        choices: vec![CompletionChoice {
            text: token(best),
            logprobs: CompletionLogprobs {
                tokens: vec![token(best)],
                token_logprobs: vec![best_lp],
                top_logprobs: vec![top_map],
            },
        }],
    };
    (200, serde_json::to_string(&resp).expect("response serializes"))
}

impl MockServer {
    pub fn start<M: LanguageModel + 'static>(lm: M, options: MockOptions) -> io::Result<Self> {
        let addr = options.addr.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 0)));
        let server = Arc::new(Server::http(addr).map_err(io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("server is not bound to an IP address"))?;
        let requests = Arc::new(AtomicUsize::new(0));
        let (srv, count) = (Arc::clone(&server), Arc::clone(&requests));
        let handle = thread::spawn(move || {
            let json = Header::from_bytes("Content-Type", "application/json").expect("static header");
            for mut request in srv.incoming_requests() {
                let n = count.fetch_add(1, Ordering::SeqCst);
                let (status, body) = if request.method() != &Method::Post || request.url() != "/v1/completions" {
                    error(404, "not found")
                } else if n < options.fail_first {
                    error(429, "rate limited")
                } else {
                    let mut body = String::new();
                    match io::Read::read_to_string(request.as_reader(), &mut body) {
                        Ok(_) => complete(&lm, &body),
                        Err(e) => error(400, e.to_string()),
                    }
                };
                let response = Response::from_string(body).with_status_code(status).with_header(json.clone());
                if let Err(e) = request.respond(response) {
                    log::warn!("mock server failed to respond: {e}");
                }
            }
        });
        Ok(Self { server, addr, requests, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    /// Requests received so far, rejected ones included.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server stops (it only stops when dropped elsewhere
    /// or the process exits).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
