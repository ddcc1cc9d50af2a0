//! Completion-API client for remote models that expose only top-5 log
//! probabilities and an additive `logit_bias`, and the pre/post guided
//! decoder built on it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use kcd_core::decoding::{logit_bias_terms, DecodeConfig, DecodeError, DecodeRequest, DecodeResult, LogitBias, BIAS_LIMIT};
use kcd_core::grounding::GroundednessScorer;
use kcd_core::lm::{next_logprobs, LanguageModel, LogitVector, TokenId, TokenSequence, Vocabulary};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Most log probabilities a completion endpoint returns per position.
pub const MAX_TOP_LOGPROBS: usize = 5;

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("bias {value} for token {token} is outside [-100, 100]")]
    InvalidBias { token: TokenId, value: f64 },
    #[error("invalid remote configuration: {0}")]
    InvalidConfig(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited,
    #[error("server returned status {0}")]
    Server(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl RemoteError {
    fn retryable(&self) -> bool {
        match self {
            RemoteError::Transport(_) | RemoteError::RateLimited => true,
            RemoteError::Server(code) => *code >= 500,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Bias the remote logits with proxy and scorer, take the remote argmax.
    Pre,
    /// Unbiased request, re-rank the returned candidates by `ln p + ln f`.
    Post,
    PrePost,
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::Pre => "pre",
            GuidanceMode::Post => "post",
            GuidanceMode::PrePost => "pre_post",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = RemoteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre" => Ok(Self::Pre),
            "post" => Ok(Self::Post),
            "pre_post" | "pre+post" => Ok(Self::PrePost),
            other => Err(RemoteError::InvalidConfig(format!("unknown guidance mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteGuidanceConfig {
    pub endpoint: String,
    /// `alpha` scaling the proxy logit plus log score in the bias.
    pub bias_strength: f64,
    pub top_logprobs: usize,
    pub timeout_ms: u64,
    pub retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub mode: GuidanceMode,
}

impl Default for RemoteGuidanceConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/completions".into(),
            bias_strength: 1.0,
            top_logprobs: MAX_TOP_LOGPROBS,
            timeout_ms: 10_000,
            retries: 3,
            backoff_ms: 50,
            max_in_flight: 4,
            mode: GuidanceMode::PrePost,
        }
    }
}

impl RemoteGuidanceConfig {
    pub fn validate(&self) -> Result<(), RemoteError> {
        if self.top_logprobs == 0 || self.top_logprobs > MAX_TOP_LOGPROBS {
            return Err(RemoteError::InvalidConfig(format!("top_logprobs must lie in 1..=5, got {}", self.top_logprobs)));
        }
        if !(self.bias_strength >= 0.0) || !self.bias_strength.is_finite() {
            return Err(RemoteError::InvalidConfig(format!("bias_strength must be >= 0, got {}", self.bias_strength)));
        }
        if self.max_in_flight == 0 {
            return Err(RemoteError::InvalidConfig("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub logprobs: usize,
    #[serde(default)]
    pub logit_bias: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionLogprobs {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    pub top_logprobs: Vec<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
    pub logprobs: CompletionLogprobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<CompletionChoice>,
}

/// Prompt text: the conditioning tokens, a newline, then the generated prefix.
pub fn render_prompt(vocab: &Vocabulary, conditioning: &[TokenId], prefix: &[TokenId]) -> String {
    format!("{}\n{}", vocab.detokenize(conditioning), vocab.detokenize(prefix))
}

/// Splits a prompt from [`render_prompt`] back into token ids.
pub fn parse_prompt(vocab: &Vocabulary, prompt: &str) -> Result<(Vec<TokenId>, Vec<TokenId>), String> {
    let (cond, prefix) = prompt.split_once('\n').unwrap_or(("", prompt));
    let ids = |s: &str| -> Result<Vec<TokenId>, String> {
        s.split_whitespace().map(|t| vocab.id(t).ok_or_else(|| format!("unknown token {t:?}"))).collect()
    };
    Ok((ids(cond)?, ids(prefix)?))
}

/// Rejects any bias outside the wire range.
pub fn check_bias(bias: &LogitBias) -> Result<(), RemoteError> {
    match bias.iter().find(|(_, v)| !(v.abs() <= BIAS_LIMIT)) {
        Some((&token, &value)) => Err(RemoteError::InvalidBias { token, value }),
        None => Ok(()),
    }
}

/// Next-token top log probabilities under an additive bias.
pub trait CompletionBackend: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Up to `top` `(token, logprob)` pairs, most probable first.
    fn top_logprobs(
        &self,
        conditioning: &[TokenId],
        prefix: &[TokenId],
        bias: &LogitBias,
        top: usize,
    ) -> Result<Vec<(TokenId, f64)>, RemoteError>;
}

/// `log_softmax(logprobs + bias)`, the distribution an additive-bias
/// endpoint samples from.
pub fn biased_logprobs(logprobs: &LogitVector, bias: &LogitBias) -> LogitVector {
    kcd_core::decoding::apply_logit_bias(logprobs, bias).log_softmax()
}

/// Top `top` entries of `z` by value, ties to the lower id.
pub fn top_entries(z: &LogitVector, top: usize) -> Vec<(TokenId, f64)> {
    z.ranked().into_iter().take(top).map(|t| (t, z[t])).collect()
}

/// A local model answering like an additive-bias completion endpoint.
pub struct LocalBackend<M> {
    pub lm: M,
}

impl<M: LanguageModel> CompletionBackend for LocalBackend<M> {
    fn vocabulary(&self) -> &Vocabulary {
        self.lm.vocabulary()
    }

    fn top_logprobs(
        &self,
        conditioning: &[TokenId],
        prefix: &[TokenId],
        bias: &LogitBias,
        top: usize,
    ) -> Result<Vec<(TokenId, f64)>, RemoteError> {
        check_bias(bias)?;
        let lp = next_logprobs(&self.lm, prefix, conditioning).map_err(DecodeError::from)?;
        Ok(top_entries(&biased_logprobs(&lp, bias), top.min(MAX_TOP_LOGPROBS)))
    }
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

/// HTTP client for a completion endpoint sharing the proxy's vocabulary.
pub struct RemoteClient {
    agent: ureq::Agent,
    config: RemoteGuidanceConfig,
    vocab: Vocabulary,
    permits: Permits,
    sent: AtomicUsize,
}

impl RemoteClient {
    pub fn new(config: RemoteGuidanceConfig, vocab: Vocabulary) -> Result<Self, RemoteError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Permits { free: Mutex::new(config.max_in_flight), cv: Condvar::new() };
        Ok(Self { agent, config, vocab, permits, sent: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &RemoteGuidanceConfig {
        &self.config
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.sent.load(Ordering::Relaxed)
    }

    /// Sends `{prompt, max_tokens: 1, logprobs, logit_bias}` and returns
    /// the top candidates, retrying transient failures with exponential
    /// backoff.
    pub fn remote_next_logprobs(&self, prompt: &str, bias: &LogitBias) -> Result<Vec<(TokenId, f64)>, RemoteError> {
        check_bias(bias)?;
        let body = CompletionRequest {
            prompt: prompt.to_string(),
            max_tokens: 1,
            logprobs: self.config.top_logprobs,
            logit_bias: bias.iter().map(|(t, v)| (t.to_string(), *v)).collect(),
        };
        let mut attempt = 0;
        loop {
            let outcome = self.send_once(&body);
            match outcome {
                Err(e) if e.retryable() && attempt < self.config.retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("remote attempt {} failed ({e}); retrying in {delay} ms", attempt + 1);
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn send_once(&self, body: &CompletionRequest) -> Result<Vec<(TokenId, f64)>, RemoteError> {
        let _permit = self.permits.acquire();
        self.sent.fetch_add(1, Ordering::Relaxed);
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .send_json(body)
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        match resp.status().as_u16() {
            200 => {}
            429 => return Err(RemoteError::RateLimited),
            code => return Err(RemoteError::Server(code)),
        }
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
        self.parse_top(&parsed)
    }

    fn parse_top(&self, resp: &CompletionResponse) -> Result<Vec<(TokenId, f64)>, RemoteError> {
        let choice = resp.choices.first().ok_or_else(|| RemoteError::MalformedResponse("no choices".into()))?;
        let top = choice
            .logprobs
            .top_logprobs
            .first()
            .ok_or_else(|| RemoteError::MalformedResponse("no top_logprobs".into()))?;
        let mut out = top
            .iter()
            .map(|(tok, lp)| {
                self.vocab
                    .id(tok)
                    .map(|id| (id, *lp))
                    .ok_or_else(|| RemoteError::MalformedResponse(format!("unknown token {tok:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if out.is_empty() {
            return Err(RemoteError::MalformedResponse("empty top_logprobs".into()));
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(out)
    }
}

impl CompletionBackend for RemoteClient {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn top_logprobs(
        &self,
        conditioning: &[TokenId],
        prefix: &[TokenId],
        bias: &LogitBias,
        top: usize,
    ) -> Result<Vec<(TokenId, f64)>, RemoteError> {
        let mut out = self.remote_next_logprobs(&render_prompt(&self.vocab, conditioning, prefix), bias)?;
        out.truncate(top);
        Ok(out)
    }
}

/// Decodes with a remote model, one request per token. `pre` biases the
/// request by `alpha * (proxy logprob + ln f)` over the proxy's top
/// `search_width` tokens and takes the remote argmax; `post` re-ranks the
/// returned candidates by `ln p + ln f`; `pre_post` does both.
pub fn pre_guided_remote_decode<B, M, G>(
    backend: &B,
    proxy: &M,
    scorer: &G,
    request: &DecodeRequest,
    cfg: &DecodeConfig,
    guidance: &RemoteGuidanceConfig,
) -> Result<DecodeResult, RemoteError>
where
    B: CompletionBackend + ?Sized,
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    guidance.validate()?;
    cfg.validate()?;
    if request.knowledge.is_empty() {
        return Err(DecodeError::EmptyKnowledge.into());
    }
    let eos = backend.vocabulary().eos();
    let conditioning = request.conditioning();
    let pre = matches!(guidance.mode, GuidanceMode::Pre | GuidanceMode::PrePost);
    let post = matches!(guidance.mode, GuidanceMode::Post | GuidanceMode::PrePost);
    let width = cfg.search_width.min(proxy.vocabulary().len());
    let mut result = DecodeResult::default();
    let mut prefix: Vec<TokenId> = Vec::new();

    while prefix.last() != Some(&eos) && prefix.len() < cfg.max_new_tokens {
        let mut scores: HashMap<TokenId, f64> = HashMap::new();
        let mut score = |t: TokenId, prefix: &mut Vec<TokenId>, result: &mut DecodeResult| -> f64 {
            *scores.entry(t).or_insert_with(|| {
                prefix.push(t);
                let content = if t == eos { &prefix[..prefix.len() - 1] } else { &prefix[..] };
                let f = scorer.score_prefix(content, &request.knowledge);
                prefix.pop();
                result.scorer_calls += 1;
                if f.is_nan() {
                    0.0
                } else {
                    f.clamp(0.0, 1.0)
                }
            })
        };

        let bias = if pre {
            let lp = next_logprobs(proxy, &prefix, &conditioning).map_err(DecodeError::from)?;
            result.lm_forward_calls += 1;
            // The proxy proposes its top `width` tokens. Everything else has
            // proxy logit -inf, so for alpha > 0 its bias saturates at the
            // wire floor; leaving it at 0 would favour unproposed tokens over
            // proposed ones, whose log-probability bias is negative.
            let mut values = vec![f64::NEG_INFINITY; lp.len()];
            let mut f = BTreeMap::new();
            for t in lp.ranked().into_iter().take(width) {
                values[t] = lp[t];
                f.insert(t, score(t, &mut prefix, &mut result));
            }
            let mut bias = logit_bias_terms(&LogitVector::new(values), &f, guidance.bias_strength);
            if guidance.bias_strength > 0.0 {
                for t in 0..lp.len() {
                    bias.entry(t).or_insert(-BIAS_LIMIT);
                }
            }
            bias
        } else {
            LogitBias::new()
        };

        let top = backend.top_logprobs(&conditioning, &prefix, &bias, guidance.top_logprobs)?;
        result.remote_calls += 1;
        let first = *top.first().ok_or_else(|| RemoteError::MalformedResponse("no candidates".into()))?;

        let (token, f) = if post {
            let scored: Vec<(TokenId, f64, f64)> =
                top.iter().map(|&(t, lp)| (t, lp, score(t, &mut prefix, &mut result))).collect();
            if scored.iter().all(|s| s.2 <= 0.0) {
                result.fallback_steps += 1;
                (first.0, Some(0.0))
            } else {
                let best = scored
                    .iter()
                    .max_by(|a, b| {
                        (a.1 + a.2.ln())
                            .total_cmp(&(b.1 + b.2.ln()))
                            .then(a.2.total_cmp(&b.2))
                            .then(b.0.cmp(&a.0))
                    })
                    .expect("nonempty");
                (best.0, Some(best.2))
            }
        } else {
            (first.0, scores.get(&first.0).copied())
        };
        if let Some(f) = f {
            result.per_step_scores.push(f);
        }
        prefix.push(token);
    }
    result.tokens = TokenSequence::from_ids(prefix, eos).map_err(DecodeError::from)?;
    result.final_groundedness = Some(scorer.score_sequence(result.tokens.content(), &request.knowledge));
    Ok(result)
}
