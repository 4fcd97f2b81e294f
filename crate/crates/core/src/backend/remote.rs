use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::wire::{
    parse_status, Choice, CompletionRequest, CompletionResponse, FineTuneRequest, Hyperparameters, JobBody,
};
use super::{require, Backend, BackendDescriptor, BackendKind, Capabilities, FineTuneJob, JobStatus, ModelHandle};
use crate::corpus::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::microlm::{EmbeddingMatrix, GenerationConfig, TrainConfig};

fn default_token_env() -> String {
    "MEMLAB_API_TOKEN".into()
}
fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> usize {
    3
}
fn default_backoff() -> f64 {
    0.5
}
fn default_in_flight() -> usize {
    4
}
fn default_poll() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token (never stored).
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Retries after the first attempt.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff")]
    pub backoff_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_poll")]
    pub poll_interval_secs: f64,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            model: model.into(),
            token_env: default_token_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_secs: default_backoff(),
            max_in_flight: default_in_flight(),
            poll_interval_secs: default_poll(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(Error::config(format!("base URL {:?} is not http(s)", self.base_url)));
        }
        if !(self.timeout_secs > 0.0) || self.backoff_secs < 0.0 || self.poll_interval_secs < 0.0 {
            return Err(Error::config("timeout must be > 0 and delays >= 0"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be >= 1"));
        }
        Ok(())
    }
}

/// Completions-style HTTP client with bounded retries.
///
/// Only per-token log-probabilities, generation and fine-tuning are used, so
/// embedding access is never available remotely.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    vocab: Vocabulary,
    submit: Mutex<()>,
}

enum Attempt {
    Done(String),
    Retry(Error),
    Fail(Error),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Ok(RemoteBackend { config, agent, vocab: Vocabulary::byte(), submit: Mutex::new(()) })
    }

    /// Vocabulary used to re-encode completion text when the server does not
    /// return token ids.
    pub fn with_vocabulary(mut self, vocab: Vocabulary) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn token(&self) -> Option<String> {
        std::env::var(&self.config.token_env).ok().filter(|t| !t.is_empty())
    }

    fn backoff(&self, retry: usize) -> Duration {
        let base = self.config.backoff_secs * 2f64.powi(retry as i32);
        let jitter = 0.5 + 0.5 * rand::rng().random::<f64>();
        Duration::from_secs_f64(base * jitter)
    }

    fn attempt(&self, path: &str, body: Option<&serde_json::Value>, attempts: usize) -> Attempt {
        let url = self.url(path);
        let auth = self.token().map(|t| format!("Bearer {t}"));
        let sent = match body {
            Some(b) => {
                let mut req = self.agent.post(&url);
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.send_json(b)
            }
            None => {
                let mut req = self.agent.get(&url);
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.call()
            }
        };
        let classify = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => Attempt::Retry(Error::Timeout { attempts }),
            other => Attempt::Retry(Error::Network { attempts, message: other.to_string() }),
        };
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => return classify(e),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return classify(e),
        };
        if (200..300).contains(&status) {
            Attempt::Done(text)
        } else {
            let err = Error::HttpStatus { status, attempts, body: text };
            if status == 429 || status >= 500 {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            }
        }
    }

    /// One logical request: retried on 429, 5xx, timeouts and connection
    /// errors with jittered exponential backoff.
    fn request<T: DeserializeOwned>(&self, path: &str, body: Option<&serde_json::Value>) -> Result<T> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(path, body, attempts) {
                Attempt::Done(text) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| Error::MalformedResponse(format!("{path}: {e}")));
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempts > self.config.max_retries => return Err(e),
                Attempt::Retry(_) => std::thread::sleep(self.backoff(attempts - 1)),
            }
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Choice> {
        let body = serde_json::to_value(req)?;
        let resp: CompletionResponse = self.request("/v1/completions", Some(&body))?;
        resp.choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::MalformedResponse("completion without choices".into()))
    }

    fn job_from(&self, body: JobBody) -> Result<FineTuneJob> {
        let status = parse_status(&body.status)
            .ok_or_else(|| Error::MalformedResponse(format!("unknown job status {:?}", body.status)))?;
        Ok(FineTuneJob {
            id: body.id,
            status,
            model: match status {
                JobStatus::Succeeded => body.fine_tuned_model.map(ModelHandle::Remote),
                _ => None,
            },
            error: body.error.map(|e| e.message),
        })
    }
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Remote(self.config.clone()),
            capabilities: Capabilities { can_logprobs: true, can_generate: true, can_finetune: true, can_embed: false },
        }
    }

    /// Natural-log probabilities are assumed, as in the completions protocol.
    fn query_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        require(self.descriptor().capabilities.can_logprobs, "can_logprobs")?;
        let choice = self.complete(&CompletionRequest {
            model: self.config.model.clone(),
            prompt: tokens.to_vec(),
            max_tokens: 0,
            temperature: 0.0,
            logprobs: Some(0),
            echo: true,
            seed: None,
        })?;
        let lp = choice
            .logprobs
            .ok_or_else(|| Error::MalformedResponse("missing logprobs".into()))?
            .token_logprobs;
        let rest = match lp.split_first() {
            Some((None, rest)) => rest,
            _ => &lp[..],
        };
        let out: Option<Vec<f64>> = rest.iter().copied().collect();
        match out {
            Some(v) if v.len() + 1 == tokens.len() => Ok(v),
            Some(v) => Err(Error::MalformedResponse(format!(
                "expected {} log-probabilities, got {}",
                tokens.len().saturating_sub(1),
                v.len()
            ))),
            None => Err(Error::MalformedResponse("null log-probability inside the sequence".into())),
        }
    }

    /// Issues up to `max_in_flight` requests concurrently.
    fn query_logprobs_many(&self, batch: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<Vec<f64>>>>> = batch.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_in_flight.min(batch.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= batch.len() {
                        break;
                    }
                    *results[i].lock().unwrap() = Some(self.query_logprobs(&batch[i]));
                });
            }
        });
        results.into_iter().map(|r| r.into_inner().unwrap().expect("every index visited")).collect()
    }

    fn query_generate(&self, prompt: &[TokenId], config: &GenerationConfig) -> Result<Vec<TokenId>> {
        require(self.descriptor().capabilities.can_generate, "can_generate")?;
        let choice = self.complete(&CompletionRequest {
            model: self.config.model.clone(),
            prompt: prompt.to_vec(),
            max_tokens: config.max_new_tokens,
            temperature: config.temperature,
            logprobs: None,
            echo: false,
            seed: Some(config.seed),
        })?;
        match choice.token_ids {
            Some(ids) => Ok(ids),
            None => self.vocab.encode(&choice.text),
        }
    }

    fn submit_finetune(&self, dataset: &[TokenSequence], config: &TrainConfig) -> Result<FineTuneJob> {
        require(self.descriptor().capabilities.can_finetune, "can_finetune")?;
        config.validate()?;
        let _serial = self.submit.lock().unwrap();
        let req = FineTuneRequest {
            model: self.config.model.clone(),
            training_data: dataset.iter().map(|s| s.tokens.clone()).collect(),
            hyperparameters: Hyperparameters {
                learning_rate: config.learning_rate,
                n_epochs: config.epochs,
                batch_size: config.batch_size,
                seed: config.seed,
                weight_decay: config.weight_decay,
            },
        };
        let body = serde_json::to_value(&req)?;
        let job: JobBody = self.request("/v1/fine_tuning/jobs", Some(&body))?;
        self.job_from(job)
    }

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob> {
        require(self.descriptor().capabilities.can_finetune, "can_finetune")?;
        if job.status.is_terminal() {
            return Ok(job.clone());
        }
        let body: JobBody = self.request(&format!("/v1/fine_tuning/jobs/{}", job.id), None)?;
        self.job_from(body)
    }

    fn poll_interval(&self) -> Duration {
        Duration::from_secs_f64(self.config.poll_interval_secs)
    }

    fn open(&self, model: &ModelHandle) -> Result<Box<dyn Backend>> {
        match model {
            ModelHandle::Remote(name) => {
                let config = RemoteConfig { model: name.clone(), ..self.config.clone() };
                Ok(Box::new(RemoteBackend::new(config)?.with_vocabulary(self.vocab.clone())))
            }
            ModelHandle::InProcess(_) => Err(Error::config("remote backend cannot open an in-process model")),
        }
    }

    fn export_embeddings(&self) -> Result<EmbeddingMatrix> {
        require(self.descriptor().capabilities.can_embed, "can_embed")?;
        unreachable!("remote backends never export embeddings")
    }

    fn score_embeddings(&self, _rows: &[f64], _targets: &[TokenId]) -> Result<f64> {
        require(self.descriptor().capabilities.can_embed, "can_embed")?;
        unreachable!("remote backends never score embeddings")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{Fault, MockServer};
    use crate::backend::{finetune, finetune_model, InProcessBackend};
    use crate::corpus::SplitLabel;
    use crate::microlm::{MicroLmParams, ModelMode, ModelShape};

    fn params() -> MicroLmParams {
        MicroLmParams::init_with_scale(ModelShape::new(ModelMode::Causal, 259, 8, 32), 1, 0.3).unwrap()
    }

    fn setup() -> (MockServer, RemoteBackend) {
        let server = MockServer::start().unwrap();
        server.add_model("base", params());
        let cfg = RemoteConfig { backoff_secs: 0.001, poll_interval_secs: 0.0, ..RemoteConfig::new(server.base_url(), "base") };
        let client = RemoteBackend::new(cfg).unwrap();
        (server, client)
    }

    fn with_retries(server: &MockServer, max_retries: usize) -> RemoteBackend {
        let cfg = RemoteConfig { max_retries, backoff_secs: 0.001, ..RemoteConfig::new(server.base_url(), "base") };
        RemoteBackend::new(cfg).unwrap()
    }

    #[test]
    fn logprobs_match_in_process_exactly() {
        let (_server, client) = setup();
        let local = InProcessBackend::new(params());
        let x: Vec<u32> = b"hello, remote world".iter().map(|&b| b as u32).collect();
        assert_eq!(client.query_logprobs(&x).unwrap(), local.query_logprobs(&x).unwrap());
        let batch: Vec<Vec<u32>> = (0..7).map(|i| x[i..].to_vec()).collect();
        let many = client.query_logprobs_many(&batch).unwrap();
        for (b, m) in batch.iter().zip(&many) {
            assert_eq!(m, &local.query_logprobs(b).unwrap());
        }
    }

    #[test]
    fn echoed_logprobs_skip_leading_null() {
        let (server, client) = setup();
        server.push_fault(Fault::Body(
            r#"{"choices":[{"text":"abc","logprobs":{"token_logprobs":[null,-1.0,-2.0]}}]}"#.into(),
        ));
        assert_eq!(client.query_logprobs(&[97, 98, 99]).unwrap(), vec![-1.0, -2.0]);
    }

    #[test]
    fn malformed_bodies_rejected() {
        let (server, client) = setup();
        server.push_fault(Fault::Body("{not json".into()));
        assert!(matches!(client.query_logprobs(&[1, 2]), Err(Error::MalformedResponse(_))));
        server.push_fault(Fault::Body(r#"{"choices":[{"logprobs":{"token_logprobs":[null,-1.0]}}]}"#.into()));
        assert!(matches!(client.query_logprobs(&[1, 2, 3]), Err(Error::MalformedResponse(_))));
    }

    #[test]
    fn retries_rate_limits() {
        let (server, _) = setup();
        server.push_fault(Fault::Status(429));
        server.push_fault(Fault::Status(429));
        assert!(with_retries(&server, 3).query_logprobs(&[1, 2, 3]).is_ok());
        assert_eq!(server.request_count(), 3);

        server.push_fault(Fault::Status(429));
        server.push_fault(Fault::Status(429));
        match with_retries(&server, 1).query_logprobs(&[1, 2, 3]) {
            Err(Error::HttpStatus { status: 429, attempts: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (server, client) = setup();
        let bad = RemoteBackend::new(RemoteConfig { model: "nope".into(), ..client.config().clone() }).unwrap();
        assert!(matches!(bad.query_logprobs(&[1, 2]), Err(Error::HttpStatus { status: 404, attempts: 1, .. })));
        assert_eq!(server.request_count(), 1);
    }

    #[test]
    fn timeout_is_distinct() {
        let (server, _) = setup();
        let cfg = RemoteConfig { timeout_secs: 0.2, max_retries: 1, backoff_secs: 0.001, ..RemoteConfig::new(server.base_url(), "base") };
        let client = RemoteBackend::new(cfg).unwrap();
        server.push_fault(Fault::Delay(Duration::from_millis(800)));
        server.push_fault(Fault::Delay(Duration::from_millis(800)));
        let gen = GenerationConfig { max_new_tokens: 4, temperature: 0.0, seed: 0 };
        assert!(matches!(client.query_generate(&[1, 2], &gen), Err(Error::Timeout { attempts: 2 })));

        server.push_fault(Fault::Delay(Duration::from_millis(800)));
        assert_eq!(client.query_generate(&[1, 2], &gen).unwrap().len(), 4);
    }

    #[test]
    fn generation_round_trips() {
        let (server, client) = setup();
        let local = InProcessBackend::new(params());
        let gen = GenerationConfig { max_new_tokens: 10, temperature: 1.0, seed: 8 };
        assert_eq!(client.query_generate(&[104, 105], &gen).unwrap(), local.query_generate(&[104, 105], &gen).unwrap());
        server.set_fixed_completion(Some("fixed reply".into()));
        let ids = client.query_generate(&[104], &gen).unwrap();
        assert_eq!(Vocabulary::byte().decode(&ids), "fixed reply");
    }

    #[test]
    fn embeddings_unavailable_without_io() {
        let (server, client) = setup();
        assert!(!client.descriptor().capabilities.can_embed);
        assert!(matches!(client.export_embeddings(), Err(Error::CapabilityMissing("can_embed"))));
        assert!(matches!(client.score_embeddings(&[0.0; 16], &[1, 2]), Err(Error::CapabilityMissing(_))));
        assert_eq!(server.request_count(), 0);
    }

    fn data() -> Vec<TokenSequence> {
        (0..4)
            .map(|i| TokenSequence::new(format!("d{i}"), (0..16).map(|j| 97 + (i + j) % 5).collect(), SplitLabel::Candidate))
            .collect()
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig { learning_rate: 1e-2, epochs: 2, batch_size: 2, ..TrainConfig::reference(3) }
    }

    #[test]
    fn job_succeeds_after_polls() {
        let (server, client) = setup();
        let job = client.submit_finetune(&data(), &train_cfg()).unwrap();
        assert_eq!(job.status, JobStatus::Pending);
        let after_one = client.poll(&job).unwrap();
        assert_eq!(after_one.status, JobStatus::Running);
        let done = client.poll(&after_one).unwrap();
        assert_eq!(done.status, JobStatus::Succeeded);
        let Some(ModelHandle::Remote(name)) = &done.model else { panic!("no handle") };

        let tuned = client.open(done.model.as_ref().unwrap()).unwrap();
        let local = finetune_model(&InProcessBackend::new(params()), &data(), &train_cfg()).unwrap();
        assert_eq!(tuned.query_logprobs(&[97, 98, 99]).unwrap(), local.query_logprobs(&[97, 98, 99]).unwrap());
        assert!(server.model(name).is_some());
    }

    #[test]
    fn failed_job_carries_reason() {
        let (server, client) = setup();
        server.fail_next_job("training data rejected");
        match finetune(&client, &data(), &train_cfg()) {
            Err(Error::JobFailed { reason, .. }) => assert_eq!(reason, "training data rejected"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bearer_token_from_environment() {
        let (server, client) = setup();
        let cfg = RemoteConfig { token_env: "MEMLAB_TEST_TOKEN_7731".into(), ..client.config().clone() };
        // SAFETY: the variable name is unique to this test.
        unsafe { std::env::set_var("MEMLAB_TEST_TOKEN_7731", "sekrit") };
        RemoteBackend::new(cfg).unwrap().query_logprobs(&[1, 2]).unwrap();
        assert_eq!(server.last_authorization().as_deref(), Some("Bearer sekrit"));
    }

    #[test]
    fn config_validation() {
        assert!(RemoteBackend::new(RemoteConfig::new("ftp://x", "m")).is_err());
        let cfg = RemoteConfig { max_in_flight: 0, ..RemoteConfig::new("http://x", "m") };
        assert!(RemoteBackend::new(cfg).is_err());
    }
}
