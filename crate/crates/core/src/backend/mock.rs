//! A local HTTP server speaking the completions and fine-tuning protocol,
//! backed by in-memory micro-LMs. Faults can be scripted to exercise the
//! client's retry, timeout and failed-job paths.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{
    status_name, Choice, ChoiceLogprobs, CompletionRequest, CompletionResponse, ErrorBody, FineTuneRequest, JobBody,
    JobError,
};
use super::JobStatus;
use crate::corpus::{SplitLabel, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::microlm::{self, GenerationConfig, MicroLmParams, TrainConfig};

/// A scripted misbehaviour applied to the next request.
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    /// Respond with this status and an error body.
    Status(u16),
    /// Sleep before handling the request normally.
    Delay(Duration),
    /// Respond 200 with this raw body.
    Body(String),
}

struct Job {
    base: String,
    remaining_polls: usize,
    status: JobStatus,
    result: std::result::Result<MicroLmParams, String>,
}

#[derive(Default)]
struct State {
    models: HashMap<String, Arc<MicroLmParams>>,
    faults: VecDeque<Fault>,
    jobs: HashMap<String, Job>,
    job_polls: usize,
    fail_next_job: Option<String>,
    fixed_completion: Option<String>,
    requests: usize,
    last_authorization: Option<String>,
}

pub struct MockServer {
    server: Arc<Server>,
    state: Arc<Mutex<State>>,
    vocab: Vocabulary,
    worker: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral port on localhost and starts serving.
    pub fn start() -> Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(|e| Error::Network { attempts: 0, message: e.to_string() })?;
        let server = Arc::new(server);
        let state = Arc::new(Mutex::new(State { job_polls: 2, ..State::default() }));
        let vocab = Vocabulary::byte();
        let worker = {
            let (server, state, vocab) = (server.clone(), state.clone(), vocab.clone());
            std::thread::spawn(move || {
                for req in server.incoming_requests() {
                    let (state, vocab) = (state.clone(), vocab.clone());
                    std::thread::spawn(move || handle(req, &state, &vocab));
                }
            })
        };
        Ok(MockServer { server, state, vocab, worker: Some(worker) })
    }

    pub fn base_url(&self) -> String {
        let addr = self.server.server_addr().to_ip().expect("bound to an IP address");
        format!("http://{addr}")
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn add_model(&self, name: impl Into<String>, params: MicroLmParams) {
        self.state.lock().unwrap().models.insert(name.into(), Arc::new(params));
    }

    pub fn model(&self, name: &str) -> Option<Arc<MicroLmParams>> {
        self.state.lock().unwrap().models.get(name).cloned()
    }

    pub fn push_fault(&self, fault: Fault) {
        self.state.lock().unwrap().faults.push_back(fault);
    }

    /// Polls a job answers with a non-terminal status before it finishes
    /// (default 2: one `queued`, one `running`).
    pub fn set_job_polls(&self, polls: usize) {
        self.state.lock().unwrap().job_polls = polls;
    }

    /// The next submitted job ends `failed` with this reason.
    pub fn fail_next_job(&self, reason: impl Into<String>) {
        self.state.lock().unwrap().fail_next_job = Some(reason.into());
    }

    /// Generation returns this text (without token ids) instead of sampling.
    pub fn set_fixed_completion(&self, text: Option<String>) {
        self.state.lock().unwrap().fixed_completion = text;
    }

    /// Requests received so far, including faulted ones.
    pub fn request_count(&self) -> usize {
        self.state.lock().unwrap().requests
    }

    pub fn last_authorization(&self) -> Option<String> {
        self.state.lock().unwrap().last_authorization.clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

type Reply = (u16, String);

fn error_reply(status: u16, message: impl Into<String>) -> Reply {
    let body = ErrorBody { error: JobError { message: message.into() } };
    (status, serde_json::to_string(&body).expect("serializable"))
}

fn json_reply<T: serde::Serialize>(value: &T) -> Reply {
    (200, serde_json::to_string(value).expect("serializable"))
}

fn handle(mut req: Request, state: &Mutex<State>, vocab: &Vocabulary) {
    let fault = {
        let mut s = state.lock().unwrap();
        s.requests += 1;
        s.last_authorization = req
            .headers()
            .iter()
            .find(|h| h.field.equiv("Authorization"))
            .map(|h| h.value.as_str().to_string());
        s.faults.pop_front()
    };
    let reply = match fault {
        Some(Fault::Status(code)) => error_reply(code, "injected fault"),
        Some(Fault::Body(body)) => (200, body),
        Some(Fault::Delay(d)) => {
            std::thread::sleep(d);
            route(&mut req, state, vocab)
        }
        None => route(&mut req, state, vocab),
    };
    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let _ = req.respond(Response::from_string(reply.1).with_status_code(reply.0).with_header(header));
}

fn route(req: &mut Request, state: &Mutex<State>, vocab: &Vocabulary) -> Reply {
    let mut body = String::new();
    if req.as_reader().read_to_string(&mut body).is_err() {
        return error_reply(400, "unreadable body");
    }
    let url = req.url().to_string();
    match (req.method(), url.as_str()) {
        (Method::Post, "/v1/completions") => match serde_json::from_str(&body) {
            Ok(r) => completions(r, state, vocab),
            Err(e) => error_reply(400, e.to_string()),
        },
        (Method::Post, "/v1/fine_tuning/jobs") => match serde_json::from_str(&body) {
            Ok(r) => submit(r, state),
            Err(e) => error_reply(400, e.to_string()),
        },
        (Method::Get, path) if path.starts_with("/v1/fine_tuning/jobs/") => {
            poll(&path["/v1/fine_tuning/jobs/".len()..], state)
        }
        _ => error_reply(404, format!("no route for {url}")),
    }
}

fn completions(req: CompletionRequest, state: &Mutex<State>, vocab: &Vocabulary) -> Reply {
    let (model, fixed) = {
        let s = state.lock().unwrap();
        (s.models.get(&req.model).cloned(), s.fixed_completion.clone())
    };
    let Some(model) = model else {
        return error_reply(404, format!("unknown model {:?}", req.model));
    };
    let choice = if req.max_tokens == 0 {
        match microlm::token_logprobs(&model, &req.prompt) {
            Ok(lp) => Choice {
                text: if req.echo { vocab.decode(&req.prompt) } else { String::new() },
                logprobs: Some(ChoiceLogprobs {
                    token_logprobs: std::iter::once(None).chain(lp.into_iter().map(Some)).collect(),
                }),
                token_ids: None,
            },
            Err(e) => return error_reply(400, e.to_string()),
        }
    } else if let Some(text) = fixed {
        Choice { text, logprobs: None, token_ids: None }
    } else {
        let cfg = GenerationConfig {
            max_new_tokens: req.max_tokens,
            temperature: req.temperature,
            seed: req.seed.unwrap_or(0),
        };
        match microlm::generate(&model, &req.prompt, &cfg) {
            Ok(ids) => Choice { text: vocab.decode(&ids), logprobs: None, token_ids: Some(ids) },
            Err(e) => return error_reply(400, e.to_string()),
        }
    };
    json_reply(&CompletionResponse { choices: vec![choice] })
}

fn job_body(id: &str, job: &Job) -> JobBody {
    JobBody {
        id: id.to_string(),
        status: status_name(job.status).to_string(),
        fine_tuned_model: (job.status == JobStatus::Succeeded).then(|| format!("{}:ft-{id}", job.base)),
        error: match (&job.status, &job.result) {
            (JobStatus::Failed, Err(reason)) => Some(JobError { message: reason.clone() }),
            _ => None,
        },
    }
}

fn submit(req: FineTuneRequest, state: &Mutex<State>) -> Reply {
    let (base, failure, polls, id) = {
        let mut s = state.lock().unwrap();
        let id = format!("ftjob-{}", s.jobs.len() + 1);
        (s.models.get(&req.model).cloned(), s.fail_next_job.take(), s.job_polls, id)
    };
    let Some(base) = base else {
        return error_reply(404, format!("unknown model {:?}", req.model));
    };
    let result = match failure {
        Some(reason) => Err(reason),
        None => {
            let h = &req.hyperparameters;
            let config = TrainConfig {
                learning_rate: h.learning_rate,
                epochs: h.n_epochs,
                batch_size: h.batch_size,
                seed: h.seed,
                weight_decay: h.weight_decay,
                ..TrainConfig::reference(h.seed)
            };
            let data: Vec<TokenSequence> = req
                .training_data
                .into_iter()
                .enumerate()
                .map(|(i, t)| TokenSequence::new(format!("train-{i}"), t, SplitLabel::Candidate))
                .collect();
            microlm::train((*base).clone(), &data, &config).map(|(p, _)| p).map_err(|e| e.to_string())
        }
    };
    let mut job = Job { base: req.model, remaining_polls: polls, status: JobStatus::Pending, result };
    let mut s = state.lock().unwrap();
    if polls == 0 {
        finish(&id, &mut job, &mut s.models);
    }
    let body = job_body(&id, &job);
    s.jobs.insert(id, job);
    json_reply(&body)
}

fn finish(id: &str, job: &mut Job, models: &mut HashMap<String, Arc<MicroLmParams>>) {
    match &job.result {
        Ok(params) => {
            job.status = JobStatus::Succeeded;
            models.insert(format!("{}:ft-{id}", job.base), Arc::new(params.clone()));
        }
        Err(_) => job.status = JobStatus::Failed,
    }
}

fn poll(id: &str, state: &Mutex<State>) -> Reply {
    let mut guard = state.lock().unwrap();
    let s = &mut *guard;
    let Some(job) = s.jobs.get_mut(id) else {
        return error_reply(404, format!("unknown job {id:?}"));
    };
    if !job.status.is_terminal() {
        job.remaining_polls = job.remaining_polls.saturating_sub(1);
        if job.remaining_polls == 0 {
            finish(id, job, &mut s.models);
        } else {
            job.status = JobStatus::Running;
        }
    }
    json_reply(&job_body(id, job))
}
