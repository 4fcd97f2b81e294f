//! Model access through two narrow APIs: querying (per-token log-probabilities
//! and generation) and fine-tuning. The in-process backend wraps a micro-LM
//! directly; the remote backend speaks a completions-style HTTP protocol.

pub mod mock;
mod remote;
mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use remote::{RemoteBackend, RemoteConfig};

use crate::corpus::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::microlm::{self, EmbeddingMatrix, GenerationConfig, MicroLmParams, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub can_logprobs: bool,
    pub can_generate: bool,
    pub can_finetune: bool,
    /// Embedding-matrix export and scoring of raw embedding rows.
    pub can_embed: bool,
}

impl Capabilities {
    pub const ALL: Capabilities = Capabilities {
        can_logprobs: true,
        can_generate: true,
        can_finetune: true,
        can_embed: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    InProcess,
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub capabilities: Capabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }
}

/// A model that a backend can serve.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelHandle {
    InProcess(Arc<MicroLmParams>),
    Remote(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneJob {
    pub id: String,
    pub status: JobStatus,
    /// Set once the job has succeeded.
    pub model: Option<ModelHandle>,
    /// Server-reported reason for a failed job.
    pub error: Option<String>,
}

pub(crate) fn require(flag: bool, name: &'static str) -> Result<()> {
    if flag {
        Ok(())
    } else {
        Err(Error::CapabilityMissing(name))
    }
}

/// Uniform access to a target, pre-trained or reference model.
///
/// Every method checks the corresponding capability before doing any work.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// `log p(t_i | t_<i)` for `i = 1..n`, in nats.
    fn query_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<f64>>;

    /// Many independent queries; results keep input order.
    fn query_logprobs_many(&self, batch: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        batch.iter().map(|t| self.query_logprobs(t)).collect()
    }

    /// New tokens only.
    fn query_generate(&self, prompt: &[TokenId], config: &GenerationConfig) -> Result<Vec<TokenId>>;

    /// Starts fine-tuning the served model on `dataset`.
    fn submit_finetune(&self, dataset: &[TokenSequence], config: &TrainConfig) -> Result<FineTuneJob>;

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob>;

    /// Delay between polls of a running job.
    fn poll_interval(&self) -> Duration {
        Duration::ZERO
    }

    /// A backend of the same kind serving another model.
    fn open(&self, model: &ModelHandle) -> Result<Box<dyn Backend>>;

    fn export_embeddings(&self) -> Result<EmbeddingMatrix>;

    /// Mean log-probability of `targets` with the embedding lookup replaced
    /// by `rows`.
    fn score_embeddings(&self, rows: &[f64], targets: &[TokenId]) -> Result<f64>;
}

/// Mean per-token log-probability of a sequence.
pub fn sequence_score(backend: &dyn Backend, tokens: &[TokenId]) -> Result<f64> {
    Ok(mean(&backend.query_logprobs(tokens)?))
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Submits a fine-tuning job and polls until it reaches a terminal status.
/// A failed job becomes [`Error::JobFailed`] carrying the server's reason.
pub fn finetune(backend: &dyn Backend, dataset: &[TokenSequence], config: &TrainConfig) -> Result<FineTuneJob> {
    let mut job = backend.submit_finetune(dataset, config)?;
    while !job.status.is_terminal() {
        std::thread::sleep(backend.poll_interval());
        job = backend.poll(&job)?;
    }
    match job.status {
        JobStatus::Succeeded if job.model.is_some() => Ok(job),
        JobStatus::Succeeded => Err(Error::MalformedResponse(format!("job {} succeeded without a model", job.id))),
        _ => Err(Error::JobFailed {
            reason: job.error.clone().unwrap_or_else(|| "no reason given".into()),
            job_id: job.id,
        }),
    }
}

/// [`finetune`], then opens the resulting model.
pub fn finetune_model(
    backend: &dyn Backend,
    dataset: &[TokenSequence],
    config: &TrainConfig,
) -> Result<Box<dyn Backend>> {
    let job = finetune(backend, dataset, config)?;
    backend.open(job.model.as_ref().expect("checked by finetune"))
}

/// Serves a micro-LM held in memory. Results are exactly those of the
/// corresponding `microlm` calls.
#[derive(Debug)]
pub struct InProcessBackend {
    params: Arc<MicroLmParams>,
    jobs: AtomicU64,
}

impl InProcessBackend {
    pub fn new(params: MicroLmParams) -> Self {
        Self::shared(Arc::new(params))
    }

    pub fn shared(params: Arc<MicroLmParams>) -> Self {
        InProcessBackend { params, jobs: AtomicU64::new(0) }
    }

    pub fn params(&self) -> &Arc<MicroLmParams> {
        &self.params
    }
}

impl Backend for InProcessBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor { kind: BackendKind::InProcess, capabilities: Capabilities::ALL }
    }

    fn query_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        microlm::token_logprobs(&self.params, tokens)
    }

    fn query_generate(&self, prompt: &[TokenId], config: &GenerationConfig) -> Result<Vec<TokenId>> {
        microlm::generate(&self.params, prompt, config)
    }

    /// Trains synchronously; the returned job is already terminal.
    fn submit_finetune(&self, dataset: &[TokenSequence], config: &TrainConfig) -> Result<FineTuneJob> {
        let id = format!("local-{}", self.jobs.fetch_add(1, Ordering::Relaxed));
        let (params, _) = microlm::train((*self.params).clone(), dataset, config)?;
        Ok(FineTuneJob {
            id,
            status: JobStatus::Succeeded,
            model: Some(ModelHandle::InProcess(Arc::new(params))),
            error: None,
        })
    }

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob> {
        Ok(job.clone())
    }

    fn open(&self, model: &ModelHandle) -> Result<Box<dyn Backend>> {
        match model {
            ModelHandle::InProcess(p) => Ok(Box::new(InProcessBackend::shared(p.clone()))),
            ModelHandle::Remote(name) => {
                Err(Error::config(format!("in-process backend cannot open remote model {name:?}")))
            }
        }
    }

    fn export_embeddings(&self) -> Result<EmbeddingMatrix> {
        Ok(self.params.embedding_matrix())
    }

    fn score_embeddings(&self, rows: &[f64], targets: &[TokenId]) -> Result<f64> {
        microlm::score_embeddings(&self.params, rows, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitLabel;
    use crate::microlm::{ModelMode, ModelShape};

    fn params() -> MicroLmParams {
        MicroLmParams::init_with_scale(ModelShape::new(ModelMode::Causal, 12, 8, 16), 3, 0.3).unwrap()
    }

    #[test]
    fn delegation_is_bitwise() {
        let p = params();
        let b = InProcessBackend::new(p.clone());
        let x = [1, 5, 3, 3, 9, 0];
        assert_eq!(b.query_logprobs(&x).unwrap(), microlm::token_logprobs(&p, &x).unwrap());
        assert_eq!(sequence_score(&b, &x).unwrap(), microlm::sequence_logprob(&p, &x).unwrap());
        let cfg = GenerationConfig { max_new_tokens: 5, temperature: 1.0, seed: 4 };
        assert_eq!(b.query_generate(&x, &cfg).unwrap(), microlm::generate(&p, &x, &cfg).unwrap());
        let e = b.export_embeddings().unwrap();
        assert_eq!(e, p.embedding_matrix());
        assert_eq!(e.rows(), 12);
        assert_eq!(
            b.score_embeddings(&e.embed(&x), &x).unwrap(),
            microlm::score_embeddings(&p, &e.embed(&x), &x).unwrap()
        );
        assert_eq!(b.descriptor().capabilities, Capabilities::ALL);
    }

    #[test]
    fn in_process_job_is_immediately_terminal() {
        let b = InProcessBackend::new(params());
        let data: Vec<_> = (0..3)
            .map(|i| TokenSequence::new(format!("r{i}"), vec![1, 2, 3, 4, 5, 6, 7, 8], SplitLabel::Candidate))
            .collect();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, learning_rate: 1e-2, ..TrainConfig::reference(0) };
        let job = b.submit_finetune(&data, &cfg).unwrap();
        assert!(job.status.is_terminal());
        assert_eq!(b.poll(&job).unwrap(), job);
        let tuned = finetune_model(&b, &data, &cfg).unwrap();
        let expected = microlm::train(params(), &data, &cfg).unwrap().0;
        assert_eq!(tuned.query_logprobs(&[1, 2, 3]).unwrap(), microlm::token_logprobs(&expected, &[1, 2, 3]).unwrap());
    }

    #[test]
    fn terminal_statuses() {
        assert!(JobStatus::Succeeded.is_terminal() && JobStatus::Failed.is_terminal());
        assert!(!JobStatus::Pending.is_terminal() && !JobStatus::Running.is_terminal());
    }
}
