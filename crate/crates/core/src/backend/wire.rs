//! JSON bodies of the completions and fine-tuning endpoints, shared by the
//! client and the mock server.

use serde::{Deserialize, Serialize};

use super::JobStatus;
use crate::corpus::TokenId;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CompletionRequest {
    pub model: String,
    /// Token ids; servers that only accept text are out of scope.
    pub prompt: Vec<TokenId>,
    pub max_tokens: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
    #[serde(default)]
    pub echo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CompletionResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Choice {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
    /// Extension: generated token ids, preferred over re-encoding `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ChoiceLogprobs {
    /// With `echo`, the first prompt token has no conditional and is `null`.
    pub token_logprobs: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Hyperparameters {
    pub learning_rate: f64,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FineTuneRequest {
    pub model: String,
    pub training_data: Vec<Vec<TokenId>>,
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct JobError {
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct JobBody {
    pub id: String,
    pub status: String,
    #[serde(default)]
    pub fine_tuned_model: Option<String>,
    #[serde(default)]
    pub error: Option<JobError>,
}

pub(crate) fn parse_status(s: &str) -> Option<JobStatus> {
    Some(match s {
        "pending" | "queued" | "validating_files" | "validating" => JobStatus::Pending,
        "running" => JobStatus::Running,
        "succeeded" => JobStatus::Succeeded,
        "failed" | "cancelled" => JobStatus::Failed,
        _ => return None,
    })
}

pub(crate) fn status_name(s: JobStatus) -> &'static str {
    match s {
        JobStatus::Pending => "queued",
        JobStatus::Running => "running",
        JobStatus::Succeeded => "succeeded",
        JobStatus::Failed => "failed",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ErrorBody {
    pub error: JobError,
}
