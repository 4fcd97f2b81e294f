//! Self-prompt reference construction: short prompts drawn from a text
//! source are continued by the target, and the continuations become the
//! fine-tuning set of the reference model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{finetune_model, Backend};
use crate::corpus::io::Provenance;
use crate::corpus::{SplitLabel, TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::microlm::{GenerationConfig, TrainConfig};

/// Text the prompts are cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// Public text from the target's domain.
    Domain,
    /// Text unrelated to the target's domain.
    Irrelevant,
    /// Held-out text from the target's own training distribution.
    Identical,
}

impl PromptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSource::Domain => "domain",
            PromptSource::Irrelevant => "irrelevant",
            PromptSource::Identical => "identical",
        }
    }
}

fn default_prompt_length() -> usize {
    16
}

fn default_generation_length() -> usize {
    112
}

fn default_temperature() -> f64 {
    1.0
}

fn default_source() -> PromptSource {
    PromptSource::Domain
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfPromptConfig {
    #[serde(default = "default_prompt_length")]
    pub prompt_length: usize,
    /// New tokens per prompt; prompt plus continuation must fit the model.
    #[serde(default = "default_generation_length")]
    pub generation_length: usize,
    pub n_self: usize,
    #[serde(default = "default_source")]
    pub prompt_source: PromptSource,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub seed: u64,
}

impl SelfPromptConfig {
    pub fn new(n_self: usize, seed: u64) -> Self {
        SelfPromptConfig {
            prompt_length: default_prompt_length(),
            generation_length: default_generation_length(),
            n_self,
            prompt_source: default_source(),
            temperature: default_temperature(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_self == 0 {
            return Err(Error::config("n_self must be positive"));
        }
        if self.prompt_length == 0 {
            return Err(Error::config("prompt_length must be positive"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::config("temperature must be >= 0"));
        }
        Ok(())
    }
}

/// `n` prompts of exactly `length` tokens, each a window at a random offset
/// of a randomly chosen source sequence.
pub fn make_prompts(source: &[TokenSequence], n: usize, length: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    let usable: Vec<&TokenSequence> = source.iter().filter(|s| s.len() >= length).collect();
    if usable.is_empty() || length == 0 {
        return Err(Error::InsufficientData { requested: length.max(1), available: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let s = usable[rng.random_range(0..usable.len())];
            let start = rng.random_range(0..=s.len() - length);
            s.tokens[start..start + length].to_vec()
        })
        .collect())
}

/// Continues every prompt with the target. Each record is the prompt followed
/// by its continuation, labelled `candidate`, with its prompt's provenance.
pub fn build_selfprompt_dataset(
    target: &dyn Backend,
    prompts: &[Vec<TokenId>],
    config: &SelfPromptConfig,
) -> Result<Vec<(TokenSequence, Provenance)>> {
    config.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e1f_9e0f);
    prompts
        .iter()
        .enumerate()
        .map(|(i, prompt)| {
            let gen = GenerationConfig {
                max_new_tokens: config.generation_length,
                temperature: config.temperature,
                seed: seeds.random(),
            };
            let mut tokens = prompt.clone();
            tokens.extend(target.query_generate(prompt, &gen)?);
            let seq = TokenSequence::new(format!("self-{i:05}"), tokens, SplitLabel::Candidate);
            Ok((seq, Provenance { prompt_id: i, prompt_source: config.prompt_source.as_str().to_string() }))
        })
        .collect()
}

/// Prompts, generation and reference fine-tuning in one call.
pub fn selfprompt_reference(
    target: &dyn Backend,
    base: &dyn Backend,
    source: &[TokenSequence],
    config: &SelfPromptConfig,
    train: &TrainConfig,
) -> Result<(Box<dyn Backend>, Vec<(TokenSequence, Provenance)>)> {
    config.validate()?;
    let prompts = make_prompts(source, config.n_self, config.prompt_length, config.seed)?;
    let data = build_selfprompt_dataset(target, &prompts, config)?;
    let seqs: Vec<TokenSequence> = data.iter().map(|(s, _)| s.clone()).collect();
    Ok((finetune_reference(base, &seqs, train)?, data))
}

/// Fine-tunes `base` on `dataset` and opens the result.
pub fn finetune_reference(base: &dyn Backend, dataset: &[TokenSequence], train: &TrainConfig) -> Result<Box<dyn Backend>> {
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    finetune_model(base, dataset, train)
}
