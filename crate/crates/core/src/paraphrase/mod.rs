//! Symmetrical paraphrase pairs `(x⁺, x⁻)` around a record, either as
//! mirrored Gaussian offsets of its embedding rows or as mask-and-fill token
//! substitutions with mirrored counterparts.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::microlm::{mlm_fill, EmbeddingMatrix, MicroLmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParaphraseDomain {
    Embedding,
    Semantic,
}

fn default_domain() -> ParaphraseDomain {
    ParaphraseDomain::Semantic
}
fn default_sigma() -> f64 {
    0.05
}
fn default_lambda() -> f64 {
    0.2
}
fn default_pairs() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParaphraseConfig {
    #[serde(default = "default_domain")]
    pub domain: ParaphraseDomain,
    /// Noise scale of the embedding domain.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Per-token masking probability of the semantic domain.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    pub seed: u64,
}

impl ParaphraseConfig {
    pub fn new(domain: ParaphraseDomain, seed: u64) -> Self {
        ParaphraseConfig {
            domain,
            sigma: default_sigma(),
            lambda: default_lambda(),
            n_pairs: default_pairs(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::ZeroPairs);
        }
        match self.domain {
            ParaphraseDomain::Embedding if !(self.sigma > 0.0 && self.sigma.is_finite()) => {
                Err(Error::config(format!("sigma must be > 0, got {}", self.sigma)))
            }
            ParaphraseDomain::Semantic if !(self.lambda > 0.0 && self.lambda < 1.0) => {
                Err(Error::config(format!("lambda must lie in (0, 1), got {}", self.lambda)))
            }
            _ => Ok(()),
        }
    }
}

/// Mirrored embedding rows: `plus = emb(x) + z`, `minus = emb(x) - z`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub record_id: String,
    pub pair_index: usize,
    pub dim: usize,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Token-level pair: masked positions are filled by a masked LM (`plus`) and
/// mirrored through the embedding space (`minus`); the rest is untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPair {
    pub record_id: String,
    pub pair_index: usize,
    pub masked_positions: Vec<usize>,
    pub plus: Vec<TokenId>,
    pub minus: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SymmetricPair {
    Embedding(EmbeddingPair),
    Semantic(SemanticPair),
}

impl SymmetricPair {
    pub fn record_id(&self) -> &str {
        match self {
            SymmetricPair::Embedding(p) => &p.record_id,
            SymmetricPair::Semantic(p) => &p.record_id,
        }
    }
}

/// Independent stream for one (record, pair) so results do not depend on
/// the order in which records are processed.
pub fn pair_rng(seed: u64, record_id: &str, pair_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((record_id.len() as u64).to_le_bytes());
    h.update(record_id.as_bytes());
    h.update((pair_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn require_domain(config: &ParaphraseConfig, domain: ParaphraseDomain) -> Result<()> {
    config.validate()?;
    if config.domain != domain {
        return Err(Error::config(format!("paraphrase config is for the {:?} domain", config.domain)));
    }
    Ok(())
}

pub fn paraphrase_embedding(
    x: &TokenSequence,
    e: &EmbeddingMatrix,
    config: &ParaphraseConfig,
) -> Result<Vec<EmbeddingPair>> {
    require_domain(config, ParaphraseDomain::Embedding)?;
    if let Some(&id) = x.tokens.iter().find(|&&t| t as usize >= e.rows()) {
        return Err(Error::TokenOutOfRange { id, vocab_size: e.rows() });
    }
    let base = e.embed(&x.tokens);
    let normal = Normal::new(0.0, config.sigma).map_err(|err| Error::config(err.to_string()))?;
    Ok((0..config.n_pairs)
        .map(|n| {
            let mut rng = pair_rng(config.seed, &x.id, n);
            let noise: Vec<f64> = (0..base.len()).map(|_| normal.sample(&mut rng)).collect();
            EmbeddingPair {
                record_id: x.id.clone(),
                pair_index: n,
                dim: e.dim(),
                plus: base.iter().zip(&noise).map(|(b, z)| b + z).collect(),
                minus: base.iter().zip(&noise).map(|(b, z)| b - z).collect(),
                noise,
            }
        })
        .collect())
}

/// Positions drawn independently with probability `lambda`; an empty draw is
/// replaced by one uniformly chosen position.
fn draw_mask(len: usize, lambda: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut masked: Vec<usize> = (0..len).filter(|_| rng.random::<f64>() < lambda).collect();
    if masked.is_empty() {
        masked.push(rng.random_range(0..len));
    }
    masked
}

/// `mlm` fills the masks; `e` is the embedding matrix used to mirror each
/// substitution (`t⁻ = nearest(2·emb(t) − emb(t⁺))`).
pub fn paraphrase_semantic(
    x: &TokenSequence,
    mlm: &MicroLmParams,
    e: &EmbeddingMatrix,
    config: &ParaphraseConfig,
) -> Result<Vec<SemanticPair>> {
    require_domain(config, ParaphraseDomain::Semantic)?;
    if x.tokens.is_empty() {
        return Err(Error::config(format!("record {} is empty", x.id)));
    }
    let mask_id = (mlm.shape().vocab_size - 2) as TokenId;
    let mut pairs = Vec::with_capacity(config.n_pairs);
    for n in 0..config.n_pairs {
        let mut rng = pair_rng(config.seed, &x.id, n);
        let masked = draw_mask(x.tokens.len(), config.lambda, &mut rng);
        let mut input = x.tokens.clone();
        for &j in &masked {
            input[j] = mask_id;
        }
        let plus = mlm_fill(mlm, &input, mask_id)?;
        let mut minus = x.tokens.clone();
        for &j in &masked {
            let (t, tp) = (e.row(x.tokens[j]), e.row(plus[j]));
            let mirror: Vec<f64> = t.iter().zip(tp).map(|(a, b)| a - (b - a)).collect();
            minus[j] = e.nearest_token(&mirror);
        }
        pairs.push(SemanticPair { record_id: x.id.clone(), pair_index: n, masked_positions: masked, plus, minus });
    }
    Ok(pairs)
}

/// One audit line per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAudit {
    pub id: String,
    pub pair_index: usize,
    pub domain: ParaphraseDomain,
    pub masked_positions: Vec<usize>,
    pub plus: serde_json::Value,
    pub minus: serde_json::Value,
}

impl From<&SymmetricPair> for PairAudit {
    fn from(p: &SymmetricPair) -> Self {
        match p {
            SymmetricPair::Embedding(p) => PairAudit {
                id: p.record_id.clone(),
                pair_index: p.pair_index,
                domain: ParaphraseDomain::Embedding,
                masked_positions: Vec::new(),
                plus: p.plus.clone().into(),
                minus: p.minus.clone().into(),
            },
            SymmetricPair::Semantic(p) => PairAudit {
                id: p.record_id.clone(),
                pair_index: p.pair_index,
                domain: ParaphraseDomain::Semantic,
                masked_positions: p.masked_positions.clone(),
                plus: p.plus.clone().into(),
                minus: p.minus.clone().into(),
            },
        }
    }
}

/// Writes pairs as JSON lines.
pub fn write_audit(path: &Path, pairs: &[SymmetricPair]) -> Result<()> {
    let ctx = || format!("write {}", path.display());
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, &PairAudit::from(p))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}
