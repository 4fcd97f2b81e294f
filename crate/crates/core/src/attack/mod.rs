//! Membership scores. Every method is oriented so that a higher score means
//! "more likely a member".

mod csv_io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use csv_io::{read_scores, write_scores};

use crate::backend::{mean, Backend};
use crate::corpus::{SplitLabel, TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::microlm::{EmbeddingMatrix, MicroLmParams};
use crate::paraphrase::{
    paraphrase_embedding, paraphrase_semantic, ParaphraseConfig, ParaphraseDomain, SymmetricPair,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Loss,
    Mink,
    Neighbour,
    LiraBase,
    LiraCandidate,
    Spv,
    SpvNoPdc,
    SpvNoPva,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Loss,
        Method::Mink,
        Method::Neighbour,
        Method::LiraBase,
        Method::LiraCandidate,
        Method::Spv,
        Method::SpvNoPdc,
        Method::SpvNoPva,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Loss => "loss",
            Method::Mink => "mink",
            Method::Neighbour => "neighbour",
            Method::LiraBase => "lira_base",
            Method::LiraCandidate => "lira_candidate",
            Method::Spv => "spv",
            Method::SpvNoPdc => "spv_no_pdc",
            Method::SpvNoPva => "spv_no_pva",
        }
    }

    fn needs_pairs(self) -> bool {
        matches!(self, Method::Neighbour | Method::Spv | Method::SpvNoPdc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipScore {
    pub record_id: String,
    pub method: Method,
    pub score: f64,
    /// 1 for members, 0 for non-members.
    pub label: u8,
}

pub fn label_of(split: SplitLabel) -> Result<u8> {
    match split {
        SplitLabel::Member => Ok(1),
        SplitLabel::Nonmember => Ok(0),
        SplitLabel::Candidate => Err(Error::config("candidate records carry no membership label")),
    }
}

/// Mean per-token log-probability.
pub fn loss_score(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(mean(token_logprobs))
}

pub fn loss_attack(target: &dyn Backend, x: &[TokenId]) -> Result<f64> {
    loss_score(&target.query_logprobs(x)?)
}

/// Mean of the ⌈k/100·n⌉ smallest token log-probabilities.
pub fn mink_score(token_logprobs: &[f64], k: f64) -> Result<f64> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::PercentOutOfRange(k));
    }
    if token_logprobs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sorted = token_logprobs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let count = ((k / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(mean(&sorted[..count]))
}

pub fn mink(target: &dyn Backend, x: &[TokenId], k: f64) -> Result<f64> {
    mink_score(&target.query_logprobs(x)?, k)
}

/// `p̃ = (1/2N)·Σ (p(x⁺) + p(x⁻)) − p(x)`.
pub fn probabilistic_variation(p_x: f64, plus: &[f64], minus: &[f64]) -> Result<f64> {
    if plus.is_empty() {
        return Err(Error::ZeroPairs);
    }
    if plus.len() != minus.len() {
        return Err(Error::config("plus and minus branches differ in length"));
    }
    let total: f64 = plus.iter().zip(minus).map(|(a, b)| a + b).sum();
    Ok(total / (2 * plus.len()) as f64 - p_x)
}

/// Difficulty calibration: `m_target − m_reference`.
pub fn calibrate(m_target: f64, m_reference: f64) -> f64 {
    m_target - m_reference
}

/// `p(x) − mean p(x̃)`.
pub fn neighbour_score(p_x: f64, neighbours: &[f64]) -> Result<f64> {
    if neighbours.is_empty() {
        return Err(Error::ZeroPairs);
    }
    Ok(p_x - mean(neighbours))
}

pub fn lira(target: &dyn Backend, reference: &dyn Backend, x: &[TokenId]) -> Result<f64> {
    Ok(calibrate(loss_attack(target, x)?, loss_attack(reference, x)?))
}

/// Probabilities of one record and its paraphrase pairs under one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub original: f64,
    pub original_logprobs: Vec<f64>,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl PairScores {
    pub fn variation(&self) -> Result<f64> {
        probabilistic_variation(self.original, &self.plus, &self.minus)
    }
}

/// Issues exactly `2N + 1` probability queries.
pub fn score_pairs(model: &dyn Backend, x: &[TokenId], pairs: &[SymmetricPair]) -> Result<PairScores> {
    if pairs.is_empty() {
        return Err(Error::ZeroPairs);
    }
    let original_logprobs = model.query_logprobs(x)?;
    let original = loss_score(&original_logprobs)?;
    let (mut plus, mut minus) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
    if pairs.iter().all(|p| matches!(p, SymmetricPair::Semantic(_))) {
        let batch: Vec<Vec<TokenId>> = pairs
            .iter()
            .flat_map(|p| match p {
                SymmetricPair::Semantic(s) => [s.plus.clone(), s.minus.clone()],
                SymmetricPair::Embedding(_) => unreachable!(),
            })
            .collect();
        for (i, lp) in model.query_logprobs_many(&batch)?.iter().enumerate() {
            let s = loss_score(lp)?;
            if i % 2 == 0 { plus.push(s) } else { minus.push(s) }
        }
    } else {
        for p in pairs {
            match p {
                SymmetricPair::Embedding(e) => {
                    plus.push(model.score_embeddings(&e.plus, x)?);
                    minus.push(model.score_embeddings(&e.minus, x)?);
                }
                SymmetricPair::Semantic(s) => {
                    plus.push(mean(&model.query_logprobs(&s.plus)?));
                    minus.push(mean(&model.query_logprobs(&s.minus)?));
                }
            }
        }
    }
    Ok(PairScores { original, original_logprobs, plus, minus })
}

/// SPV components for one record, with the same pairs on both models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpvSignals {
    pub p_target: f64,
    pub p_reference: f64,
    pub variation_target: f64,
    pub variation_reference: f64,
}

impl SpvSignals {
    /// `−(p̃_target − p̃_reference)`.
    pub fn spv(&self) -> f64 {
        -calibrate(self.variation_target, self.variation_reference)
    }

    pub fn no_pdc(&self) -> f64 {
        -self.variation_target
    }

    pub fn no_pva(&self) -> f64 {
        calibrate(self.p_target, self.p_reference)
    }
}

pub fn spv_signals(
    target: &dyn Backend,
    reference: &dyn Backend,
    x: &[TokenId],
    pairs: &[SymmetricPair],
) -> Result<SpvSignals> {
    let t = score_pairs(target, x, pairs)?;
    let r = score_pairs(reference, x, pairs)?;
    Ok(SpvSignals {
        p_target: t.original,
        p_reference: r.original,
        variation_target: t.variation()?,
        variation_reference: r.variation()?,
    })
}

pub fn spv_score(target: &dyn Backend, reference: &dyn Backend, x: &[TokenId], pairs: &[SymmetricPair]) -> Result<f64> {
    Ok(spv_signals(target, reference, x, pairs)?.spv())
}

/// Where paraphrase pairs come from.
pub enum Paraphraser<'a> {
    /// Mask-and-fill with an attacker-side masked model and its embeddings.
    Semantic { mlm: &'a MicroLmParams, embeddings: EmbeddingMatrix },
    /// Gaussian offsets of the target's own embeddings (white-box only).
    Embedding { embeddings: EmbeddingMatrix },
}

impl<'a> Paraphraser<'a> {
    pub fn semantic(mlm: &'a MicroLmParams) -> Self {
        Paraphraser::Semantic { mlm, embeddings: mlm.embedding_matrix() }
    }

    /// Embedding-domain pairs need the target to export its embeddings.
    pub fn embedding(target: &dyn Backend) -> Result<Self> {
        Ok(Paraphraser::Embedding { embeddings: target.export_embeddings()? })
    }

    pub fn pairs(&self, x: &TokenSequence, config: &ParaphraseConfig) -> Result<Vec<SymmetricPair>> {
        match (self, config.domain) {
            (Paraphraser::Semantic { mlm, embeddings }, ParaphraseDomain::Semantic) => Ok(
                paraphrase_semantic(x, mlm, embeddings, config)?.into_iter().map(SymmetricPair::Semantic).collect(),
            ),
            (Paraphraser::Embedding { embeddings }, ParaphraseDomain::Embedding) => Ok(
                paraphrase_embedding(x, embeddings, config)?.into_iter().map(SymmetricPair::Embedding).collect(),
            ),
            _ => Err(Error::config("paraphraser does not match the configured domain")),
        }
    }
}

/// Models available to the attacker. Methods whose model is missing are
/// rejected up front.
pub struct AttackModels<'a> {
    pub target: &'a dyn Backend,
    /// Self-prompt reference.
    pub self_reference: Option<&'a dyn Backend>,
    /// Pre-trained base, the LiRA-Base reference.
    pub pretrained: Option<&'a dyn Backend>,
    /// Reference fine-tuned on same-domain public data.
    pub candidate_reference: Option<&'a dyn Backend>,
    pub paraphraser: Option<Paraphraser<'a>>,
}

fn default_mink_k() -> f64 {
    20.0
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_mink_k")]
    pub mink_k: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { methods: default_methods(), mink_k: default_mink_k() }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("no attack methods selected"));
        }
        if !(self.mink_k > 0.0 && self.mink_k <= 100.0) {
            return Err(Error::PercentOutOfRange(self.mink_k));
        }
        Ok(())
    }
}

fn need<'b>(model: Option<&'b dyn Backend>, method: Method, what: &str) -> Result<&'b dyn Backend> {
    model.ok_or_else(|| Error::config(format!("method {method} needs a {what} model")))
}

/// Scores every record with every configured method. Output is sorted by
/// (record id, method).
pub fn score_records(
    models: &AttackModels,
    records: &[TokenSequence],
    config: &AttackConfig,
    paraphrase: &ParaphraseConfig,
) -> Result<Vec<MembershipScore>> {
    Ok(score_records_audited(models, records, config, paraphrase)?.0)
}

/// [`score_records`], also returning every paraphrase pair that was scored.
pub fn score_records_audited(
    models: &AttackModels,
    records: &[TokenSequence],
    config: &AttackConfig,
    paraphrase: &ParaphraseConfig,
) -> Result<(Vec<MembershipScore>, Vec<SymmetricPair>)> {
    config.validate()?;
    let methods = &config.methods;
    let wants = |m: Method| methods.contains(&m);
    let wants_pairs = methods.iter().any(|m| m.needs_pairs());
    let wants_self_ref = wants(Method::Spv) || wants(Method::SpvNoPva);
    for &m in methods {
        match m {
            Method::LiraBase => drop(need(models.pretrained, m, "pre-trained")?),
            Method::LiraCandidate => drop(need(models.candidate_reference, m, "candidate reference")?),
            Method::Spv | Method::SpvNoPva => drop(need(models.self_reference, m, "self-prompt reference")?),
            _ => {}
        }
    }
    if wants_pairs {
        paraphrase.validate()?;
        if models.paraphraser.is_none() {
            return Err(Error::config("pair-based methods need a paraphraser"));
        }
    }

    let mut out = Vec::with_capacity(records.len() * methods.len());
    let mut audit = Vec::new();
    for x in records {
        let label = label_of(x.split)?;
        let pairs = match (&models.paraphraser, wants_pairs) {
            (Some(p), true) => p.pairs(x, paraphrase)?,
            _ => Vec::new(),
        };
        let target = if wants_pairs {
            score_pairs(models.target, &x.tokens, &pairs)?
        } else {
            let lp = models.target.query_logprobs(&x.tokens)?;
            PairScores { original: loss_score(&lp)?, original_logprobs: lp, plus: vec![], minus: vec![] }
        };
        let reference = match (models.self_reference, wants_self_ref) {
            (Some(r), true) if wants(Method::Spv) => Some(score_pairs(r, &x.tokens, &pairs)?),
            (Some(r), true) => {
                let p = loss_attack(r, &x.tokens)?;
                Some(PairScores { original: p, original_logprobs: vec![], plus: vec![], minus: vec![] })
            }
            _ => None,
        };
        let mut push = |method: Method, score: f64| {
            out.push(MembershipScore { record_id: x.id.clone(), method, score, label });
        };
        for &m in methods {
            let score = match m {
                Method::Loss => target.original,
                Method::Mink => mink_score(&target.original_logprobs, config.mink_k)?,
                Method::Neighbour => neighbour_score(target.original, &target.plus)?,
                Method::LiraBase => calibrate(target.original, loss_attack(models.pretrained.unwrap(), &x.tokens)?),
                Method::LiraCandidate => {
                    calibrate(target.original, loss_attack(models.candidate_reference.unwrap(), &x.tokens)?)
                }
                Method::Spv => {
                    let r = reference.as_ref().expect("reference scored");
                    -calibrate(target.variation()?, r.variation()?)
                }
                Method::SpvNoPdc => -target.variation()?,
                Method::SpvNoPva => calibrate(target.original, reference.as_ref().expect("reference scored").original),
            };
            if !score.is_finite() {
                return Err(Error::config(format!("non-finite {m} score for record {}", x.id)));
            }
            push(m, score);
        }
        audit.extend(pairs);
    }
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id).then(a.method.cmp(&b.method)));
    Ok((out, audit))
}
