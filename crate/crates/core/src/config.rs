//! Declarative run configuration. Unknown keys are rejected and every seed
//! must be given explicitly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::backend::RemoteConfig;
use crate::corpus::{VocabMode, DEFAULT_PACKING_LENGTH};
use crate::error::{Error, Result};
use crate::microlm::TrainConfig;
use crate::paraphrase::{ParaphraseConfig, ParaphraseDomain};
use crate::selfprompt::{PromptSource, SelfPromptConfig};

fn default_vocab() -> VocabMode {
    VocabMode::Byte
}
fn default_members() -> usize {
    200
}
fn default_line_len() -> usize {
    400
}
fn default_packing() -> usize {
    DEFAULT_PACKING_LENGTH
}
fn default_synthetic_lines() -> usize {
    300
}

/// Member / non-member / candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Text file, one record per line (or JSON lines with a `text` field).
    /// Without it the bundled synthetic domain corpus is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Seed of the synthetic generator.
    pub seed: u64,
    pub split_seed: u64,
    #[serde(default = "default_vocab")]
    pub vocab: VocabMode,
    #[serde(default = "default_synthetic_lines")]
    pub synthetic_lines: usize,
    #[serde(default = "default_line_len")]
    pub line_len: usize,
    #[serde(default = "default_members")]
    pub n_member: usize,
    #[serde(default = "default_members")]
    pub n_nonmember: usize,
    #[serde(default = "default_packing")]
    pub packing_length: usize,
}

fn default_public_sequences() -> usize {
    300
}
fn default_prompt_sequences() -> usize {
    40
}

/// Public text available to everyone: the pre-training pool of the base and
/// the attacker's mask-filling model, plus the prompt sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicConfig {
    pub seed: u64,
    /// Same-domain public text; synthetic when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default = "default_public_sequences")]
    pub n_sequences: usize,
    /// Text for `domain` prompts; a sibling synthetic domain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_input: Option<PathBuf>,
    #[serde(default = "default_prompt_sequences")]
    pub n_prompt_sequences: usize,
    /// Unrelated text for `irrelevant` prompts and references.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irrelevant_input: Option<PathBuf>,
}

fn default_dim() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dim: default_dim() }
    }
}

fn default_true() -> bool {
    true
}

/// A single sweep axis; each value yields its own report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    PromptSource(Vec<PromptSource>),
    NSelf(Vec<usize>),
    PromptLength(Vec<usize>),
    ParaphraseDomain(Vec<ParaphraseDomain>),
    NPairs(Vec<usize>),
}

/// One point of a sweep, recorded in its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: serde_json::Value,
}

impl Sweep {
    pub fn points(&self) -> Vec<SweepPoint> {
        fn pts<T: Serialize>(axis: &str, v: &[T]) -> Vec<SweepPoint> {
            v.iter()
                .map(|x| SweepPoint { axis: axis.into(), value: serde_json::to_value(x).expect("serializable") })
                .collect()
        }
        match self {
            Sweep::PromptSource(v) => pts("prompt_source", v),
            Sweep::NSelf(v) => pts("n_self", v),
            Sweep::PromptLength(v) => pts("prompt_length", v),
            Sweep::ParaphraseDomain(v) => pts("paraphrase_domain", v),
            Sweep::NPairs(v) => pts("n_pairs", v),
        }
    }

    fn is_empty(&self) -> bool {
        self.points().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Also fine-tune a reference on irrelevant text and report calibrated
    /// AUC per reference source.
    #[serde(default = "default_true")]
    pub reference_comparison: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { reference_comparison: true, sweep: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    InProcess,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendChoice,
    /// Remote pre-trained model that references are fine-tuned from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model: Option<String>,
    /// Endpoint settings; `model` names the remote target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub public: PublicConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Pre-training of the public base model.
    pub pretrain: TrainConfig,
    /// Training of the attacker's mask-filling model.
    pub mlm_training: TrainConfig,
    pub target_training: TrainConfig,
    pub selfprompt: SelfPromptConfig,
    /// Shared by the self-prompt, candidate and irrelevant references.
    pub reference_training: TrainConfig,
    pub paraphrase: ParaphraseConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub backend: BackendConfig,
}

/// Per-stage hashes: each covers the settings of its stage and of every
/// stage upstream of it, so changing a late setting leaves early artifacts
/// valid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    /// Public models (base and mask filler); independent of the private
    /// corpus unless the vocabulary is built from it.
    pub pretrain: String,
    pub data: String,
    pub target: String,
    pub selfprompt: String,
    pub reference: String,
    /// Candidate and irrelevant references; unaffected by prompt settings.
    pub aux_reference: String,
    pub attack: String,
    pub evaluate: String,
}

fn chain(prev: &str, parts: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    for p in parts {
        // serde_json maps keep keys sorted, so this is canonical.
        h.update(serde_json::to_vec(p).expect("serializable"));
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// The micro benchmark: synthetic corpus, 200 members and 200
    /// non-members of 128 bytes.
    pub fn benchmark(seed: u64) -> Self {
        let fast = |lr: f64, epochs: usize, seed: u64| TrainConfig { learning_rate: lr, epochs, ..TrainConfig::target(seed) };
        RunConfig {
            corpus: CorpusConfig {
                input: None,
                seed,
                split_seed: seed,
                vocab: VocabMode::Byte,
                synthetic_lines: default_synthetic_lines(),
                line_len: default_line_len(),
                n_member: 200,
                n_nonmember: 200,
                packing_length: DEFAULT_PACKING_LENGTH,
            },
            public: PublicConfig {
                seed: 999,
                input: None,
                n_sequences: default_public_sequences(),
                prompt_input: None,
                n_prompt_sequences: default_prompt_sequences(),
                irrelevant_input: None,
            },
            model: ModelConfig::default(),
            pretrain: fast(3e-3, 20, 7),
            mlm_training: fast(3e-3, 20, 8),
            target_training: fast(1e-3, 10, seed),
            selfprompt: SelfPromptConfig::new(300, seed),
            reference_training: TrainConfig { learning_rate: 1e-3, ..TrainConfig::reference(seed) },
            paraphrase: ParaphraseConfig::new(ParaphraseDomain::Semantic, seed),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
            backend: BackendConfig::default(),
        }
    }

    /// A seconds-scale configuration for smoke tests and examples: 30
    /// members, 30 non-members, L = 64, a few epochs each.
    pub fn smoke(seed: u64) -> Self {
        let mut c = Self::benchmark(seed);
        c.corpus.synthetic_lines = 60;
        c.corpus.line_len = 200;
        c.corpus.n_member = 30;
        c.corpus.n_nonmember = 30;
        c.corpus.packing_length = 64;
        c.public.n_sequences = 40;
        c.public.n_prompt_sequences = 10;
        c.model.dim = 16;
        c.pretrain.epochs = 2;
        c.mlm_training.epochs = 2;
        c.target_training.epochs = 3;
        c.target_training.learning_rate = 3e-3;
        c.reference_training.epochs = 1;
        c.selfprompt.n_self = 20;
        c.selfprompt.prompt_length = 8;
        c.selfprompt.generation_length = 56;
        c.paraphrase.n_pairs = 3;
        c
    }

    /// Every seed, by role.
    pub fn seeds(&self) -> std::collections::BTreeMap<&'static str, u64> {
        [
            ("corpus", self.corpus.seed),
            ("split", self.corpus.split_seed),
            ("public", self.public.seed),
            ("pretrain", self.pretrain.seed),
            ("mlm", self.mlm_training.seed),
            ("target", self.target_training.seed),
            ("selfprompt", self.selfprompt.seed),
            ("reference", self.reference_training.seed),
            ("paraphrase", self.paraphrase.seed),
        ]
        .into_iter()
        .collect()
    }

    /// Sets every per-run seed (split, synthetic corpus, target, self-prompt,
    /// reference, paraphrase). Public-model seeds are left alone: those
    /// models stand for shared public checkpoints.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.corpus.split_seed = seed;
        self.target_training.seed = seed;
        self.selfprompt.seed = seed;
        self.reference_training.seed = seed;
        self.paraphrase.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_member == 0 || c.n_nonmember == 0 {
            return Err(Error::config("need at least one member and one non-member"));
        }
        if c.packing_length < 2 {
            return Err(Error::config("packing_length must be >= 2"));
        }
        if self.model.dim == 0 {
            return Err(Error::config("model dim must be positive"));
        }
        for t in [&self.pretrain, &self.mlm_training, &self.target_training, &self.reference_training] {
            t.validate()?;
        }
        self.selfprompt.validate()?;
        if self.selfprompt.prompt_length + self.selfprompt.generation_length > c.packing_length {
            return Err(Error::config(format!(
                "prompt_length + generation_length ({}) exceeds packing_length {}",
                self.selfprompt.prompt_length + self.selfprompt.generation_length,
                c.packing_length
            )));
        }
        self.paraphrase.validate()?;
        self.attack.validate()?;
        if let Some(s) = &self.eval.sweep {
            if s.is_empty() {
                return Err(Error::config("sweep has no values"));
            }
        }
        if self.backend.kind == BackendChoice::Remote {
            let Some(r) = &self.backend.remote else {
                return Err(Error::config("remote backend needs [backend.remote] base_url and model"));
            };
            r.validate()?;
            if self.backend.base_model.is_none() {
                return Err(Error::config("remote backend needs backend.base_model"));
            }
            if self.paraphrase.domain == ParaphraseDomain::Embedding {
                return Err(Error::CapabilityMissing("can_embed"));
            }
        }
        Ok(())
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        chain("", &[json(self)])
    }

    pub fn stage_hashes(&self) -> StageHashes {
        let vocab_source = match self.corpus.vocab {
            VocabMode::Byte => serde_json::Value::Null,
            VocabMode::Char => json(&self.corpus),
        };
        let pretrain = chain(
            "pretrain",
            &[
                json(&self.public),
                json(&self.model),
                json(&self.pretrain),
                json(&self.mlm_training),
                json(&self.corpus.packing_length),
                json(&self.corpus.vocab),
                vocab_source,
            ],
        );
        let data = chain("data", &[json(&self.corpus), json(&self.public)]);
        let target = chain(
            &data,
            &[json(&self.model), json(&self.pretrain), json(&self.target_training), json(&self.backend)],
        );
        let selfprompt = chain(&target, &[json(&self.selfprompt)]);
        let reference = chain(
            &selfprompt,
            &[json(&self.reference_training), json(&self.mlm_training), json(&self.eval.reference_comparison)],
        );
        let aux_reference = chain(
            &target,
            &[json(&self.reference_training), json(&self.selfprompt.n_self), json(&self.eval.reference_comparison)],
        );
        let attack = chain(&reference, &[json(&self.paraphrase), json(&self.attack)]);
        let evaluate = chain(&attack, &[json(&self.eval)]);
        StageHashes { pretrain, data, target, selfprompt, reference, aux_reference, attack, evaluate }
    }

    /// A copy with one sweep point applied.
    pub fn at_point(&self, point: &SweepPoint) -> Result<Self> {
        let mut c = self.clone();
        let v = point.value.clone();
        let bad = |e: serde_json::Error| Error::config(format!("sweep value for {}: {e}", point.axis));
        match point.axis.as_str() {
            "prompt_source" => c.selfprompt.prompt_source = serde_json::from_value(v).map_err(bad)?,
            "n_self" => c.selfprompt.n_self = serde_json::from_value(v).map_err(bad)?,
            "prompt_length" => {
                c.selfprompt.prompt_length = serde_json::from_value(v).map_err(bad)?;
                c.selfprompt.generation_length = c.corpus.packing_length - c.selfprompt.prompt_length.min(c.corpus.packing_length);
            }
            "paraphrase_domain" => c.paraphrase.domain = serde_json::from_value(v).map_err(bad)?,
            "n_pairs" => c.paraphrase.n_pairs = serde_json::from_value(v).map_err(bad)?,
            other => return Err(Error::config(format!("unknown sweep axis {other:?}"))),
        }
        c.eval.sweep = None;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_is_valid_and_seeded() {
        let c = RunConfig::smoke(4);
        c.validate().unwrap();
        assert_eq!(c.seeds()["target"], 4);
        assert_eq!(c.seeds()["pretrain"], 7);
    }

    #[test]
    fn benchmark_round_trips_through_toml() {
        let c = RunConfig::benchmark(3);
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = RunConfig::benchmark(1).to_toml().replace("[corpus]\n", "[corpus]\ncolour = 3\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::InvalidConfig(m)) if m.contains("colour")));
        let text = format!("bogus = 1\n{}", RunConfig::benchmark(1).to_toml());
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn every_seed_is_mandatory() {
        let text = RunConfig::benchmark(1).to_toml();
        let seed_lines: Vec<&str> = text.lines().filter(|l| l.starts_with("seed =") || l.starts_with("split_seed =")).collect();
        assert_eq!(seed_lines.len(), 9);
        for (i, _) in seed_lines.iter().enumerate() {
            let mut n = 0;
            let pruned: String = text
                .lines()
                .filter(|l| {
                    let is_seed = l.starts_with("seed =") || l.starts_with("split_seed =");
                    if is_seed {
                        n += 1;
                    }
                    !(is_seed && n - 1 == i)
                })
                .map(|l| format!("{l}\n"))
                .collect();
            let err = RunConfig::from_toml(&pruned).unwrap_err().to_string();
            assert!(err.contains("seed"), "{err}");
        }
    }

    #[test]
    fn stage_hashes_only_move_downstream() {
        let a = RunConfig::benchmark(1);
        let (ha, mut b) = (a.stage_hashes(), a.clone());
        b.paraphrase.n_pairs = 4;
        let hb = b.stage_hashes();
        assert_eq!((ha.data.clone(), ha.target.clone(), ha.reference.clone()), (hb.data, hb.target, hb.reference));
        assert_ne!(ha.attack, hb.attack);
        assert_ne!(ha.evaluate, hb.evaluate);
        let hc = a.clone().with_seed(2).stage_hashes();
        assert_ne!(ha.data, hc.data);
        assert_eq!(ha.pretrain, hc.pretrain);
        assert_eq!(ha, a.stage_hashes());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn with_seed_leaves_public_models_alone() {
        let c = RunConfig::benchmark(1).with_seed(5);
        assert_eq!((c.corpus.split_seed, c.paraphrase.seed, c.selfprompt.seed), (5, 5, 5));
        assert_eq!((c.pretrain.seed, c.mlm_training.seed, c.public.seed), (7, 8, 999));
    }

    #[test]
    fn sweep_points_apply() {
        let mut c = RunConfig::benchmark(1);
        c.eval.sweep = Some(Sweep::PromptLength(vec![8, 16, 32]));
        let pts = c.eval.sweep.as_ref().unwrap().points();
        assert_eq!(pts.len(), 3);
        let p = c.at_point(&pts[2]).unwrap();
        assert_eq!((p.selfprompt.prompt_length, p.selfprompt.generation_length), (32, 96));
        assert!(p.eval.sweep.is_none());
        let s: EvalConfig = toml::from_str("sweep = { axis = \"n_pairs\", values = [2, 4] }").unwrap();
        assert_eq!(s.sweep, Some(Sweep::NPairs(vec![2, 4])));
    }

    #[test]
    fn remote_settings_are_checked() {
        let mut c = RunConfig::benchmark(1);
        c.backend.kind = BackendChoice::Remote;
        assert!(c.validate().is_err());
        c.backend.remote = Some(RemoteConfig::new("http://127.0.0.1:1", "target"));
        assert!(c.validate().is_err());
        c.backend.base_model = Some("base".into());
        c.validate().unwrap();
        c.paraphrase.domain = ParaphraseDomain::Embedding;
        assert!(matches!(c.validate(), Err(Error::CapabilityMissing(_))));
    }
}
