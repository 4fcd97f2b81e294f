//! The staged experiment: data → target → self-prompt set → references →
//! scores → metrics. Every stage reads its inputs from the output directory,
//! checks the producing configuration hash and writes its outputs with a
//! sidecar recording the hash of the configuration that produced them.

mod artifacts;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use artifacts::{check, meta_path, read_meta, write_meta, ArtifactMeta};
use artifacts::{read_json, write_json};

use crate::attack::{
    label_of, read_scores, score_records_audited, write_scores, AttackModels, Method, Paraphraser,
};
use crate::backend::{finetune, Backend, InProcessBackend, ModelHandle, RemoteBackend};
use crate::config::{BackendChoice, RunConfig, StageHashes, SweepPoint};
use crate::corpus::io::{read_records, read_sequences, read_sequences_with_provenance, write_sequences, write_sequences_with_provenance};
use crate::corpus::synthetic::{domain_corpus, irrelevant_corpus, DomainVariant};
use crate::corpus::{pack, split, SplitSpec, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate_scores, metrics, roc_auc, Metrics, RocPoint};
use crate::microlm::{self, MicroLmParams, ModelMode, ModelShape};
use crate::paraphrase::{write_audit, ParaphraseDomain, SymmetricPair};
use crate::selfprompt::{build_selfprompt_dataset, make_prompts, PromptSource};

pub const VOCAB: &str = "data/vocab.json";
pub const MEMBERS: &str = "data/members.jsonl";
pub const NONMEMBERS: &str = "data/nonmembers.jsonl";
pub const CANDIDATES: &str = "data/candidates.jsonl";
pub const PUBLIC: &str = "data/public.jsonl";
pub const DOMAIN_PROMPTS: &str = "data/prompts_domain.jsonl";
pub const IRRELEVANT: &str = "data/irrelevant.jsonl";
pub const PERPLEXITY: &str = "models/target_perplexity.json";
pub const SELFPROMPT: &str = "selfprompt.jsonl";
pub const SCORES: &str = "scores.csv";
pub const PAIRS: &str = "pairs.jsonl";
pub const REFERENCE_SCORES: &str = "reference_scores.csv";
pub const METRICS: &str = "metrics.json";
pub const REPORT: &str = "report.json";
pub const CONFIG: &str = "config.toml";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PrepareData,
    TrainTarget,
    BuildSelfprompt,
    TrainReference,
    Attack,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::PrepareData,
        Stage::TrainTarget,
        Stage::BuildSelfprompt,
        Stage::TrainReference,
        Stage::Attack,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PrepareData => "prepare-data",
            Stage::TrainTarget => "train-target",
            Stage::BuildSelfprompt => "build-selfprompt",
            Stage::TrainReference => "train-reference",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn run(self, ws: &Workspace) -> Result<()> {
        let r = match self {
            Stage::PrepareData => prepare_data(ws),
            Stage::TrainTarget => train_target(ws),
            Stage::BuildSelfprompt => build_selfprompt(ws),
            Stage::TrainReference => train_reference(ws),
            Stage::Attack => attack(ws),
            Stage::Evaluate => evaluate(ws).map(drop),
        };
        r.map_err(|e| Error::stage(self.name(), e))
    }
}

/// An output directory bound to a configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
    /// Read-only directory consulted for inputs missing from `dir`, and for
    /// reusable public models.
    pub upstream: Option<PathBuf>,
    pub config: RunConfig,
    pub hashes: StageHashes,
    /// Accept inputs produced under a different configuration.
    pub force: bool,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let hashes = config.stage_hashes();
        Ok(Workspace { dir: dir.into(), upstream: None, config, hashes, force: false })
    }

    pub fn with_upstream(mut self, upstream: impl Into<PathBuf>) -> Self {
        self.upstream = Some(upstream.into());
        self
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Output location; parent directories are created.
    fn out(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
        }
        Ok(p)
    }

    fn candidates(&self, rel: &str) -> Vec<PathBuf> {
        std::iter::once(self.path(rel)).chain(self.upstream.as_ref().map(|u| u.join(rel))).collect()
    }

    /// An input artifact produced under `hash`, from `dir` or else upstream.
    fn input(&self, rel: &str, hash: &str) -> Result<PathBuf> {
        for p in self.candidates(rel) {
            if p.exists() {
                check(&p, hash, self.force)?;
                return Ok(p);
            }
        }
        Err(Error::MissingArtifact(self.path(rel)))
    }

    /// An existing artifact whose hash matches exactly, if any.
    fn reusable(&self, rel: &str, hash: &str) -> Option<PathBuf> {
        self.candidates(rel)
            .into_iter()
            .find(|p| read_meta(p).is_ok_and(|m| m.config_hash == hash))
    }

    fn seal(&self, paths: &[PathBuf], hash: &str, stage: &str, start: Instant) -> Result<()> {
        let meta = ArtifactMeta {
            config_hash: hash.to_string(),
            stage: stage.to_string(),
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        paths.iter().try_for_each(|p| write_meta(p, &meta))
    }

    fn sequences(&self, rel: &str) -> Result<Vec<TokenSequence>> {
        read_sequences(&self.input(rel, &self.hashes.data)?)
    }

    fn vocabulary(&self) -> Result<Vocabulary> {
        read_json(&self.input(VOCAB, &self.hashes.data)?)
    }

    fn remote(&self) -> bool {
        self.config.backend.kind == BackendChoice::Remote
    }

    fn shape(&self, vocab: &Vocabulary, mode: ModelMode) -> ModelShape {
        ModelShape::new(mode, vocab.size(), self.config.model.dim, self.config.corpus.packing_length)
    }

    /// Opens `models/<name>`: a local parameter file or a remote model name.
    pub fn open_model(&self, name: &str, hash: &str) -> Result<Box<dyn Backend>> {
        let local = format!("models/{name}.mlm");
        let remote = format!("models/{name}.remote.json");
        for (dir_local, dir_remote) in self.candidates(&local).into_iter().zip(self.candidates(&remote)) {
            if dir_local.exists() {
                check(&dir_local, hash, self.force)?;
                return Ok(Box::new(InProcessBackend::new(microlm::load(&dir_local)?)));
            }
            if dir_remote.exists() {
                check(&dir_remote, hash, self.force)?;
                let r: RemoteModel = read_json(&dir_remote)?;
                return self.remote_backend(&r.model);
            }
        }
        Err(Error::MissingArtifact(self.path(&local)))
    }

    fn remote_backend(&self, model: &str) -> Result<Box<dyn Backend>> {
        let cfg = self.config.backend.remote.clone().ok_or_else(|| Error::config("no remote settings"))?;
        let cfg = crate::backend::RemoteConfig { model: model.to_string(), ..cfg };
        Ok(Box::new(RemoteBackend::new(cfg)?.with_vocabulary(self.vocabulary()?)))
    }

    /// Writes a model as `models/<name>.mlm` or `models/<name>.remote.json`.
    fn save_model(&self, name: &str, handle: &ModelHandle) -> Result<PathBuf> {
        match handle {
            ModelHandle::InProcess(p) => {
                let path = self.out(&format!("models/{name}.mlm"))?;
                microlm::save(p, &path)?;
                Ok(path)
            }
            ModelHandle::Remote(model) => {
                let path = self.out(&format!("models/{name}.remote.json"))?;
                write_json(&path, &RemoteModel { model: model.clone() })?;
                Ok(path)
            }
        }
    }

    /// A public model under the pretrain hash, trained on the public pool
    /// unless a matching one already exists here or upstream.
    fn public_model(&self, name: &str, mode: ModelMode) -> Result<MicroLmParams> {
        let rel = format!("models/{name}.mlm");
        if let Some(p) = self.reusable(&rel, &self.hashes.pretrain) {
            return microlm::load(&p);
        }
        let start = Instant::now();
        let vocab = self.vocabulary()?;
        let public = self.sequences(PUBLIC)?;
        let cfg = match mode {
            ModelMode::Causal => &self.config.pretrain,
            ModelMode::Masked => &self.config.mlm_training,
        };
        let init = MicroLmParams::init(self.shape(&vocab, mode), cfg.seed)?;
        let (params, _) = microlm::train(init, &public, cfg)?;
        let path = self.out(&rel)?;
        microlm::save(&params, &path)?;
        self.seal(&[path], &self.hashes.pretrain, "pretrain", start)?;
        Ok(params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RemoteModel {
    model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub member: f64,
    pub nonmember: f64,
}

/// `exp` of the mean per-token negative log-likelihood over a dataset.
pub fn dataset_perplexity(model: &dyn Backend, data: &[TokenSequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch: Vec<_> = data.iter().map(|s| s.tokens.clone()).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for lp in model.query_logprobs_many(&batch)? {
        sum += lp.iter().sum::<f64>();
        n += lp.len();
    }
    Ok((-sum / n as f64).exp())
}

/// Text for one pool: the given file, or `synthetic(n_lines)` lines.
fn text_pool(input: Option<&Path>, synthetic: impl FnOnce() -> Vec<String>) -> Result<Vec<String>> {
    match input {
        Some(p) => read_records(p),
        None => Ok(synthetic()),
    }
}

fn take_packed(lines: &[String], vocab: &Vocabulary, len: usize, n: usize, prefix: &str) -> Result<Vec<TokenSequence>> {
    let enc: Vec<_> = lines.iter().map(|l| vocab.encode(l)).collect::<Result<_>>()?;
    let packed = pack(&enc, len, vocab.bos())?;
    if packed.len() < n {
        return Err(Error::InsufficientData { requested: n, available: packed.len() });
    }
    Ok(packed
        .into_iter()
        .take(n)
        .map(|mut s| {
            s.id = format!("{prefix}-{}", &s.id[4..]);
            s
        })
        .collect())
}

pub fn prepare_data(ws: &Workspace) -> Result<()> {
    let start = Instant::now();
    let (c, p) = (&ws.config.corpus, &ws.config.public);
    let len = c.packing_length;
    // Enough synthetic lines for `n` packed sequences.
    let lines_for = |n: usize| n * len / c.line_len.max(1) + 10;

    let private = text_pool(c.input.as_deref(), || domain_corpus(c.synthetic_lines, c.line_len, c.seed, DomainVariant::Primary))?;
    let public = text_pool(p.input.as_deref(), || domain_corpus(lines_for(p.n_sequences), c.line_len, p.seed, DomainVariant::Primary))?;
    let prompts = text_pool(p.prompt_input.as_deref(), || {
        domain_corpus(lines_for(p.n_prompt_sequences), c.line_len, p.seed + 1, DomainVariant::Sibling)
    })?;
    let irrelevant = text_pool(p.irrelevant_input.as_deref(), || irrelevant_corpus(lines_for(p.n_sequences), c.line_len, p.seed + 2))?;

    let all: Vec<&String> = private.iter().chain(&public).chain(&prompts).chain(&irrelevant).collect();
    let vocab = Vocabulary::build(&all, c.vocab)?;

    let enc: Vec<_> = private.iter().map(|l| vocab.encode(l)).collect::<Result<_>>()?;
    let packed = pack(&enc, len, vocab.bos())?;
    let spec = SplitSpec { seed: c.split_seed, n_member: c.n_member, n_nonmember: c.n_nonmember, packing_length: len };
    let (members, nonmembers, candidates) = split(&packed, &spec)?;

    let public = take_packed(&public, &vocab, len, p.n_sequences, "pub")?;
    let prompts = take_packed(&prompts, &vocab, len, p.n_prompt_sequences, "prm")?;
    let irrelevant = take_packed(&irrelevant, &vocab, len, p.n_sequences, "irr")?;

    let mut outs = Vec::new();
    let v = ws.out(VOCAB)?;
    write_json(&v, &vocab)?;
    outs.push(v);
    for (rel, seqs) in [
        (MEMBERS, &members),
        (NONMEMBERS, &nonmembers),
        (CANDIDATES, &candidates),
        (PUBLIC, &public),
        (DOMAIN_PROMPTS, &prompts),
        (IRRELEVANT, &irrelevant),
    ] {
        let path = ws.out(rel)?;
        write_sequences(&path, seqs)?;
        outs.push(path);
    }
    let cfg = ws.out(CONFIG)?;
    std::fs::write(&cfg, ws.config.to_toml()).map_err(|e| Error::io(format!("write {}", cfg.display()), e))?;
    ws.seal(&outs, &ws.hashes.data, "prepare-data", start)
}

/// Fine-tunes the target from the public base (in-process), or records the
/// remote target and base names. Either way the target's perplexity on
/// members and non-members is measured through the backend.
pub fn train_target(ws: &Workspace) -> Result<()> {
    let start = Instant::now();
    let members = ws.sequences(MEMBERS)?;
    let nonmembers = ws.sequences(NONMEMBERS)?;
    let h = &ws.hashes.target;
    let mut outs = Vec::new();
    if ws.remote() {
        let remote = ws.config.backend.remote.as_ref().expect("validated");
        let base = ws.config.backend.base_model.as_ref().expect("validated");
        outs.push(ws.save_model("target", &ModelHandle::Remote(remote.model.clone()))?);
        outs.push(ws.save_model("base", &ModelHandle::Remote(base.clone()))?);
    } else {
        let base = ws.public_model("base", ModelMode::Causal)?;
        let (target, _) = microlm::train(base, &members, &ws.config.target_training)?;
        outs.push(ws.save_model("target", &ModelHandle::InProcess(target.into()))?);
    }
    ws.seal(&outs, h, "train-target", start)?;
    let target = ws.open_model("target", h)?;
    let ppl = Perplexity {
        member: dataset_perplexity(target.as_ref(), &members)?,
        nonmember: dataset_perplexity(target.as_ref(), &nonmembers)?,
    };
    let path = ws.out(PERPLEXITY)?;
    write_json(&path, &ppl)?;
    ws.seal(&outs.into_iter().chain([path]).collect::<Vec<_>>(), h, "train-target", start)
}

/// The base the references are fine-tuned from.
fn base_model(ws: &Workspace) -> Result<Box<dyn Backend>> {
    if ws.remote() {
        ws.open_model("base", &ws.hashes.target)
    } else {
        Ok(Box::new(InProcessBackend::new(ws.public_model("base", ModelMode::Causal)?)))
    }
}

pub fn build_selfprompt(ws: &Workspace) -> Result<()> {
    let start = Instant::now();
    let cfg = &ws.config.selfprompt;
    let source = ws.sequences(match cfg.prompt_source {
        PromptSource::Domain => DOMAIN_PROMPTS,
        PromptSource::Irrelevant => IRRELEVANT,
        PromptSource::Identical => CANDIDATES,
    })?;
    let target = ws.open_model("target", &ws.hashes.target)?;
    let prompts = make_prompts(&source, cfg.n_self, cfg.prompt_length, cfg.seed)?;
    let data = build_selfprompt_dataset(target.as_ref(), &prompts, cfg)?;
    let path = ws.out(SELFPROMPT)?;
    write_sequences_with_provenance(&path, &data)?;
    ws.seal(&[path], &ws.hashes.selfprompt, "build-selfprompt", start)
}

fn finetune_and_save(ws: &Workspace, base: &dyn Backend, name: &str, data: &[TokenSequence]) -> Result<PathBuf> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let job = finetune(base, data, &ws.config.reference_training)?;
    ws.save_model(name, job.model.as_ref().expect("checked by finetune"))
}

/// The self-prompt reference, plus the candidate and irrelevant references
/// (each capped at `n_self` sequences) and the attacker's mask-filling model.
pub fn train_reference(ws: &Workspace) -> Result<()> {
    let start = Instant::now();
    let base = base_model(ws)?;
    let n = ws.config.selfprompt.n_self;
    let selfprompt: Vec<_> = read_sequences_with_provenance(&ws.input(SELFPROMPT, &ws.hashes.selfprompt)?)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let reference = finetune_and_save(ws, base.as_ref(), "reference", &selfprompt)?;
    ws.seal(&[reference], &ws.hashes.reference, "train-reference", start)?;

    let aux = &ws.hashes.aux_reference;
    let mut refs = vec![("candidate_reference", CANDIDATES)];
    if ws.config.eval.reference_comparison {
        refs.push(("irrelevant_reference", IRRELEVANT));
    }
    for (name, rel) in refs {
        let found = ws.reusable(&format!("models/{name}.mlm"), aux).or_else(|| ws.reusable(&format!("models/{name}.remote.json"), aux));
        if found.is_none() {
            let data = ws.sequences(rel)?;
            let path = finetune_and_save(ws, base.as_ref(), name, &data[..data.len().min(n)])?;
            ws.seal(&[path], aux, "train-reference", start)?;
        }
    }
    if ws.config.paraphrase.domain == ParaphraseDomain::Semantic {
        ws.public_model("mlm", ModelMode::Masked)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub record_id: String,
    /// `identical`, `self_prompt` or `irrelevant`.
    pub reference: String,
    pub score: f64,
    pub label: u8,
}

pub const REFERENCE_SOURCES: [&str; 3] = ["identical", "self_prompt", "irrelevant"];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::config(format!("{}: {e}", path.display()))
}

pub fn write_reference_scores(path: &Path, rows: &[ReferenceScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_reference_scores(path: &Path) -> Result<Vec<ReferenceScore>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

pub fn attack(ws: &Workspace) -> Result<()> {
    let start = Instant::now();
    let h = &ws.hashes;
    let records: Vec<_> = ws.sequences(MEMBERS)?.into_iter().chain(ws.sequences(NONMEMBERS)?).collect();
    let target = ws.open_model("target", &h.target)?;
    let base = base_model(ws)?;
    let reference = ws.open_model("reference", &h.reference)?;
    let candidate = ws.open_model("candidate_reference", &h.aux_reference)?;
    let mlm = match ws.config.paraphrase.domain {
        ParaphraseDomain::Semantic => Some(ws.public_model("mlm", ModelMode::Masked)?),
        ParaphraseDomain::Embedding => None,
    };
    let paraphraser = match &mlm {
        Some(m) => Paraphraser::semantic(m),
        None => Paraphraser::embedding(target.as_ref())?,
    };
    let models = AttackModels {
        target: target.as_ref(),
        self_reference: Some(reference.as_ref()),
        pretrained: Some(base.as_ref()),
        candidate_reference: Some(candidate.as_ref()),
        paraphraser: Some(paraphraser),
    };
    let (scores, pairs) = score_records_audited(&models, &records, &ws.config.attack, &ws.config.paraphrase)?;
    let mut outs = vec![ws.out(SCORES)?];
    write_scores(&outs[0], &scores)?;
    let semantic: Vec<SymmetricPair> = pairs.into_iter().filter(|p| matches!(p, SymmetricPair::Semantic(_))).collect();
    if !semantic.is_empty() {
        let path = ws.out(PAIRS)?;
        write_audit(&path, &semantic)?;
        outs.push(path);
    }

    if ws.config.eval.reference_comparison {
        let irrelevant = ws.open_model("irrelevant_reference", &h.aux_reference)?;
        let refs: [(&str, &dyn Backend); 3] =
            [("identical", candidate.as_ref()), ("self_prompt", reference.as_ref()), ("irrelevant", irrelevant.as_ref())];
        let batch: Vec<_> = records.iter().map(|r| r.tokens.clone()).collect();
        let mean = |lp: &Vec<f64>| lp.iter().sum::<f64>() / lp.len() as f64;
        let p_target: Vec<f64> = target.query_logprobs_many(&batch)?.iter().map(mean).collect();
        let mut rows = Vec::new();
        for (name, model) in refs {
            for ((x, pt), lp) in records.iter().zip(&p_target).zip(model.query_logprobs_many(&batch)?) {
                rows.push(ReferenceScore {
                    record_id: x.id.clone(),
                    reference: name.to_string(),
                    score: pt - mean(&lp),
                    label: label_of(x.split)?,
                });
            }
        }
        let path = ws.out(REFERENCE_SCORES)?;
        write_reference_scores(&path, &rows)?;
        outs.push(path);
    }
    ws.seal(&outs, &h.attack, "attack", start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    #[serde(flatten)]
    pub metrics: crate::eval::MethodMetrics,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Hash of the evaluate stage, which covers every setting upstream of it.
    pub config_hash: String,
    /// Hash of the whole configuration.
    pub run_config_hash: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sweep: Option<SweepPoint>,
    pub methods: BTreeMap<Method, MethodReport>,
    pub target_perplexity: Perplexity,
    /// Calibrated-loss AUC per reference source.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference_comparison: Option<BTreeMap<String, f64>>,
    /// Sum of the recorded stage times.
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn auc(&self, m: Method) -> Option<f64> {
        self.methods.get(&m).map(|r| r.metrics.auc)
    }

    pub fn metrics(&self) -> Metrics {
        self.methods.iter().map(|(&m, r)| (m, r.metrics)).collect()
    }
}

/// AUC of each reference source's calibrated loss.
pub fn reference_aucs(rows: &[ReferenceScore]) -> Result<BTreeMap<String, f64>> {
    let mut by: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for r in rows {
        let e = by.entry(r.reference.as_str()).or_default();
        e.0.push(r.score);
        e.1.push(r.label);
    }
    by.into_iter().map(|(k, (s, l))| Ok((k.to_string(), roc_auc(&s, &l)?))).collect()
}

pub fn evaluate(ws: &Workspace) -> Result<ExperimentReport> {
    let start = Instant::now();
    let h = &ws.hashes;
    let scores_path = ws.input(SCORES, &h.attack)?;
    let scores = read_scores(&scores_path)?;
    let curves = evaluate_scores(&scores)?;
    let m = metrics(&curves)?;

    let mut outs = vec![ws.out(METRICS)?];
    write_json(&outs[0], &m)?;
    for (method, curve) in &curves {
        let path = ws.out(&format!("roc_{method}.csv"))?;
        curve.write_csv(&path)?;
        outs.push(path);
    }
    let reference_comparison = if ws.config.eval.reference_comparison {
        Some(reference_aucs(&read_reference_scores(&ws.input(REFERENCE_SCORES, &h.attack)?)?)?)
    } else {
        None
    };
    let perplexity_path = ws.input(PERPLEXITY, &h.target)?;
    let target_perplexity: Perplexity = read_json(&perplexity_path)?;

    let mut wall = 0.0;
    for rel in [MEMBERS, PERPLEXITY, SELFPROMPT, SCORES] {
        if let Some(p) = ws.candidates(rel).into_iter().find(|p| p.exists()) {
            wall += read_meta(&p).map(|m| m.elapsed_secs).unwrap_or(0.0);
        }
    }
    if let Some(p) = ws.candidates("models/reference.mlm").into_iter().chain(ws.candidates("models/reference.remote.json")).find(|p| p.exists()) {
        wall += read_meta(&p).map(|m| m.elapsed_secs).unwrap_or(0.0);
    }
    let report = ExperimentReport {
        config_hash: h.evaluate.clone(),
        run_config_hash: ws.config.hash(),
        config: ws.config.clone(),
        seeds: ws.config.seeds().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        sweep: None,
        methods: curves
            .iter()
            .map(|(&k, c)| (k, MethodReport { metrics: m[&k], roc: c.points.clone() }))
            .collect(),
        target_perplexity,
        reference_comparison,
        wall_clock_secs: wall + start.elapsed().as_secs_f64(),
    };
    let path = ws.out(REPORT)?;
    write_json(&path, &report)?;
    outs.push(path);
    ws.seal(&outs, &h.evaluate, "evaluate", start)?;
    Ok(report)
}

pub fn read_report(dir: &Path) -> Result<ExperimentReport> {
    read_json(&dir.join(REPORT))
}

/// Plain-text table of a report.
pub fn render_report(r: &ExperimentReport) -> String {
    let mut s = String::new();
    if let Some(p) = &r.sweep {
        let _ = writeln!(s, "sweep {} = {}", p.axis, p.value);
    }
    let _ = writeln!(s, "config {}", &r.config_hash[..16.min(r.config_hash.len())]);
    let _ = writeln!(
        s,
        "target perplexity: member {:.4}  non-member {:.4}",
        r.target_perplexity.member, r.target_perplexity.nonmember
    );
    let _ = writeln!(s, "{:<16} {:>8} {:>10} {:>11}", "method", "AUC", "TPR@1%", "TPR@0.1%");
    for (m, mr) in &r.methods {
        let x = &mr.metrics;
        let _ = writeln!(s, "{:<16} {:>8.4} {:>10.4} {:>11.4}", m.as_str(), x.auc, x.tpr_at_1pct, x.tpr_at_01pct);
    }
    if let Some(refs) = &r.reference_comparison {
        let _ = writeln!(s, "reference source AUC (calibrated loss):");
        for name in REFERENCE_SOURCES {
            if let Some(a) = refs.get(name) {
                let _ = writeln!(s, "  {name:<12} {a:.4}");
            }
        }
    }
    let _ = writeln!(s, "wall clock {:.1}s", r.wall_clock_secs);
    s
}

/// Every stage in order.
pub fn run_all(ws: &Workspace) -> Result<ExperimentReport> {
    for stage in Stage::ALL {
        stage.run(ws)?;
    }
    read_report(&ws.dir)
}

/// Stages that depend on a sweep axis; data and target come from upstream.
const SWEEP_STAGES: [Stage; 4] = [Stage::BuildSelfprompt, Stage::TrainReference, Stage::Attack, Stage::Evaluate];

/// Directory name of a sweep point.
pub fn point_dir(point: &SweepPoint) -> String {
    let v = match &point.value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    format!("{}-{v}", point.axis)
}

/// The full run, followed by one run per sweep point under
/// `sweep/<axis>-<value>/` reusing the main run's data, target and public
/// models.
pub fn run_experiment(ws: &Workspace) -> Result<(ExperimentReport, Vec<ExperimentReport>)> {
    let main = run_all(ws)?;
    let mut points = Vec::new();
    if let Some(sweep) = &ws.config.eval.sweep {
        for point in sweep.points() {
            let cfg = ws.config.at_point(&point)?;
            let sub = Workspace::new(ws.dir.join("sweep").join(point_dir(&point)), cfg)?
                .with_upstream(&ws.dir)
                .with_force(ws.force);
            for stage in SWEEP_STAGES {
                stage.run(&sub)?;
            }
            let mut r = read_report(&sub.dir)?;
            r.sweep = Some(point);
            write_json(&sub.path(REPORT), &r)?;
            points.push(r);
        }
        write_json(&ws.path("sweep/summary.json"), &points.iter().map(|r| (r.sweep.clone(), r.metrics())).collect::<Vec<_>>())?;
    }
    Ok((main, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitLabel;

    fn seq(id: &str, tokens: Vec<u32>) -> TokenSequence {
        TokenSequence::new(id, tokens, SplitLabel::Member)
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        let shape = ModelShape::new(ModelMode::Causal, 6, 4, 8);
        let m = InProcessBackend::new(MicroLmParams::zeros(shape).unwrap());
        let p = dataset_perplexity(&m, &[seq("a", vec![0, 1, 2]), seq("b", vec![3, 4])]).unwrap();
        assert!((p - 6.0).abs() < 1e-9);
        assert!(dataset_perplexity(&m, &[]).is_err());
    }

    #[test]
    fn reference_aucs_group_by_source() {
        let row = |r: &str, s: f64, l: u8| ReferenceScore { record_id: "x".into(), reference: r.into(), score: s, label: l };
        let a = reference_aucs(&[row("identical", 1.0, 1), row("identical", 0.0, 0), row("irrelevant", 0.0, 1), row("irrelevant", 1.0, 0)])
            .unwrap();
        assert_eq!(a["identical"], 1.0);
        assert_eq!(a["irrelevant"], 0.0);
    }

    #[test]
    fn point_dirs_are_readable() {
        let p = SweepPoint { axis: "prompt_source".into(), value: "irrelevant".into() };
        assert_eq!(point_dir(&p), "prompt_source-irrelevant");
        let p = SweepPoint { axis: "n_self".into(), value: 50.into() };
        assert_eq!(point_dir(&p), "n_self-50");
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path(), RunConfig::benchmark(1)).unwrap();
        let e = Stage::Evaluate.run(&ws).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("evaluate") && msg.contains("scores.csv"), "{msg}");
    }
}
