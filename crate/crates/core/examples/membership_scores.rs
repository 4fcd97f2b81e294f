//! Scores members and non-members with every attack (loss, min-k%,
//! neighbour, LiRA with two references, SPV and its two ablations) and
//! reports each method's AUC.
//!
//! cargo run --release --example membership_scores

use memlab::attack::{score_records, AttackConfig, AttackModels, Paraphraser};
use memlab::backend::InProcessBackend;
use memlab::corpus::synthetic::{domain_corpus, DomainVariant};
use memlab::corpus::{pack, split, SplitSpec, Vocabulary};
use memlab::eval::evaluate_scores;
use memlab::microlm::{train, MicroLmParams, ModelMode, ModelShape, TrainConfig};
use memlab::paraphrase::{ParaphraseConfig, ParaphraseDomain};
use memlab::selfprompt::{selfprompt_reference, SelfPromptConfig};

fn main() -> memlab::Result<()> {
    let vocab = Vocabulary::byte();
    let enc = |lines: Vec<String>| -> memlab::Result<_> {
        let e: Vec<_> = lines.iter().map(|l| vocab.encode(l)).collect::<memlab::Result<_>>()?;
        pack(&e, 64, vocab.bos())
    };
    let public = enc(domain_corpus(60, 200, 99, DomainVariant::Primary))?;
    let private = enc(domain_corpus(60, 200, 1, DomainVariant::Primary))?;
    let (members, nonmembers, candidates) =
        split(&private, &SplitSpec { seed: 1, n_member: 40, n_nonmember: 40, packing_length: 64 })?;

    let fast = |epochs, seed| TrainConfig { learning_rate: 3e-3, epochs, ..TrainConfig::target(seed) };
    let shape = ModelShape::new(ModelMode::Causal, vocab.size(), 16, 64);
    let tune = |epochs, seed| TrainConfig { learning_rate: 1e-3, epochs, ..TrainConfig::target(seed) };
    let (base, _) = train(MicroLmParams::init(shape, 7)?, &public, &fast(20, 7))?;
    let (mlm, _) = train(MicroLmParams::init(ModelShape { mode: ModelMode::Masked, ..shape }, 8)?, &public, &fast(20, 8))?;
    let (target, _) = train(base.clone(), &members, &tune(10, 1))?;
    let (base, target) = (InProcessBackend::new(base), InProcessBackend::new(target));
    let (candidate, _) = train(base.params().as_ref().clone(), &candidates[..candidates.len().min(40)], &tune(4, 2))?;
    let candidate = InProcessBackend::new(candidate);

    let sp = SelfPromptConfig { prompt_length: 8, generation_length: 56, ..SelfPromptConfig::new(40, 1) };
    let (self_ref, _) = selfprompt_reference(&target, &base, &public, &sp, &tune(4, 3))?;

    let models = AttackModels {
        target: &target,
        self_reference: Some(self_ref.as_ref()),
        pretrained: Some(&base),
        candidate_reference: Some(&candidate),
        paraphraser: Some(Paraphraser::semantic(&mlm)),
    };
    let records: Vec<_> = members.into_iter().chain(nonmembers).collect();
    let para = ParaphraseConfig { n_pairs: 4, ..ParaphraseConfig::new(ParaphraseDomain::Semantic, 1) };
    let scores = score_records(&models, &records, &AttackConfig::default(), &para)?;
    for (method, curve) in evaluate_scores(&scores)? {
        println!("{:<16} AUC {:.4}", method.as_str(), curve.auc);
    }
    Ok(())
}
