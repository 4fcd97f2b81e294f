//! Builds a self-prompt reference: prompts cut from public text are
//! continued by the target, and a copy of the base is fine-tuned on the
//! continuations.
//!
//! cargo run --release --example self_prompt

use memlab::backend::{Backend, InProcessBackend};
use memlab::corpus::synthetic::{domain_corpus, DomainVariant};
use memlab::corpus::{pack, Vocabulary};
use memlab::microlm::{train, MicroLmParams, ModelMode, ModelShape, TrainConfig};
use memlab::selfprompt::{build_selfprompt_dataset, finetune_reference, make_prompts, SelfPromptConfig};

fn main() -> memlab::Result<()> {
    let vocab = Vocabulary::byte();
    let packed = |seed, variant| -> memlab::Result<_> {
        let lines = domain_corpus(30, 200, seed, variant);
        let enc: Vec<_> = lines.iter().map(|l| vocab.encode(l)).collect::<memlab::Result<_>>()?;
        pack(&enc, 64, vocab.bos())
    };
    let private = packed(1, DomainVariant::Primary)?;
    let public = packed(2, DomainVariant::Sibling)?;

    let shape = ModelShape::new(ModelMode::Causal, vocab.size(), 16, 64);
    let pre = TrainConfig { learning_rate: 3e-3, epochs: 20, ..TrainConfig::target(7) };
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 10, ..TrainConfig::target(1) };
    let (base, _) = train(MicroLmParams::init(shape, 7)?, &public, &pre)?;
    let (target, _) = train(base.clone(), &private[..30], &cfg)?;
    let (base, target) = (InProcessBackend::new(base), InProcessBackend::new(target));

    let sp = SelfPromptConfig { prompt_length: 8, generation_length: 56, ..SelfPromptConfig::new(24, 5) };
    let prompts = make_prompts(&public, sp.n_self, sp.prompt_length, sp.seed)?;
    let data = build_selfprompt_dataset(&target, &prompts, &sp)?;
    for (seq, prov) in data.iter().take(3) {
        println!("[{} from {} prompt {}] {:?}", seq.id, prov.prompt_source, prov.prompt_id, vocab.decode(&seq.tokens));
    }

    let seqs: Vec<_> = data.into_iter().map(|(s, _)| s).collect();
    let reference = finetune_reference(&base, &seqs, &TrainConfig { epochs: 4, ..cfg })?;
    let x = &private[0].tokens;
    let mean = |m: &dyn Backend| -> memlab::Result<f64> {
        let lp = m.query_logprobs(x)?;
        Ok(lp.iter().sum::<f64>() / lp.len() as f64)
    };
    println!(
        "member record: target {:.4}, reference {:.4}, base {:.4} (mean log-prob)",
        mean(&target)?,
        mean(reference.as_ref())?,
        mean(&base)?
    );
    Ok(())
}
