//! Trains the micro-LM on a member set, shows the memorization gap, samples
//! from it and round-trips the parameter file.
//!
//! cargo run --release --example train_microlm

use memlab::corpus::synthetic::{domain_corpus, DomainVariant};
use memlab::corpus::{pack, split, SplitSpec, Vocabulary};
use memlab::microlm::{self, generate, perplexity, train, GenerationConfig, MicroLmParams, ModelMode, ModelShape, TrainConfig};

fn main() -> memlab::Result<()> {
    let vocab = Vocabulary::byte();
    let packed = |lines: Vec<String>| -> memlab::Result<_> {
        let enc: Vec<_> = lines.iter().map(|l| vocab.encode(l)).collect::<memlab::Result<_>>()?;
        pack(&enc, 64, vocab.bos())
    };
    let public = packed(domain_corpus(40, 200, 99, DomainVariant::Primary))?;
    let packed = packed(domain_corpus(60, 200, 1, DomainVariant::Primary))?;
    let (members, nonmembers, _) = split(&packed, &SplitSpec { seed: 1, n_member: 30, n_nonmember: 30, packing_length: 64 })?;

    let shape = ModelShape::new(ModelMode::Causal, vocab.size(), 16, 64);
    let init = MicroLmParams::init(shape, 7)?;
    println!("{} parameters", init.num_params());
    // Pre-train on public text first, then fine-tune on the members.
    let (base, _) = train(init, &public, &TrainConfig { learning_rate: 3e-3, epochs: 20, ..TrainConfig::target(7) })?;
    println!("pre-trained base: perplexity {:.3} on members", perplexity(&base, &members)?);
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 40, ..TrainConfig::target(1) };
    let (model, report) = train(base, &members, &cfg)?;
    println!("loss {:.3} -> {:.3}", report.initial_loss, report.epoch_losses.last().unwrap());
    println!(
        "perplexity: members {:.3}, non-members {:.3}",
        perplexity(&model, &members)?,
        perplexity(&model, &nonmembers)?
    );

    let prompt = vocab.encode("the ")?;
    let gen = GenerationConfig { max_new_tokens: 48, temperature: 0.8, seed: 3 };
    let out = generate(&model, &prompt, &gen)?;
    println!("sample: {:?}", vocab.decode(&[prompt, out].concat()));

    let path = std::env::temp_dir().join("memlab-example.mlm");
    microlm::save(&model, &path)?;
    assert_eq!(microlm::load(&path)?, model);
    println!("saved and reloaded {} bit for bit", path.display());
    Ok(())
}
