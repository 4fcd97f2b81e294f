//! Symmetrical paraphrase pairs in both domains: mask-and-fill token
//! substitutions mirrored through the embedding space, and mirrored Gaussian
//! offsets of the embedding rows.
//!
//! cargo run --release --example paraphrase_pairs

use memlab::corpus::synthetic::{domain_corpus, DomainVariant};
use memlab::corpus::{pack, Vocabulary};
use memlab::microlm::{train, MicroLmParams, ModelMode, ModelShape, TrainConfig};
use memlab::paraphrase::{paraphrase_embedding, paraphrase_semantic, ParaphraseConfig, ParaphraseDomain};

fn main() -> memlab::Result<()> {
    let vocab = Vocabulary::byte();
    let lines = domain_corpus(40, 200, 4, DomainVariant::Primary);
    let enc: Vec<_> = lines.iter().map(|l| vocab.encode(l)).collect::<memlab::Result<_>>()?;
    let data = pack(&enc, 64, vocab.bos())?;

    let shape = ModelShape::new(ModelMode::Masked, vocab.size(), 16, 64);
    let cfg = TrainConfig { learning_rate: 3e-3, epochs: 4, ..TrainConfig::target(8) };
    let (mlm, _) = train(MicroLmParams::init(shape, 8)?, &data, &cfg)?;
    let e = mlm.embedding_matrix();

    let x = &data[3];
    println!("x  = {:?}", vocab.decode(&x.tokens));
    let sem = ParaphraseConfig { n_pairs: 2, lambda: 0.2, ..ParaphraseConfig::new(ParaphraseDomain::Semantic, 1) };
    for p in paraphrase_semantic(x, &mlm, &e, &sem)? {
        println!("pair {} masks {} positions", p.pair_index, p.masked_positions.len());
        println!("x+ = {:?}", vocab.decode(&p.plus));
        println!("x- = {:?}", vocab.decode(&p.minus));
    }

    let emb = ParaphraseConfig { n_pairs: 3, sigma: 0.05, ..ParaphraseConfig::new(ParaphraseDomain::Embedding, 1) };
    let base = e.embed(&x.tokens);
    for p in paraphrase_embedding(x, &e, &emb)? {
        let worst = p.plus.iter().zip(&p.minus).zip(&base).map(|((a, b), c)| (a + b - 2.0 * c).abs()).fold(0.0, f64::max);
        println!("embedding pair {}: max |x+ + x- - 2x| = {worst:.1e}", p.pair_index);
    }
    Ok(())
}
