//! Text → vocabulary → fixed-length packed sequences → seeded
//! member / non-member / candidate split.
//!
//! cargo run --example prepare_corpus

use memlab::corpus::synthetic::{domain_corpus, DomainVariant};
use memlab::corpus::{pack, split, SplitSpec, VocabMode, Vocabulary};

fn main() -> memlab::Result<()> {
    let lines = domain_corpus(40, 200, 1, DomainVariant::Primary);
    println!("first line: {:.70}...", lines[0]);

    for mode in [VocabMode::Byte, VocabMode::Char] {
        let vocab = Vocabulary::build(&lines, mode)?;
        println!("{mode:?} vocabulary: {} ids (PAD {}, MASK {}, BOS {})", vocab.size(), vocab.pad(), vocab.mask(), vocab.bos());
    }

    let vocab = Vocabulary::byte();
    let encoded: Vec<_> = lines.iter().map(|l| vocab.encode(l)).collect::<memlab::Result<_>>()?;
    let packed = pack(&encoded, 64, vocab.bos())?;
    let spec = SplitSpec { seed: 3, n_member: 20, n_nonmember: 20, packing_length: 64 };
    let (members, nonmembers, candidates) = split(&packed, &spec)?;
    println!(
        "{} packed sequences of 64 tokens -> {} members, {} non-members, {} candidates",
        packed.len(),
        members.len(),
        nonmembers.len(),
        candidates.len()
    );
    println!("member {}: {:?}", members[0].id, vocab.decode(&members[0].tokens));

    // Asking for more than exists reports the shortfall.
    let greedy = SplitSpec { n_member: packed.len(), ..spec };
    println!("oversized split: {}", split(&packed, &greedy).unwrap_err());
    Ok(())
}
