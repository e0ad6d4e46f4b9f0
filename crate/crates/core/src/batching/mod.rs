//! Corpus ingestion and packing of documents into fixed-length training
//! instances, either in similarity-chain order or shuffled.

mod chain;
mod corpus;
mod embed;
mod files;
mod pack;
mod synth;
mod tokenizer;

pub use chain::{
    greedy_chain, greedy_chain_oracle, mean_adjacent_cosine, similarity_order, top_k_neighbors, ChainStart,
};
pub use corpus::{ingest_corpus, parse_corpus, write_corpus, Document};
pub use embed::{
    cosine, embed_documents, hashed_embedding, load_embeddings, write_embeddings, EmbeddedDoc, Embedder, HASH_DIM,
};
pub use files::{provenance_path, read_instances, write_instances};
pub use pack::{pack_instances, random_batching, random_order, BatchMode, InstanceSet, Provenance, TrainingInstance};
pub use synth::{two_domain_corpus, ARITHMETIC, PROSE};
pub use tokenizer::{ByteTokenizer, PAD, SEP, VOCAB_SIZE};

use std::cmp::Ordering;

/// Canonical document order: numeric ids compare numerically and sort before
/// non-numeric ids, which compare lexicographically.
pub fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// `rank[i]` is document `i`'s position in canonical id order.
pub fn id_ranks(docs: &[EmbeddedDoc]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| id_order(&docs[a].id, &docs[b].id));
    let mut rank = vec![0; docs.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_ids_sort_numerically() {
        let mut ids = vec!["10", "b", "2", "a", "1"];
        ids.sort_by(|a, b| id_order(a, b));
        assert_eq!(ids, vec!["1", "2", "10", "a", "b"]);
    }
}
