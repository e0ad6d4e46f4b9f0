use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ByteTokenizer, Document, SEP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Sim,
    Rand,
}

impl BatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchMode::Sim => "sim",
            BatchMode::Rand => "rand",
        }
    }
}

impl std::str::FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(BatchMode::Sim),
            "rand" => Ok(BatchMode::Rand),
            other => Err(Error::config(
                "mode",
                format!("unknown batching mode `{other}` (expected sim or rand)"),
            )),
        }
    }
}

/// A run of tokens inside an instance that came from one document. A
/// document's trailing separator belongs to that document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub doc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub tokens: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl TrainingInstance {
    /// Provenance entry covering position `pos`.
    pub fn source_of(&self, pos: usize) -> Option<&Provenance> {
        self.provenance
            .iter()
            .find(|p| (p.start..p.start + p.len).contains(&pos))
    }

    /// Domain of every position (`None` where the document had no label).
    pub fn domains(&self) -> Vec<Option<&str>> {
        let mut out = vec![None; self.tokens.len()];
        for p in &self.provenance {
            for slot in &mut out[p.start..p.start + p.len] {
                *slot = p.domain.as_deref();
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub mode: BatchMode,
    pub seed: u64,
    pub instances: Vec<TrainingInstance>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.instances.len() * self.seq_len
    }

    /// Sorted distinct domain labels.
    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self
            .instances
            .iter()
            .flat_map(|i| i.provenance.iter().filter_map(|p| p.domain.clone()))
            .collect();
        d.sort();
        d.dedup();
        d
    }
}

fn check_permutation(ordering: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if ordering.len() != n {
        return Err(Error::Contract(format!(
            "ordering has {} entries for {n} documents",
            ordering.len()
        )));
    }
    for &i in ordering {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Contract(format!("ordering is not a permutation (entry {i})")));
        }
    }
    Ok(())
}

/// Concatenates documents in `ordering`, each followed by a separator, and
/// cuts the stream into consecutive `seq_len`-token instances. The final
/// partial instance is dropped.
pub fn pack_instances(
    docs: &[Document],
    ordering: &[usize],
    tokenizer: &ByteTokenizer,
    seq_len: usize,
    mode: BatchMode,
    seed: u64,
) -> Result<InstanceSet> {
    if seq_len < 2 {
        return Err(Error::config("seq_len", "instances need at least 2 tokens"));
    }
    check_permutation(ordering, docs.len())?;
    let mut instances = Vec::new();
    let mut tokens = Vec::with_capacity(seq_len);
    let mut provenance: Vec<Provenance> = Vec::new();
    for &i in ordering {
        let doc = &docs[i];
        let mut ids = tokenizer.encode(&doc.text);
        ids.push(SEP);
        let mut rest = ids.as_slice();
        while !rest.is_empty() {
            let take = rest.len().min(seq_len - tokens.len());
            provenance.push(Provenance {
                doc: doc.id.clone(),
                domain: doc.domain.clone(),
                start: tokens.len(),
                len: take,
            });
            tokens.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            if tokens.len() == seq_len {
                instances.push(TrainingInstance {
                    tokens: std::mem::replace(&mut tokens, Vec::with_capacity(seq_len)),
                    provenance: std::mem::take(&mut provenance),
                });
            }
        }
    }
    if instances.is_empty() {
        log::warn!("corpus yields fewer than {seq_len} tokens; no instances produced");
    }
    Ok(InstanceSet {
        seq_len,
        vocab_size: tokenizer.vocab_size(),
        mode,
        seed,
        instances,
    })
}

/// Seeded uniform shuffle of `0..n`: Fisher–Yates from the top, one
/// `random_range` draw per position, so the stream is fixed by the seed alone.
pub fn random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

pub fn random_batching(docs: &[Document], tokenizer: &ByteTokenizer, seq_len: usize, seed: u64) -> Result<InstanceSet> {
    pack_instances(
        docs,
        &random_order(docs.len(), seed),
        tokenizer,
        seq_len,
        BatchMode::Rand,
        seed,
    )
}
