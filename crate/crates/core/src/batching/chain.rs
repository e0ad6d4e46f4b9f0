use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cosine, id_ranks, EmbeddedDoc};
use crate::error::{Error, Result};
use crate::par::Executor;

/// What the chain does when the tail's neighbor list has no unvisited entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChainStart {
    /// Search every unvisited document exactly; the chain never restarts.
    #[default]
    ExactFallback,
    /// Start a new chain at the unvisited document with the lowest id.
    RestartLowestId,
    /// Start a new chain at a seeded-random unvisited document.
    RestartRandom(u64),
}

/// Descending cosine, then ascending id rank.
fn closer<'a>(sim: &'a [f64], rank: &'a [usize]) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| sim[b].total_cmp(&sim[a]).then(rank[a].cmp(&rank[b]))
}

/// The `k` most similar other documents of every document, exact search.
pub fn top_k_neighbors(docs: &[EmbeddedDoc], k: usize, exec: &Executor) -> Result<Vec<Vec<usize>>> {
    if k >= docs.len() {
        return Err(Error::config(
            "neighbors",
            format!("k = {k} must be smaller than the corpus size {}", docs.len()),
        ));
    }
    let rank = id_ranks(docs);
    Ok(exec.map(docs, |i, d| {
        let sim: Vec<f64> = docs.iter().map(|o| cosine(&d.vector, &o.vector)).collect();
        let mut others: Vec<usize> = (0..docs.len()).filter(|&j| j != i).collect();
        others.sort_by(closer(&sim, &rank));
        others.truncate(k);
        others
    }))
}

fn lowest_rank(unvisited: &[bool], rank: &[usize]) -> Option<usize> {
    (0..unvisited.len()).filter(|&i| unvisited[i]).min_by_key(|&i| rank[i])
}

/// Orders all documents by repeatedly appending the unvisited document most
/// similar to the current tail, starting from the lowest id.
pub fn greedy_chain(docs: &[EmbeddedDoc], neighbors: &[Vec<usize>], rule: ChainStart) -> Vec<usize> {
    let n = docs.len();
    let rank = id_ranks(docs);
    let mut unvisited = vec![true; n];
    let mut order = Vec::with_capacity(n);
    let mut rng = match rule {
        ChainStart::RestartRandom(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let Some(mut tail) = lowest_rank(&unvisited, &rank) else {
        return order;
    };
    loop {
        unvisited[tail] = false;
        order.push(tail);
        if order.len() == n {
            return order;
        }
        // neighbor lists are sorted best-first, so the first unvisited entry
        // is the best unvisited document whenever one is listed
        let listed = neighbors[tail].iter().copied().find(|&j| unvisited[j]);
        tail = match (listed, rule) {
            (Some(j), _) => j,
            (None, ChainStart::ExactFallback) => best_unvisited(docs, tail, &unvisited, &rank),
            (None, ChainStart::RestartLowestId) => lowest_rank(&unvisited, &rank).unwrap(),
            (None, ChainStart::RestartRandom(_)) => {
                let left: Vec<usize> = (0..n).filter(|&i| unvisited[i]).collect();
                left[rng.as_mut().unwrap().random_range(0..left.len())]
            }
        };
    }
}

fn best_unvisited(docs: &[EmbeddedDoc], tail: usize, unvisited: &[bool], rank: &[usize]) -> usize {
    let sim: Vec<f64> = docs.iter().map(|o| cosine(&docs[tail].vector, &o.vector)).collect();
    (0..docs.len())
        .filter(|&j| unvisited[j])
        .min_by(closer(&sim, rank))
        .expect("an unvisited document remains")
}

/// Neighbor search plus greedy chain; `k` is capped at `n − 1`.
pub fn similarity_order(docs: &[EmbeddedDoc], k: usize, rule: ChainStart, exec: &Executor) -> Result<Vec<usize>> {
    if docs.len() < 2 {
        return Ok((0..docs.len()).collect());
    }
    if k == 0 {
        return Err(Error::config("neighbors", "k must be at least 1"));
    }
    let nn = top_k_neighbors(docs, k.min(docs.len() - 1), exec)?;
    Ok(greedy_chain(docs, &nn, rule))
}

/// Exact greedy chain without neighbor lists, `O(n²)`.
pub fn greedy_chain_oracle(docs: &[EmbeddedDoc]) -> Vec<usize> {
    let n = docs.len();
    let rank = id_ranks(docs);
    let mut unvisited = vec![true; n];
    let mut order = Vec::with_capacity(n);
    let mut tail = match lowest_rank(&unvisited, &rank) {
        Some(t) => t,
        None => return order,
    };
    while order.len() < n {
        unvisited[tail] = false;
        order.push(tail);
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !unvisited[j] {
                continue;
            }
            let c = cosine(&docs[tail].vector, &docs[j].vector);
            best = match best {
                Some(b) => {
                    let cb = cosine(&docs[tail].vector, &docs[b].vector);
                    if c > cb || (c == cb && rank[j] < rank[b]) {
                        Some(j)
                    } else {
                        Some(b)
                    }
                }
                None => Some(j),
            };
        }
        if let Some(b) = best {
            tail = b;
        }
    }
    order
}

/// Mean cosine between consecutive documents of `order`; zero for fewer than
/// two documents.
pub fn mean_adjacent_cosine(docs: &[EmbeddedDoc], order: &[usize]) -> f64 {
    if order.len() < 2 {
        return 0.0;
    }
    let total: f64 = order
        .windows(2)
        .map(|w| cosine(&docs[w[0]].vector, &docs[w[1]].vector))
        .sum();
    total / (order.len() - 1) as f64
}
