//! Routing-weight strategies for MoE layers.
//!
//! Merging strategies ([`causal_segment_weights`], [`prefix_routing`],
//! [`prompt_routing`]) produce simplex vectors that decide how experts are
//! averaged in parameter space. The Expert Choice baselines produce sparse
//! assignments of units (segments or tokens) to experts instead.

mod expert_choice;

use std::ops::Range;

pub use expert_choice::{expert_choice, expert_choice_capacity, top_k_per_unit, EcAssignment, EcSelection};

use crate::diffcore::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Contiguous token spans `S_1..S_N` of one instance (0-based, half-open).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    spans: Vec<Range<usize>>,
}

impl SegmentLayout {
    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    /// Index of the segment containing position `pos`.
    pub fn segment_of(&self, pos: usize) -> Option<usize> {
        self.spans.iter().position(|s| s.contains(&pos))
    }
}

/// Splits `len` positions into `⌈len/seg_len⌉` spans of `seg_len`; the last
/// span may be shorter.
pub fn split_segments(len: usize, seg_len: usize) -> SegmentLayout {
    assert!(seg_len >= 1, "segment length must be positive");
    let spans = (0..len)
        .step_by(seg_len)
        .map(|start| start..(start + seg_len).min(len))
        .collect();
    SegmentLayout { spans }
}

/// Mean hidden state over one span of `h` (`rows × d`), as a `d`-vector.
pub fn segment_mean<S: Scalar>(g: &mut Graph<S>, h: Var, span: Range<usize>) -> Result<Var> {
    if span.is_empty() {
        return Err(Error::Contract("segment_mean over an empty span".into()));
    }
    let block = g.slice_rows(h, span.start, span.end)?;
    g.mean_axis(block, 0)
}

/// `softmax(router(mean))` for a `d`-vector mean.
pub fn route<S: Scalar>(g: &mut Graph<S>, mean: Var, router: Var) -> Result<Var> {
    let d = g.shape(mean)[0];
    let e = g.shape(router)[1];
    let row = g.reshape(mean, &[1, d])?;
    let logits = g.matmul(row, router)?;
    let probs = g.softmax(logits);
    g.reshape(probs, &[e])
}

/// Merging weights for every segment of one instance.
#[derive(Clone, Debug)]
pub struct RoutingPlan {
    /// One simplex vector per segment, or a single vector shared by all.
    weights: Vec<Var>,
    /// Gradient-severed entries (segment 1 under causal routing).
    detached: Vec<bool>,
    shared: bool,
}

impl RoutingPlan {
    pub fn per_segment(weights: Vec<Var>, detached: Vec<bool>) -> Self {
        assert_eq!(weights.len(), detached.len());
        RoutingPlan {
            weights,
            detached,
            shared: false,
        }
    }

    pub fn shared(weight: Var) -> Self {
        RoutingPlan {
            weights: vec![weight],
            detached: vec![false],
            shared: true,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// Weight vector applied to segment `k`.
    pub fn for_segment(&self, k: usize) -> Var {
        if self.shared {
            self.weights[0]
        } else {
            self.weights[k]
        }
    }

    pub fn weights(&self) -> &[Var] {
        &self.weights
    }

    pub fn detached(&self) -> &[bool] {
        &self.detached
    }

    /// Number of distinct weight vectors, i.e. merges needed.
    pub fn distinct(&self) -> usize {
        self.weights.len()
    }

    /// Weight values, one row per segment (a single row when shared).
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .map(|w| g.value(*w).data().iter().map(|v| v.as_f64()).collect())
            .collect()
    }
}

fn check_layout<S: Scalar>(g: &Graph<S>, h: Var, layout: &SegmentLayout) -> Result<()> {
    let rows = g.shape(h)[0];
    if layout.is_empty() || layout.total_len() != rows {
        return Err(Error::shape("segment layout", g.shape(h), &[layout.total_len()]));
    }
    Ok(())
}

/// Causal segment routing: segment `k ≥ 2` is merged with
/// `softmax(R(mean S_{k-1}))`; segment 1 uses its own weights, detached.
pub fn causal_segment_weights<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    layout: &SegmentLayout,
    router: Var,
) -> Result<RoutingPlan> {
    check_layout(g, h, layout)?;
    let n = layout.len();
    // w_k for k = 1..N-1; the last segment's own weights are never used
    let mut own = Vec::with_capacity(n);
    for span in &layout.spans()[..n.saturating_sub(1).max(1)] {
        let m = segment_mean(g, h, span.clone())?;
        own.push(route(g, m, router)?);
    }
    let mut weights = Vec::with_capacity(n);
    weights.push(g.stop_gradient(own[0]));
    weights.extend(own.iter().take(n - 1).copied());
    let mut detached = vec![false; n];
    detached[0] = true;
    Ok(RoutingPlan::per_segment(weights, detached))
}

/// Prefix routing: a single vector from the first segment, used everywhere.
pub fn prefix_routing<S: Scalar>(g: &mut Graph<S>, h: Var, layout: &SegmentLayout, router: Var) -> Result<RoutingPlan> {
    check_layout(g, h, layout)?;
    let m = segment_mean(g, h, layout.spans()[0].clone())?;
    Ok(RoutingPlan::shared(route(g, m, router)?))
}

/// One routing decision from the mean over every row of `h`.
pub fn prompt_routing<S: Scalar>(g: &mut Graph<S>, h: Var, router: Var) -> Result<Var> {
    let rows = g.shape(h)[0];
    if rows == 0 {
        return Err(Error::Contract("prompt routing needs a nonempty prompt".into()));
    }
    let m = segment_mean(g, h, 0..rows)?;
    route(g, m, router)
}

/// Checks that a weight vector lies on the probability simplex.
pub fn on_simplex(w: &[f64], tol: f64) -> bool {
    w.iter().all(|&v| v >= -tol && v.is_finite()) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn split_examples() {
        let l = split_segments(4096, 256);
        assert_eq!(l.len(), 16);
        assert!(l.spans().iter().all(|s| s.len() == 256));
        let l = split_segments(10, 4);
        let lens: Vec<usize> = l.spans().iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        assert_eq!(split_segments(7, 7).spans(), &[0..7]);
        assert_eq!(l.segment_of(9), Some(2));
    }

    #[test]
    fn segment_mean_examples() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0], vec![2.0, -1.0]]).unwrap());
        let m = segment_mean(&mut g, h, 0..3).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, -1.0]);
        let h2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m2 = segment_mean(&mut g, h2, 0..2).unwrap();
        assert_eq!(g.value(m2).data(), &[0.5, 0.5]);
        assert!(segment_mean(&mut g, h2, 1..1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = rand_tensor(&mut rng, &[9, 5]);
        let h3 = g.constant(block.clone());
        let m3 = segment_mean(&mut g, h3, 1..8).unwrap();
        for j in 0..5 {
            let naive: f64 = (1..8).map(|r| block.at(&[r, j])).sum::<f64>() / 7.0;
            assert!((g.value(m3).data()[j] - naive).abs() < 1e-12);
        }
    }

    fn own_weights(g: &mut Graph<f64>, h: Var, layout: &SegmentLayout, router: Var) -> Vec<Vec<f64>> {
        layout
            .spans()
            .iter()
            .map(|s| {
                let m = segment_mean(g, h, s.clone()).unwrap();
                let w = route(g, m, router).unwrap();
                g.value(w).data().to_vec()
            })
            .collect()
    }

    #[test]
    fn causal_plan_rolls_by_one_and_detaches_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::<f64>::new();
        let h = g.param(rand_tensor(&mut rng, &[12, 6]));
        let router = g.param(rand_tensor(&mut rng, &[6, 3]));
        let layout = split_segments(12, 4);
        let plan = causal_segment_weights(&mut g, h, &layout, router).unwrap();
        let w = own_weights(&mut g, h, &layout, router);
        let vals = plan.values(&g);
        assert_eq!(vals, vec![w[0].clone(), w[0].clone(), w[1].clone()]);
        assert_eq!(plan.detached(), &[true, false, false]);
        assert!(!g.requires_grad(plan.for_segment(0)));
        assert!(g.requires_grad(plan.for_segment(1)));
        for v in vals {
            assert!(on_simplex(&v, 1e-6));
        }
    }

    #[test]
    fn zero_router_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let h = g.constant(rand_tensor(&mut rng, &[10, 4]));
        let router = g.constant(Tensor::zeros(&[4, 5]));
        let layout = split_segments(10, 4);
        let plan = causal_segment_weights(&mut g, h, &layout, router).unwrap();
        for row in plan.values(&g) {
            assert!(row.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
        let p = prompt_routing(&mut g, h, router).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn segment_one_loss_gives_router_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::<f64>::new();
        let h = g.param(rand_tensor(&mut rng, &[8, 4]));
        let router = g.param(rand_tensor(&mut rng, &[4, 3]));
        let layout = split_segments(8, 4);
        let plan = causal_segment_weights(&mut g, h, &layout, router).unwrap();
        let probe = g.constant(rand_tensor(&mut rng, &[3]));
        let prod = g.mul(plan.for_segment(0), probe).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get_or_zeros(router, 12).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prompt_routing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let block = rand_tensor(&mut rng, &[4, 4]);
        let mut g = Graph::<f64>::new();
        let router = g.constant(rand_tensor(&mut rng, &[4, 3]));
        let h = g.constant(block.clone());
        let p = prompt_routing(&mut g, h, router).unwrap();
        let layout = split_segments(4, 4);
        let train = own_weights(&mut g, h, &layout, router);
        assert_eq!(g.value(p).data(), train[0].as_slice());

        // a different prompt with the same mean state routes identically
        let mut other = Tensor::zeros(&[2, 4]);
        for j in 0..4 {
            let mean: f64 = (0..4).map(|r| block.at(&[r, j])).sum::<f64>() / 4.0;
            other.data_mut()[j] = mean + 0.5;
            other.data_mut()[4 + j] = mean - 0.5;
        }
        let h2 = g.constant(other);
        let p2 = prompt_routing(&mut g, h2, router).unwrap();
        assert!(g.value(p2).max_abs_diff(g.value(p)) < 1e-15);
        let empty_err = split_segments(0, 4);
        assert!(empty_err.is_empty());
    }

    #[test]
    fn prefix_routing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = rand_tensor(&mut rng, &[12, 4]);
        let rw = rand_tensor(&mut rng, &[4, 3]);
        let run = |block: Tensor<f64>, len: usize| {
            let mut g = Graph::<f64>::new();
            let h = g.constant(block.clone());
            let router = g.constant(rw.clone());
            let layout = split_segments(len, 4);
            let prefix = prefix_routing(&mut g, h, &layout, router).unwrap();
            let causal = causal_segment_weights(&mut g, h, &layout, router).unwrap();
            (
                (0..layout.len())
                    .map(|k| g.value(prefix.for_segment(k)).data().to_vec())
                    .collect::<Vec<_>>(),
                causal.values(&g),
            )
        };
        let (prefix, causal) = run(block.clone(), 12);
        assert!(prefix.iter().all(|w| *w == prefix[0]));
        assert_eq!(prefix[0], causal[0]);

        // swapping rows inside S_2 changes nothing
        let mut swapped = block.clone();
        let (a, b) = (5 * 4, 6 * 4);
        for j in 0..4 {
            swapped.data_mut().swap(a + j, b + j);
        }
        assert_eq!(run(swapped, 12).0, prefix);

        // single segment: prefix equals causal in value
        let short = Tensor::new(vec![4, 4], block.data()[..16].to_vec()).unwrap();
        let (p1, c1) = run(short, 4);
        assert_eq!(p1, c1);
    }

    #[test]
    fn plan_and_layout_must_agree() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::zeros(&[8, 4]));
        let router = g.constant(Tensor::zeros(&[4, 2]));
        assert!(causal_segment_weights(&mut g, h, &split_segments(9, 4), router).is_err());
    }
}
