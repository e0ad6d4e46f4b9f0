use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::training::TraceRecord;

/// Default step window for counting active experts.
pub const DEFAULT_WINDOW: u64 = 10;

/// Weight above which an expert counts as used: `2/E`.
pub fn active_threshold(num_experts: usize) -> f64 {
    2.0 / num_experts as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtilizationRow {
    /// Window index; window `w` covers steps `w·window_steps .. (w+1)·window_steps`.
    pub window: u64,
    /// Active `(layer, expert)` pairs summed over layers.
    pub active_count: usize,
}

/// Number of experts per window whose weight exceeds `threshold` in at least
/// one traced segment. Experts are layer-local, so counts add up across
/// layers. Windows without traces are absent.
pub fn utilization_report(traces: &[TraceRecord], window_steps: u64, threshold: f64) -> Vec<UtilizationRow> {
    let window_steps = window_steps.max(1);
    let mut active: BTreeMap<u64, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for t in traces {
        let set = active.entry(t.step / window_steps).or_default();
        for (e, &w) in t.weights.iter().enumerate() {
            if w > threshold {
                set.insert((t.layer, e));
            }
        }
    }
    active
        .into_iter()
        .map(|(window, set)| UtilizationRow {
            window,
            active_count: set.len(),
        })
        .collect()
}

/// Active experts of one layer in the last window of the trace.
pub fn final_window_active(traces: &[TraceRecord], layer: usize, window_steps: u64, threshold: f64) -> usize {
    let Some(last) = traces.iter().map(|t| t.step).max() else {
        return 0;
    };
    let window = last / window_steps.max(1);
    let mut set = BTreeSet::new();
    for t in traces
        .iter()
        .filter(|t| t.layer == layer && t.step / window_steps.max(1) == window)
    {
        for (e, &w) in t.weights.iter().enumerate() {
            if w > threshold {
                set.insert(e);
            }
        }
    }
    set.len()
}
