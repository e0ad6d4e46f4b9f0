use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EcSelection {
    pub unit: usize,
    pub weight: f64,
}

/// Units chosen by each expert.
#[derive(Clone, Debug, PartialEq)]
pub struct EcAssignment {
    pub capacity: usize,
    pub capacity_factor: f64,
    pub per_expert: Vec<Vec<EcSelection>>,
}

impl EcAssignment {
    pub fn num_experts(&self) -> usize {
        self.per_expert.len()
    }

    /// Experts (with weights) that picked `unit`.
    pub fn experts_of(&self, unit: usize) -> Vec<(usize, f64)> {
        self.per_expert
            .iter()
            .enumerate()
            .filter_map(|(e, sel)| sel.iter().find(|s| s.unit == unit).map(|s| (e, s.weight)))
            .collect()
    }

    pub fn is_selected(&self, unit: usize) -> bool {
        self.per_expert.iter().any(|sel| sel.iter().any(|s| s.unit == unit))
    }
}

/// Slots per expert: `⌊cf · units / E⌋`.
pub fn expert_choice_capacity(units: usize, experts: usize, capacity_factor: f64) -> Result<usize> {
    if !(capacity_factor > 0.0 && capacity_factor.is_finite()) {
        return Err(Error::config("capacity_factor", "must be positive and finite"));
    }
    let slots = (capacity_factor * units as f64 / experts as f64 + 1e-9).floor() as usize;
    if slots == 0 {
        return Err(Error::config(
            "capacity_factor",
            format!("{units} units over {experts} experts leaves no slots at capacity factor {capacity_factor}"),
        ));
    }
    Ok(slots.min(units))
}

/// Score order: descending score, then ascending unit index.
fn by_score(scores: &[Vec<f64>], expert: usize) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b][expert].total_cmp(&scores[a][expert]).then(a.cmp(&b))
}

/// Each expert takes its top-capacity units by its own score column.
///
/// `scores[u][e]` is unit `u`'s routing probability for expert `e`.
pub fn expert_choice(scores: &[Vec<f64>], capacity_factor: f64) -> Result<EcAssignment> {
    let units = scores.len();
    let experts = scores.first().map_or(0, Vec::len);
    if units == 0 || experts == 0 {
        return Err(Error::Contract(
            "expert choice needs at least one unit and one expert".into(),
        ));
    }
    let capacity = expert_choice_capacity(units, experts, capacity_factor)?;
    let per_expert = (0..experts)
        .map(|e| {
            let mut order: Vec<usize> = (0..units).collect();
            order.sort_by(by_score(scores, e));
            order
                .into_iter()
                .take(capacity)
                .map(|u| EcSelection {
                    unit: u,
                    weight: scores[u][e],
                })
                .collect()
        })
        .collect();
    Ok(EcAssignment {
        capacity,
        capacity_factor,
        per_expert,
    })
}

/// Inference-time routing: every unit goes to its own top-`k` experts.
pub fn top_k_per_unit(scores: &[Vec<f64>], k: usize) -> EcAssignment {
    let experts = scores.first().map_or(0, Vec::len);
    let mut per_expert = vec![Vec::new(); experts];
    for (u, row) in scores.iter().enumerate() {
        let mut order: Vec<usize> = (0..experts).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &e in order.iter().take(k) {
            per_expert[e].push(EcSelection {
                unit: u,
                weight: row[e],
            });
        }
    }
    EcAssignment {
        capacity: scores.len(),
        capacity_factor: f64::NAN,
        per_expert,
    }
}
