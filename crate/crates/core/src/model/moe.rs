use std::ops::Range;

use super::ffn::{merge_experts, swiglu_ffn};
use super::params::ExpertVars;
use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::routing::{EcAssignment, RoutingPlan, SegmentLayout};

/// Output of one merged-expert layer.
#[derive(Clone, Copy, Debug)]
pub struct MoeOutput {
    pub out: Var,
    /// Expert merges performed (one per distinct weight vector).
    pub merges: usize,
}

/// Runs every segment of `h` through the FFN merged from its plan entry.
pub fn moe_layer_forward<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    plan: &RoutingPlan,
    layout: &SegmentLayout,
    experts: &[ExpertVars],
) -> Result<MoeOutput> {
    if layout.total_len() != g.shape(h)[0] {
        return Err(Error::shape("moe_layer", g.shape(h), &[layout.total_len()]));
    }
    if plan.is_shared() {
        let merged = merge_experts(g, plan.for_segment(0), experts)?;
        let out = swiglu_ffn(g, h, &merged)?;
        return Ok(MoeOutput { out, merges: 1 });
    }
    if plan.distinct() != layout.len() {
        return Err(Error::Contract(format!(
            "routing plan has {} entries for {} segments",
            plan.distinct(),
            layout.len()
        )));
    }
    let mut parts = Vec::with_capacity(layout.len());
    for (k, span) in layout.spans().iter().enumerate() {
        let merged = merge_experts(g, plan.for_segment(k), experts)?;
        let block = g.slice_rows(h, span.start, span.end)?;
        parts.push(swiglu_ffn(g, block, &merged)?);
    }
    let out = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    Ok(MoeOutput {
        out,
        merges: layout.len(),
    })
}

/// Sparse Expert Choice layer: each expert runs its own (unmerged) FFN on the
/// rows of the units it selected, scales by the routing weight, and the
/// results are summed. Unselected rows get a zero contribution.
///
/// `scores` is the `units × E` probability matrix the assignment was drawn
/// from; `unit_rows[u]` lists the rows of `h` belonging to unit `u`.
pub fn expert_choice_forward<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    scores: Var,
    unit_rows: &[Range<usize>],
    assignment: &EcAssignment,
    experts: &[ExpertVars],
) -> Result<Var> {
    let (rows, d) = (g.shape(h)[0], g.shape(h)[1]);
    let num_experts = experts.len();
    if assignment.num_experts() != num_experts || g.shape(scores) != [unit_rows.len(), num_experts] {
        return Err(Error::shape(
            "expert_choice",
            g.shape(scores),
            &[unit_rows.len(), num_experts],
        ));
    }
    let mut total: Option<Var> = None;
    for (e, picks) in assignment.per_expert.iter().enumerate() {
        if picks.is_empty() {
            continue;
        }
        let mut idx = Vec::new();
        let mut weight_idx = Vec::new();
        for p in picks {
            for r in unit_rows[p.unit].clone() {
                idx.push(r);
                weight_idx.push(p.unit * num_experts + e);
            }
        }
        let x = g.gather_rows(h, &idx)?;
        let y = swiglu_ffn(g, x, &experts[e])?;
        let w = g.gather(scores, &weight_idx)?;
        let scaled = g.scale_rows(y, w)?;
        let placed = g.scatter_rows(scaled, &idx, rows)?;
        total = Some(match total {
            None => placed,
            Some(t) => g.add(t, placed)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::zeros(&[rows, d])),
    })
}
