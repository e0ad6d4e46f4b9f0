//! Post-hoc evaluation: perplexity, expert utilization, domain
//! specialization, merge FLOPs and loss-gap curves.

mod flops;
mod lossgap;
mod perplexity;
mod report;
mod specialization;
mod utilization;

pub use flops::{ffn_flops, flops_overhead, percent, FlopsModel};
pub use lossgap::{loss_gap_curve, tail_mean_gap};
pub use perplexity::{group_by_domain, perplexity, token_losses, PerplexityRow, UNLABELED};
pub use report::{flops_csv, heatmap, loss_gap_csv, specialization_csv, utilization_csv, write_file};
pub use specialization::{
    argmax, routing_traces, specialization_report, total_variation, DomainMean, LayerSpecialization,
};
pub use utilization::{active_threshold, final_window_active, utilization_report, UtilizationRow, DEFAULT_WINDOW};
