use crate::error::{Error, Result};
use crate::training::MetricRecord;

/// `(step, dense_loss − moe_loss)` at each MoE step inside the dense log's
/// step range. Dense losses are linearly interpolated when the grids differ.
pub fn loss_gap_curve(dense: &[MetricRecord], moe: &[MetricRecord]) -> Result<Vec<(u64, f64)>> {
    let (Some(first), Some(last)) = (dense.first(), dense.last()) else {
        return Err(Error::Data("dense metrics log is empty".into()));
    };
    if dense.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::Data("dense metrics steps are not increasing".into()));
    }
    let mut out = Vec::new();
    let mut j = 0;
    for m in moe.iter().filter(|m| (first.step..=last.step).contains(&m.step)) {
        while dense[j].step < m.step {
            j += 1;
        }
        let d = if dense[j].step == m.step {
            dense[j].loss
        } else {
            let (a, b) = (&dense[j - 1], &dense[j]);
            let t = (m.step - a.step) as f64 / (b.step - a.step) as f64;
            a.loss + t * (b.loss - a.loss)
        };
        out.push((m.step, d - m.loss));
    }
    if out.is_empty() {
        return Err(Error::Data("dense and MoE logs share no step range".into()));
    }
    Ok(out)
}

/// Mean gap over the last `fraction` of the curve's points (at least one).
pub fn tail_mean_gap(curve: &[(u64, f64)], fraction: f64) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let n = ((curve.len() as f64 * fraction).ceil() as usize).clamp(1, curve.len());
    Some(curve[curve.len() - n..].iter().map(|p| p.1).sum::<f64>() / n as f64)
}
