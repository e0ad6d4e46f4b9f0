use std::io::Write;
use std::path::Path;

use crate::error::Result;

use super::{LayerSpecialization, UtilizationRow};

fn write_csv<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// `layer,domain,expert,mean_weight` rows.
pub fn specialization_csv<W: Write>(out: W, layers: &[LayerSpecialization]) -> Result<()> {
    let rows = layers.iter().flat_map(|l| {
        l.domains.iter().flat_map(move |d| {
            d.weights
                .iter()
                .enumerate()
                .map(move |(e, w)| vec![l.layer.to_string(), d.domain.clone(), e.to_string(), w.to_string()])
        })
    });
    write_csv(out, &["layer", "domain", "expert", "mean_weight"], rows)
}

/// `window,active_count` rows.
pub fn utilization_csv<W: Write>(out: W, rows: &[UtilizationRow]) -> Result<()> {
    write_csv(
        out,
        &["window", "active_count"],
        rows.iter()
            .map(|r| vec![r.window.to_string(), r.active_count.to_string()]),
    )
}

/// `component,count` rows.
pub fn flops_csv<W: Write>(out: W, rows: &[(String, u128)]) -> Result<()> {
    write_csv(
        out,
        &["component", "count"],
        rows.iter().map(|(c, n)| vec![c.clone(), n.to_string()]),
    )
}

/// `step,gap` rows.
pub fn loss_gap_csv<W: Write>(out: W, curve: &[(u64, f64)]) -> Result<()> {
    write_csv(
        out,
        &["step", "gap"],
        curve.iter().map(|(s, g)| vec![s.to_string(), g.to_string()]),
    )
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut std::fs::File) -> Result<()>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    f(&mut file)
}

const SHADES: [char; 5] = [' ', '░', '▒', '▓', '█'];

/// One block of rows per layer: a domain per row, an expert per column, the
/// shade scaled to the weight.
pub fn heatmap(layers: &[LayerSpecialization]) -> String {
    let mut out = String::new();
    for l in layers {
        let width = l.domains.iter().map(|d| d.domain.len()).max().unwrap_or(0);
        out.push_str(&format!("layer {}  (max TV {:.3})\n", l.layer, l.max_tv));
        for d in &l.domains {
            let cells: String = d
                .weights
                .iter()
                .map(|&w| {
                    let i = ((w.clamp(0.0, 1.0) * (SHADES.len() - 1) as f64).round()) as usize;
                    format!("{0}{0}", SHADES[i])
                })
                .collect();
            let nums: Vec<String> = d.weights.iter().map(|w| format!("{w:.2}")).collect();
            out.push_str(&format!("  {:width$} |{cells}| {}\n", d.domain, nums.join(" ")));
        }
    }
    out
}
