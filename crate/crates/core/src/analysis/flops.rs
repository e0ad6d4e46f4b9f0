use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};

/// Sizes entering the merge-cost estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsModel {
    pub context_length: u64,
    pub segment_length: u64,
    pub model_dim: u64,
    pub ffn_dim: u64,
    pub num_experts: u64,
}

/// Forward FFN cost of one sequence: `6·L·d·d′` (three `d×d′` matmuls).
pub fn ffn_flops(context_length: u64, model_dim: u64, ffn_dim: u64) -> u128 {
    6 * context_length as u128 * model_dim as u128 * ffn_dim as u128
}

/// Merge cost relative to the dense FFN, `E/T`, exactly.
pub fn flops_overhead(num_experts: u64, segment_length: u64) -> Result<Ratio<u64>> {
    if num_experts == 0 || segment_length == 0 {
        return Err(Error::config("flops", "experts and segment length must be positive"));
    }
    Ok(Ratio::new(num_experts, segment_length))
}

impl FlopsModel {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("context_length", self.context_length),
            ("segment_length", self.segment_length),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_experts", self.num_experts),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn ffn(&self) -> u128 {
        ffn_flops(self.context_length, self.model_dim, self.ffn_dim)
    }

    /// Merging `E` experts once per segment: `(L/T)·6·E·d·d′` (a third of it
    /// per weight matrix, each multiply-add counted as two).
    pub fn merge(&self) -> Ratio<u128> {
        Ratio::new(self.context_length as u128, self.segment_length as u128)
            * Ratio::from_integer(6 * self.num_experts as u128 * self.model_dim as u128 * self.ffn_dim as u128)
    }

    pub fn overhead(&self) -> Result<Ratio<u64>> {
        flops_overhead(self.num_experts, self.segment_length)
    }

    /// `(component, count)` rows; fractional merge counts are rounded up.
    pub fn table(&self) -> Vec<(String, u128)> {
        let merge = self.merge();
        vec![
            ("ffn".to_string(), self.ffn()),
            ("merge".to_string(), merge.ceil().to_integer()),
            ("ffn_with_merge".to_string(), self.ffn() + merge.ceil().to_integer()),
        ]
    }
}

/// `p/q` as a percentage string with up to three decimals, trailing zeros trimmed.
pub fn percent(r: Ratio<u64>) -> String {
    let scaled = Ratio::new(*r.numer() as u128 * 100_000, *r.denom() as u128)
        .round()
        .to_integer();
    let s = format!("{}.{:03}", scaled / 1000, scaled % 1000);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}
