use super::tape::Mat;
use crate::compose::{DynImgLayout, Region};
use crate::error::{Error, Result};

/// For each map: mean over `queries` of the attention summed over `keys`.
pub fn attention_mass(attn: &[Mat], queries: &[usize], keys: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() || keys.is_empty() {
        let which = if queries.is_empty() { "query" } else { "key" };
        return Err(Error::EmptyRegion(format!("{which} region has no tokens")));
    }
    attn.iter()
        .map(|a| {
            if let Some(&bad) = queries.iter().chain(keys).find(|&&t| t >= a.rows || t >= a.cols) {
                return Err(Error::ShapeMismatch(format!("token {bad} outside a {}x{} map", a.rows, a.cols)));
            }
            let total: f64 = queries.iter().map(|&q| keys.iter().map(|&k| a.at(q, k)).sum::<f64>()).sum();
            Ok(total / queries.len() as f64)
        })
        .collect()
}

/// Tokens of every prompt region.
pub fn prompt_tokens(layout: &DynImgLayout) -> Vec<usize> {
    (0..layout.n_prompts()).flat_map(|j| layout.tokens_of(Region::Prompt(j))).collect()
}

/// Mass between two layout regions.
pub fn region_mass(attn: &[Mat], layout: &DynImgLayout, query: Region, key: Region) -> Result<Vec<f64>> {
    attention_mass(attn, &layout.tokens_of(query), &layout.tokens_of(key))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Mat {
        Mat::from_vec(n, n, vec![1.0 / n as f64; n * n])
    }

    #[test]
    fn whole_key_set_has_unit_mass() {
        let m = attention_mass(&[uniform(6)], &[0, 3], &(0..6).collect::<Vec<_>>()).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_region_rejected() {
        assert!(matches!(attention_mass(&[uniform(3)], &[], &[1]), Err(Error::EmptyRegion(_))));
    }
}
