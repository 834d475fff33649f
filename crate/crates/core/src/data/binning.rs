//! Rank-based binning shared by the synthetic prior and the derived-MTL
//! constructor. Values are mapped to normalized ranks (ties broken by
//! stable row order) and cut at boundary quantiles.

/// Stable ranks: position of each element in a stable sort of the column.
pub fn stable_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0usize; values.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos;
    }
    ranks
}

/// Bin by normalized rank against sorted boundary quantiles in (0, 1).
/// Label = number of boundaries at or below the element's rank quantile,
/// so labels lie in [0, boundaries.len()].
pub fn rank_bin_with_boundaries(values: &[f64], boundaries: &[f64]) -> Vec<usize> {
    let n = values.len();
    let ranks = stable_ranks(values);
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let q = (ranks[i] as f64 + 0.5) / n as f64;
            boundaries.iter().take_while(|&&b| b <= q).count()
        })
        .collect()
}

/// Equal-width quantile boundaries for `bins` classes: 1/b, 2/b, …, (b−1)/b.
pub fn equal_boundaries(bins: usize) -> Vec<f64> {
    (1..bins).map(|i| i as f64 / bins as f64).collect()
}

/// Quantile-discretize into `bins` classes with equal boundary quantiles.
pub fn quantile_bin(values: &[f64], bins: usize) -> Vec<usize> {
    rank_bin_with_boundaries(values, &equal_boundaries(bins))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_values_three_equal_bins() {
        let vals: Vec<f64> = (1..=12).map(|v| v as f64).collect();
        let labels = quantile_bin(&vals, 3);
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn monotone_in_value() {
        let vals = vec![5.0, -1.0, 3.3, 3.3, 0.0, 9.1, 2.0, -4.0];
        let labels = quantile_bin(&vals, 4);
        for i in 0..vals.len() {
            for j in 0..vals.len() {
                if vals[i] > vals[j] {
                    assert!(labels[i] >= labels[j]);
                }
            }
        }
    }

    #[test]
    fn ties_split_by_stable_rank() {
        let vals = vec![1.0; 6];
        let labels = quantile_bin(&vals, 2);
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
    }
}
