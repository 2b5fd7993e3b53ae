use serde::{Deserialize, Serialize};

/// Equal-frequency discretizer for continuous side features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualFrequencyBinner {
    /// Sorted, strictly increasing cut points; bin `k` holds values in
    /// `[edges[k-1], edges[k])`.
    pub edges: Vec<f64>,
}

impl EqualFrequencyBinner {
    pub fn fit(values: &[f64], bins: usize) -> Self {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        let mut edges = Vec::new();
        if bins >= 2 && !sorted.is_empty() {
            for k in 1..bins {
                let q = sorted[(k * sorted.len() / bins).min(sorted.len() - 1)];
                if edges.last().is_none_or(|&last| q > last) {
                    edges.push(q);
                }
            }
        }
        Self { edges }
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Monotone: `a <= b` implies `bin(a) <= bin(b)`. NaN maps to bin 0.
    pub fn bin(&self, value: f64) -> usize {
        if value.is_nan() {
            return 0;
        }
        self.edges.partition_point(|&e| e <= value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quartiles() {
        let values: Vec<f64> = (0..100).map(f64::from).collect();
        let b = EqualFrequencyBinner::fit(&values, 4);
        assert_eq!(b.edges, vec![25.0, 50.0, 75.0]);
        assert_eq!(b.bin(0.0), 0);
        assert_eq!(b.bin(25.0), 1);
        assert_eq!(b.bin(99.0), 3);
        assert_eq!(b.bin(1e9), 3);
    }

    #[test]
    fn constant_column_single_bin() {
        let b = EqualFrequencyBinner::fit(&[3.0; 10], 5);
        assert_eq!(b.num_bins(), 2);
        assert_eq!(b.bin(3.0), 1);
        assert_eq!(b.bin(2.0), 0);
    }

    proptest! {
        #[test]
        fn binning_is_monotone(values in prop::collection::vec(-1e6f64..1e6, 1..200),
                               bins in 1usize..20,
                               a in -2e6f64..2e6, b in -2e6f64..2e6) {
            let binner = EqualFrequencyBinner::fit(&values, bins);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(binner.bin(lo) <= binner.bin(hi));
            prop_assert!(binner.bin(hi) < binner.num_bins());
        }
    }
}
