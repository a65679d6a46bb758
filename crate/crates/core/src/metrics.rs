//! Clustering accuracy (optimal assignment), NMI and purity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normaliser for mutual information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NmiVariant {
    /// `I / sqrt(H_pred·H_truth)`
    #[default]
    Geometric,
    /// `2I / (H_pred + H_truth)`
    Arithmetic,
}

/// Counts `n[p][t]` of samples with prediction `p` and truth `t`.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::LabelLength {
            predicted: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::data("metrics", "no labels to compare"));
    }
    let rows = pred.iter().max().map_or(0, |m| m + 1);
    let cols = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0; cols]; rows];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect assignment on a square cost matrix.
///
/// Returns `col_of_row`. O(n³) shortest augmenting path with potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays, index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Best matched fraction over one-to-one cluster→class maps.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let size = table.len().max(table[0].len());
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|p| {
            (0..size)
                .map(|t| -(table.get(p).and_then(|r| r.get(t)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let matched: usize = hungarian(&cost)
        .iter()
        .enumerate()
        .map(|(p, &t)| table.get(p).and_then(|r| r.get(t)).copied().unwrap_or(0))
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information (natural log).
pub fn nmi(pred: &[usize], truth: &[usize], variant: NmiVariant) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..table[0].len()).map(|t| table.iter().map(|r| r[t]).sum()).collect();
    let (hp, ht) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    if hp == 0.0 || ht == 0.0 {
        // a constant partition only matches another constant partition
        return Ok(if hp == ht { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (p, row) in table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (rows[p] as f64 * cols[t] as f64)).ln();
            }
        }
    }
    let norm = match variant {
        NmiVariant::Geometric => (hp * ht).sqrt(),
        NmiVariant::Arithmetic => 0.5 * (hp + ht),
    };
    Ok((mi / norm).clamp(0.0, 1.0))
}

/// `(1/N) Σ_clusters max_class overlap`.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let hit: usize = table.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(hit as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub nmi: f64,
    pub pur: f64,
}

impl MetricReport {
    pub fn compute(pred: &[usize], truth: &[usize], variant: NmiVariant) -> Result<Self> {
        Ok(MetricReport {
            acc: accuracy(pred, truth)?,
            nmi: nmi(pred, truth, variant)?,
            pur: purity(pred, truth)?,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "acc={:.4} nmi={:.4} pur={:.4}", self.acc, self.nmi, self.pur)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut p in permutations(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    fn brute_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
        permutations((0..k).collect())
            .into_iter()
            .map(|perm| pred.iter().zip(truth).filter(|(&p, &t)| perm[p] == t).count())
            .max()
            .unwrap() as f64
            / pred.len() as f64
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(brute_accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1], 2), 0.5);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::LabelLength { .. })));
    }

    #[test]
    fn nmi_examples() {
        let t = [0, 0, 1, 1];
        assert!((nmi(&t, &t, NmiVariant::Geometric).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmi(&[1, 1, 0, 0], &t, NmiVariant::Geometric).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0, 0], &t, NmiVariant::Geometric).unwrap(), 0.0);
        let g = nmi(&[0, 1, 1, 1], &t, NmiVariant::Geometric).unwrap();
        assert!((g - 0.345_592_029_944_211_3).abs() < 1e-12, "{g}");
        let a = nmi(&[0, 1, 1, 1], &t, NmiVariant::Arithmetic).unwrap();
        assert!((a - 0.343_711_018_485_450_8).abs() < 1e-12, "{a}");
    }

    #[test]
    fn nmi_matches_table_oracle() {
        // I = ½·ln2 + ¼·ln(2/3) + ½·ln(4/3) for the example above, written out
        let mi = 0.25 * (4.0f64 / 2.0).ln() + 0.25 * (4.0f64 / 6.0).ln() + 0.5 * (8.0f64 / 6.0).ln();
        let hp = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let ht = 2f64.ln();
        let want = mi / (hp * ht).sqrt();
        let got = nmi(&[0, 1, 1, 1], &[0, 0, 1, 1], NmiVariant::Geometric).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        let truth: Vec<usize> = (0..12).map(|i| i % 3).collect();
        assert!((purity(&[0; 12], &truth).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_matrix() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(hungarian(&cost), vec![1, 0, 2]);
    }

    #[test]
    fn report_line_format() {
        let r = MetricReport { acc: 0.5, nmi: 0.25, pur: 1.0 };
        assert_eq!(r.to_string(), "acc=0.5000 nmi=0.2500 pur=1.0000");
    }

    fn labels(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..=30).prop_flat_map(move |n| {
            (proptest::collection::vec(0..k, n), proptest::collection::vec(0..k, n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hungarian_equals_permutation_search(k in 1usize..=6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=30);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let want = brute_accuracy(&pred, &truth, k);
            prop_assert!((accuracy(&pred, &truth).unwrap() - want).abs() < 1e-12);
        }

        #[test]
        fn purity_equals_counting((pred, truth) in labels(5)) {
            let mut want = 0;
            for c in 0..5 {
                let best = (0..5)
                    .map(|t| pred.iter().zip(&truth).filter(|(&p, &q)| p == c && q == t).count())
                    .max()
                    .unwrap();
                want += best;
            }
            prop_assert!((purity(&pred, &truth).unwrap() - want as f64 / pred.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn metrics_ignore_relabeling((pred, truth) in labels(4), shift in 1usize..4) {
            let relabel = |v: &[usize]| v.iter().map(|&x| (x + shift) % 4).collect::<Vec<_>>();
            let base = MetricReport::compute(&pred, &truth, NmiVariant::Geometric).unwrap();
            let swapped = MetricReport::compute(&relabel(&pred), &relabel(&truth), NmiVariant::Geometric).unwrap();
            prop_assert!((base.acc - swapped.acc).abs() < 1e-12);
            prop_assert!((base.nmi - swapped.nmi).abs() < 1e-12);
            prop_assert!((base.pur - swapped.pur).abs() < 1e-12);
            for v in [base.acc, base.nmi, base.pur] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
