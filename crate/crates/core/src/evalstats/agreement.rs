use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{check_lengths, StatsError};
use crate::tcrnet::Task;

/// Cohen's κ × 100 for two raters over any label type.
///
/// When chance agreement is 1 (both raters used one identical label) the
/// value is defined as 100.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64, StatsError> {
    check_lengths(a.len(), b.len())?;
    let n = a.len() as f64;
    let mut marg: BTreeMap<&T, (u64, u64)> = BTreeMap::new();
    let mut agree = 0u64;
    for (x, y) in a.iter().zip(b) {
        marg.entry(x).or_default().0 += 1;
        marg.entry(y).or_default().1 += 1;
        agree += u64::from(x == y);
    }
    let p_o = agree as f64 / n;
    if marg.len() == 1 {
        return if agree as usize == a.len() { Ok(100.0) } else { Err(StatsError::PerfectChance) };
    }
    let p_e: f64 = marg.values().map(|&(ca, cb)| (ca as f64 / n) * (cb as f64 / n)).sum();
    Ok(100.0 * (p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Linear,
    #[default]
    Quadratic,
}

impl WeightScheme {
    /// Disagreement weight for categories `i`, `j` (0-based) out of `k`.
    pub fn weight(self, i: usize, j: usize, k: usize) -> f64 {
        let d = i.abs_diff(j) as f64 / (k - 1) as f64;
        match self {
            WeightScheme::Linear => d,
            WeightScheme::Quadratic => d * d,
        }
    }
}

impl FromStr for WeightScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(WeightScheme::Linear),
            "quadratic" => Ok(WeightScheme::Quadratic),
            other => Err(format!("unknown weighting `{other}` (linear or quadratic)")),
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Linear => "linear",
            WeightScheme::Quadratic => "quadratic",
        })
    }
}

/// Weighted Cohen's κ × 100 for ordinal labels in `1..=k`:
/// `1 − Σ w·O / Σ w·E` with `O` the observed joint proportions and `E` the
/// product of marginals.
pub fn weighted_cohen_kappa(a: &[usize], b: &[usize], k: usize, scheme: WeightScheme) -> Result<f64, StatsError> {
    check_lengths(a.len(), b.len())?;
    if k < 2 {
        return Err(StatsError::TooFew("weighted kappa needs k >= 2".into()));
    }
    let n = a.len() as f64;
    let mut observed = vec![vec![0.0; k]; k];
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for (&x, &y) in a.iter().zip(b) {
        for v in [x, y] {
            if v < 1 || v > k {
                return Err(StatsError::ClassOutOfRange { value: v, classes: k });
            }
        }
        observed[x - 1][y - 1] += 1.0 / n;
        row[x - 1] += 1.0 / n;
        col[y - 1] += 1.0 / n;
    }
    let (mut wo, mut we) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = scheme.weight(i, j, k);
            wo += w * observed[i][j];
            we += w * row[i] * col[j];
        }
    }
    if we == 0.0 {
        return if wo == 0.0 { Ok(100.0) } else { Err(StatsError::PerfectChance) };
    }
    Ok(100.0 * (1.0 - wo / we))
}

/// Fleiss' κ × 100 from an items × categories count matrix in which every
/// row sums to the same number of raters `r ≥ 2`. Defined as 100 when all
/// ratings fall in a single category.
pub fn fleiss_kappa(ratings: &[Vec<u64>]) -> Result<f64, StatsError> {
    let Some(first) = ratings.first() else {
        return Err(StatsError::TooFew("no items".into()));
    };
    let r: u64 = first.iter().sum();
    if r < 2 {
        return Err(StatsError::TooFew(format!("{r} raters per item")));
    }
    let k = first.len();
    let mut totals = vec![0u64; k];
    let mut p_bar = 0.0;
    for (i, row) in ratings.iter().enumerate() {
        let got: u64 = row.iter().sum();
        if got != r || row.len() != k {
            return Err(StatsError::RowSumMismatch { row: i, expected: r, got });
        }
        let sq: u64 = row.iter().map(|&c| c * c).sum();
        p_bar += (sq - r) as f64 / (r * (r - 1)) as f64;
        for (t, c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    let n = ratings.len() as f64;
    p_bar /= n;
    let denom = n * r as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / denom).powi(2)).sum();
    if totals.iter().filter(|&&t| t > 0).count() == 1 {
        return Ok(100.0);
    }
    Ok(100.0 * (p_bar - p_e) / (1.0 - p_e))
}

/// Fleiss' κ from per-annotator label lists (`labels[annotator][item]`)
/// over classes `0..classes`.
pub fn fleiss_kappa_from_labels(labels: &[Vec<usize>], classes: usize) -> Result<f64, StatsError> {
    let items = labels.first().map_or(0, Vec::len);
    for l in labels {
        check_lengths(items, l.len())?;
    }
    let mut matrix = vec![vec![0u64; classes]; items];
    for l in labels {
        for (i, &c) in l.iter().enumerate() {
            if c >= classes {
                return Err(StatsError::ClassOutOfRange { value: c, classes });
            }
            matrix[i][c] += 1;
        }
    }
    fleiss_kappa(&matrix)
}

/// Annotator index pairs in table order: neighbours first, wrapping
/// around, so three annotators give (1,2), (2,3), (3,1).
pub fn agreement_pairs(annotators: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for gap in 1..=annotators / 2 {
        for i in 0..annotators {
            let j = (i + gap) % annotators;
            let key = (i.min(j), i.max(j));
            if i != j && !pairs.iter().any(|&(a, b)| (a.min(b), a.max(b)) == key) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub first: usize,
    pub second: usize,
    pub unweighted: f64,
    pub weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub task: Task,
    pub scheme: Option<WeightScheme>,
    pub pairs: Vec<PairAgreement>,
    pub fleiss: f64,
}

/// Pairwise Cohen's κ (plus weighted κ when `scheme` is given) and Fleiss'
/// κ over all annotators. `labels[annotator][item]` are 0-based class ids;
/// for weighted κ they are shifted to `1..=classes`.
pub fn compute_agreement(
    task: Task,
    labels: &[Vec<usize>],
    classes: usize,
    scheme: Option<WeightScheme>,
) -> Result<AgreementReport, StatsError> {
    if labels.len() < 2 {
        return Err(StatsError::TooFew("agreement needs at least two annotators".into()));
    }
    let mut pairs = Vec::new();
    for (i, j) in agreement_pairs(labels.len()) {
        let (a, b) = (&labels[i], &labels[j]);
        let weighted = match scheme {
            Some(s) => {
                let shift = |v: &Vec<usize>| v.iter().map(|x| x + 1).collect::<Vec<_>>();
                Some(weighted_cohen_kappa(&shift(a), &shift(b), classes, s)?)
            }
            None => None,
        };
        pairs.push(PairAgreement {
            first: i,
            second: j,
            unweighted: cohen_kappa(a, b)?,
            weighted,
        });
    }
    Ok(AgreementReport {
        task,
        scheme,
        pairs,
        fleiss: fleiss_kappa_from_labels(labels, classes)?,
    })
}

impl AgreementReport {
    pub fn header() -> String {
        format!(
            "{:<10} {:<9} {:>13} {:>11} {:>8}",
            "Task", "Ann Pair", "UnWt C Kappa", "Wt C Kappa", "F Kappa"
        )
    }

    /// Rows in the inter-annotator agreement table layout; the Fleiss value
    /// appears once on the first row of the task.
    pub fn rows(&self) -> Vec<String> {
        let task = match self.task {
            Task::DarkHumor => "DH",
            Task::Target => "Target",
            Task::Intensity => "Intensity",
        };
        self.pairs
            .iter()
            .enumerate()
            .map(|(idx, p)| {
                let weighted = p.weighted.map_or("-".to_string(), |w| format!("{w:.2}"));
                let fleiss = if idx == 0 { format!("{:.2}", self.fleiss) } else { String::new() };
                let name = if idx == 0 { task } else { "" };
                format!(
                    "{:<10} {:<9} {:>13} {:>11} {:>8}",
                    name,
                    format!("A{}&A{}", p.first + 1, p.second + 1),
                    format!("{:.2}", p.unweighted),
                    weighted,
                    fleiss
                )
                .trim_end()
                .to_string()
            })
            .collect()
    }
}

impl fmt::Display for AgreementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::header())?;
        for row in self.rows() {
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohen_identity_and_hand_case() {
        assert_eq!(cohen_kappa(&["Y", "N", "Y"], &["Y", "N", "Y"]).unwrap(), 100.0);
        // p_o = 0.75, p_e = 0.5*0.25 + 0.5*0.75 = 0.5
        let k = cohen_kappa(&["Y", "Y", "N", "N"], &["Y", "N", "N", "N"]).unwrap();
        assert_eq!(k, 50.0);
    }

    #[test]
    fn cohen_degenerate_single_label() {
        assert_eq!(cohen_kappa(&[1, 1, 1], &[1, 1, 1]).unwrap(), 100.0);
        assert!(matches!(cohen_kappa(&[1], &[1, 2]), Err(StatsError::LengthMismatch { .. })));
    }

    #[test]
    fn weighted_kappa_identity() {
        for s in [WeightScheme::Linear, WeightScheme::Quadratic] {
            assert_eq!(weighted_cohen_kappa(&[1, 2, 3, 2], &[1, 2, 3, 2], 3, s).unwrap(), 100.0);
        }
    }

    #[test]
    fn weighted_kappa_hand_case() {
        // a=[1,2,3,3], b=[1,3,3,2]: O has 1/4 at (1,1),(2,3),(3,3),(3,2);
        // row marginals (1/4,1/4,1/2), col marginals (1/4,1/4,1/2).
        // Quadratic weights 0, 1/4, 1: ΣwO = 2 · 1/4 · 1/4 = 1/8 and
        // ΣwE = 1/4 · 6/16 + 1 · 2/8 = 11/32, so κ = 1 − 4/11 = 7/11.
        // Linear weights 0, 1/2, 1: ΣwO = 1/4, ΣwE = 7/16, κ = 3/7.
        let q = weighted_cohen_kappa(&[1, 2, 3, 3], &[1, 3, 3, 2], 3, WeightScheme::Quadratic).unwrap();
        assert!((q - 100.0 * 7.0 / 11.0).abs() < 1e-12);
        let l = weighted_cohen_kappa(&[1, 2, 3, 3], &[1, 3, 3, 2], 3, WeightScheme::Linear).unwrap();
        assert!((l - 100.0 * 3.0 / 7.0).abs() < 1e-12);
        assert!(matches!(
            weighted_cohen_kappa(&[1, 4], &[1, 2], 3, WeightScheme::Linear),
            Err(StatsError::ClassOutOfRange { value: 4, .. })
        ));
    }

    #[test]
    fn adjacent_disagreements_score_higher_than_extreme() {
        let gold = [1, 2, 3, 1, 2, 3, 1, 2, 3];
        let mut adjacent = gold;
        adjacent[0] = 2;
        adjacent[2] = 2;
        let mut extreme = gold;
        extreme[0] = 3;
        extreme[2] = 1;
        for s in [WeightScheme::Linear, WeightScheme::Quadratic] {
            let a = weighted_cohen_kappa(&gold, &adjacent, 3, s).unwrap();
            let e = weighted_cohen_kappa(&gold, &extreme, 3, s).unwrap();
            assert!(a > e, "{s}: {a} <= {e}");
        }
    }

    #[test]
    fn weighted_reduces_to_unweighted_for_two_categories() {
        let a = [1, 2, 2, 1, 1, 2, 1];
        let b = [1, 2, 1, 1, 2, 2, 2];
        for s in [WeightScheme::Linear, WeightScheme::Quadratic] {
            let w = weighted_cohen_kappa(&a, &b, 2, s).unwrap();
            let u = cohen_kappa(&a, &b).unwrap();
            assert!((w - u).abs() < 1e-12);
        }
    }

    #[test]
    fn fleiss_cases() {
        assert_eq!(fleiss_kappa(&[vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap(), 100.0);
        // every item split 1/1 with r = 2: P̄ = 0, P_e = 0.5 -> κ = -1
        assert_eq!(fleiss_kappa(&[vec![1, 1], vec![1, 1]]).unwrap(), -100.0);
        assert_eq!(fleiss_kappa(&[vec![0, 4, 0], vec![0, 4, 0]]).unwrap(), 100.0);
        assert!(matches!(
            fleiss_kappa(&[vec![2, 1], vec![1, 1]]),
            Err(StatsError::RowSumMismatch { row: 1, expected: 3, got: 2 })
        ));
        assert!(fleiss_kappa(&[vec![1, 0]]).is_err());
    }

    #[test]
    fn pair_order_matches_table_layout() {
        assert_eq!(agreement_pairs(2), vec![(0, 1)]);
        assert_eq!(agreement_pairs(3), vec![(0, 1), (1, 2), (2, 0)]);
        assert_eq!(agreement_pairs(4).len(), 6);
        assert_eq!(agreement_pairs(5).len(), 10);
    }

    #[test]
    fn report_rendering() {
        let labels = vec![vec![0, 1, 2, 2], vec![0, 1, 2, 1], vec![0, 2, 2, 2]];
        let r = compute_agreement(Task::Intensity, &labels, 3, Some(WeightScheme::Quadratic)).unwrap();
        let text = r.to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("Intensity  A1&A2"));
        assert!(lines[3].contains("A3&A1"));
        assert!(r.pairs.iter().all(|p| p.weighted.is_some()));
        let dh = compute_agreement(Task::DarkHumor, &[vec![0, 1], vec![0, 1]], 2, None).unwrap();
        assert!(dh.to_string().lines().nth(1).unwrap().contains(" - "));
    }
}
