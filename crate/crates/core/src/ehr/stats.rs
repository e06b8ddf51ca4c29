//! Per-class cohort summaries with chi-square and Kruskal-Wallis tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::EhrError;
use crate::cohort::LvefClass;
use crate::features::{is_missing, FeatureMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of independence on an r x c table of counts,
/// without continuity correction.
pub fn chi_square(table: &[Vec<f64>]) -> Result<ChiSquare, EhrError> {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    if rows < 2 || cols < 2 {
        return Err(EhrError::DegenerateTable);
    }
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_tot: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let total: f64 = row_tot.iter().sum();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_tot[i] * col_tot[j] / total;
            if !(expected > 0.0) {
                return Err(EhrError::DegenerateTable);
            }
            stat += (obs - expected).powi(2) / expected;
        }
    }
    let df = (rows - 1) * (cols - 1);
    Ok(ChiSquare {
        statistic: stat,
        df,
        p_value: chi2_sf(stat, df),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Kruskal-Wallis H with tie correction; p from the chi-square
/// approximation with `groups - 1` degrees of freedom. Empty groups are
/// ignored.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis, EhrError> {
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(EhrError::InsufficientGroups(groups.len()));
    }
    let mut pooled: Vec<(f64, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, vals)| vals.iter().map(move |&v| (v, g)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pooled.len() as f64;
    let mut rank_sums = vec![0.0; groups.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &pooled[i..=j] {
            rank_sums[item.1] += avg_rank;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let df = groups.len() - 1;
    let correction = 1.0 - tie_term / (n * n * n - n);
    if correction <= 0.0 {
        // every value tied: no evidence of a difference
        return Ok(KruskalWallis {
            h: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let sum: f64 = rank_sums
        .iter()
        .zip(&groups)
        .map(|(r, g)| r * r / g.len() as f64)
        .sum();
    let h = (12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    Ok(KruskalWallis {
        h,
        df,
        p_value: chi2_sf(h, df),
    })
}

fn chi2_sf(x: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64).expect("df >= 1").sf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: LvefClass,
    pub n: usize,
    /// Binary features: number of ones and their percentage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percent: Option<f64>,
    /// Continuous features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub name: String,
    pub kind: FeatureKind,
    pub per_class: Vec<ClassSummary>,
    pub test: String,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Set when the test could not be run.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub class_counts: Vec<(LvefClass, usize)>,
    pub features: Vec<FeatureSummary>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-class descriptive statistics and a between-class test for every
/// column of `features`. Columns whose observed values are all 0/1 are
/// treated as binary (chi-square on the class x value table); the rest as
/// continuous (Kruskal-Wallis). Missing values are skipped.
pub fn cohort_summary_stats(
    features: &FeatureMatrix,
    labels: &[LvefClass],
) -> Result<SummaryTable, EhrError> {
    let present: Vec<LvefClass> = LvefClass::ALL
        .into_iter()
        .filter(|c| labels.contains(c))
        .collect();
    if present.len() < 2 {
        return Err(EhrError::InsufficientGroups(present.len()));
    }
    let class_counts = present
        .iter()
        .map(|&c| (c, labels.iter().filter(|&&l| l == c).count()))
        .collect();
    let mut out = Vec::with_capacity(features.n_cols());
    for j in 0..features.n_cols() {
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); present.len()];
        for (r, label) in labels.iter().enumerate() {
            let v = features.get(r, j);
            if !is_missing(v) {
                let g = present.iter().position(|c| c == label).expect("present class");
                groups[g].push(v);
            }
        }
        let binary = groups.iter().flatten().all(|&v| v == 0.0 || v == 1.0);
        let name = features.columns[j].name.clone();
        let summary = if binary {
            let per_class = present
                .iter()
                .zip(&groups)
                .map(|(&class, g)| {
                    let ones = g.iter().filter(|&&v| v == 1.0).count();
                    ClassSummary {
                        class,
                        n: g.len(),
                        count: Some(ones),
                        percent: Some(if g.is_empty() { 0.0 } else { 100.0 * ones as f64 / g.len() as f64 }),
                        mean: None,
                        sd: None,
                        median: None,
                        q1: None,
                        q3: None,
                    }
                })
                .collect();
            let table: Vec<Vec<f64>> = groups
                .iter()
                .filter(|g| !g.is_empty())
                .map(|g| {
                    let ones = g.iter().filter(|&&v| v == 1.0).count() as f64;
                    vec![g.len() as f64 - ones, ones]
                })
                .collect();
            let (statistic, p_value, flag) = match chi_square(&table) {
                Ok(t) => (Some(t.statistic), Some(t.p_value), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            FeatureSummary {
                name,
                kind: FeatureKind::Binary,
                per_class,
                test: "chi_square".into(),
                statistic,
                p_value,
                flag,
            }
        } else {
            let per_class = present
                .iter()
                .zip(&groups)
                .map(|(&class, g)| {
                    let mut s = g.clone();
                    s.sort_by(f64::total_cmp);
                    let n = s.len();
                    let (mean, sd, median, q1, q3) = if n == 0 {
                        (None, None, None, None, None)
                    } else {
                        let mean = s.iter().sum::<f64>() / n as f64;
                        let sd = if n > 1 {
                            (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                        } else {
                            0.0
                        };
                        (
                            Some(mean),
                            Some(sd),
                            Some(quantile(&s, 0.5)),
                            Some(quantile(&s, 0.25)),
                            Some(quantile(&s, 0.75)),
                        )
                    };
                    ClassSummary {
                        class,
                        n,
                        count: None,
                        percent: None,
                        mean,
                        sd,
                        median,
                        q1,
                        q3,
                    }
                })
                .collect();
            let (statistic, p_value, flag) = match kruskal_wallis(&groups) {
                Ok(t) => (Some(t.h), Some(t.p_value), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            FeatureSummary {
                name,
                kind: FeatureKind::Continuous,
                per_class,
                test: "kruskal_wallis".into(),
                statistic,
                p_value,
                flag,
            }
        };
        out.push(summary);
    }
    Ok(SummaryTable {
        class_counts,
        features: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Modality;

    #[test]
    fn chi_square_two_by_two() {
        let t = chi_square(&[vec![10.0, 20.0], vec![20.0, 10.0]]).unwrap();
        // every expected count is 15: 4 * 25 / 15
        assert!((t.statistic - 100.0 / 15.0).abs() < 1e-12);
        assert!((t.statistic - 6.667).abs() < 0.001);
        assert_eq!(t.df, 1);
        assert!((t.p_value - 0.00982).abs() < 1e-4, "{}", t.p_value);
    }

    #[test]
    fn chi_square_identical_rows_is_zero() {
        let t = chi_square(&[vec![5.0, 15.0], vec![10.0, 30.0], vec![1.0, 3.0]]).unwrap();
        assert!(t.statistic.abs() < 1e-12);
        assert!(t.p_value > 0.99);
        assert_eq!(t.df, 2);
    }

    #[test]
    fn chi_square_zero_expected_cell_is_degenerate() {
        assert_eq!(
            chi_square(&[vec![0.0, 5.0], vec![0.0, 7.0]]),
            Err(EhrError::DegenerateTable)
        );
    }

    #[test]
    fn kruskal_wallis_hand_example() {
        // R1 = 6, R2 = 15, N = 6: 12/42 * (36/3 + 225/3) - 21
        let t = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert!((t.h - 27.0 / 7.0).abs() < 1e-12);
        assert!((t.h - 3.857).abs() < 0.001);
        assert_eq!(t.df, 1);
    }

    #[test]
    fn kruskal_wallis_identical_groups() {
        let t = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(t.h.abs() < 1e-12);
        assert!(t.p_value > 0.99);
        let t = kruskal_wallis(&[vec![2.0; 4], vec![2.0; 3]]).unwrap();
        assert_eq!(t.p_value, 1.0);
        assert!(kruskal_wallis(&[vec![1.0], vec![]]).is_err());
    }

    #[test]
    fn kruskal_wallis_tie_correction_matches_direct_formula() {
        // groups with ties; compare against the rank-variance form of H
        let groups = vec![vec![1.0, 2.0, 2.0, 3.0], vec![2.0, 3.0, 3.0, 5.0], vec![1.0, 5.0]];
        let t = kruskal_wallis(&groups).unwrap();
        let mut all: Vec<f64> = groups.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let rank = |v: f64| {
            let lo = all.iter().position(|&x| x == v).unwrap();
            let hi = all.iter().rposition(|&x| x == v).unwrap();
            (lo + hi) as f64 / 2.0 + 1.0
        };
        let n = all.len() as f64;
        let mean_rank = (n + 1.0) / 2.0;
        let between: f64 = groups
            .iter()
            .map(|g| {
                let r = g.iter().map(|&v| rank(v)).sum::<f64>() / g.len() as f64;
                g.len() as f64 * (r - mean_rank).powi(2)
            })
            .sum();
        let total: f64 = all.iter().map(|&v| (rank(v) - mean_rank).powi(2)).sum();
        let h = (n - 1.0) * between / total;
        assert!((t.h - h).abs() < 1e-12, "{} vs {h}", t.h);
    }

    #[test]
    fn summary_picks_test_by_column_kind() {
        let names = vec!["dx__E11".to_string(), "age_years".to_string(), "dx__Z00".to_string()];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let class = if i < 20 { LvefClass::Normal } else { LvefClass::Severe };
            let dx = if (i % 4 == 0) ^ (class == LvefClass::Severe) { 1.0 } else { 0.0 };
            rows.push((format!("r{i}"), vec![dx, 50.0 + i as f64, 0.0]));
            labels.push(class);
        }
        let m = FeatureMatrix::from_rows(names, Modality::Ehr, rows).unwrap();
        let table = cohort_summary_stats(&m, &labels).unwrap();
        assert_eq!(table.class_counts, vec![(LvefClass::Severe, 20), (LvefClass::Normal, 20)]);
        assert_eq!(table.features[0].kind, FeatureKind::Binary);
        assert_eq!(table.features[0].test, "chi_square");
        assert!(table.features[0].p_value.unwrap() < 0.05);
        assert_eq!(table.features[1].kind, FeatureKind::Continuous);
        assert!(table.features[1].p_value.unwrap() < 1e-4);
        assert_eq!(table.features[1].per_class[1].median, Some(59.5));
        assert!(table.features[2].flag.is_some());
        assert!(cohort_summary_stats(&m, &vec![LvefClass::Normal; 40]).is_err());
    }
}
