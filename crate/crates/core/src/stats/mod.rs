//! Cross-task model ranking and signed-rank tests.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub mod turing;

pub const SIGNIFICANCE: f64 = 0.05;
/// Largest sample size evaluated by exact enumeration.
pub const EXACT_MAX_N: usize = 20;

/// Per-task metric means; `values[task][model]`, NaN marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub tasks: Vec<String>,
    pub models: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub tasks: Vec<String>,
    pub models: Vec<String>,
    /// `ranks[task][model]`, 1 = best, ties averaged.
    pub ranks: Vec<Vec<f64>>,
}

/// Average ranks (1-based) of `values`, ties sharing the mean position.
pub fn average_ranks(values: &[f64], descending: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_models(table: &MetricTable, higher_is_better: bool) -> Result<RankTable> {
    if table.values.len() != table.tasks.len() {
        return Err(Error::Completeness(format!(
            "{} tasks but {} value rows",
            table.tasks.len(),
            table.values.len()
        )));
    }
    let mut ranks = Vec::with_capacity(table.tasks.len());
    for (task, row) in table.tasks.iter().zip(&table.values) {
        if row.len() != table.models.len() {
            return Err(Error::Completeness(format!("task {task} has {} of {} models", row.len(), table.models.len())));
        }
        if let Some(m) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Completeness(format!("task {task} lacks a value for {}", table.models[m])));
        }
        ranks.push(average_ranks(row, higher_is_better));
    }
    Ok(RankTable {
        tasks: table.tasks.clone(),
        models: table.models.clone(),
        ranks,
    })
}

/// Signed-rank statistic of the non-zero differences.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedRanks {
    /// Ranks of `|d|`, doubled so tie averages stay integral.
    pub doubled_ranks: Vec<u64>,
    /// Doubled `W+`.
    pub doubled_w_plus: u64,
    pub tie_sizes: Vec<usize>,
}

pub fn signed_ranks(diffs: &[f64]) -> Result<SignedRanks> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::UndefinedTest);
    }
    if nz.iter().any(|d| !d.is_finite()) {
        return Err(Error::Parameter("differences must be finite".into()));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs, false);
    let doubled_ranks: Vec<u64> = ranks.iter().map(|r| (r * 2.0) as u64).collect();
    let doubled_w_plus = nz
        .iter()
        .zip(&doubled_ranks)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        if j > 1 {
            tie_sizes.push(j);
        }
        i += j;
    }
    Ok(SignedRanks {
        doubled_ranks,
        doubled_w_plus,
        tie_sizes,
    })
}

/// Number of sign assignments with doubled `W+ >= threshold`, by subset-sum counting.
fn exact_upper_count(doubled_ranks: &[u64], threshold: u64) -> u64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts[threshold as usize..].iter().sum()
}

/// One-tailed signed-rank p-value `P(W+ >= w)` for "differences are positive".
///
/// Exact over all `2ⁿ` sign assignments (with tie-averaged ranks) for
/// `n <= 20` non-zero differences; normal approximation with continuity and
/// tie correction above that.
pub fn wilcoxon_one_tailed(diffs: &[f64]) -> Result<f64> {
    let sr = signed_ranks(diffs)?;
    let n = sr.doubled_ranks.len();
    if n <= EXACT_MAX_N {
        let count = exact_upper_count(&sr.doubled_ranks, sr.doubled_w_plus);
        return Ok(count as f64 / (1u64 << n) as f64);
    }
    let nf = n as f64;
    let w = sr.doubled_w_plus as f64 / 2.0;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie: f64 = sr.tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let z = (w - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(1.0 - normal.cdf(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub row: String,
    pub col: String,
    /// Tasks where the row model ranks strictly better.
    pub n_dominated: usize,
    pub n_tasks: usize,
    /// `None` when every task ties.
    pub p_one_tailed: Option<f64>,
    pub significant: bool,
}

impl PairResult {
    /// `N` with a `*` suffix when significant.
    pub fn cell(&self) -> String {
        if self.significant {
            format!("{}*", self.n_dominated)
        } else {
            self.n_dominated.to_string()
        }
    }
}

/// All ordered model pairs; the diagonal is `None`.
pub fn pairwise_table(ranks: &RankTable) -> Result<Vec<Vec<Option<PairResult>>>> {
    let m = ranks.models.len();
    if m < 2 {
        return Err(Error::Alignment(format!("need at least two models, got {m}")));
    }
    let mut out = Vec::with_capacity(m);
    for a in 0..m {
        let mut row = Vec::with_capacity(m);
        for b in 0..m {
            if a == b {
                row.push(None);
                continue;
            }
            // Positive when the row model has the better (smaller) rank.
            let diffs: Vec<f64> = ranks.ranks.iter().map(|r| r[b] - r[a]).collect();
            let n_dominated = diffs.iter().filter(|&&d| d > 0.0).count();
            let p = match wilcoxon_one_tailed(&diffs) {
                Ok(p) => Some(p),
                Err(Error::UndefinedTest) => None,
                Err(e) => return Err(e),
            };
            row.push(Some(PairResult {
                row: ranks.models[a].clone(),
                col: ranks.models[b].clone(),
                n_dominated,
                n_tasks: diffs.len(),
                p_one_tailed: p,
                significant: p.is_some_and(|p| p < SIGNIFICANCE),
            }));
        }
        out.push(row);
    }
    Ok(out)
}

/// Dominance matrix as CSV: `model,<col models...>`, cells `N` or `N*`, `-` on the diagonal.
pub fn write_pairwise_csv(models: &[String], table: &[Vec<Option<PairResult>>], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend(models.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in models.iter().zip(table) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|c| c.as_ref().map_or("-".to_string(), PairResult::cell)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-form pairwise results with p-values.
pub fn write_pairwise_detail_csv(table: &[Vec<Option<PairResult>>], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "n_dominated", "n_tasks", "p_one_tailed", "significant"])?;
    for cell in table.iter().flatten().flatten() {
        w.write_record([
            cell.row.clone(),
            cell.col.clone(),
            cell.n_dominated.to_string(),
            cell.n_tasks.to_string(),
            cell.p_one_tailed.map_or(String::new(), |p| format!("{p:.10}")),
            cell.significant.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rank table as CSV: `task,<models...>`.
pub fn write_rank_csv(ranks: &RankTable, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task".to_string()];
    header.extend(ranks.models.iter().cloned());
    w.write_record(&header)?;
    for (task, row) in ranks.tasks.iter().zip(&ranks.ranks) {
        let mut rec = vec![task.clone()];
        rec.extend(row.iter().map(|r| r.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(diffs: &[f64]) -> f64 {
        let sr = signed_ranks(diffs).unwrap();
        let n = sr.doubled_ranks.len();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let w: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| sr.doubled_ranks[i]).sum();
            if w >= sr.doubled_w_plus {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[30.0, 25.0, 20.0], true), vec![1.0, 2.0, 3.0]);
        assert_eq!(average_ranks(&[30.0, 30.0, 20.0], true), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 2.0], false), vec![3.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn missing_cell_is_incomplete() {
        let t = MetricTable {
            tasks: vec!["a".into()],
            models: vec!["x".into(), "y".into()],
            values: vec![vec![1.0, f64::NAN]],
        };
        assert!(matches!(rank_models(&t, true), Err(Error::Completeness(_))));
    }

    #[test]
    fn wilcoxon_examples() {
        assert_eq!(wilcoxon_one_tailed(&[1.0; 11]).unwrap(), 1.0 / 2048.0);
        assert_eq!(wilcoxon_one_tailed(&[1.0]).unwrap(), 0.5);
        assert_eq!(wilcoxon_one_tailed(&[1.0, -1.0]).unwrap(), 0.75);
        assert!(matches!(wilcoxon_one_tailed(&[0.0, 0.0]), Err(Error::UndefinedTest)));
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let cases: [&[f64]; 4] = [
            &[1.0, -2.0, 3.0, 0.0, 1.0, -1.0],
            &[0.5, 0.5, 0.5, -0.5, 2.0, 3.5, -4.0, 1.5],
            &[-1.0, -2.0, -3.0],
            &[2.0, -1.5, 1.5, 1.5, -0.5, 3.0, 4.0, -2.0, 1.0, 1.0, 0.5, -3.0],
        ];
        for d in cases {
            assert_eq!(wilcoxon_one_tailed(d).unwrap(), brute_force(d), "{d:?}");
        }
    }

    #[test]
    fn large_sample_uses_normal() {
        let d: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let p = wilcoxon_one_tailed(&d).unwrap();
        assert!(p > 0.0 && p < 1e-5);
        let half: Vec<f64> = (1..=30).map(|i| if i % 2 == 0 { i as f64 } else { -(i as f64) }).collect();
        let p = wilcoxon_one_tailed(&half).unwrap();
        assert!(p > 0.3 && p < 0.7);
    }

    #[test]
    fn two_models_one_task() {
        let r = RankTable {
            tasks: vec!["t".into()],
            models: vec!["a".into(), "b".into()],
            ranks: vec![vec![1.0, 2.0]],
        };
        let t = pairwise_table(&r).unwrap();
        let ab = t[0][1].as_ref().unwrap();
        assert_eq!((ab.n_dominated, ab.p_one_tailed), (1, Some(0.5)));
        let ba = t[1][0].as_ref().unwrap();
        assert_eq!(ba.n_dominated, 0);
        assert!(t[0][0].is_none());
        let single = RankTable {
            models: vec!["a".into()],
            ranks: vec![vec![1.0]],
            ..r
        };
        assert!(matches!(pairwise_table(&single), Err(Error::Alignment(_))));
    }

    #[test]
    fn identical_rows_are_no_test() {
        let r = RankTable {
            tasks: vec!["t1".into(), "t2".into()],
            models: vec!["a".into(), "b".into()],
            ranks: vec![vec![1.5, 1.5], vec![1.5, 1.5]],
        };
        let t = pairwise_table(&r).unwrap();
        let ab = t[0][1].as_ref().unwrap();
        assert_eq!(ab.n_dominated, 0);
        assert_eq!(ab.p_one_tailed, None);
        assert!(!ab.significant);
    }
}
