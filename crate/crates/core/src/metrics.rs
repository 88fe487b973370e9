//! Clustering accuracy under the best one-to-one cluster-to-label mapping.

use std::io::{self, Write};

use crate::error::{Error, Result};

/// Minimum-cost assignment for an `R x C` cost matrix.
///
/// The matrix is padded to square with zero-cost dummy rows/columns. Entry `i`
/// of the result is the column matched to row `i`, or `None` when the row was
/// matched to a dummy column (only possible when `R > C`).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::input("cost matrix is empty"));
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::input("cost matrix rows have different lengths"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::input("cost matrix has non-finite entries"));
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };

    // Shortest augmenting path with potentials, 1-based with column 0 as sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    Ok(assignment)
}

/// Total cost of an assignment returned by [`hungarian`].
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterEval {
    pub n: usize,
    pub labels: usize,
    pub clusters: usize,
    /// `contingency[l][c]` counts examples with ground truth `l` placed in cluster `c`.
    pub contingency: Vec<Vec<u64>>,
    /// Label assigned to each cluster; `None` for clusters left unmapped.
    pub mapping: Vec<Option<usize>>,
    pub acc: f64,
}

impl ClusterEval {
    /// `acc,n,k,l` header plus one row.
    pub fn write_report<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "acc,n,k,l")?;
        writeln!(w, "{},{},{},{}", self.acc, self.n, self.clusters, self.labels)
    }

    /// Contingency table with labels as rows and clusters as columns.
    pub fn write_contingency<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.clusters).map(|c| format!("c{c}")).collect();
        writeln!(w, "label,{}", header.join(","))?;
        for (l, row) in self.contingency.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(w, "{l},{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn contingency(
    ground_truth: &[usize],
    predicted: &[usize],
    labels: usize,
    clusters: usize,
) -> Result<Vec<Vec<u64>>> {
    if ground_truth.len() != predicted.len() {
        return Err(Error::input(format!(
            "{} ground-truth labels but {} predictions",
            ground_truth.len(),
            predicted.len()
        )));
    }
    let mut table = vec![vec![0u64; clusters]; labels];
    for (i, (&l, &c)) in ground_truth.iter().zip(predicted).enumerate() {
        if l >= labels {
            return Err(Error::input(format!("label {l} at {i} is outside [0, {labels})")));
        }
        if c >= clusters {
            return Err(Error::input(format!("cluster {c} at {i} is outside [0, {clusters})")));
        }
        table[l][c] += 1;
    }
    Ok(table)
}

/// Maximum fraction of examples whose label equals the mapped cluster, over
/// all one-to-one maps from clusters to labels.
pub fn clustering_accuracy(
    ground_truth: &[usize],
    predicted: &[usize],
    labels: usize,
    clusters: usize,
) -> Result<ClusterEval> {
    if ground_truth.is_empty() {
        return Err(Error::input("cannot score an empty clustering"));
    }
    if labels == 0 || clusters == 0 {
        return Err(Error::input("label and cluster counts must be positive"));
    }
    let table = contingency(ground_truth, predicted, labels, clusters)?;
    // rows = clusters, columns = labels, cost = -count
    let cost: Vec<Vec<f64>> = (0..clusters)
        .map(|c| (0..labels).map(|l| -(table[l][c] as f64)).collect())
        .collect();
    let mapping = hungarian(&cost)?;
    let correct: u64 = mapping
        .iter()
        .enumerate()
        .filter_map(|(c, l)| l.map(|l| table[l][c]))
        .sum();
    let n = ground_truth.len();
    Ok(ClusterEval {
        n,
        labels,
        clusters,
        contingency: table,
        mapping,
        acc: correct as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_favoring() {
        let a = hungarian(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn all_equal_costs() {
        let cost = vec![vec![2.5; 4]; 4];
        let a = hungarian(&cost).unwrap();
        let mut cols: Vec<usize> = a.iter().map(|c| c.unwrap()).collect();
        cols.sort();
        assert_eq!(cols, vec![0, 1, 2, 3]);
        assert_eq!(assignment_cost(&cost, &a), 10.0);
    }

    #[test]
    fn rectangular_inputs() {
        // 2 rows, 3 columns: both rows assigned distinct real columns
        let a = hungarian(&[vec![5.0, 1.0, 3.0], vec![1.0, 2.0, 9.0]]).unwrap();
        assert_eq!(a, vec![Some(1), Some(0)]);
        // 3 rows, 1 column: exactly one row gets it
        let a = hungarian(&[vec![4.0], vec![-2.0], vec![1.0]]).unwrap();
        assert_eq!(a, vec![None, Some(0), None]);
    }

    #[test]
    fn empty_rejected() {
        assert!(hungarian(&[]).is_err());
        assert!(hungarian(&[vec![]]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let e = clustering_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1], 3, 3).unwrap();
        assert_eq!(e.acc, 1.0);
        let e = clustering_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0], 2, 2).unwrap();
        assert_eq!(e.acc, 1.0);
        assert_eq!(e.mapping, vec![Some(1), Some(0)]);
        let e = clustering_accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1], 2, 2).unwrap();
        assert_eq!(e.acc, 0.5);
        assert_eq!(e.contingency.iter().flatten().sum::<u64>(), 4);
    }

    #[test]
    fn single_cluster_scores_majority() {
        let e = clustering_accuracy(&[0, 1, 1, 2, 1], &[0; 5], 3, 1).unwrap();
        assert!((e.acc - 0.6).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(clustering_accuracy(&[0, 1], &[0], 2, 2).is_err());
        assert!(clustering_accuracy(&[0, 2], &[0, 1], 2, 2).is_err());
        assert!(clustering_accuracy(&[0, 1], &[0, 3], 2, 2).is_err());
        assert!(clustering_accuracy(&[], &[], 2, 2).is_err());
    }

    #[test]
    fn report_format() {
        let e = clustering_accuracy(&[0, 0, 1], &[1, 1, 0], 2, 2).unwrap();
        let mut buf = Vec::new();
        e.write_report(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "acc,n,k,l\n1,3,2,2\n");
        let mut buf = Vec::new();
        e.write_contingency(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "label,c0,c1\n0,0,2\n1,1,0\n");
    }
}
