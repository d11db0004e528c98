//! Minimum-cost one-to-one assignment of ground truths to queries.

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries left without a ground truth, ascending.
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

impl MatchResult {
    /// Ground-truth index matched to query `q`, if any.
    pub fn gt_for(&self, q: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == q).map(|p| p.1)
    }
}

/// `cost[q][g]` for `m` queries and `G <= m` ground truths. Among optimal
/// assignments, ground truths are settled in index order, each taking the
/// lowest query index that still admits an optimal completion.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let m = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|row| row.len() != g) {
        return Err(invalid!("cost matrix rows have different lengths"));
    }
    if g > m {
        return Err(invalid!("{g} ground truths exceed {m} queries; increase m"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(invalid!("cost matrix contains a non-finite entry"));
    }
    if g == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched: (0..m).collect(),
            cost: 0.0,
        });
    }

    let rows: Vec<usize> = (0..g).collect();
    let cols: Vec<usize> = (0..m).collect();
    let (best, _) = solve(cost, &rows, &cols);
    let tol = 1e-9 * best.abs().max(1.0);

    let mut fixed_cost = 0.0;
    let mut free_cols = cols;
    let mut assignment = vec![usize::MAX; g];
    for gi in 0..g {
        let rest: Vec<usize> = (gi + 1..g).collect();
        let mut chosen = None;
        for (pos, &q) in free_cols.iter().enumerate() {
            let mut others = free_cols.clone();
            others.remove(pos);
            let tail = if rest.is_empty() {
                0.0
            } else {
                solve(cost, &rest, &others).0
            };
            if fixed_cost + cost[q][gi] + tail <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        // The optimum is always reachable, but rounding could in principle
        // reject every column; fall back to the plain solution in that case.
        let Some(pos) = chosen else {
            return Ok(from_plain(cost, g, m));
        };
        let q = free_cols.remove(pos);
        fixed_cost += cost[q][gi];
        assignment[gi] = q;
    }
    Ok(build(cost, &assignment, m))
}

fn from_plain(cost: &[Vec<f64>], g: usize, m: usize) -> MatchResult {
    let rows: Vec<usize> = (0..g).collect();
    let cols: Vec<usize> = (0..m).collect();
    let (_, assignment) = solve(cost, &rows, &cols);
    build(cost, &assignment, m)
}

fn build(cost: &[Vec<f64>], assignment: &[usize], m: usize) -> MatchResult {
    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .map(|(gi, &q)| (q, gi))
        .collect();
    pairs.sort_unstable();
    let unmatched = (0..m).filter(|q| !assignment.contains(q)).collect();
    let total = pairs.iter().map(|&(q, gi)| cost[q][gi]).sum();
    MatchResult {
        pairs,
        unmatched,
        cost: total,
    }
}

/// Shortest-augmenting-path Hungarian algorithm with potentials on the
/// submatrix `rows × cols` (`rows.len() <= cols.len()`), where the full
/// matrix is indexed `cost[col][row]`. Returns the optimum and, per row,
/// the chosen column (as an index into the full matrix).
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let k = cols.len();
    let a = |i: usize, j: usize| cost[cols[j - 1]][rows[i - 1]];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=k {
        if p[j] != 0 {
            assignment[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assignment.iter().zip(rows).map(|(&q, &r)| cost[q][r]).sum();
    (total, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let r = hungarian_match(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(r.cost, 3.0);
        assert!(r.unmatched.is_empty());
    }

    #[test]
    fn identity_favoring_matrix() {
        let cost: Vec<Vec<f64>> = (0..4)
            .map(|q| (0..3).map(|g| if q == g { 0.0 } else { 5.0 }).collect())
            .collect();
        let r = hungarian_match(&cost).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(r.unmatched, vec![3]);
    }

    #[test]
    fn ties_prefer_low_query_indices() {
        let r = hungarian_match(&vec![vec![1.0, 1.0]; 3]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.unmatched, vec![2]);
    }

    #[test]
    fn rejects_more_gts_than_queries_and_handles_empty() {
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
        let r = hungarian_match(&[vec![], vec![]]).unwrap();
        assert_eq!(r.unmatched, vec![0, 1]);
    }
}
