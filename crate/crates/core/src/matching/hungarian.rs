//! Rectangular linear assignment (Kuhn-Munkres with potentials), `n <= m`.

use crate::error::{Error, Result};

/// Minimum-cost injective map from the `n` rows to the `m >= n` columns.
///
/// Returns `(map, total)` with `map[i]` the column assigned to row `i`.
/// Among optimal maps the lexicographically smallest one is returned, so ties
/// always resolve to the lowest query index.
pub fn solve_assignment(costs: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = costs.len();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let m = costs[0].len();
    if costs.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Matching("more ground truths than queries".into()));
    }
    if costs.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let (_, best) = solve_sub(costs, &rows, &cols);
    let tol = 1e-12 * (1.0 + best.abs());

    let mut map = Vec::with_capacity(n);
    let mut free: Vec<usize> = cols.clone();
    let mut prefix = 0.0;
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (slot, &j) in free.iter().enumerate() {
            let others: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let (_, tail) = solve_sub(costs, &rest, &others);
            if prefix + costs[i][j] + tail <= best + tol {
                chosen = Some((slot, j));
                break;
            }
        }
        // The optimum is always reachable from a consistent prefix.
        let (slot, j) = chosen.expect("optimal completion exists");
        prefix += costs[i][j];
        map.push(j);
        free.remove(slot);
    }
    let total = map.iter().enumerate().map(|(i, &j)| costs[i][j]).sum();
    Ok((map, total))
}

/// Hungarian algorithm restricted to the given rows and columns.
fn solve_sub(costs: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| costs[rows[i - 1]][cols[j - 1]];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut map = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            map[p[j] - 1] = j - 1;
        }
    }
    let total = map.iter().enumerate().map(|(i, &j)| c(i + 1, j + 1)).sum();
    (map.into_iter().map(|j| cols[j]).collect(), total)
}
