//! Maximum-weight bipartite matching on dense rectangular score matrices
//! (shortest augmenting path with potentials, O(n^2 m)).

use crate::linalg::Matrix;

/// Min-cost assignment of every row to a distinct column. Requires
/// `rows <= cols`. Returns the column chosen for each row.
fn min_cost_rows(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is a virtual column.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            col_of_row[owner[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Matching of size `min(rows, cols)` maximizing the summed scores, as
/// `(row, col)` pairs sorted by row.
pub fn max_weight_matching(scores: &Matrix) -> Vec<(usize, usize)> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut pairs: Vec<(usize, usize)> = if scores.nrows() <= scores.ncols() {
        min_cost_rows(&(-scores))
            .into_iter()
            .enumerate()
            .collect()
    } else {
        min_cost_rows(&(-scores.transpose()))
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    pairs
}

pub fn matching_total(scores: &Matrix, matching: &[(usize, usize)]) -> f64 {
    matching.iter().map(|&(r, c)| scores[(r, c)]).sum()
}
