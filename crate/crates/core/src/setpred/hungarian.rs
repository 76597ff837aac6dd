//! Minimum-cost rectangular assignment (shortest augmenting paths with
//! potentials, O(n^2 m)).

/// Assigns every row of a `rows x cols` cost matrix to a distinct column,
/// minimising the total cost. Requires `rows <= cols`. Returns the column of
/// each row.
fn assign_rows(cost: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
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
            for j in 0..=cols {
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
    let mut out = vec![0; n];
    for j in 1..=cols {
        if owner[j] > 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal partial injection for an arbitrary `rows x cols` matrix: returns
/// `(row, col)` pairs sorted by row, `min(rows, cols)` of them.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");
    assert!(cost.iter().flatten().all(|c| c.is_finite()), "non-finite assignment cost");
    let mut pairs: Vec<(usize, usize)> = if rows <= cols {
        assign_rows(cost, cols).into_iter().enumerate().collect()
    } else {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        assign_rows(&t, rows).into_iter().enumerate().map(|(j, i)| (i, j)).collect()
    };
    pairs.sort_unstable();
    pairs
}

pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}
