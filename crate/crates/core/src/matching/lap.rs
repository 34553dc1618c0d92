//! Dense linear assignment (Hungarian algorithm with row/column potentials).
//!
//! Among all optimal assignments the lexicographically smallest one is
//! returned. The optimal assignments are exactly the perfect matchings on the
//! zero-reduced-cost edges of an optimal dual, so the tie-break walks rows in
//! order and takes the smallest tight column that still admits a perfect
//! matching on the remaining rows.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::symmetry::Permutation;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[i]` is the column assigned to row `i`.
    pub perm: Permutation,
    /// `Σ_i C[i, perm[i]]`, summed in row order.
    pub cost: f64,
}

const NONE: usize = usize::MAX;

pub fn solve_lap(cost: &Matrix) -> Result<Assignment> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::Shape(format!(
            "assignment needs a square cost matrix, got {}x{}",
            n,
            cost.cols()
        )));
    }
    for r in 0..n {
        if let Some(c) = cost.row(r).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { row: r, col: c });
        }
    }
    if n == 0 {
        return Ok(Assignment {
            perm: Permutation::identity(0),
            cost: 0.0,
        });
    }

    let (row_to_col, u, v) = hungarian(cost);

    let scale = cost.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * scale * n as f64;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cost.get(i, j) - u[i] - v[j] <= tol)
                .collect()
        })
        .collect();
    let row_to_col = lexicographic_matching(&tight, row_to_col);

    let total = row_to_col.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(Assignment {
        perm: Permutation::new(row_to_col)?,
        cost: total,
    })
}

/// O(n³) shortest-augmenting-path Hungarian method. Returns the assignment and
/// the dual potentials (`u_i + v_j <= C_ij`, equality on assigned pairs).
fn hungarian(cost: &Matrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.rows();
    // 1-based internally; index 0 is the virtual column/row
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching of the bipartite graph
/// `tight` (sorted adjacency per row), starting from the perfect matching
/// `row_to_col`.
fn lexicographic_matching(tight: &[Vec<usize>], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = tight.len();
    let mut col_to_row = vec![NONE; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut locked = vec![false; n];

    for i in 0..n {
        for &j in &tight[i] {
            if j == row_to_col[i] {
                break;
            }
            if locked[j] {
                continue;
            }
            let displaced = col_to_row[j];
            let freed = row_to_col[i];
            let saved = (row_to_col.clone(), col_to_row.clone());

            row_to_col[i] = j;
            col_to_row[j] = i;
            col_to_row[freed] = NONE;
            row_to_col[displaced] = NONE;
            locked[j] = true;
            let mut visited = vec![false; n];
            let ok = augment(
                displaced,
                tight,
                &locked,
                &mut visited,
                &mut row_to_col,
                &mut col_to_row,
            );
            locked[j] = false;
            if ok {
                break;
            }
            (row_to_col, col_to_row) = saved;
        }
        locked[row_to_col[i]] = true;
    }
    row_to_col
}

fn augment(
    row: usize,
    tight: &[Vec<usize>],
    locked: &[bool],
    visited: &mut [bool],
    row_to_col: &mut [usize],
    col_to_row: &mut [usize],
) -> bool {
    for &c in &tight[row] {
        if locked[c] || visited[c] {
            continue;
        }
        visited[c] = true;
        let owner = col_to_row[c];
        if owner == NONE || augment(owner, tight, locked, visited, row_to_col, col_to_row) {
            row_to_col[row] = c;
            col_to_row[c] = row;
            return true;
        }
    }
    false
}
