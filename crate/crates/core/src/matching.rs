//! Optimal assignment for the set-based masked concept loss.
//!
//! [`solve_assignment`] runs the O(n³) shortest-augmenting-path Hungarian
//! method, then walks the tight edges of the optimal dual to pick the
//! lexicographically smallest optimal permutation. [`brute_force_assignment`]
//! enumerates permutations and exists to check the solver.

use crate::error::{Error, Result};

/// Square cost matrix; `get(i, j)` is the cost of giving target `j` to
/// prediction `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidCostMatrix("empty matrix".into()));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::InvalidCostMatrix(format!("row {r} has {} entries, expected {n}", rows[r].len())));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_vec(n, data)
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::InvalidCostMatrix(format!("{} entries for n = {n}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCostMatrix("non-finite entry".into()));
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Total cost of `perm` (prediction `i` -> target `perm[i]`).
    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `perm[i]` is the target assigned to prediction `i`.
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost perfect assignment; ties go to the lexicographically
/// smallest permutation.
pub fn solve_assignment(c: &CostMatrix) -> Assignment {
    let n = c.n;
    let (mut row_to_col, u, v) = hungarian(c);
    let optimum = c.cost_of(&row_to_col);

    let tol = 1e-10 * (1.0 + c.max_abs());
    let tight = |i: usize, j: usize| (c.get(i, j) - u[i] - v[j]).abs() <= tol;
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let hungarian_perm = row_to_col.clone();

    let mut col_fixed = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if col_fixed[j] || !tight(i, j) {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            // Look for an alternating cycle through (i, j) among unfixed rows.
            let target = row_to_col[i];
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if alternating_path(col_to_row[j], target, i, &tight, &col_fixed, &col_to_row, &mut visited, &mut path) {
                // path holds (row, new col) pairs; reassign along it.
                for &(r, nc) in &path {
                    row_to_col[r] = nc;
                    col_to_row[nc] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        col_fixed[row_to_col[i]] = true;
    }

    let refined = c.cost_of(&row_to_col);
    if refined > optimum + 1e-9 * (1.0 + c.max_abs()) {
        // Tolerance admitted a non-optimal edge; keep the plain solution.
        return Assignment { perm: hungarian_perm, total_cost: optimum };
    }
    Assignment { perm: row_to_col, total_cost: refined }
}

#[allow(clippy::too_many_arguments)]
fn alternating_path(
    row: usize,
    target: usize,
    skip_row: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_fixed: &[bool],
    col_to_row: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..col_fixed.len() {
        if col_fixed[c] || visited[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = col_to_row[c];
        if next == skip_row {
            continue;
        }
        path.push((row, c));
        if alternating_path(next, target, skip_row, tight, col_fixed, col_to_row, visited, path) {
            return true;
        }
        path.pop();
    }
    false
}

/// Shortest augmenting path Hungarian method. Returns the row -> column
/// assignment and the dual potentials `u` (rows) and `v` (columns) with
/// `c[i][j] - u[i] - v[j] >= 0`, equality on the assignment.
fn hungarian(c: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = c.n;
    // 1-based arrays, index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Exhaustive minimum over all permutations in lexicographic order; the
/// first strictly-best permutation wins ties.
pub fn brute_force_assignment(c: &CostMatrix) -> Result<Assignment> {
    let n = c.n;
    if n > 8 {
        return Err(Error::OracleSizeLimit(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment { perm: perm.clone(), total_cost: c.cost_of(&perm) };
    while next_permutation(&mut perm) {
        let cost = c.cost_of(&perm);
        if cost < best.total_cost {
            best = Assignment { perm: perm.clone(), total_cost: cost };
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
