//! Gated linear assignment.
//!
//! The solver returns a matching that, in order of priority,
//!
//! 1. uses only feasible cells and has the largest possible number of pairs,
//! 2. has the smallest total cost among those,
//! 3. is lexicographically smallest when read row by row (each row prefers
//!    the lowest column index, and being matched over being unmatched).
//!
//! A rectangular `R x C` problem is embedded in a square `(R + C)` matrix
//! where every real row and column owns a dummy partner priced at a penalty
//! larger than any achievable cost difference. The Hungarian method solves it
//! and its dual potentials identify the tight edges; the lexicographic
//! tie-break is then a greedy walk over the tight-edge graph.

/// Cost matrix where `None` marks an infeasible cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedCostMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<Option<f64>>,
}

impl GatedCostMatrix {
    /// All cells infeasible.
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![None; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut m = Self::new(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.cells[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Fully feasible matrix from dense rows.
    pub fn dense(costs: &[Vec<f64>]) -> Self {
        let rows = costs.len();
        let cols = costs.first().map_or(0, Vec::len);
        Self::from_fn(rows, cols, |r, c| Some(costs[r][c]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, cost: Option<f64>) {
        self.cells[r * self.cols + c] = cost;
    }

    /// Total cost of a set of pairs. Panics on an infeasible pair.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c).expect("feasible pair")).sum()
    }
}

/// Solves the gated assignment problem. Pairs are returned sorted by row.
pub fn solve_assignment(m: &GatedCostMatrix) -> Vec<(usize, usize)> {
    let (rows, cols) = (m.rows, m.cols);
    if rows == 0 || cols == 0 || m.cells.iter().all(Option::is_none) {
        return Vec::new();
    }
    let max_abs = m.cells.iter().flatten().fold(0.0f64, |a, c| a.max(c.abs()));
    let penalty = 1.0 + 2.0 * rows.min(cols) as f64 * max_abs;
    let square = Square::embed(m, penalty);
    let (assign, u, v) = hungarian(&square);
    let tol = 1e-9 * penalty.max(1.0);
    let tight = |i: usize, j: usize| square.get(i, j).is_some_and(|c| c - u[i] - v[j] <= tol);
    let assign = lexicographic_fix(&square, rows, cols, assign, &tight);
    (0..rows)
        .filter_map(|r| {
            let c = assign[r];
            (c < cols).then_some((r, c))
        })
        .collect()
}

struct Square {
    n: usize,
    rows: usize,
    cols: usize,
    inner: Vec<Option<f64>>,
    penalty: f64,
}

impl Square {
    fn embed(m: &GatedCostMatrix, penalty: f64) -> Self {
        Square { n: m.rows + m.cols, rows: m.rows, cols: m.cols, inner: m.cells.clone(), penalty }
    }

    fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (r, c) = (self.rows, self.cols);
        match (i < r, j < c) {
            (true, true) => self.inner[i * c + j],
            // real row -> its own dummy column
            (true, false) => (j - c == i).then_some(self.penalty),
            // dummy row for real column (i - r)
            (false, true) => (i - r == j).then_some(self.penalty),
            (false, false) => Some(0.0),
        }
    }
}

/// Hungarian method on a square matrix with forbidden cells. Returns the
/// row -> column assignment and the row/column potentials.
fn hungarian(sq: &Square) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = sq.n;
    let inf = f64::INFINITY;
    // 1-based arrays, index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                if let Some(c) = sq.get(i0 - 1, j - 1) {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            assert!(j1 != 0, "embedded assignment always admits a perfect matching");
            for j in 0..=n {
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Greedily moves to the lexicographically smallest perfect matching of the
/// tight-edge graph, fixing real rows in index order.
fn lexicographic_fix(
    sq: &Square,
    rows: usize,
    cols: usize,
    mut assign: Vec<usize>,
    tight: &impl Fn(usize, usize) -> bool,
) -> Vec<usize> {
    let n = sq.n;
    let mut owner = vec![0usize; n];
    for (i, &j) in assign.iter().enumerate() {
        owner[j] = i;
    }
    let mut fixed_col = vec![false; n];
    for r in 0..rows {
        let prefs = (0..cols).chain(std::iter::once(cols + r));
        for c in prefs {
            if fixed_col[c] || !tight(r, c) {
                continue;
            }
            if assign[r] == c {
                fixed_col[c] = true;
                break;
            }
            let freed = assign[r];
            let start = owner[c];
            let mut visited = vec![false; n];
            visited[c] = true;
            let mut path = Vec::new();
            if find_path(start, freed, r, &assign, &owner, &fixed_col, tight, &mut visited, &mut path) {
                // path holds (row, new_col) steps starting at `start`
                for &(row, col) in &path {
                    assign[row] = col;
                    owner[col] = row;
                }
                assign[r] = c;
                owner[c] = r;
                fixed_col[c] = true;
                break;
            }
        }
        debug_assert!(fixed_col[assign[r]], "row {r} always keeps at least its current column");
    }
    assign
}

#[allow(clippy::too_many_arguments)]
fn find_path(
    row: usize,
    target: usize,
    skip_row: usize,
    assign: &[usize],
    owner: &[usize],
    fixed_col: &[bool],
    tight: &impl Fn(usize, usize) -> bool,
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    let n = assign.len();
    for col in 0..n {
        if visited[col] || fixed_col[col] || !tight(row, col) {
            continue;
        }
        visited[col] = true;
        path.push((row, col));
        if col == target {
            return true;
        }
        let next = owner[col];
        if next != skip_row && find_path(next, target, skip_row, assign, owner, fixed_col, tight, visited, path) {
            return true;
        }
        path.pop();
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let m = GatedCostMatrix::dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let pairs = solve_assignment(&m);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total(&pairs), 2.0);
    }

    #[test]
    fn single_cell() {
        assert_eq!(solve_assignment(&GatedCostMatrix::dense(&[vec![5.0]])), vec![(0, 0)]);
    }

    #[test]
    fn infeasible_and_empty() {
        assert!(solve_assignment(&GatedCostMatrix::new(3, 2)).is_empty());
        assert!(solve_assignment(&GatedCostMatrix::new(0, 4)).is_empty());
        assert!(solve_assignment(&GatedCostMatrix::new(4, 0)).is_empty());
    }

    #[test]
    fn ties_prefer_low_indices() {
        let m = GatedCostMatrix::dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(solve_assignment(&m), vec![(0, 0), (1, 1)]);
        let m = GatedCostMatrix::dense(&[vec![0.0, 0.0, 0.0]]);
        assert_eq!(solve_assignment(&m), vec![(0, 0)]);
        let m = GatedCostMatrix::dense(&[vec![0.0], vec![0.0], vec![0.0]]);
        assert_eq!(solve_assignment(&m), vec![(0, 0)]);
    }

    #[test]
    fn cardinality_beats_cost() {
        // matching (0,0) alone is cheaper but (0,1),(1,0) matches both rows
        let m = GatedCostMatrix::from_fn(2, 2, |r, c| match (r, c) {
            (0, 0) => Some(0.0),
            (0, 1) => Some(0.9),
            (1, 0) => Some(0.9),
            _ => None,
        });
        assert_eq!(solve_assignment(&m), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rectangular_wide_and_tall() {
        let wide = GatedCostMatrix::dense(&[vec![3.0, 1.0, 2.0], vec![1.0, 5.0, 0.5]]);
        assert_eq!(solve_assignment(&wide), vec![(0, 1), (1, 2)]);
        let tall = GatedCostMatrix::dense(&[vec![3.0, 1.0], vec![0.2, 5.0], vec![0.1, 0.3]]);
        // 0.2 + 0.3 beats 1.0 + 0.1
        assert_eq!(solve_assignment(&tall), vec![(1, 0), (2, 1)]);
    }
}
