//! Rectangular linear assignment (Hungarian method with potentials).

/// Marks a pair that may not be matched. Any infinite or NaN entry is treated
/// the same way.
pub const FORBIDDEN: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// (row, column) pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub value: f64,
}

impl Matching {
    pub fn column_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

struct Rect {
    r: usize,
    m: usize,
    a: Vec<f64>,
}

impl Rect {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.m + j]
    }
}

const FREE: usize = usize::MAX;

/// Minimum-cost assignment covering every row of an r x m matrix, r <= m.
/// Returns the column of each row and dual potentials (u, v) with
/// `a[i][j] - u[i] - v[j] >= 0`, `v <= 0` and `v[j] = 0` on unused columns.
fn solve_rect(m: &Rect) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let (n, w) = (m.r, m.m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; w + 1];
    let mut p = vec![0usize; w + 1];
    let mut way = vec![0usize; w + 1];
    let mut minv = vec![f64::INFINITY; w + 1];
    let mut used = vec![false; w + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &m.a[(i0 - 1) * w..i0 * w];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=w {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=w {
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
    let mut col = vec![0; n];
    for j in 1..=w {
        if p[j] != 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    (col, u[1..].to_vec(), v[1..].to_vec())
}

struct Tight<'a> {
    m: &'a Rect,
    u: &'a [f64],
    v: &'a [f64],
    tol: f64,
}

impl Tight<'_> {
    fn edge(&self, i: usize, j: usize) -> bool {
        (self.m.at(i, j) - self.u[i] - self.v[j]).abs() <= self.tol
    }

    /// A column may be left unused by an optimum only when its potential is zero.
    fn releasable(&self, j: usize) -> bool {
        self.v[j].abs() <= self.tol
    }
}

/// Re-seat row `r` along tight edges, through rows above `fixed` only, ending
/// in `target` or, when `current` may be released, in any unused column.
#[allow(clippy::too_many_arguments)]
fn augment(
    r: usize,
    fixed: usize,
    skip: usize,
    target: usize,
    release: bool,
    t: &Tight,
    col: &mut [usize],
    row_of: &mut [usize],
    seen: &mut [bool],
) -> bool {
    for j in 0..t.m.m {
        if j == skip || seen[j] || !t.edge(r, j) {
            continue;
        }
        seen[j] = true;
        let owner = row_of[j];
        let ok = j == target
            || (owner == FREE && release)
            || (owner != FREE && owner > fixed && augment(owner, fixed, skip, target, release, t, col, row_of, seen));
        if ok {
            col[r] = j;
            row_of[j] = r;
            return true;
        }
    }
    false
}

/// Among optimal assignments, move to the one whose column sequence (by row)
/// is lexicographically smallest, using only zero-reduced-cost edges.
fn lexicographic(t: &Tight, col: &mut [usize]) {
    let w = t.m.m;
    let mut row_of = vec![FREE; w];
    for (i, &j) in col.iter().enumerate() {
        row_of[j] = i;
    }
    let mut seen = vec![false; w];
    for i in 0..col.len() {
        let current = col[i];
        let release = t.releasable(current);
        for c in 0..current {
            if !t.edge(i, c) {
                continue;
            }
            let r = row_of[c];
            let moved = if r == FREE {
                release
            } else if r < i {
                false
            } else {
                seen.fill(false);
                augment(r, i, c, current, release, t, col, &mut row_of, &mut seen)
            };
            if moved {
                if row_of[current] == i {
                    row_of[current] = FREE;
                }
                col[i] = c;
                row_of[c] = i;
                break;
            }
        }
    }
}

fn forbidden(x: f64) -> bool {
    !x.is_finite()
}

/// Turn a value matrix with rows <= cols into a minimisation problem.
/// Forbidden entries get a cost larger than any achievable finite gain. With
/// `allow_unmatched`, one zero-cost fallback column per row is appended.
fn embed(values: &[Vec<f64>], sense: Sense, cols: usize, allow_unmatched: bool) -> (Rect, f64) {
    let rows = values.len();
    let sign = if sense == Sense::Maximize { -1.0 } else { 1.0 };
    let finite_sum: f64 = values.iter().flatten().filter(|x| !forbidden(**x)).map(|x| x.abs()).sum();
    let big = 2.0 * finite_sum + 1.0;
    let extra = if allow_unmatched { rows } else { 0 };
    let m = (cols + extra).max(rows);
    let mut a = vec![0.0; rows * m];
    let mut scale: f64 = 1.0;
    for (i, row) in values.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            a[i * m + j] = if forbidden(x) {
                big
            } else {
                scale = scale.max(x.abs());
                sign * x
            };
        }
    }
    (Rect { r: rows, m, a }, 1e-9 * scale)
}

fn check_shape(values: &[Vec<f64>]) -> usize {
    let cols = values.first().map_or(0, |r| r.len());
    assert!(values.iter().all(|r| r.len() == cols), "matrix rows must have equal length");
    cols
}

fn collect(values: &[Vec<f64>], col: &[usize], cols: usize) -> Matching {
    let mut pairs = Vec::new();
    let mut value = 0.0;
    for (i, row) in values.iter().enumerate() {
        let j = col[i];
        if j < cols && !forbidden(row[j]) {
            pairs.push((i, j));
            value += row[j];
        }
    }
    Matching { pairs, value }
}

fn transpose(values: &[Vec<f64>], cols: usize) -> Vec<Vec<f64>> {
    (0..cols).map(|j| values.iter().map(|r| r[j]).collect()).collect()
}

fn flip(m: Matching) -> Matching {
    let mut pairs: Vec<(usize, usize)> = m.pairs.iter().map(|&(j, i)| (i, j)).collect();
    pairs.sort_unstable();
    Matching { pairs, value: m.value }
}

fn solve(values: &[Vec<f64>], sense: Sense, cols: usize, allow_unmatched: bool) -> Matching {
    let (rect, tol) = embed(values, sense, cols, allow_unmatched);
    let (mut col, u, v) = solve_rect(&rect);
    lexicographic(&Tight { m: &rect, u: &u, v: &v, tol }, &mut col);
    collect(values, &col, cols)
}

/// Optimal assignment of size min(rows, cols) on a rectangular matrix.
/// Forbidden pairs are avoided whenever a full-size assignment exists
/// without them; otherwise they are dropped from the result. Ties are broken
/// towards the lexicographically smallest column sequence of the shorter side.
pub fn hungarian(values: &[Vec<f64>], sense: Sense) -> Matching {
    let cols = check_shape(values);
    if values.is_empty() || cols == 0 {
        return Matching { pairs: Vec::new(), value: 0.0 };
    }
    if values.len() > cols {
        return flip(solve(&transpose(values, cols), sense, values.len(), false));
    }
    solve(values, sense, cols, false)
}

/// Maximum-weight matching of any size: a row stays unmatched when no
/// non-forbidden pair improves the total. Rows and columns without any
/// allowed pair are left out before solving.
pub fn max_weight_matching(values: &[Vec<f64>]) -> Matching {
    let cols = check_shape(values);
    let live_rows: Vec<usize> = (0..values.len()).filter(|&i| values[i].iter().any(|x| !forbidden(*x))).collect();
    let live_cols: Vec<usize> = (0..cols).filter(|&j| live_rows.iter().any(|&i| !forbidden(values[i][j]))).collect();
    if live_rows.is_empty() {
        return Matching { pairs: Vec::new(), value: 0.0 };
    }
    let sub: Vec<Vec<f64>> = live_rows.iter().map(|&i| live_cols.iter().map(|&j| values[i][j]).collect()).collect();
    let m = if sub.len() > live_cols.len() {
        flip(solve(&transpose(&sub, live_cols.len()), Sense::Maximize, sub.len(), true))
    } else {
        solve(&sub, Sense::Maximize, live_cols.len(), true)
    };
    let pairs = m.pairs.iter().map(|&(i, j)| (live_rows[i], live_cols[j])).collect();
    Matching { pairs, value: m.value }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn singleton() {
        let m = hungarian(&[vec![5.0]], Sense::Maximize);
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.value, 5.0);
    }

    #[test]
    fn two_by_two_maximize() {
        let m = hungarian(&[vec![1.0, 2.0], vec![2.0, 4.0]], Sense::Maximize);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.value, 5.0);
        let m = hungarian(&[vec![1.0, 2.0], vec![2.0, 4.0]], Sense::Minimize);
        assert_eq!(m.value, 4.0);
    }

    #[test]
    fn random_six_by_six_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let perms = permutations(6);
        for _ in 0..30 {
            let a: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(-50.0..100.0)).collect()).collect();
            for sense in [Sense::Maximize, Sense::Minimize] {
                let best = perms
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| a[i][j]).sum::<f64>())
                    .fold(if sense == Sense::Maximize { f64::MIN } else { f64::MAX }, |b, x| match sense {
                        Sense::Maximize => b.max(x),
                        Sense::Minimize => b.min(x),
                    });
                let m = hungarian(&a, sense);
                assert_eq!(m.pairs.len(), 6);
                assert!((m.value - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ties_pick_smallest_sequence() {
        let a = vec![vec![1.0; 4]; 4];
        let m = hungarian(&a, Sense::Maximize);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        // row 0 indifferent between columns 0 and 2, row 1 wants column 0
        let a = vec![vec![5.0, 1.0, 5.0], vec![5.0, 0.0, 0.0]];
        let m = hungarian(&a, Sense::Maximize);
        assert_eq!(m.pairs, vec![(0, 2), (1, 0)]);
        let a = vec![vec![3.0, 3.0], vec![3.0, 3.0], vec![3.0, 3.0]];
        assert_eq!(hungarian(&a, Sense::Maximize).pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn rectangular_and_forbidden() {
        let f = FORBIDDEN;
        let a = vec![vec![f, 2.0, f], vec![f, 9.0, 1.0]];
        let m = hungarian(&a, Sense::Maximize);
        assert_eq!(m.pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(m.value, 3.0);
        let tall = vec![vec![1.0], vec![7.0], vec![3.0]];
        assert_eq!(hungarian(&tall, Sense::Maximize).pairs, vec![(1, 0)]);
        let only_forbidden = vec![vec![f, f]];
        assert!(hungarian(&only_forbidden, Sense::Maximize).pairs.is_empty());
        assert!(hungarian(&[], Sense::Maximize).pairs.is_empty());
    }

    #[test]
    fn max_weight_leaves_rows_unmatched() {
        let f = FORBIDDEN;
        let a = vec![vec![f, 2.0, f], vec![f, 9.0, f], vec![-1.0, f, f]];
        let m = max_weight_matching(&a);
        assert_eq!(m.pairs, vec![(1, 1)]);
        assert_eq!(m.value, 9.0);
        let a = vec![vec![4.0, 4.0], vec![4.0, 1.0], vec![2.0, 2.0]];
        let m = max_weight_matching(&a);
        assert_eq!(m.value, 8.0);
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }
}
