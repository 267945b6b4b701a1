//! One-to-one assignment helpers.

/// Maximum-weight assignment of rows to columns (weights >= 0).
/// Returns, for each row, the assigned column if its weight is positive.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    // Square cost matrix for the potential-based Hungarian method, 1-indexed.
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols && weights[i - 1][j - 1] > 0.0 {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Maximum-cardinality bipartite matching; `adj[row]` lists admissible columns.
pub fn max_cardinality_matching(adj: &[Vec<usize>], cols: usize) -> Vec<Option<usize>> {
    let mut col_owner: Vec<Option<usize>> = vec![None; cols];
    for row in 0..adj.len() {
        let mut seen = vec![false; cols];
        augment(row, adj, &mut seen, &mut col_owner);
    }
    let mut out = vec![None; adj.len()];
    for (c, owner) in col_owner.iter().enumerate() {
        if let Some(r) = owner {
            out[*r] = Some(c);
        }
    }
    out
}

pub(crate) fn augment(row: usize, adj: &[Vec<usize>], seen: &mut [bool], col_owner: &mut [Option<usize>]) -> bool {
    for &c in &adj[row] {
        if seen[c] {
            continue;
        }
        seen[c] = true;
        let free = match col_owner[c] {
            None => true,
            Some(r) => augment(r, adj, seen, col_owner),
        };
        if free {
            col_owner[c] = Some(row);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_best(w: &[Vec<f64>]) -> f64 {
        fn go(i: usize, w: &[Vec<f64>], used: &mut Vec<bool>) -> f64 {
            if i == w.len() {
                return 0.0;
            }
            let mut best = go(i + 1, w, used);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[i][j] + go(i + 1, w, used));
                    used[j] = false;
                }
            }
            best
        }
        go(0, w, &mut vec![false; w[0].len()])
    }

    #[test]
    fn hungarian_beats_greedy_trap() {
        // greedy takes 0.9 then only 0.1 is left; optimum is 0.8 + 0.8
        let w = vec![vec![0.9, 0.8], vec![0.8, 0.1]];
        let a = max_weight_assignment(&w);
        assert_eq!(a, vec![Some(1), Some(0)]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_rectangles() {
        let mut rng = crate::numerics::Sampler::new(3);
        for _ in 0..200 {
            let r = 1 + rng.below(5);
            let c = 1 + rng.below(5);
            let w: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| if rng.uniform() < 0.3 { 0.0 } else { rng.uniform() }).collect())
                .collect();
            let a = max_weight_assignment(&w);
            let total: f64 = a.iter().enumerate().filter_map(|(i, j)| j.map(|j| w[i][j])).sum();
            assert!((total - brute_best(&w)).abs() < 1e-12);
            let mut cols: Vec<usize> = a.iter().flatten().copied().collect();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), a.iter().flatten().count());
        }
    }

    #[test]
    fn kuhn_finds_augmenting_path() {
        let adj = vec![vec![0, 1], vec![0]];
        let m = max_cardinality_matching(&adj, 2);
        assert_eq!(m, vec![Some(1), Some(0)]);
    }
}
